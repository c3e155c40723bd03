//! Core annotation types and the JSONL corpus format.
//!
//! One record per line:
//!
//! ```text
//! {"id": "s1", "tokens": ["severe", "joint", ...], "entities": [{"type": "ADE", "spans": [[0, 1], [7, 7]]}]}
//! ```
//!
//! Span indices are 0-based and inclusive. `id` is optional; records without
//! one are named after their 1-based line number.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An inclusive token range `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    id: String,
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSentence("sentence has no tokens".into()));
        }
        if let Some(pos) = tokens.iter().position(|t| t.is_empty()) {
            return Err(Error::InvalidSentence(format!("token {pos} is empty")));
        }
        Ok(Sentence {
            id: id.into(),
            tokens,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An entity type together with its ordered, disjoint, non-adjacent fragments.
///
/// Ordering sorts by fragments first so that mention sets print in reading order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityMention {
    fragments: Vec<Span>,
    entity_type: String,
}

impl EntityMention {
    pub fn new(entity_type: impl Into<String>, fragments: Vec<Span>) -> Result<Self> {
        let entity_type = entity_type.into();
        let describe = || {
            let spans: Vec<String> = fragments.iter().map(Span::to_string).collect();
            format!("{} {}", entity_type, spans.join(""))
        };
        if entity_type.is_empty() {
            return Err(Error::InvalidEntity {
                entity: describe(),
                reason: "empty entity type".into(),
            });
        }
        if fragments.is_empty() {
            return Err(Error::InvalidEntity {
                entity: describe(),
                reason: "no fragments".into(),
            });
        }
        for frag in &fragments {
            if frag.start > frag.end {
                return Err(Error::InvalidEntity {
                    entity: describe(),
                    reason: "start > end".into(),
                });
            }
        }
        for pair in fragments.windows(2) {
            if pair[1].start < pair[0].end + 2 {
                return Err(Error::InvalidEntity {
                    entity: describe(),
                    reason: format!(
                        "fragments {} and {} overlap, touch, or are out of order",
                        pair[0], pair[1]
                    ),
                });
            }
        }
        Ok(EntityMention {
            fragments,
            entity_type,
        })
    }

    /// Shorthand for a continuous mention.
    pub fn continuous(entity_type: impl Into<String>, start: usize, end: usize) -> Result<Self> {
        Self::new(entity_type, vec![Span::new(start, end)])
    }

    pub fn entity_type(&self) -> &str {
        &self.entity_type
    }

    pub fn fragments(&self) -> &[Span] {
        &self.fragments
    }

    pub fn is_discontinuous(&self) -> bool {
        self.fragments.len() > 1
    }

    pub fn head(&self) -> usize {
        self.fragments[0].start
    }

    pub fn tail(&self) -> usize {
        self.fragments[self.fragments.len() - 1].end
    }

    /// Intervals between consecutive fragments.
    pub fn gaps(&self) -> Vec<Span> {
        self.fragments
            .windows(2)
            .map(|w| Span::new(w[0].end + 1, w[1].start - 1))
            .collect()
    }

    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.fragments.iter().flat_map(|f| f.start..=f.end)
    }

    pub fn shares_token_with(&self, other: &EntityMention) -> bool {
        self.fragments.iter().any(|a| {
            other
                .fragments
                .iter()
                .any(|b| a.start <= b.end && b.start <= a.end)
        })
    }

    fn check_bounds(&self, n: usize) -> Result<()> {
        if self.tail() >= n {
            return Err(Error::InvalidEntity {
                entity: self.to_string(),
                reason: format!("index {} out of range for {} tokens", self.tail(), n),
            });
        }
        Ok(())
    }
}

impl fmt::Display for EntityMention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ", self.entity_type)?;
        for frag in &self.fragments {
            write!(f, "{frag}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedExample {
    sentence: Sentence,
    entities: BTreeSet<EntityMention>,
}

impl AnnotatedExample {
    /// Rejects duplicate mentions and mentions that run past the sentence.
    pub fn new(
        sentence: Sentence,
        entities: impl IntoIterator<Item = EntityMention>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for mention in entities {
            mention.check_bounds(sentence.len())?;
            let shown = mention.to_string();
            if !set.insert(mention) {
                return Err(Error::DuplicateMention(shown));
            }
        }
        Ok(AnnotatedExample {
            sentence,
            entities: set,
        })
    }

    pub fn sentence(&self) -> &Sentence {
        &self.sentence
    }

    pub fn id(&self) -> &str {
        self.sentence.id()
    }

    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    pub fn entities(&self) -> &BTreeSet<EntityMention> {
        &self.entities
    }

    /// Same sentence, different mention set.
    pub fn with_entities(&self, entities: impl IntoIterator<Item = EntityMention>) -> Result<Self> {
        AnnotatedExample::new(self.sentence.clone(), entities)
    }
}

/// Ordered grid labels: `None`, `Frag`, `Gap`, then the entity types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    entity_types: Vec<String>,
}

/// Dense integer id of a grid label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct LabelId(pub usize);

impl LabelId {
    pub const NONE: LabelId = LabelId(0);
    pub const FRAG: LabelId = LabelId(1);
    pub const GAP: LabelId = LabelId(2);

    pub fn is_entity_type(self) -> bool {
        self.0 >= 3
    }
}

impl LabelSet {
    pub const NONE: &'static str = "None";
    pub const FRAG: &'static str = "Frag";
    pub const GAP: &'static str = "Gap";

    /// Duplicates are dropped and types sorted, so ids do not depend on input order.
    pub fn new<S: Into<String>>(entity_types: impl IntoIterator<Item = S>) -> Result<Self> {
        let set: BTreeSet<String> = entity_types.into_iter().map(Into::into).collect();
        for ty in &set {
            if ty.is_empty() || ty == Self::NONE || ty == Self::FRAG || ty == Self::GAP {
                return Err(Error::Invalid(format!("`{ty}` cannot be an entity type")));
            }
        }
        Ok(LabelSet {
            entity_types: set.into_iter().collect(),
        })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    /// |T| + 3.
    pub fn len(&self) -> usize {
        self.entity_types.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: LabelId) -> Option<&str> {
        match id.0 {
            0 => Some(Self::NONE),
            1 => Some(Self::FRAG),
            2 => Some(Self::GAP),
            k => self.entity_types.get(k - 3).map(String::as_str),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        match name {
            Self::NONE => Some(LabelId::NONE),
            Self::FRAG => Some(LabelId::FRAG),
            Self::GAP => Some(LabelId::GAP),
            _ => self
                .entity_types
                .binary_search_by(|t| t.as_str().cmp(name))
                .ok()
                .map(|k| LabelId(k + 3)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        [Self::NONE, Self::FRAG, Self::GAP]
            .into_iter()
            .chain(self.entity_types.iter().map(String::as_str))
    }
}

/// Sorted set of the entity types that occur in `corpus`.
pub fn derive_label_set(corpus: &[AnnotatedExample]) -> LabelSet {
    let types = corpus
        .iter()
        .flat_map(|ex| ex.entities().iter().map(|m| m.entity_type().to_string()));
    LabelSet::new(types).expect("entity types are validated on construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityRecord {
    #[serde(rename = "type")]
    entity_type: String,
    spans: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<EntityRecord>,
}

pub fn parse_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<AnnotatedExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::Jsonl => parse_jsonl(&text),
    }
}

/// Parses JSONL text. Blank lines are skipped; errors carry the 1-based line number.
pub fn parse_jsonl(text: &str) -> Result<Vec<AnnotatedExample>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let example = parse_record(line, line_no).map_err(|e| match e {
            Error::Parse { .. } => e,
            other => Error::Parse {
                line: line_no,
                reason: other.to_string(),
            },
        })?;
        out.push(example);
    }
    Ok(out)
}

fn parse_record(line: &str, line_no: usize) -> Result<AnnotatedExample> {
    let record: ExampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        reason: e.to_string(),
    })?;
    let id = record.id.unwrap_or_else(|| line_no.to_string());
    let sentence = Sentence::new(id, record.tokens)?;
    let mut mentions = Vec::with_capacity(record.entities.len());
    for ent in record.entities {
        let spans = ent
            .spans
            .into_iter()
            .map(|(s, e)| Span::new(s, e))
            .collect();
        mentions.push(EntityMention::new(ent.entity_type, spans)?);
    }
    AnnotatedExample::new(sentence, mentions)
}

fn to_record(example: &AnnotatedExample) -> ExampleRecord {
    ExampleRecord {
        id: Some(example.id().to_string()),
        tokens: example.sentence().tokens().to_vec(),
        entities: example
            .entities()
            .iter()
            .map(|m| EntityRecord {
                entity_type: m.entity_type().to_string(),
                spans: m.fragments().iter().map(|f| (f.start, f.end)).collect(),
            })
            .collect(),
    }
}

/// One JSON record per line, LF-terminated.
pub fn to_jsonl(corpus: &[AnnotatedExample]) -> String {
    let mut out = String::new();
    for example in corpus {
        let line = serde_json::to_string(&to_record(example)).expect("records always serialize");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[AnnotatedExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(corpus)).map_err(|e| Error::io(path, e))
}

/// Precomputed per-token input vectors, keyed by example id.
///
/// File format: JSONL records `{"id": "...", "vectors": [[f64, ...], ...]}`
/// with one vector per token.
#[derive(Debug, Clone, Default)]
pub struct TokenVectors {
    dim: usize,
    by_id: HashMap<String, Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct VectorRecord {
    id: String,
    vectors: Vec<Vec<f64>>,
}

impl TokenVectors {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = TokenVectors::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                line: idx + 1,
                reason,
            };
            let rec: VectorRecord =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            if rec.vectors.is_empty() {
                return Err(parse_err(format!("`{}` has no vectors", rec.id)));
            }
            for v in &rec.vectors {
                if table.dim == 0 {
                    table.dim = v.len();
                }
                if v.len() != table.dim || v.is_empty() {
                    return Err(parse_err(format!(
                        "`{}` has a vector of width {}, expected {}",
                        rec.id,
                        v.len(),
                        table.dim
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(parse_err(format!("`{}` has a non-finite value", rec.id)));
                }
            }
            if table.by_id.insert(rec.id.clone(), rec.vectors).is_some() {
                return Err(parse_err(format!("duplicate id `{}`", rec.id)));
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, id: impl Into<String>, vectors: Vec<Vec<f64>>) -> Result<()> {
        let width = vectors.first().map_or(0, Vec::len);
        if width == 0 || vectors.iter().any(|v| v.len() != width) {
            return Err(Error::Invalid(
                "token vectors must share a non-zero width".into(),
            ));
        }
        if self.dim != 0 && self.dim != width {
            return Err(Error::Invalid(format!(
                "token vector width {width} does not match {}",
                self.dim
            )));
        }
        self.dim = width;
        self.by_id.insert(id.into(), vectors);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Vectors for `example`, checked against its token count.
    pub fn for_example(&self, example: &AnnotatedExample) -> Result<&[Vec<f64>]> {
        let vectors = self
            .by_id
            .get(example.id())
            .ok_or_else(|| Error::Invalid(format!("no token vectors for `{}`", example.id())))?;
        if vectors.len() != example.len() {
            return Err(Error::Invalid(format!(
                "`{}` has {} tokens but {} vectors",
                example.id(),
                example.len(),
                vectors.len()
            )));
        }
        Ok(vectors)
    }
}
