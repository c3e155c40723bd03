//! Gap-aware grid tagging.
//!
//! Every mention contributes three kinds of cells to an `n x n` grid:
//!
//! * `Frag` at `(head, tail)` of each fragment (upper triangle or diagonal),
//! * `Gap` at `(head, tail)` of each interval between neighbouring fragments,
//! * its entity type at `(tail, head)` of the whole mention (lower triangle or diagonal).
//!
//! A one-word mention writes only its type on the diagonal; the decoder treats
//! a diagonal type as an implicit fragment, so nothing is lost.
//!
//! When labels from different mentions meet in one cell the winner is
//! entity type > `Frag` > `Gap`. Two different entity types in one cell cannot
//! be represented and are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::{AnnotatedExample, EntityMention, LabelId, LabelSet, Span};
use crate::error::{Error, Result};

/// The `(tail, head)` cell that carries a mention's type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Anchor {
    pub tail: usize,
    pub head: usize,
    pub entity_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLabelMatrix {
    n: usize,
    cells: Vec<LabelId>,
}

impl GridLabelMatrix {
    /// All-`None` grid.
    pub fn new(n: usize) -> Self {
        GridLabelMatrix {
            n,
            cells: vec![LabelId::NONE; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> LabelId {
        self.cells[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: LabelId) {
        self.cells[row * self.n + col] = label;
    }

    /// Row-major label ids.
    pub fn cells(&self) -> &[LabelId] {
        &self.cells
    }

    /// Non-`None` cells in `(row, col)` order.
    pub fn labelled(&self) -> impl Iterator<Item = (usize, usize, LabelId)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, l)| **l != LabelId::NONE)
            .map(move |(k, l)| (k / self.n, k % self.n, *l))
    }

    /// Upper triangle holds only `None`/`Frag`/`Gap`; lower triangle only
    /// `None` or an entity type; every id must exist in `labels`.
    pub fn check_triangle(&self, labels: &LabelSet) -> Result<()> {
        for (row, col, label) in self.labelled() {
            let name = || labels.name(label).unwrap_or("<unknown>").to_string();
            if label.0 >= labels.len() {
                return Err(Error::TriangleViolation {
                    row,
                    col,
                    label: format!("#{}", label.0),
                });
            }
            let ok = match row.cmp(&col) {
                std::cmp::Ordering::Less => !label.is_entity_type(),
                std::cmp::Ordering::Greater => label.is_entity_type(),
                std::cmp::Ordering::Equal => true,
            };
            if !ok {
                return Err(Error::TriangleViolation {
                    row,
                    col,
                    label: name(),
                });
            }
        }
        Ok(())
    }

    /// TSV dump: `i<TAB>j<TAB>label`, `None` cells omitted, sorted by `(i, j)`.
    pub fn to_tsv(&self, labels: &LabelSet) -> String {
        let mut out = String::new();
        for (i, j, label) in self.labelled() {
            let name = labels
                .name(label)
                .expect("grid ids come from the label set");
            writeln!(out, "{i}\t{j}\t{name}").unwrap();
        }
        out
    }

    /// Reads a TSV dump for an `n`-token sentence. Entity types are taken
    /// from `labels` when given, otherwise from the names in the file.
    pub fn from_tsv(text: &str, n: usize, labels: Option<&LabelSet>) -> Result<(Self, LabelSet)> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                line: idx + 1,
                reason,
            };
            let mut parts = line.split('\t');
            let (Some(i), Some(j), Some(name), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(err("expected three tab-separated fields".into()));
            };
            let i: usize = i
                .trim()
                .parse()
                .map_err(|e| err(format!("row index: {e}")))?;
            let j: usize = j
                .trim()
                .parse()
                .map_err(|e| err(format!("column index: {e}")))?;
            if i >= n || j >= n {
                return Err(err(format!("cell ({i}, {j}) outside a {n}x{n} grid")));
            }
            rows.push((idx + 1, i, j, name.trim().to_string()));
        }
        let labels = match labels {
            Some(l) => l.clone(),
            None => LabelSet::new(
                rows.iter()
                    .map(|r| r.3.clone())
                    .filter(|s| s != LabelSet::NONE && s != LabelSet::FRAG && s != LabelSet::GAP),
            )?,
        };
        let mut grid = GridLabelMatrix::new(n);
        for (line, i, j, name) in rows {
            let id = labels.id_of(&name).ok_or_else(|| Error::Parse {
                line,
                reason: format!("unknown label `{name}`"),
            })?;
            grid.set(i, j, id);
        }
        grid.check_triangle(&labels)?;
        Ok((grid, labels))
    }
}

/// Fragments, gaps and anchor of a single mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionSpans {
    pub fragments: Vec<Span>,
    pub gaps: Vec<Span>,
    pub anchor: Anchor,
}

pub fn spans_of(entity: &EntityMention) -> MentionSpans {
    MentionSpans {
        fragments: entity.fragments().to_vec(),
        gaps: entity.gaps(),
        anchor: Anchor {
            tail: entity.tail(),
            head: entity.head(),
            entity_type: entity.entity_type().to_string(),
        },
    }
}

/// All fragment, gap and anchor spans of an example.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpanInventory {
    pub fragments: BTreeSet<Span>,
    pub gaps: BTreeSet<Span>,
    pub anchors: BTreeSet<Anchor>,
}

impl SpanInventory {
    pub fn of(example: &AnnotatedExample) -> Self {
        let mut inv = SpanInventory::default();
        for m in example.entities() {
            let spans = spans_of(m);
            inv.fragments.extend(spans.fragments);
            inv.gaps.extend(spans.gaps);
            inv.anchors.insert(spans.anchor);
        }
        inv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConflictKind {
    /// One-word entity over another mention's single-token fragment. Lossless:
    /// the decoder restores the fragment edge from the diagonal type.
    EntityOverFrag,
    /// One-word entity over another mention's single-token gap. Lossy.
    EntityOverGap,
    /// A fragment of one mention coincides with a gap of another. Lossy.
    FragOverGap,
}

impl ConflictKind {
    pub fn is_lossy(self) -> bool {
        !matches!(self, ConflictKind::EntityOverFrag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    pub row: usize,
    pub col: usize,
    pub kind: ConflictKind,
    pub winner: LabelId,
    pub loser: LabelId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConflictReport {
    pub conflicts: Vec<Conflict>,
}

impl ConflictReport {
    pub fn is_empty(&self) -> bool {
        self.conflicts.is_empty()
    }

    /// True when decoding the grid can still recover every mention's cells.
    pub fn is_lossless(&self) -> bool {
        self.conflicts.iter().all(|c| !c.kind.is_lossy())
    }

    pub fn lossy(&self) -> impl Iterator<Item = &Conflict> {
        self.conflicts.iter().filter(|c| c.kind.is_lossy())
    }
}

fn rank(label: LabelId) -> u8 {
    match label {
        LabelId::NONE => 0,
        LabelId::GAP => 1,
        LabelId::FRAG => 2,
        _ => 3,
    }
}

/// Builds the gold grid for `example`.
pub fn encode_grid(
    example: &AnnotatedExample,
    labels: &LabelSet,
) -> Result<(GridLabelMatrix, ConflictReport)> {
    let n = example.len();
    let mut claims: BTreeMap<(usize, usize), BTreeSet<LabelId>> = BTreeMap::new();
    let mut claim = |row: usize, col: usize, label: LabelId| {
        claims.entry((row, col)).or_default().insert(label);
    };

    for mention in example.entities() {
        let type_id = labels
            .id_of(mention.entity_type())
            .filter(|id| id.is_entity_type())
            .ok_or_else(|| Error::UnknownEntityType(mention.entity_type().to_string()))?;
        let spans = spans_of(mention);
        let one_word = mention.head() == mention.tail();
        if !one_word {
            for frag in &spans.fragments {
                claim(frag.start, frag.end, LabelId::FRAG);
            }
        }
        for gap in &spans.gaps {
            claim(gap.start, gap.end, LabelId::GAP);
        }
        claim(spans.anchor.tail, spans.anchor.head, type_id);
    }

    let mut grid = GridLabelMatrix::new(n);
    let mut report = ConflictReport::default();
    for ((row, col), set) in claims {
        let mut ordered: Vec<LabelId> = set.into_iter().collect();
        ordered.sort_by_key(|l| std::cmp::Reverse(rank(*l)));
        let winner = ordered[0];
        if let Some(second) = ordered.get(1).filter(|l| l.is_entity_type()) {
            return Err(Error::TypeCollision {
                row,
                col,
                first: labels.name(winner).unwrap_or_default().to_string(),
                second: labels.name(*second).unwrap_or_default().to_string(),
            });
        }
        for &loser in &ordered[1..] {
            let kind = match (winner.is_entity_type(), loser) {
                (true, LabelId::FRAG) => ConflictKind::EntityOverFrag,
                (true, _) => ConflictKind::EntityOverGap,
                (false, _) => ConflictKind::FragOverGap,
            };
            report.conflicts.push(Conflict {
                row,
                col,
                kind,
                winner,
                loser,
            });
        }
        grid.set(row, col, winner);
    }
    Ok((grid, report))
}
