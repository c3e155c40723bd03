//! Exact-match span metrics, analysis slices and attention dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{AnnotatedExample, EntityMention};
use crate::error::{Error, Result};
use crate::model::AttentionView;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EvalResult {
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalResult {
            precision,
            recall,
            f1,
            true_positives,
            predicted,
            gold,
        }
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "p={:.4} r={:.4} f1={:.4} tp={} pred={} gold={}",
            self.precision, self.recall, self.f1, self.true_positives, self.predicted, self.gold
        )
    }
}

/// Pairs prediction and gold entity sets by example id.
fn align<'a>(
    pred: &'a [AnnotatedExample],
    gold: &'a [AnnotatedExample],
) -> Result<Vec<(&'a BTreeSet<EntityMention>, &'a AnnotatedExample)>> {
    let mut by_id: BTreeMap<&str, &AnnotatedExample> = BTreeMap::new();
    for ex in pred {
        if by_id.insert(ex.id(), ex).is_some() {
            return Err(Error::Unaligned(format!(
                "duplicate prediction id `{}`",
                ex.id()
            )));
        }
    }
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(gold.len());
    for ex in gold {
        if !seen.insert(ex.id()) {
            return Err(Error::Unaligned(format!("duplicate gold id `{}`", ex.id())));
        }
        let p = by_id
            .get(ex.id())
            .ok_or_else(|| Error::Unaligned(format!("no prediction for `{}`", ex.id())))?;
        pairs.push((p.entities(), ex));
    }
    if let Some(extra) = by_id.keys().find(|id| !seen.contains(*id)) {
        return Err(Error::Unaligned(format!(
            "prediction `{extra}` has no gold example"
        )));
    }
    Ok(pairs)
}

fn count<'a>(
    pairs: impl IntoIterator<Item = (&'a BTreeSet<EntityMention>, &'a BTreeSet<EntityMention>)>,
    keep: impl Fn(&EntityMention) -> bool,
) -> EvalResult {
    let (mut tp, mut predicted, mut gold) = (0, 0, 0);
    for (p, g) in pairs {
        let p: BTreeSet<&EntityMention> = p.iter().filter(|m| keep(m)).collect();
        let g: BTreeSet<&EntityMention> = g.iter().filter(|m| keep(m)).collect();
        tp += p.intersection(&g).count();
        predicted += p.len();
        gold += g.len();
    }
    EvalResult::from_counts(tp, predicted, gold)
}

/// Micro-averaged exact-match precision, recall and F1. A prediction counts
/// only if its type and full fragment list equal a gold mention's.
pub fn span_f1(pred: &[AnnotatedExample], gold: &[AnnotatedExample]) -> Result<EvalResult> {
    let pairs = align(pred, gold)?;
    Ok(count(pairs.iter().map(|(p, g)| (*p, g.entities())), |_| {
        true
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SliceSpec {
    All,
    /// Examples with at least one multi-fragment gold mention.
    DiscontinuousSentences,
    /// Examples where two gold mentions share a token.
    OverlappedSentences,
    /// Discontinuous mentions whose longest gap spans exactly this many tokens.
    GapLength(usize),
}

impl FromStr for SliceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(SliceSpec::All),
            "discontinuous" => Ok(SliceSpec::DiscontinuousSentences),
            "overlapped" => Ok(SliceSpec::OverlappedSentences),
            _ => {
                let k = s
                    .strip_prefix("gap:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| {
                        Error::Invalid(format!(
                            "unknown slice `{s}` (expected all, discontinuous, overlapped or gap:K with K >= 1)"
                        ))
                    })?;
                Ok(SliceSpec::GapLength(k))
            }
        }
    }
}

impl fmt::Display for SliceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SliceSpec::All => write!(f, "all"),
            SliceSpec::DiscontinuousSentences => write!(f, "discontinuous"),
            SliceSpec::OverlappedSentences => write!(f, "overlapped"),
            SliceSpec::GapLength(k) => write!(f, "gap:{k}"),
        }
    }
}

/// Length in tokens of the mention's longest gap; `None` for continuous mentions.
pub fn max_gap_len(mention: &EntityMention) -> Option<usize> {
    mention.gaps().iter().map(|g| g.len()).max()
}

fn has_overlap(example: &AnnotatedExample) -> bool {
    let mentions: Vec<&EntityMention> = example.entities().iter().collect();
    mentions
        .iter()
        .enumerate()
        .any(|(i, a)| mentions[i + 1..].iter().any(|b| a.shares_token_with(b)))
}

fn keeps_example(spec: SliceSpec, example: &AnnotatedExample) -> bool {
    match spec {
        SliceSpec::All => true,
        SliceSpec::DiscontinuousSentences => example
            .entities()
            .iter()
            .any(EntityMention::is_discontinuous),
        SliceSpec::OverlappedSentences => has_overlap(example),
        SliceSpec::GapLength(k) => example.entities().iter().any(|m| max_gap_len(m) == Some(k)),
    }
}

fn keeps_mention(spec: SliceSpec, mention: &EntityMention) -> bool {
    match spec {
        SliceSpec::GapLength(k) => max_gap_len(mention) == Some(k),
        _ => true,
    }
}

/// Sub-corpus selected by `spec`. Gap-length slices also drop the mentions
/// outside the bucket.
pub fn slice_filter(corpus: &[AnnotatedExample], spec: SliceSpec) -> Vec<AnnotatedExample> {
    corpus
        .iter()
        .filter(|ex| keeps_example(spec, ex))
        .map(|ex| match spec {
            SliceSpec::GapLength(_) => ex
                .with_entities(
                    ex.entities()
                        .iter()
                        .filter(|m| keeps_mention(spec, m))
                        .cloned(),
                )
                .expect("a subset of valid mentions is valid"),
            _ => ex.clone(),
        })
        .collect()
}

/// Scores `pred` against the `spec` slice of `gold`. Sentence slices keep the
/// examples the gold side selects; gap-length slices compare only mentions in
/// the bucket, on both sides.
pub fn evaluate_slice(
    pred: &[AnnotatedExample],
    gold: &[AnnotatedExample],
    spec: SliceSpec,
) -> Result<EvalResult> {
    let pairs = align(pred, gold)?;
    Ok(count(
        pairs
            .iter()
            .filter(|(_, g)| match spec {
                SliceSpec::GapLength(_) => true,
                _ => keeps_example(spec, g),
            })
            .map(|(p, g)| (*p, g.entities())),
        |m| keeps_mention(spec, m),
    ))
}

/// Every gap length occurring among gold discontinuous mentions, ascending.
pub fn gap_lengths(corpus: &[AnnotatedExample]) -> Vec<usize> {
    let set: BTreeSet<usize> = corpus
        .iter()
        .flat_map(|ex| ex.entities().iter().filter_map(max_gap_len))
        .collect();
    set.into_iter().collect()
}

/// The standard analysis slices for `gold`: all, discontinuous, overlapped and
/// one bucket per gap length present.
pub fn analysis_slices(gold: &[AnnotatedExample]) -> Vec<SliceSpec> {
    let mut out = vec![
        SliceSpec::All,
        SliceSpec::DiscontinuousSentences,
        SliceSpec::OverlappedSentences,
    ];
    out.extend(gap_lengths(gold).into_iter().map(SliceSpec::GapLength));
    out
}

pub const ATTENTION_HEADER: &str = "id\ti\tj\tkind\tkey\tweight";

/// TSV rows (without header) of linear and criss-cross attention for each cell.
/// Linear rows are keyed by token index, criss-cross rows by `row,col`.
pub fn attention_dump(id: &str, view: &AttentionView, cells: &[(usize, usize)]) -> Result<String> {
    let mut out = String::new();
    for &(i, j) in cells {
        for (t, w) in view.linear(i, j)? {
            out.push_str(&format!("{id}\t{i}\t{j}\tlinear\t{t}\t{w}\n"));
        }
        for ((r, c), w) in view.criss_cross(i, j)? {
            out.push_str(&format!("{id}\t{i}\t{j}\tcriss_cross\t{r},{c}\t{w}\n"));
        }
    }
    Ok(out)
}
