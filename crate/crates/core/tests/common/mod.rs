#![allow(dead_code)]

use std::collections::BTreeSet;

use gapgrid::data::{AnnotatedExample, EntityMention, LabelId, LabelSet, Sentence, Span};
use gapgrid::tagging::GridLabelMatrix;
use rand::Rng;

pub const TYPES: [&str; 2] = ["ADE", "Drug"];

pub fn labels() -> LabelSet {
    LabelSet::new(TYPES).unwrap()
}

/// Fragment spans laid out from `start`, separated by `gaps`.
fn lay_out(start: usize, frags: &[usize], gaps: &[usize]) -> Vec<Span> {
    let mut spans = Vec::with_capacity(frags.len());
    let mut at = start;
    for (k, &len) in frags.iter().enumerate() {
        spans.push(Span::new(at, at + len - 1));
        at += len + gaps.get(k).copied().unwrap_or(0);
    }
    spans
}

/// A random example with up to 4 mentions of up to 4 fragments each, gap
/// lengths 1 to 6 and sentence length at most 20. Later mentions often reuse
/// the head or the tail of an earlier one.
pub fn random_example(rng: &mut impl Rng, id: usize) -> AnnotatedExample {
    let n = rng.gen_range(1..=20);
    let wanted = rng.gen_range(1..=4);
    let mut mentions: BTreeSet<EntityMention> = BTreeSet::new();
    for _ in 0..wanted {
        for _attempt in 0..10 {
            let k = rng.gen_range(1..=4);
            let frags: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=3)).collect();
            let gaps: Vec<usize> = (1..k).map(|_| rng.gen_range(1..=6)).collect();
            let total: usize = frags.iter().sum::<usize>() + gaps.iter().sum::<usize>();
            if total > n {
                continue;
            }
            let start = match mentions.iter().nth(rng.gen_range(0..mentions.len().max(1))) {
                Some(prev) if rng.gen_bool(0.6) => {
                    if rng.gen_bool(0.5) {
                        prev.head() as isize
                    } else {
                        prev.tail() as isize + 1 - total as isize
                    }
                }
                _ => rng.gen_range(0..=n - total) as isize,
            };
            if start < 0 || start as usize + total > n {
                continue;
            }
            let ty = if rng.gen_bool(0.85) {
                TYPES[0]
            } else {
                TYPES[1]
            };
            let m = EntityMention::new(ty, lay_out(start as usize, &frags, &gaps)).unwrap();
            mentions.insert(m);
            break;
        }
    }
    let tokens = (0..n).map(|i| format!("w{i}")).collect();
    AnnotatedExample::new(Sentence::new(format!("g{id}"), tokens).unwrap(), mentions).unwrap()
}

/// True when two mentions share a head or a tail.
pub fn shares_boundary(example: &AnnotatedExample) -> bool {
    let ms: Vec<_> = example.entities().iter().collect();
    ms.iter().enumerate().any(|(a, x)| {
        ms[a + 1..]
            .iter()
            .any(|y| x.head() == y.head() || x.tail() == y.tail())
    })
}

/// A random grid obeying the triangle discipline with `n <= max_n` and a
/// non-`None` density drawn uniformly from `[0, max_density]`.
pub fn random_grid(rng: &mut impl Rng, max_n: usize, max_density: f64) -> GridLabelMatrix {
    let n = rng.gen_range(1..=max_n);
    let density = rng.gen_range(0.0..=max_density);
    let types = [LabelId(3), LabelId(4)];
    let mut grid = GridLabelMatrix::new(n);
    for i in 0..n {
        for j in 0..n {
            if !rng.gen_bool(density) {
                continue;
            }
            let label = match i.cmp(&j) {
                std::cmp::Ordering::Less => [LabelId::FRAG, LabelId::GAP][rng.gen_range(0..2)],
                std::cmp::Ordering::Greater => types[rng.gen_range(0..2)],
                std::cmp::Ordering::Equal => {
                    [LabelId::FRAG, LabelId::GAP, types[0], types[1]][rng.gen_range(0..4)]
                }
            };
            grid.set(i, j, label);
        }
    }
    grid
}

pub fn tokens(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

pub fn mention(ty: &str, spans: &[(usize, usize)]) -> EntityMention {
    EntityMention::new(ty, spans.iter().map(|&(a, b)| Span::new(a, b)).collect()).unwrap()
}

/// The eight-token sentence with its three overlapping ADE mentions.
pub fn shared_modifier_example() -> AnnotatedExample {
    let sentence = Sentence::new(
        "pain",
        tokens("severe joint , shoulder and upper body pain"),
    )
    .unwrap();
    AnnotatedExample::new(
        sentence,
        [
            mention("ADE", &[(0, 1), (7, 7)]),
            mention("ADE", &[(0, 0), (3, 3), (7, 7)]),
            mention("ADE", &[(0, 0), (5, 7)]),
        ],
    )
    .unwrap()
}
