mod common;

use std::collections::BTreeSet;

use gapgrid::data::{
    derive_label_set, parse_jsonl, to_jsonl, AnnotatedExample, EntityMention, LabelId, LabelSet,
    Sentence, Span,
};
use gapgrid::decoder::{brute_force_decode, decode_entities_with_cap};
use gapgrid::eval::{evaluate_slice, gap_lengths, max_gap_len, span_f1, SliceSpec};
use gapgrid::tagging::{encode_grid, GridLabelMatrix};
use gapgrid::Error;
use proptest::prelude::*;

/// `(type, start, fragment lengths, gap lengths)`.
type MentionPlan = (usize, usize, Vec<usize>, Vec<usize>);

fn mention_plan() -> impl Strategy<Value = MentionPlan> {
    (
        0..2usize,
        0..20usize,
        prop::collection::vec(1..=3usize, 1..=4),
        prop::collection::vec(1..=6usize, 3),
    )
}

fn build(id: usize, n: usize, plans: &[MentionPlan]) -> AnnotatedExample {
    let mut mentions = BTreeSet::new();
    for (ty, start, frags, gaps) in plans {
        let mut spans = Vec::new();
        let mut at = *start;
        for (k, len) in frags.iter().enumerate() {
            spans.push(Span::new(at, at + len - 1));
            at += len + if k + 1 < frags.len() { gaps[k] } else { 0 };
        }
        if spans.last().unwrap().end < n {
            mentions.insert(EntityMention::new(common::TYPES[*ty], spans).unwrap());
        }
    }
    let tokens = (0..n).map(|i| format!("t{i}")).collect();
    AnnotatedExample::new(Sentence::new(format!("p{id}"), tokens).unwrap(), mentions).unwrap()
}

fn example() -> impl Strategy<Value = AnnotatedExample> {
    (
        1..=20usize,
        prop::collection::vec(mention_plan(), 0..=4),
        any::<u16>(),
    )
        .prop_map(|(n, plans, id)| build(id as usize, n, &plans))
}

fn corpus() -> impl Strategy<Value = Vec<AnnotatedExample>> {
    prop::collection::vec(example(), 1..6).prop_map(|mut xs| {
        for (k, x) in xs.iter_mut().enumerate() {
            let sentence = Sentence::new(format!("s{k}"), x.sentence().tokens().to_vec()).unwrap();
            *x = AnnotatedExample::new(sentence, x.entities().iter().cloned()).unwrap();
        }
        xs
    })
}

/// A grid obeying the triangle discipline, at most 8 tokens.
fn grid() -> impl Strategy<Value = GridLabelMatrix> {
    (1..=8usize)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(0..10u8, n * n)))
        .prop_map(|(n, draws)| {
            let mut g = GridLabelMatrix::new(n);
            for (k, d) in draws.into_iter().enumerate() {
                let (i, j) = (k / n, k % n);
                // Roughly 30% of cells get a label.
                let label = match (i.cmp(&j), d) {
                    (_, 3..) => continue,
                    (std::cmp::Ordering::Less, d) => {
                        [LabelId::FRAG, LabelId::GAP, LabelId::FRAG][d as usize]
                    }
                    (std::cmp::Ordering::Greater, d) => LabelId(3 + (d as usize % 2)),
                    (std::cmp::Ordering::Equal, d) => {
                        [LabelId::FRAG, LabelId::GAP, LabelId(3)][d as usize]
                    }
                };
                g.set(i, j, label);
            }
            g
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn jsonl_roundtrip(xs in corpus()) {
        prop_assert_eq!(parse_jsonl(&to_jsonl(&xs)).unwrap(), xs);
    }

    #[test]
    fn label_ids_ignore_type_order(mut types in prop::collection::btree_set("[A-Z][a-z]{0,4}", 1..5)
        .prop_map(|s| s.into_iter().collect::<Vec<_>>()), rot in 0..5usize) {
        let sorted = LabelSet::new(types.clone()).unwrap();
        let k = rot % types.len();
        types.rotate_left(k);
        types.reverse();
        let shuffled = LabelSet::new(types).unwrap();
        prop_assert_eq!(&sorted, &shuffled);
        prop_assert_eq!(sorted.name(LabelId::NONE), Some("None"));
        prop_assert_eq!(sorted.name(LabelId::FRAG), Some("Frag"));
        prop_assert_eq!(sorted.name(LabelId::GAP), Some("Gap"));
    }

    #[test]
    fn derived_labels_ignore_corpus_order(mut xs in corpus()) {
        let a = derive_label_set(&xs);
        xs.reverse();
        prop_assert_eq!(a, derive_label_set(&xs));
    }

    #[test]
    fn encoding_respects_triangles_and_is_deterministic(x in example()) {
        let labels = common::labels();
        match encode_grid(&x, &labels) {
            Ok((grid, report)) => {
                grid.check_triangle(&labels).unwrap();
                let (again, report2) = encode_grid(&x, &labels).unwrap();
                prop_assert_eq!(&grid, &again);
                prop_assert_eq!(report, report2);
                for m in x.entities() {
                    let anchor = grid.get(m.tail(), m.head());
                    prop_assert_eq!(labels.name(anchor), Some(m.entity_type()));
                }
            }
            Err(Error::TypeCollision { row, col, .. }) => prop_assert!(row >= col),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn decoder_matches_oracle(g in grid()) {
        let labels = common::labels();
        let fast = decode_entities_with_cap(&g, &labels, usize::MAX).unwrap();
        prop_assert_eq!(&fast, &brute_force_decode(&g, &labels));
        for m in &fast {
            prop_assert!(m.fragments().windows(2).all(|w| w[0].end + 1 < w[1].start));
        }
    }

    #[test]
    fn tsv_roundtrip(g in grid()) {
        let labels = common::labels();
        let (back, _) = GridLabelMatrix::from_tsv(&g.to_tsv(&labels), g.n(), Some(&labels)).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn span_f1_ignores_example_order(gold in corpus(), drop in any::<prop::sample::Index>()) {
        let pred: Vec<AnnotatedExample> = gold
            .iter()
            .map(|x| {
                let keep: Vec<_> = x.entities().iter().cloned().collect();
                let skip = if keep.is_empty() { usize::MAX } else { drop.index(keep.len()) };
                x.with_entities(keep.into_iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, m)| m)).unwrap()
            })
            .collect();
        let a = span_f1(&pred, &gold).unwrap();
        let (mut p2, mut g2) = (pred.clone(), gold.clone());
        p2.reverse();
        g2.rotate_left(1);
        prop_assert_eq!(a, span_f1(&p2, &g2).unwrap());
        prop_assert_eq!(a.true_positives, a.predicted);
    }

    #[test]
    fn gap_buckets_partition_discontinuous_mentions(gold in corpus()) {
        let total: usize = gold.iter().flat_map(|x| x.entities()).filter(|m| m.is_discontinuous()).count();
        let mut bucketed = 0;
        for k in gap_lengths(&gold) {
            let r = evaluate_slice(&gold, &gold, SliceSpec::GapLength(k)).unwrap();
            prop_assert_eq!(r.f1, 1.0);
            bucketed += r.gold;
        }
        prop_assert_eq!(bucketed, total);
        for m in gold.iter().flat_map(|x| x.entities()) {
            prop_assert_eq!(max_gap_len(m).is_some(), m.is_discontinuous());
        }
    }
}
