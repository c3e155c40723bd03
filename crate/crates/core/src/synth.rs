//! Small templated corpus of adverse-event sentences with continuous,
//! overlapping and discontinuous mentions, for smoke tests and overfitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AnnotatedExample, EntityMention, Sentence, Span};

const ADJ: &[&str] = &["severe", "mild", "sharp", "chronic", "terrible"];
const BODY: &[&str] = &[
    "joint", "shoulder", "knee", "back", "neck", "hip", "elbow", "wrist",
];
const UPPER: &[(&str, &str)] = &[("upper", "body"), ("lower", "back"), ("left", "leg")];
const SYMPTOM: &[&str] = &["pain", "ache", "stiffness", "cramps", "soreness"];
const STATE: &[&str] = &["sore", "swollen", "stiff", "numb"];
const DRUG: &[&str] = &["lipitor", "aspirin", "ibuprofen", "voltaren", "arthrotec"];

/// Tokens and `(type, fragments)` per mention.
type Draft = (Vec<String>, Vec<(&'static str, Vec<(usize, usize)>)>);
type Template = fn(&mut ChaCha8Rng) -> Draft;

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap()
}

/// Two distinct body parts.
fn two_parts(rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    let mut parts: Vec<&str> = BODY.to_vec();
    parts.shuffle(rng);
    (parts[0], parts[1])
}

fn words(s: &[&str]) -> Vec<String> {
    s.iter().map(|w| w.to_string()).collect()
}

// "severe joint , shoulder and upper body pain": three mentions sharing
// the adjective and the symptom.
fn shared_modifier(rng: &mut ChaCha8Rng) -> Draft {
    let (a, b) = two_parts(rng);
    let (u1, u2) = *UPPER.choose(rng).unwrap();
    let tokens = words(&[pick(rng, ADJ), a, ",", b, "and", u1, u2, pick(rng, SYMPTOM)]);
    let ents = vec![
        ("ADE", vec![(0, 1), (7, 7)]),
        ("ADE", vec![(0, 0), (3, 3), (7, 7)]),
        ("ADE", vec![(0, 0), (5, 7)]),
    ];
    (tokens, ents)
}

// "my knee and hip pain"
fn coordinated_parts(rng: &mut ChaCha8Rng) -> Draft {
    let (a, b) = two_parts(rng);
    let tokens = words(&["my", a, "and", b, pick(rng, SYMPTOM)]);
    (
        tokens,
        vec![("ADE", vec![(1, 1), (4, 4)]), ("ADE", vec![(3, 4)])],
    )
}

// "after taking aspirin i had severe back pain"
fn drug_then_event(rng: &mut ChaCha8Rng) -> Draft {
    let tokens = words(&[
        "after",
        "taking",
        pick(rng, DRUG),
        "i",
        "had",
        pick(rng, ADJ),
        pick(rng, BODY),
        pick(rng, SYMPTOM),
    ]);
    (tokens, vec![("Drug", vec![(2, 2)]), ("ADE", vec![(5, 7)])])
}

// "my knee was swollen"
fn predicate(rng: &mut ChaCha8Rng) -> Draft {
    let tokens = words(&["my", pick(rng, BODY), "was", pick(rng, STATE)]);
    (tokens, vec![("ADE", vec![(1, 1), (3, 3)])])
}

// "pain in knee and hip"
fn symptom_first(rng: &mut ChaCha8Rng) -> Draft {
    let (a, b) = two_parts(rng);
    let tokens = words(&[pick(rng, SYMPTOM), "in", a, "and", b]);
    (
        tokens,
        vec![("ADE", vec![(0, 2)]), ("ADE", vec![(0, 0), (4, 4)])],
    )
}

// "i had cramps after voltaren"
fn event_then_drug(rng: &mut ChaCha8Rng) -> Draft {
    let tokens = words(&["i", "had", pick(rng, SYMPTOM), "after", pick(rng, DRUG)]);
    (tokens, vec![("ADE", vec![(2, 2)]), ("Drug", vec![(4, 4)])])
}

const TEMPLATES: &[Template] = &[
    shared_modifier,
    coordinated_parts,
    drug_then_event,
    predicate,
    symptom_first,
    event_then_drug,
];

/// `count` sentences cycling through the templates with seeded word choices.
/// Ids are `synth-1`, `synth-2`, ...
pub fn template_corpus(count: usize, seed: u64) -> Vec<AnnotatedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let (tokens, ents) = TEMPLATES[k % TEMPLATES.len()](&mut rng);
            let sentence = Sentence::new(format!("synth-{}", k + 1), tokens).expect("non-empty");
            let mentions = ents.into_iter().map(|(ty, spans)| {
                let spans = spans.into_iter().map(|(a, b)| Span::new(a, b)).collect();
                EntityMention::new(ty, spans).expect("template spans are valid")
            });
            AnnotatedExample::new(sentence, mentions).expect("template mentions are distinct")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::derive_label_set;
    use crate::decoder::decode_entities;
    use crate::eval::{slice_filter, SliceSpec};
    use crate::tagging::encode_grid;

    #[test]
    fn corpus_is_seeded() {
        assert_eq!(template_corpus(12, 3), template_corpus(12, 3));
        assert_ne!(template_corpus(12, 3), template_corpus(12, 4));
    }

    #[test]
    fn gold_grids_decode_back_to_gold() {
        let corpus = template_corpus(50, 0);
        let labels = derive_label_set(&corpus);
        assert_eq!(labels.entity_types(), ["ADE", "Drug"]);
        for ex in &corpus {
            let (grid, report) = encode_grid(ex, &labels).unwrap();
            assert!(report.lossy().next().is_none(), "{}", ex.id());
            assert_eq!(
                &decode_entities(&grid, &labels).unwrap(),
                ex.entities(),
                "{}",
                ex.id()
            );
        }
    }

    #[test]
    fn covers_every_structure() {
        let corpus = template_corpus(50, 0);
        let continuous = corpus
            .iter()
            .flat_map(|e| e.entities())
            .any(|m| !m.is_discontinuous());
        assert!(continuous);
        assert!(!slice_filter(&corpus, SliceSpec::DiscontinuousSentences).is_empty());
        assert!(!slice_filter(&corpus, SliceSpec::OverlappedSentences).is_empty());
    }
}
