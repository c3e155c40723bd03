use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedExample;

pub const UNK: &str = "<unk>";

/// Token-to-id table; id 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Collects every token of `corpus` in order of first appearance.
    pub fn build(corpus: &[AnnotatedExample]) -> Self {
        let mut tokens = vec![UNK.to_string()];
        let mut index = HashMap::from([(UNK.to_string(), 0)]);
        for token in corpus.iter().flat_map(|ex| ex.sentence().tokens()) {
            if !index.contains_key(token) {
                index.insert(token.clone(), tokens.len());
                tokens.push(token.clone());
            }
        }
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl From<Vec<String>> for Vocab {
    fn from(mut tokens: Vec<String>) -> Self {
        if tokens.first().map(String::as_str) != Some(UNK) {
            tokens.retain(|t| t != UNK);
            tokens.insert(0, UNK.to_string());
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
