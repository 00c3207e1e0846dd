use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Whitespace-token vocabulary: four specials followed by the sorted corpus
/// tokens, so the same corpus always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let corpus: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        let tokens: Vec<String> = [PAD, BOS, EOS, UNK]
            .into_iter()
            .chain(corpus.into_iter().filter(|t| ![PAD, BOS, EOS, UNK].contains(t)))
            .map(String::from)
            .collect();
        tokens.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|i| self.token(*i)).collect::<Vec<_>>().join(" ")
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}
