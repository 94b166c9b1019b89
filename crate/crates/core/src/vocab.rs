use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Dense token <-> id map; ids 0..4 are reserved for PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the given words, appended after the reserved ids.
    /// Duplicates are ignored.
    pub fn new<I, T>(words: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let mut v = Vocabulary { tokens: Vec::new(), ids: HashMap::new() };
        for w in RESERVED.iter().copied() {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    fn push(&mut self, word: &str) {
        if !self.ids.contains_key(word) {
            self.ids.insert(word.to_string(), self.tokens.len());
            self.tokens.push(word.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, words.., EOS]`
    pub fn encode<T: AsRef<str>>(&self, words: &[T]) -> Vec<usize> {
        let mut out = Vec::with_capacity(words.len() + 2);
        out.push(BOS);
        out.extend(words.iter().map(|w| self.id(w.as_ref())));
        out.push(EOS);
        out
    }

    /// Words of an id sequence, dropping reserved markers and stopping at EOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Invalid("vocabulary must start with <pad>, <bos>, <eos>, <unk>".into()));
        }
        let ids: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Invalid("vocabulary contains duplicate tokens".into()));
        }
        Ok(Vocabulary { tokens, ids })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_come_first() {
        let v = Vocabulary::new(["a", "red", "a"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("red"), 5);
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::new(["a", "red", "square"]);
        let ids = v.encode(&["a", "red", "square"]);
        assert_eq!(ids.first(), Some(&BOS));
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(v.decode(&ids), vec!["a", "red", "square"]);
    }

    #[test]
    fn serde_rejects_missing_reserved() {
        let bad: std::result::Result<Vocabulary, _> = serde_json::from_str(r#"["a","b"]"#);
        assert!(bad.is_err());
        let v = Vocabulary::new(["x"]);
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }
}
