use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Bidirectional token/id map. Ids are assigned in insertion order, so a
/// vocabulary built from the same token stream is always identical.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    /// Returns the id of `tok`, inserting it if new.
    pub fn add(&mut self, tok: impl Into<String>) -> usize {
        let tok = tok.into();
        if let Some(&id) = self.index.get(&tok) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(tok.clone(), id);
        self.tokens.push(tok);
        id
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    /// Lookup that fails with a vocabulary error naming `what`.
    pub fn require(&self, tok: &str, what: &str) -> Result<usize> {
        self.id(tok)
            .ok_or_else(|| Error::Vocabulary(format!("unknown {what} `{tok}`")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Lower-cased whitespace tokenisation shared by every model.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
