//! Token layout of the joint generator.
//!
//! Input:  `<DOM> d <INT> i <SLOT> k1 .. kn <SKILL> s <X0> <X1> <X2>`
//! Target: `<X0> device_type <X1> device_status <X2> w1 .. wm <EOS>`

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, CorpusSchema, NluInterpretation, UtteranceFields};
use crate::error::Result;
use crate::vocab::{tokenize, Vocab};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<EOS>";
pub const DOM: &str = "<DOM>";
pub const INT: &str = "<INT>";
pub const SLOT: &str = "<SLOT>";
pub const SKILL: &str = "<SKILL>";
pub const SENTINELS: [&str; 3] = ["<X0>", "<X1>", "<X2>"];

const SPECIALS: [&str; 10] = [UNK, BOS, EOS, DOM, INT, SLOT, SKILL, "<X0>", "<X1>", "<X2>"];

/// Encoded training pair plus the condition key used by the contrastive mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequencePair {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub condition_key: String,
}

/// Why a decoded sequence was rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Malformed {
    MissingSentinel(usize),
    UnknownDeviceType(String),
    UnknownDeviceStatus(String),
    EmptyUtterance,
    BadUtteranceToken(String),
    MissingEos,
    TooLong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqVocab {
    pub tokens: Vocab,
    pub device_types: BTreeSet<String>,
    pub device_statuses: BTreeSet<String>,
    pub max_utterance_len: usize,
    pub max_input_len: usize,
}

impl Seq2SeqVocab {
    /// Reserved tokens, then every schema label, then corpus words.
    pub fn build(schema: &CorpusSchema, texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut tokens = Vocab::from_tokens(SPECIALS);
        let labels = schema
            .domains
            .iter()
            .chain(schema.intents.iter().map(|i| &i.name))
            .chain(&schema.slot_keys)
            .chain(&schema.skills)
            .chain(&schema.device_types)
            .chain(&schema.device_statuses);
        for l in labels {
            tokens.add(l.as_str());
        }
        for t in texts {
            for w in tokenize(t.as_ref()) {
                tokens.add(w);
            }
        }
        Self {
            tokens,
            device_types: schema.device_types.iter().cloned().collect(),
            device_statuses: schema.device_statuses.iter().cloned().collect(),
            max_utterance_len: schema.max_utterance_len,
            max_input_len: 10 + schema.slot_keys.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.tokens.id(tok).expect("reserved token present")
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Longest well-formed target.
    pub fn max_target_len(&self) -> usize {
        6 + self.max_utterance_len
    }

    pub fn serialize_condition(&self, nlu: &NluInterpretation, skill: &str) -> Result<Vec<usize>> {
        let v = &self.tokens;
        let mut out = vec![self.id(DOM), v.require(&nlu.domain, "domain")?, self.id(INT)];
        out.push(v.require(&nlu.intent, "intent")?);
        out.push(self.id(SLOT));
        for s in &nlu.slots {
            out.push(v.require(&s.key, "slot key")?);
        }
        out.push(self.id(SKILL));
        out.push(v.require(skill, "skill")?);
        out.extend(SENTINELS.iter().map(|s| self.id(s)));
        Ok(out)
    }

    /// Unknown words map to `<unk>`; unknown categorical labels are errors.
    pub fn serialize_target(&self, fields: &UtteranceFields) -> Result<Vec<usize>> {
        let v = &self.tokens;
        let mut out = vec![self.id(SENTINELS[0]), v.require(&fields.device_type, "device type")?];
        out.push(self.id(SENTINELS[1]));
        out.push(v.require(&fields.device_status, "device status")?);
        out.push(self.id(SENTINELS[2]));
        let unk = self.id(UNK);
        out.extend(tokenize(&fields.text).iter().map(|w| v.id(w).unwrap_or(unk)));
        out.push(self.id(EOS));
        Ok(out)
    }

    pub fn pair(&self, condition: &Condition, fields: &UtteranceFields) -> Result<SequencePair> {
        Ok(SequencePair {
            input: self.serialize_condition(&condition.nlu, &condition.skill)?,
            output: self.serialize_target(fields)?,
            condition_key: condition.key(),
        })
    }

    /// Whether `id` at target position `pos` (before `<EOS>`) still allows a
    /// well-formed parse. A `false` here guarantees [`Self::parse_target`]
    /// rejects the sequence whatever follows.
    pub fn viable_at(&self, pos: usize, id: usize) -> bool {
        let tok = self.tokens.token(id);
        match pos {
            0 | 2 | 4 => id == self.id(SENTINELS[pos / 2]),
            1 => self.device_types.iter().any(|d| d == tok),
            3 => self.device_statuses.iter().any(|d| d == tok),
            _ => !self.is_special(id),
        }
    }

    /// Inverse of [`Self::serialize_target`] for well-formed sequences.
    /// Anything after `<EOS>` is ignored.
    pub fn parse_target(&self, ids: &[usize]) -> std::result::Result<UtteranceFields, Malformed> {
        let tok = |i: usize| self.tokens.token(i);
        let end = ids
            .iter()
            .position(|&i| i == self.id(EOS))
            .ok_or(Malformed::MissingEos)?;
        let ids = &ids[..end];
        for (k, pos) in [(0usize, 0usize), (1, 2), (2, 4)] {
            if ids.get(pos) != Some(&self.id(SENTINELS[k])) {
                return Err(Malformed::MissingSentinel(k));
            }
        }
        let device_type = tok(ids[1]).to_string();
        if !self.device_types.contains(&device_type) {
            return Err(Malformed::UnknownDeviceType(device_type));
        }
        let device_status = tok(ids[3]).to_string();
        if !self.device_statuses.contains(&device_status) {
            return Err(Malformed::UnknownDeviceStatus(device_status));
        }
        let words = &ids[5..];
        if words.is_empty() {
            return Err(Malformed::EmptyUtterance);
        }
        if words.len() > self.max_utterance_len {
            return Err(Malformed::TooLong);
        }
        if let Some(&bad) = words.iter().find(|&&w| self.is_special(w)) {
            return Err(Malformed::BadUtteranceToken(tok(bad).to_string()));
        }
        Ok(UtteranceFields {
            text: words.iter().map(|&w| tok(w)).collect::<Vec<_>>().join(" "),
            device_type,
            device_status,
        })
    }
}
