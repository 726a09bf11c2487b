//! Condition embedding `Emb(c)` for `c = (n1, s1)`: embeddings of domain,
//! intent, slot-key bag and skill, concatenated and passed through a tanh
//! context layer.

use hetaug_autograd::nn::{Embedding, Linear};
use hetaug_autograd::{Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Condition, CorpusSchema};
use crate::error::Result;
use crate::vocab::Vocab;

const NO_SLOT: &str = "<none>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionVocab {
    pub domains: Vocab,
    pub intents: Vocab,
    pub slot_keys: Vocab,
    pub skills: Vocab,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCondition {
    pub domain: usize,
    pub intent: usize,
    pub slots: Vec<usize>,
    pub skill: usize,
}

impl ConditionVocab {
    pub fn build(schema: &CorpusSchema) -> Self {
        Self {
            domains: Vocab::from_tokens(schema.domains.iter().cloned()),
            intents: Vocab::from_tokens(schema.intents.iter().map(|i| i.name.clone())),
            slot_keys: Vocab::from_tokens(std::iter::once(NO_SLOT.to_string()).chain(schema.slot_keys.iter().cloned())),
            skills: Vocab::from_tokens(schema.skills.iter().cloned()),
        }
    }

    pub fn encode(&self, c: &Condition) -> Result<EncodedCondition> {
        let mut slots: Vec<usize> = c
            .nlu
            .slots
            .iter()
            .map(|s| self.slot_keys.require(&s.key, "slot key"))
            .collect::<Result<_>>()?;
        if slots.is_empty() {
            slots.push(0);
        }
        Ok(EncodedCondition {
            domain: self.domains.require(&c.nlu.domain, "domain")?,
            intent: self.intents.require(&c.nlu.intent, "intent")?,
            slots,
            skill: self.skills.require(&c.skill, "skill")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionEncoder {
    domain: Embedding,
    intent: Embedding,
    slot_key: Embedding,
    skill: Embedding,
    context: Linear,
    pub dim: usize,
}

impl ConditionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        vocab: &ConditionVocab,
        field_dim: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            domain: Embedding::new(ps, &format!("{name}.domain"), vocab.domains.len(), field_dim, rng),
            intent: Embedding::new(ps, &format!("{name}.intent"), vocab.intents.len(), field_dim, rng),
            slot_key: Embedding::new(ps, &format!("{name}.slot_key"), vocab.slot_keys.len(), field_dim, rng),
            skill: Embedding::new(ps, &format!("{name}.skill"), vocab.skills.len(), field_dim, rng),
            context: Linear::new(ps, &format!("{name}.context"), 4 * field_dim, dim, rng),
            dim,
        }
    }

    /// `B x dim` condition embeddings.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, conds: &[&EncodedCondition]) -> Var {
        let d = self.domain.forward(g, &conds.iter().map(|c| c.domain).collect::<Vec<_>>());
        let i = self.intent.forward(g, &conds.iter().map(|c| c.intent).collect::<Vec<_>>());
        let bags: Vec<Vec<usize>> = conds.iter().map(|c| c.slots.clone()).collect();
        let s = self.slot_key.mean_bags(g, &bags);
        let k = self.skill.forward(g, &conds.iter().map(|c| c.skill).collect::<Vec<_>>());
        let cat = g.concat_cols(&[d, i, s, k]);
        let h = self.context.forward(g, cat);
        g.tanh(h)
    }
}
