//! Heterogeneous routing data: hypotheses, instances, datasets, the corpus
//! schema, the synthetic long-tail generator and the line-delimited format.

mod generate;
mod io;
mod schema;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use generate::{generate_corpus, generate_for_intents, zipf_counts};
pub use io::{load_dataset, save_dataset};
pub use schema::{CorpusSchema, IntentSpec, SyntheticSchemaOptions};

/// Default cap on utterance length in tokens.
pub const MAX_UTTERANCE_LEN: usize = 32;
/// Default cap on hypotheses per instance.
pub const MAX_HYPOTHESES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ConfidenceBin {
    High,
    Medium,
    Low,
}

impl ConfidenceBin {
    pub const ALL: [ConfidenceBin; 3] = [ConfidenceBin::High, ConfidenceBin::Medium, ConfidenceBin::Low];

    /// Sort rank: HIGH first.
    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceBin::High => "HIGH",
            ConfidenceBin::Medium => "MEDIUM",
            ConfidenceBin::Low => "LOW",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

impl fmt::Display for ConfidenceBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub key: String,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NluInterpretation {
    pub domain: String,
    pub intent: String,
    pub slots: Vec<Slot>,
}

impl NluInterpretation {
    pub fn slot_keys(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.key.clone()).collect()
    }
}

/// One routing candidate. Utterance-level fields (`text`, `device_type`,
/// `device_status`) are shared by every hypothesis of an instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub device_type: String,
    pub device_status: String,
    #[serde(flatten)]
    pub nlu: NluInterpretation,
    pub confidence_bin: ConfidenceBin,
    pub skill: String,
}

impl Hypothesis {
    pub fn tokens(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }
}

/// Utterance-level fields, the part of a hypothesis the augmenters rewrite.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceFields {
    pub text: String,
    pub device_type: String,
    pub device_status: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingInstance {
    pub instance_id: String,
    pub hypotheses: Vec<Hypothesis>,
    pub logged_action: usize,
}

impl RoutingInstance {
    pub fn logged(&self) -> &Hypothesis {
        &self.hypotheses[self.logged_action]
    }

    pub fn logged_intent(&self) -> &str {
        &self.logged().nlu.intent
    }

    /// The conditioning tuple: interpretation and skill of the logged
    /// (correct) hypothesis.
    pub fn condition(&self) -> Condition {
        let h = self.logged();
        Condition {
            nlu: h.nlu.clone(),
            skill: h.skill.clone(),
        }
    }

    pub fn utterance(&self) -> UtteranceFields {
        let h = &self.hypotheses[0];
        UtteranceFields {
            text: h.text.clone(),
            device_type: h.device_type.clone(),
            device_status: h.device_status.clone(),
        }
    }

    /// Overwrites the utterance-level fields on every hypothesis.
    pub fn set_utterance(&mut self, u: &UtteranceFields) {
        for h in &mut self.hypotheses {
            h.text.clone_from(&u.text);
            h.device_type.clone_from(&u.device_type);
            h.device_status.clone_from(&u.device_status);
        }
    }
}

/// Generation condition `(n1, s1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub nlu: NluInterpretation,
    pub skill: String,
}

impl Condition {
    /// Canonical string identifying the condition; slot values are ignored
    /// because generators only see slot keys.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.nlu.domain,
            self.nlu.intent,
            self.nlu.slot_keys().join(","),
            self.skill
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
    TestTail,
    /// Generator output appended to a training set.
    Augmented,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<RoutingInstance>,
    pub schema: CorpusSchema,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Logged-action intent counts.
    pub fn intent_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            *counts.entry(inst.logged_intent().to_string()).or_insert(0) += 1;
        }
        counts
    }

    pub fn with_instances(&self, instances: Vec<RoutingInstance>, split: SplitTag) -> Dataset {
        Dataset {
            instances,
            schema: self.schema.clone(),
            split,
        }
    }

    /// Concatenation; every part must share this dataset's schema.
    pub fn concat(parts: &[&Dataset], split: SplitTag) -> crate::Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| crate::Error::Input("nothing to concatenate".into()))?;
        let mut instances = Vec::new();
        for p in parts {
            if p.schema != first.schema {
                return Err(crate::Error::Schema(
                    "datasets were generated from different schemas".into(),
                ));
            }
            instances.extend(p.instances.iter().cloned());
        }
        Ok(first.with_instances(instances, split))
    }

    /// Checks instance-level invariants that every dataset must satisfy.
    pub fn validate(&self) -> crate::Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, inst) in self.instances.iter().enumerate() {
            if !seen.insert(inst.instance_id.as_str()) {
                return Err(crate::Error::Input(format!(
                    "duplicate instance_id {}",
                    inst.instance_id
                )));
            }
            self.schema
                .validate_instance(inst)
                .map_err(|msg| crate::Error::Input(format!("instance {i}: {msg}")))?;
        }
        Ok(())
    }
}

/// Splits by logged-action intent count: intents seen fewer than
/// `threshold` times go to the tail. Order is preserved in both halves.
pub fn split_head_tail(dataset: &Dataset, threshold: usize) -> (Dataset, Dataset) {
    let counts = dataset.intent_counts();
    let (tail, head): (Vec<_>, Vec<_>) = dataset
        .instances
        .iter()
        .cloned()
        .partition(|inst| counts[inst.logged_intent()] < threshold);
    (
        dataset.with_instances(head, dataset.split),
        dataset.with_instances(tail, dataset.split),
    )
}

/// Intents whose logged count is below `threshold`.
pub fn tail_intents(dataset: &Dataset, threshold: usize) -> Vec<String> {
    dataset
        .intent_counts()
        .into_iter()
        .filter(|&(_, c)| c < threshold)
        .map(|(i, _)| i)
        .collect()
}
