use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ConfidenceBin, Dataset, RoutingInstance, SplitTag, UtteranceFields};
use crate::error::{Error, Result};
use crate::mlm::MlmParams;
use crate::seq2seq::Seq2SeqParams;
use crate::vae::VaeParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmenterKind {
    Cvae,
    Pcvae,
    Mlm,
    Seq2seq,
    Oversample,
}

impl AugmenterKind {
    pub const ALL: [AugmenterKind; 5] = [Self::Cvae, Self::Pcvae, Self::Mlm, Self::Seq2seq, Self::Oversample];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cvae => "cvae",
            Self::Pcvae => "pcvae",
            Self::Mlm => "mlm",
            Self::Seq2seq => "seq2seq",
            Self::Oversample => "oversample",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    pub augmenter: AugmenterKind,
    #[serde(default = "one")]
    pub ratio: usize,
    #[serde(default)]
    pub nlubin_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl AugmentationConfig {
    pub fn new(augmenter: AugmenterKind, ratio: usize) -> Self {
        Self {
            augmenter,
            ratio,
            nlubin_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::Input("augmentation ratio must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.nlubin_prob) {
            return Err(Error::Input(format!("nlubin_prob must lie in [0, 1], got {}", self.nlubin_prob)));
        }
        Ok(())
    }

    /// Variant label such as `seq2seq-x5-nlubin`.
    pub fn label(&self) -> String {
        let mut s = format!("{}-x{}", self.augmenter.as_str(), self.ratio);
        if self.nlubin_prob > 0.0 {
            s.push_str("-nlubin");
        }
        s
    }
}

/// A source of replacement utterance-level fields for tail instances.
pub trait Augmenter {
    /// Schema the generator was trained on; `None` accepts any schema.
    fn schema_hash(&self) -> Option<&str>;

    /// Whether device type and status come from the generator. When false
    /// only the text is replaced.
    fn replaces_categoricals(&self) -> bool;

    /// Up to `n` outputs per instance; shorter lists count as drops.
    fn generate(&self, instances: &[RoutingInstance], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>>;
}

/// Exact duplicates of the tail.
#[derive(Clone, Copy, Debug, Default)]
pub struct Duplicate;

impl Augmenter for Duplicate {
    fn schema_hash(&self) -> Option<&str> {
        None
    }

    fn replaces_categoricals(&self) -> bool {
        true
    }

    fn generate(&self, instances: &[RoutingInstance], n: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>> {
        Ok(instances.iter().map(|i| vec![i.utterance(); n]).collect())
    }
}

impl Augmenter for VaeParams<f32> {
    fn schema_hash(&self) -> Option<&str> {
        Some(&self.schema_hash)
    }

    fn replaces_categoricals(&self) -> bool {
        false
    }

    fn generate(&self, instances: &[RoutingInstance], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>> {
        let conds: Vec<_> = instances.iter().map(RoutingInstance::condition).collect();
        let sampling = self.config.sampling;
        let samples = self.sample_batch(&conds, n, self.vocab.max_len, &sampling, rng)?;
        Ok(instances
            .iter()
            .zip(samples)
            .map(|(inst, seqs)| {
                seqs.into_iter()
                    .filter(|s| !s.is_empty())
                    .map(|s| UtteranceFields {
                        text: s.join(" "),
                        ..inst.utterance()
                    })
                    .collect()
            })
            .collect())
    }
}

impl Augmenter for MlmParams<f32> {
    fn schema_hash(&self) -> Option<&str> {
        Some(&self.schema_hash)
    }

    fn replaces_categoricals(&self) -> bool {
        true
    }

    fn generate(&self, instances: &[RoutingInstance], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>> {
        instances
            .iter()
            .map(|inst| (0..n).map(|_| self.perturb(inst, rng)).collect())
            .collect()
    }
}

impl Augmenter for Seq2SeqParams<f32> {
    fn schema_hash(&self) -> Option<&str> {
        Some(&self.schema_hash)
    }

    fn replaces_categoricals(&self) -> bool {
        true
    }

    fn generate(&self, instances: &[RoutingInstance], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>> {
        let conds: Vec<_> = instances.iter().map(RoutingInstance::condition).collect();
        self.generate_batch(&conds, n, &self.config.sampling, rng)
    }
}

/// Augmented instances plus the number of requested outputs that could not
/// be generated.
#[derive(Clone, Debug)]
pub struct AugmentationSet {
    pub dataset: Dataset,
    pub requested: usize,
    pub dropped: usize,
}

fn nlubin<R: Rng>(inst: &mut RoutingInstance, p: f64, rng: &mut R) {
    for h in &mut inst.hypotheses {
        if rng.random::<f64>() < p {
            h.confidence_bin = *ConfidenceBin::ALL.choose(rng).expect("three bins");
        }
    }
}

/// `ratio` rewritten copies of every tail instance. Hypothesis-level fields
/// and the logged action are kept; under `nlubin_prob` each hypothesis's
/// confidence bin is redrawn uniformly with that probability.
pub fn build_augmentation_set(tail: &Dataset, augmenter: &dyn Augmenter, config: &AugmentationConfig) -> Result<AugmentationSet> {
    config.validate()?;
    if tail.is_empty() {
        return Err(Error::Input("cannot augment an empty tail set".into()));
    }
    if let Some(h) = augmenter.schema_hash() {
        if h != tail.schema.hash() {
            return Err(Error::Schema("augmenter was trained on a different schema than the tail set".into()));
        }
    }
    let mut gen_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0005);
    let mut bin_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0006);
    let generated = augmenter.generate(&tail.instances, config.ratio, &mut gen_rng)?;
    let label = config.label();
    let mut out = Vec::with_capacity(tail.len() * config.ratio);
    for (inst, outputs) in tail.instances.iter().zip(generated) {
        for (k, fields) in outputs.into_iter().take(config.ratio).enumerate() {
            let mut copy = inst.clone();
            copy.instance_id = format!("{}#{label}.{k}", inst.instance_id);
            if augmenter.replaces_categoricals() {
                copy.set_utterance(&fields);
            } else {
                copy.set_utterance(&UtteranceFields {
                    text: fields.text,
                    ..inst.utterance()
                });
            }
            if config.nlubin_prob > 0.0 {
                nlubin(&mut copy, config.nlubin_prob, &mut bin_rng);
            }
            out.push(copy);
        }
    }
    let requested = tail.len() * config.ratio;
    let dropped = requested - out.len();
    Ok(AugmentationSet {
        dataset: tail.with_instances(out, SplitTag::Augmented),
        requested,
        dropped,
    })
}

/// `factor` exact copies of the tail, one full pass after another, with
/// fresh instance ids.
pub fn oversample(tail: &Dataset, factor: usize) -> Result<Dataset> {
    if factor < 1 {
        return Err(Error::Input("oversampling factor must be ≥ 1".into()));
    }
    let out = (0..factor)
        .flat_map(|k| {
            tail.instances.iter().map(move |i| {
                let mut c = i.clone();
                c.instance_id = format!("{}#over.{k}", i.instance_id);
                c
            })
        })
        .collect();
    Ok(tail.with_instances(out, tail.split))
}
