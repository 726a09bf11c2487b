use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ConfidenceBin, CorpusSchema, Dataset, Hypothesis, IntentSpec, NluInterpretation, RoutingInstance,
    Slot, SplitTag,
};
use crate::error::{Error, Result};

const LOGGED_HIGH_PROB: f64 = 0.7;
const SIBLING_DISTRACTOR_PROB: f64 = 0.6;
const CROSS_DOMAIN_DISTRACTOR_PROB: f64 = 0.2;
const DISTRACTOR_RETRIES: usize = 8;

/// Splits `size` over `weights` by largest remainder, ties to the lower index.
/// Deterministic and exact, so small-count tail intents get their expected
/// share instead of a noisy multinomial draw.
fn apportion(size: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| size as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(size - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Per-rank instance counts for a Zipf law with exponent `s`.
pub fn zipf_counts(n_intents: usize, size: usize, s: f64) -> Vec<usize> {
    let weights: Vec<f64> = (1..=n_intents).map(|k| (k as f64).powf(-s)).collect();
    apportion(size, &weights)
}

struct Sampler<'a> {
    schema: &'a CorpusSchema,
    /// Zipf prior weight per intent name, used to pick distractor intents.
    prior: BTreeMap<&'a str, f64>,
    type_dists: BTreeMap<&'a str, WeightedIndex<f64>>,
    status_dists: BTreeMap<&'a str, WeightedIndex<f64>>,
}

impl<'a> Sampler<'a> {
    fn new(schema: &'a CorpusSchema) -> Self {
        let prior = schema
            .ranked_intents()
            .into_iter()
            .enumerate()
            .map(|(k, i)| (i.name.as_str(), ((k + 1) as f64).powf(-schema.zipf_exponent)))
            .collect();
        let type_dists = schema
            .domains
            .iter()
            .map(|d| {
                let w = schema.device_type_weights_for(d);
                (d.as_str(), WeightedIndex::new(w).expect("validated weights"))
            })
            .collect();
        let status_dists = schema
            .device_types
            .iter()
            .map(|t| {
                let w = schema.device_status_weights_for(t);
                (t.as_str(), WeightedIndex::new(w).expect("validated weights"))
            })
            .collect();
        Self {
            schema,
            prior,
            type_dists,
            status_dists,
        }
    }

    fn pick_weighted<'b, R: Rng>(&self, pool: &[&'b IntentSpec], rng: &mut R) -> Option<&'b IntentSpec> {
        if pool.is_empty() {
            return None;
        }
        let w: Vec<f64> = pool.iter().map(|i| self.prior[i.name.as_str()]).collect();
        let idx = WeightedIndex::new(w).ok()?.sample(rng);
        Some(pool[idx])
    }

    fn distractor<R: Rng>(&self, logged: &IntentSpec, rng: &mut R) -> Option<(&'a IntentSpec, String)> {
        let schema = self.schema;
        let r: f64 = rng.random();
        if r < SIBLING_DISTRACTOR_PROB + CROSS_DOMAIN_DISTRACTOR_PROB {
            let sibling = r < SIBLING_DISTRACTOR_PROB;
            let pool: Vec<&IntentSpec> = schema
                .intents
                .iter()
                .filter(|i| i.name != logged.name && (i.domain == logged.domain) == sibling)
                .collect();
            let pick = self.pick_weighted(&pool, rng)?;
            Some((pick, pick.skill.clone()))
        } else {
            let skills: Vec<String> = schema
                .skills_for_domain(&logged.domain)
                .into_iter()
                .filter(|s| *s != logged.skill)
                .collect();
            let skill = skills.choose(rng)?.clone();
            let spec = schema.intent(&logged.name).expect("logged intent");
            Some((spec, skill))
        }
    }

    fn instance<R: Rng>(&self, intent: &IntentSpec, id: String, rng: &mut R) -> RoutingInstance {
        let schema = self.schema;
        let template = intent.templates.choose(rng).expect("validated templates");
        let mut words: Vec<String> = Vec::new();
        let mut slots = Vec::new();
        for tok in template.split_whitespace() {
            match tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                Some(key) => {
                    let value = schema.slot_lexicons[key].choose(rng).expect("lexicon").clone();
                    words.extend(value.split_whitespace().map(str::to_string));
                    slots.push(Slot {
                        key: key.to_string(),
                        value,
                    });
                }
                None => words.push(tok.to_string()),
            }
        }
        let text = words.join(" ");
        let device_type = schema.device_types[self.type_dists[intent.domain.as_str()].sample(rng)].clone();
        let device_status =
            schema.device_statuses[self.status_dists[device_type.as_str()].sample(rng)].clone();
        let hyp = |spec: &IntentSpec, skill: String, bin| Hypothesis {
            text: text.clone(),
            device_type: device_type.clone(),
            device_status: device_status.clone(),
            nlu: NluInterpretation {
                domain: spec.domain.clone(),
                intent: spec.name.clone(),
                slots: slots.clone(),
            },
            confidence_bin: bin,
            skill,
        };
        let logged_bin = if rng.random_bool(LOGGED_HIGH_PROB) {
            ConfidenceBin::High
        } else {
            ConfidenceBin::Medium
        };
        let mut hyps = vec![hyp(intent, intent.skill.clone(), logged_bin)];
        let n = rng.random_range(1..=schema.max_hypotheses);
        for _ in 1..n {
            for _ in 0..DISTRACTOR_RETRIES {
                let Some((spec, skill)) = self.distractor(intent, rng) else {
                    continue;
                };
                if hyps.iter().any(|h| h.nlu.intent == spec.name && h.skill == skill) {
                    continue;
                }
                let bin = if rng.random_bool(0.5) {
                    ConfidenceBin::Medium
                } else {
                    ConfidenceBin::Low
                };
                hyps.push(hyp(spec, skill, bin));
                break;
            }
        }
        let mut order: Vec<usize> = (0..hyps.len()).collect();
        order.shuffle(rng);
        let logged_action = order.iter().position(|&i| i == 0).expect("logged present");
        let hypotheses = order.into_iter().map(|i| hyps[i].clone()).collect();
        RoutingInstance {
            instance_id: id,
            hypotheses,
            logged_action,
        }
    }
}

fn generate_with_counts(
    schema: &CorpusSchema,
    counts: &[(&IntentSpec, usize)],
    seed: u64,
    id_prefix: &str,
    split: SplitTag,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = Sampler::new(schema);
    let mut plan: Vec<&IntentSpec> = Vec::new();
    for &(spec, c) in counts {
        plan.extend(std::iter::repeat_n(spec, c));
    }
    plan.shuffle(&mut rng);
    let instances = plan
        .into_iter()
        .enumerate()
        .map(|(i, spec)| sampler.instance(spec, format!("{id_prefix}{i:07}"), &mut rng))
        .collect();
    Dataset {
        instances,
        schema: schema.clone(),
        split,
    }
}

/// Long-tail corpus: intent counts follow the schema's Zipf law over its
/// frequency ranking; each instance carries the correct hypothesis plus
/// perturbed distractors.
pub fn generate_corpus(schema: &CorpusSchema, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Input("corpus size must be at least 1".into()));
    }
    schema.validate()?;
    let ranked = schema.ranked_intents();
    let counts = zipf_counts(ranked.len(), size, schema.zipf_exponent);
    let plan: Vec<(&IntentSpec, usize)> = ranked.into_iter().zip(counts).collect();
    Ok(generate_with_counts(schema, &plan, seed, &format!("s{seed}-"), SplitTag::Train))
}

/// Corpus spread evenly over the given intents (used for the tail test set).
pub fn generate_for_intents(
    schema: &CorpusSchema,
    intents: &[String],
    size: usize,
    seed: u64,
    split: SplitTag,
) -> Result<Dataset> {
    if size == 0 || intents.is_empty() {
        return Err(Error::Input("need at least one intent and one instance".into()));
    }
    schema.validate()?;
    let specs = intents
        .iter()
        .map(|n| {
            schema
                .intent(n)
                .ok_or_else(|| Error::Vocabulary(format!("unknown intent `{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = apportion(size, &vec![1.0; specs.len()]);
    let plan: Vec<(&IntentSpec, usize)> = specs.into_iter().zip(counts).collect();
    Ok(generate_with_counts(schema, &plan, seed, &format!("t{seed}-"), split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apportion_is_exact_and_monotone() {
        let c = zipf_counts(50, 1234, 1.2);
        assert_eq!(c.iter().sum::<usize>(), 1234);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn apportion_uniform_spreads_remainder_to_first() {
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
    }
}
