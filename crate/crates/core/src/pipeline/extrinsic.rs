use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::augment::{build_augmentation_set, AugmentationConfig, Augmenter};
use crate::corpus::{Dataset, SplitTag, UtteranceFields};
use crate::error::{Error, Result};
use crate::router::{per_intent_accuracy, replication_accuracy, train_router, IntentAccuracy, RouterConfig};

/// Accuracy strictly above this counts as "exceeding 98%".
pub const HIGH_ACCURACY: f64 = 0.98;

/// Shared inputs of an extrinsic comparison. The baseline trains on
/// `[head; tail]`, each variant on `[head; tail; augmentation]`.
#[derive(Clone, Debug)]
pub struct ExtrinsicSetup<'a> {
    pub head: &'a Dataset,
    pub tail: &'a Dataset,
    /// Router model selection; `None` keeps the last epoch.
    pub valid: Option<&'a Dataset>,
    pub test: &'a Dataset,
    pub tail_test: &'a Dataset,
    pub thresholds: Vec<usize>,
    pub router: RouterConfig,
    /// Every variant is trained once per seed; accuracies are averaged.
    pub router_seeds: Vec<u64>,
}

pub struct Variant<'a> {
    pub name: String,
    pub augmenter: &'a dyn Augmenter,
    pub config: AugmentationConfig,
}

impl<'a> Variant<'a> {
    pub fn new(augmenter: &'a dyn Augmenter, config: AugmentationConfig) -> Self {
        Self {
            name: config.label(),
            augmenter,
            config,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: usize,
    /// Tail-test intents whose training count is below the threshold.
    pub intents: usize,
    /// Percentage of those intents with accuracy above the baseline's.
    pub improved_pct: f64,
    /// Percentage of those intents above 98% accuracy, minus the baseline's
    /// percentage (percentage points).
    pub high_accuracy_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelShare {
    pub label: String,
    pub reference: f64,
    pub generated: f64,
}

/// Reference (tail) versus augmented shares of each categorical label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldDistribution {
    pub device_type: Vec<LabelShare>,
    pub device_status: Vec<LabelShare>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub config: Option<AugmentationConfig>,
    pub failure: Option<String>,
    pub train_size: usize,
    pub augmented: usize,
    pub dropped: usize,
    pub overall_accuracy: Option<f64>,
    pub tail_accuracy: Option<f64>,
    /// Tail-test accuracy per intent, averaged over router seeds.
    pub per_intent: BTreeMap<String, IntentAccuracy>,
    pub thresholds: Vec<ThresholdPoint>,
    /// Per-intent accuracy minus baseline, ascending.
    pub sorted_deltas: Vec<f64>,
    pub fields: Option<FieldDistribution>,
}

impl VariantResult {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    fn failed(name: String, config: Option<AugmentationConfig>, err: &Error) -> Self {
        Self {
            name,
            config,
            failure: Some(err.to_string()),
            train_size: 0,
            augmented: 0,
            dropped: 0,
            overall_accuracy: None,
            tail_accuracy: None,
            per_intent: BTreeMap::new(),
            thresholds: Vec::new(),
            sorted_deltas: Vec::new(),
            fields: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicReport {
    pub thresholds: Vec<usize>,
    pub router_seeds: Vec<u64>,
    /// Training count (head + tail) of every intent in the tail test set.
    pub intent_counts: BTreeMap<String, usize>,
    pub baseline: VariantResult,
    pub variants: Vec<VariantResult>,
}

/// Threshold series of `variant` against `baseline` over the intents of
/// `counts`; a bucket holds intents whose count is below the threshold.
pub fn threshold_series(
    baseline: &BTreeMap<String, IntentAccuracy>,
    variant: &BTreeMap<String, IntentAccuracy>,
    counts: &BTreeMap<String, usize>,
    thresholds: &[usize],
) -> Vec<ThresholdPoint> {
    thresholds
        .iter()
        .map(|&t| {
            let bucket: Vec<&String> = counts.iter().filter(|(_, &c)| c < t).map(|(k, _)| k).collect();
            let n = bucket.len();
            let pct = |k: usize| if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
            let acc = |m: &BTreeMap<String, IntentAccuracy>, i: &String| m.get(i).map_or(0.0, |a| a.accuracy);
            let improved = bucket.iter().filter(|i| acc(variant, i) > acc(baseline, i)).count();
            let high_v = bucket.iter().filter(|i| acc(variant, i) > HIGH_ACCURACY).count();
            let high_b = bucket.iter().filter(|i| acc(baseline, i) > HIGH_ACCURACY).count();
            ThresholdPoint {
                threshold: t,
                intents: n,
                improved_pct: pct(improved),
                high_accuracy_diff: pct(high_v) - pct(high_b),
            }
        })
        .collect()
}

/// Per-intent differences `variant - baseline`, ascending.
pub fn sorted_deltas(baseline: &BTreeMap<String, IntentAccuracy>, variant: &BTreeMap<String, IntentAccuracy>) -> Vec<f64> {
    let mut d: Vec<f64> = baseline
        .iter()
        .map(|(k, b)| variant.get(k).map_or(0.0, |v| v.accuracy) - b.accuracy)
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

fn shares(reference: &[UtteranceFields], generated: &[UtteranceFields], labels: &[String], get: fn(&UtteranceFields) -> &String) -> Vec<LabelShare> {
    let frac = |xs: &[UtteranceFields], l: &String| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().filter(|u| get(u) == l).count() as f64 / xs.len() as f64
        }
    };
    labels
        .iter()
        .map(|l| LabelShare {
            label: l.clone(),
            reference: frac(reference, l),
            generated: frac(generated, l),
        })
        .collect()
}

pub fn field_distribution(reference: &Dataset, generated: &Dataset) -> FieldDistribution {
    let r: Vec<UtteranceFields> = reference.instances.iter().map(|i| i.utterance()).collect();
    let g: Vec<UtteranceFields> = generated.instances.iter().map(|i| i.utterance()).collect();
    FieldDistribution {
        device_type: shares(&r, &g, &reference.schema.device_types, |u| &u.device_type),
        device_status: shares(&r, &g, &reference.schema.device_statuses, |u| &u.device_status),
    }
}

struct Scores {
    overall: f64,
    tail: f64,
    per_intent: BTreeMap<String, IntentAccuracy>,
}

fn score(train: &Dataset, setup: &ExtrinsicSetup<'_>) -> Result<Scores> {
    let empty = train.with_instances(Vec::new(), SplitTag::Valid);
    let valid = setup.valid.unwrap_or(&empty);
    let k = setup.router_seeds.len() as f64;
    let mut overall = 0.0;
    let mut tail = 0.0;
    // Hits are pooled over seeds and divided once, so equal means compare
    // equal bit for bit.
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for &seed in &setup.router_seeds {
        let cfg = RouterConfig {
            seed,
            ..setup.router.clone()
        };
        let (router, _) = train_router(train, valid, &cfg)?;
        overall += replication_accuracy(&router, setup.test)? / k;
        tail += replication_accuracy(&router, setup.tail_test)? / k;
        for (intent, a) in per_intent_accuracy(&router, setup.tail_test)? {
            let e = hits.entry(intent).or_default();
            e.0 += (a.accuracy * a.count as f64).round() as usize;
            e.1 += a.count;
        }
    }
    let per_intent = hits
        .into_iter()
        .map(|(intent, (c, n))| {
            let accuracy = c as f64 / n as f64;
            (intent, IntentAccuracy { accuracy, count: n / setup.router_seeds.len() })
        })
        .collect();
    Ok(Scores { overall, tail, per_intent })
}

/// Trains the baseline once and every variant with the same router seeds,
/// then derives the threshold and delta series against the baseline. A
/// variant that fails is reported as failed; the baseline failing is an
/// error.
pub fn run_extrinsic_eval(setup: &ExtrinsicSetup<'_>, variants: &[Variant<'_>]) -> Result<ExtrinsicReport> {
    if setup.router_seeds.is_empty() {
        return Err(Error::Input("at least one router seed is required".into()));
    }
    if setup.tail.is_empty() || setup.tail_test.is_empty() || setup.test.is_empty() {
        return Err(Error::Input("tail, test and tail-test sets must be non-empty".into()));
    }
    let mut thresholds = setup.thresholds.clone();
    thresholds.sort_unstable();
    thresholds.dedup();
    let base_train = Dataset::concat(&[setup.head, setup.tail], SplitTag::Train)?;
    let train_counts = base_train.intent_counts();
    let intent_counts: BTreeMap<String, usize> = setup
        .tail_test
        .intent_counts()
        .into_keys()
        .map(|i| {
            let c = train_counts.get(&i).copied().unwrap_or(0);
            (i, c)
        })
        .collect();

    let base = score(&base_train, setup)?;
    let baseline = VariantResult {
        name: "baseline".into(),
        config: None,
        failure: None,
        train_size: base_train.len(),
        augmented: 0,
        dropped: 0,
        overall_accuracy: Some(base.overall),
        tail_accuracy: Some(base.tail),
        thresholds: threshold_series(&base.per_intent, &base.per_intent, &intent_counts, &thresholds),
        sorted_deltas: sorted_deltas(&base.per_intent, &base.per_intent),
        per_intent: base.per_intent,
        fields: None,
    };

    let mut results = Vec::with_capacity(variants.len());
    for v in variants {
        let run = || -> Result<VariantResult> {
            let aug = build_augmentation_set(setup.tail, v.augmenter, &v.config)?;
            let train = Dataset::concat(&[setup.head, setup.tail, &aug.dataset], SplitTag::Train)?;
            let s = score(&train, setup)?;
            Ok(VariantResult {
                name: v.name.clone(),
                config: Some(v.config.clone()),
                failure: None,
                train_size: train.len(),
                augmented: aug.dataset.len(),
                dropped: aug.dropped,
                overall_accuracy: Some(s.overall),
                tail_accuracy: Some(s.tail),
                thresholds: threshold_series(&baseline.per_intent, &s.per_intent, &intent_counts, &thresholds),
                sorted_deltas: sorted_deltas(&baseline.per_intent, &s.per_intent),
                per_intent: s.per_intent,
                fields: Some(field_distribution(setup.tail, &aug.dataset)),
            })
        };
        results.push(run().unwrap_or_else(|e| VariantResult::failed(v.name.clone(), Some(v.config.clone()), &e)));
    }
    Ok(ExtrinsicReport {
        thresholds,
        router_seeds: setup.router_seeds.clone(),
        intent_counts,
        baseline,
        variants: results,
    })
}
