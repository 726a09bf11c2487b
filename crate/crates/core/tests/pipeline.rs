use std::collections::BTreeMap;

use hetaug_core::corpus::{
    generate_corpus, split_head_tail, tail_intents, ConfidenceBin, CorpusSchema, Dataset, RoutingInstance, SplitTag,
    SyntheticSchemaOptions, UtteranceFields,
};
use hetaug_core::metrics::unique_rate;
use hetaug_core::pipeline::{
    build_augmentation_set, emit_report, oversample, run_extrinsic_eval, sorted_deltas, threshold_series,
    AugmentationConfig, Augmenter, AugmenterKind, Duplicate, ExtrinsicSetup, Variant, FIG_FIELDS, FIG_HIGH_ACCURACY,
    FIG_IMPROVEMENT, FIG_SORTED_DELTA, TABLE_FILE,
};
use hetaug_core::router::{per_intent_accuracy, train_router, IntentAccuracy, RouterConfig};
use hetaug_core::{Error, Result};
use rand_chacha::ChaCha8Rng;

fn schema() -> CorpusSchema {
    CorpusSchema::synthetic(&SyntheticSchemaOptions {
        intents_per_domain: 5,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_router() -> RouterConfig {
    RouterConfig {
        word_embedding_dim: 8,
        categorical_embedding_dim: 4,
        text_encoder_hidden: 8,
        hypothesis_sequence_hidden: 8,
        mlp_hidden: 8,
        epochs: 2,
        ..Default::default()
    }
}

struct Foreign;

impl Augmenter for Foreign {
    fn schema_hash(&self) -> Option<&str> {
        Some("not-this-schema")
    }
    fn replaces_categoricals(&self) -> bool {
        true
    }
    fn generate(&self, i: &[RoutingInstance], n: usize, r: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>> {
        Duplicate.generate(i, n, r)
    }
}

struct Broken;

impl Augmenter for Broken {
    fn schema_hash(&self) -> Option<&str> {
        None
    }
    fn replaces_categoricals(&self) -> bool {
        true
    }
    fn generate(&self, _: &[RoutingInstance], _: usize, _: &mut ChaCha8Rng) -> Result<Vec<Vec<UtteranceFields>>> {
        Err(Error::GenerationExhausted("always".into()))
    }
}

#[test]
fn identity_ratio_one_reproduces_tail_with_fresh_ids() {
    let data = generate_corpus(&schema(), 300, 3).unwrap();
    let cfg = AugmentationConfig::new(AugmenterKind::Oversample, 1);
    let set = build_augmentation_set(&data, &Duplicate, &cfg).unwrap();
    assert_eq!(set.dataset.split, SplitTag::Augmented);
    assert_eq!((set.requested, set.dropped), (300, 0));
    for (a, b) in set.dataset.instances.iter().zip(&data.instances) {
        assert_ne!(a.instance_id, b.instance_id);
        assert_eq!(a.hypotheses, b.hypotheses);
        assert_eq!(a.logged_action, b.logged_action);
    }
    let ids: std::collections::BTreeSet<_> = set.dataset.instances.iter().map(|i| &i.instance_id).collect();
    assert_eq!(ids.len(), 300);
}

#[test]
fn ratio_five_gives_five_times_the_tail() {
    let data = generate_corpus(&schema(), 120, 4).unwrap();
    let set = build_augmentation_set(&data, &Duplicate, &AugmentationConfig::new(AugmenterKind::Seq2seq, 5)).unwrap();
    assert_eq!(set.dataset.len(), 600);
    assert_eq!(set.dropped, 0);
}

#[test]
fn nlubin_redraws_each_hypothesis_bin_at_the_configured_rate() {
    // Every hypothesis starts at HIGH; a redraw keeps HIGH with probability
    // 1/3, so the observed change rate estimates 2/3 of the redraw rate.
    let mut data = generate_corpus(&schema(), 4000, 5).unwrap();
    for inst in &mut data.instances {
        for h in &mut inst.hypotheses {
            h.confidence_bin = ConfidenceBin::High;
        }
    }
    let total: usize = data.instances.iter().map(|i| i.hypotheses.len()).sum();
    assert!(total >= 10_000, "{total}");
    let cfg = AugmentationConfig {
        nlubin_prob: 0.8,
        seed: 11,
        ..AugmentationConfig::new(AugmenterKind::Seq2seq, 1)
    };
    let set = build_augmentation_set(&data, &Duplicate, &cfg).unwrap();
    let changed = set
        .dataset
        .instances
        .iter()
        .flat_map(|i| &i.hypotheses)
        .filter(|h| h.confidence_bin != ConfidenceBin::High)
        .count();
    let rate = changed as f64 / total as f64 * 1.5;
    assert!((rate - 0.8).abs() <= 0.02, "{rate}");

    // Everything except the bins is untouched.
    for (a, b) in set.dataset.instances.iter().zip(&data.instances) {
        assert_eq!(a.logged_action, b.logged_action);
        for (x, y) in a.hypotheses.iter().zip(&b.hypotheses) {
            let mut x = x.clone();
            x.confidence_bin = y.confidence_bin;
            assert_eq!(&x, y);
        }
    }
}

#[test]
fn augmentation_is_deterministic_in_its_seed() {
    let data = generate_corpus(&schema(), 200, 6).unwrap();
    let cfg = AugmentationConfig {
        nlubin_prob: 0.8,
        seed: 3,
        ..AugmentationConfig::new(AugmenterKind::Mlm, 2)
    };
    let a = build_augmentation_set(&data, &Duplicate, &cfg).unwrap();
    let b = build_augmentation_set(&data, &Duplicate, &cfg).unwrap();
    assert_eq!(a.dataset.instances, b.dataset.instances);
    let c = build_augmentation_set(&data, &Duplicate, &AugmentationConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.dataset.instances, c.dataset.instances);
}

#[test]
fn invalid_inputs_are_rejected() {
    let data = generate_corpus(&schema(), 50, 7).unwrap();
    let cfg = AugmentationConfig::new(AugmenterKind::Seq2seq, 1);
    assert!(matches!(build_augmentation_set(&data, &Foreign, &cfg), Err(Error::Schema(_))));
    let empty = data.with_instances(Vec::new(), SplitTag::Train);
    assert!(matches!(build_augmentation_set(&empty, &Duplicate, &cfg), Err(Error::Input(_))));
    for bad in [
        AugmentationConfig::new(AugmenterKind::Seq2seq, 0),
        AugmentationConfig {
            nlubin_prob: 1.5,
            ..cfg.clone()
        },
    ] {
        assert!(matches!(build_augmentation_set(&data, &Duplicate, &bad), Err(Error::Input(_))));
    }
    assert!(matches!(oversample(&data, 0), Err(Error::Input(_))));
}

#[test]
fn oversampling_copies_verbatim_and_scales_unique_rate() {
    let data = generate_corpus(&schema(), 150, 8).unwrap();
    let one = oversample(&data, 1).unwrap();
    assert_eq!(one.len(), data.len());
    let texts = |d: &Dataset| d.instances.iter().map(|i| i.hypotheses[0].text.clone()).collect::<Vec<_>>();
    assert_eq!(texts(&one), texts(&data));
    let five = oversample(&data, 5).unwrap();
    assert_eq!(five.len(), 750);
    for (k, chunk) in five.instances.chunks(150).enumerate() {
        for (a, b) in chunk.iter().zip(&data.instances) {
            assert_eq!(a.hypotheses, b.hypotheses);
            assert_eq!(a.instance_id, format!("{}#over.{k}", b.instance_id));
        }
    }
    let base = unique_rate(&texts(&data)).unwrap();
    let over = unique_rate(&texts(&five)).unwrap();
    assert!((over - base / 5.0).abs() < 1e-12);
}

#[test]
fn labels_name_the_variant() {
    let mut cfg = AugmentationConfig::new(AugmenterKind::Seq2seq, 5);
    assert_eq!(cfg.label(), "seq2seq-x5");
    cfg.nlubin_prob = 0.8;
    assert_eq!(cfg.label(), "seq2seq-x5-nlubin");
}

fn acc(pairs: &[(&str, f64)]) -> BTreeMap<String, IntentAccuracy> {
    pairs
        .iter()
        .map(|(k, a)| (k.to_string(), IntentAccuracy { accuracy: *a, count: 10 }))
        .collect()
}

#[test]
fn threshold_series_hand_case() {
    let base = acc(&[("a", 0.5), ("b", 0.99), ("c", 0.9), ("d", 0.2)]);
    let var = acc(&[("a", 0.6), ("b", 0.97), ("c", 0.995), ("d", 0.2)]);
    let counts: BTreeMap<String, usize> = [("a", 5), ("b", 20), ("c", 50), ("d", 500)]
        .iter()
        .map(|(k, c)| (k.to_string(), *c))
        .collect();
    let s = threshold_series(&base, &var, &counts, &[10, 100, 1000]);
    assert_eq!(s.iter().map(|p| p.intents).collect::<Vec<_>>(), vec![1, 3, 4]);
    // < 10: {a}: improved. < 100: {a, b, c}: a and c improved; high
    // accuracy b -> c leaves the count unchanged. < 1000 adds d (tie).
    assert_eq!(s[0].improved_pct, 100.0);
    assert!((s[1].improved_pct - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(s[1].high_accuracy_diff, 0.0);
    assert_eq!(s[2].improved_pct, 50.0);
    assert_eq!(sorted_deltas(&base, &var), {
        let mut d = vec![0.6 - 0.5, 0.97 - 0.99, 0.995 - 0.9, 0.0];
        d.sort_by(f64::total_cmp);
        d
    });
}

fn long_tail() -> (Dataset, Dataset, Dataset) {
    let s = CorpusSchema::synthetic(&SyntheticSchemaOptions {
        intents_per_domain: 4,
        ..Default::default()
    })
    .unwrap();
    let train = generate_corpus(&s, 600, 21).unwrap();
    let test = generate_corpus(&s, 200, 22).unwrap();
    let (head, tail) = split_head_tail(&train, 40);
    assert!(!tail.is_empty() && !head.is_empty());
    let tails = tail_intents(&train, 40);
    let tail_test = test.with_instances(
        test.instances
            .iter()
            .filter(|i| tails.iter().any(|t| t == i.logged_intent()))
            .cloned()
            .collect(),
        SplitTag::Test,
    );
    (head, tail, tail_test)
}

#[test]
fn extrinsic_eval_contracts() {
    let (head, tail, tail_test) = long_tail();
    let test = Dataset::concat(&[&tail_test], SplitTag::Test).unwrap();
    let setup = ExtrinsicSetup {
        head: &head,
        tail: &tail,
        valid: None,
        test: &test,
        tail_test: &tail_test,
        thresholds: vec![1000, 10, 100],
        router: tiny_router(),
        router_seeds: vec![5],
    };

    let baseline_only = run_extrinsic_eval(&setup, &[]).unwrap();
    assert!(baseline_only.baseline.thresholds.iter().all(|p| p.improved_pct == 0.0 && p.high_accuracy_diff == 0.0));
    assert!(baseline_only.baseline.sorted_deltas.iter().all(|d| *d == 0.0));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    assert!(emit_report(&baseline_only, &out).is_err());
    assert!(!out.exists());

    let dup = AugmentationConfig::new(AugmenterKind::Oversample, 1);
    let variants = [Variant::new(&Duplicate, dup.clone()), Variant::new(&Broken, AugmentationConfig::new(AugmenterKind::Mlm, 1))];
    let report = run_extrinsic_eval(&setup, &variants).unwrap();
    assert_eq!(report.thresholds, vec![10, 100, 1000]);
    assert_eq!(report.baseline, baseline_only.baseline);

    let ok = &report.variants[0];
    assert!(ok.succeeded());
    assert_eq!(ok.train_size, head.len() + 2 * tail.len());
    let sizes: Vec<usize> = ok.thresholds.iter().map(|p| p.intents).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    for p in &ok.thresholds {
        assert!((0.0..=100.0).contains(&p.improved_pct));
    }
    assert!(report.variants[1].failure.as_deref().is_some_and(|m| m.contains("always")));

    // Duplicating the tail once is oversampling it twice.
    let train = Dataset::concat(&[&head, &oversample(&tail, 2).unwrap()], SplitTag::Train).unwrap();
    let empty = train.with_instances(Vec::new(), SplitTag::Valid);
    let cfg = RouterConfig { seed: 5, ..tiny_router() };
    let (router, _) = train_router(&train, &empty, &cfg).unwrap();
    let direct = per_intent_accuracy(&router, &tail_test).unwrap();
    assert_eq!(direct, ok.per_intent);

    let paths = emit_report(&report, &out).unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, [TABLE_FILE, FIG_IMPROVEMENT, FIG_HIGH_ACCURACY, FIG_SORTED_DELTA, FIG_FIELDS]);
    let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let table = String::from_utf8(first[0].clone()).unwrap();
    assert!(table.contains("# threshold") && table.contains("oversample-x1") && table.contains("failed: "));

    let json = serde_json::to_string(&report).unwrap();
    let back = serde_json::from_str(&json).unwrap();
    assert_eq!(report, back);
    let again = emit_report(&back, &out).unwrap();
    let second: Vec<Vec<u8>> = again.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}
