use hetaug_core::corpus::{
    generate_corpus, generate_for_intents, load_dataset, save_dataset, split_head_tail, tail_intents,
    CorpusSchema, Dataset, SplitTag, SyntheticSchemaOptions,
};
use hetaug_core::Error;
use proptest::prelude::*;

fn schema() -> CorpusSchema {
    CorpusSchema::synthetic(&SyntheticSchemaOptions::default()).unwrap()
}

fn small_schema() -> CorpusSchema {
    CorpusSchema::synthetic(&SyntheticSchemaOptions {
        intents_per_domain: 5,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn zipf_extremes_ratio_matches_the_analytic_law() {
    let s = schema();
    let d = generate_corpus(&s, 10_000, 7).unwrap();
    assert_eq!(d.len(), 10_000);
    let counts = d.intent_counts();
    let max = *counts.values().max().unwrap() as f64;
    let min = *counts.values().min().unwrap() as f64;
    // Expected count of rank k is size * k^-s / H; the ratio of ranks 1 and K
    // is K^s independent of H.
    let k = s.intents.len() as f64;
    let predicted: f64 = (1.0f64).powf(-1.2) / k.powf(-1.2);
    let observed = max / min;
    assert!(
        (observed / predicted - 1.0).abs() <= 0.2,
        "observed {observed}, predicted {predicted}"
    );
}

#[test]
fn rank_frequency_curve_is_non_increasing() {
    let s = schema();
    let d = generate_corpus(&s, 10_000, 3).unwrap();
    let counts = d.intent_counts();
    let by_rank: Vec<usize> = s
        .frequency_rank
        .iter()
        .map(|i| counts.get(i).copied().unwrap_or(0))
        .collect();
    assert!(by_rank.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn single_instance_corpus() {
    let d = generate_corpus(&small_schema(), 1, 0).unwrap();
    assert_eq!(d.len(), 1);
    let inst = &d.instances[0];
    assert!(inst.logged_action < inst.hypotheses.len());
}

#[test]
fn zero_size_is_rejected() {
    assert!(matches!(generate_corpus(&small_schema(), 0, 0), Err(Error::Input(_))));
}

#[test]
fn empty_template_set_is_a_schema_error() {
    let mut s = small_schema();
    s.intents[3].templates.clear();
    assert!(matches!(generate_corpus(&s, 10, 0), Err(Error::Schema(_))));
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let s = schema();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    save_dataset(&generate_corpus(&s, 500, 11).unwrap(), &a).unwrap();
    save_dataset(&generate_corpus(&s, 500, 11).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    save_dataset(&generate_corpus(&s, 500, 12).unwrap(), &b).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn generated_instances_satisfy_shape_invariants() {
    let s = schema();
    let d = generate_corpus(&s, 3000, 5).unwrap();
    d.validate().unwrap();
    let mut n_seen = [0usize; 6];
    for inst in &d.instances {
        let first = &inst.hypotheses[0];
        for h in &inst.hypotheses {
            assert_eq!(
                (&h.text, &h.device_type, &h.device_status),
                (&first.text, &first.device_type, &first.device_status)
            );
        }
        let logged = inst.logged();
        let tokens: Vec<&str> = logged.text.split_whitespace().collect();
        for slot in &logged.nlu.slots {
            let span: Vec<&str> = slot.value.split_whitespace().collect();
            assert!(
                tokens.windows(span.len()).any(|w| w == span.as_slice()),
                "slot `{}` not grounded in `{}`",
                slot.value,
                logged.text
            );
        }
        let spec = s.intent(&logged.nlu.intent).unwrap();
        assert_eq!(spec.skill, logged.skill);
        n_seen[inst.hypotheses.len()] += 1;
        let mut pairs: Vec<(&str, &str)> = inst
            .hypotheses
            .iter()
            .map(|h| (h.nlu.intent.as_str(), h.skill.as_str()))
            .collect();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), inst.hypotheses.len(), "distractors must be distinct");
    }
    assert!(n_seen[1..=5].iter().all(|&c| c > 0));
}

#[test]
fn split_thresholds() {
    let d = generate_corpus(&schema(), 10_000, 7).unwrap();
    let (head, tail) = split_head_tail(&d, 1);
    assert!(tail.is_empty());
    assert_eq!(head, d);
    let max = *d.intent_counts().values().max().unwrap();
    let (head, tail) = split_head_tail(&d, max + 1);
    assert!(head.is_empty());
    assert_eq!(tail, d);

    let (head, tail) = split_head_tail(&d, 100);
    assert_eq!(head.len() + tail.len(), 10_000);
    let full = d.intent_counts();
    for (intent, _) in tail.intent_counts() {
        assert!(full[&intent] < 100);
    }
    for (intent, _) in head.intent_counts() {
        assert!(full[&intent] >= 100);
    }
    let tails = tail_intents(&d, 100);
    assert_eq!(tails.len(), tail.intent_counts().len());
}

#[test]
fn tail_test_set_covers_requested_intents_evenly() {
    let s = schema();
    let d = generate_corpus(&s, 10_000, 7).unwrap();
    let tails = tail_intents(&d, 30);
    let t = generate_for_intents(&s, &tails, 1000, 9, SplitTag::TestTail).unwrap();
    let counts = t.intent_counts();
    assert_eq!(counts.len(), tails.len());
    let lo = *counts.values().min().unwrap();
    let hi = *counts.values().max().unwrap();
    assert!(hi - lo <= 1);
    assert!(t.instances.iter().all(|i| i.instance_id.starts_with('t')));
}

fn round_trip(d: &Dataset) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    save_dataset(d, &p).unwrap();
    load_dataset(&p).unwrap()
}

#[test]
fn round_trips_preserve_every_field_and_order() {
    let s = schema();
    let one = generate_corpus(&s, 1, 0).unwrap();
    assert_eq!(round_trip(&one), one);
    let big = generate_corpus(&s, 10_000, 1).unwrap();
    let back = round_trip(&big);
    assert_eq!(back, big);
    let ids: Vec<_> = back.instances.iter().map(|i| &i.instance_id).collect();
    let orig: Vec<_> = big.instances.iter().map(|i| &i.instance_id).collect();
    assert_eq!(ids, orig);
}

#[test]
fn record_format_uses_flat_hypothesis_maps() {
    let d = generate_corpus(&small_schema(), 1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    save_dataset(&d, &p).unwrap();
    let line = std::fs::read_to_string(&p).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["instance_id"].is_string());
    assert!(v["logged_action"].is_u64());
    let h = &v["hypotheses"][0];
    for key in ["text", "device_type", "device_status", "domain", "intent", "slots", "confidence_bin", "skill"] {
        assert!(!h[key].is_null(), "missing key {key}");
    }
}

#[test]
fn malformed_records_name_their_line() {
    let d = generate_corpus(&small_schema(), 3, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    save_dataset(&d, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    v.as_object_mut().unwrap().remove("logged_action");
    lines[1] = v.to_string();
    std::fs::write(&p, lines.join("\n")).unwrap();
    match load_dataset(&p) {
        Err(Error::Parse { line, msg }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("logged_action"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }

    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    v["hypotheses"][0]["device_type"] = "toaster".into();
    lines[0] = v.to_string();
    std::fs::write(&p, lines.join("\n")).unwrap();
    assert!(matches!(load_dataset(&p), Err(Error::Parse { line: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn head_and_tail_partition_the_dataset(threshold in 1usize..400, seed in 0u64..1000) {
        let s = small_schema();
        let d = generate_corpus(&s, 800, seed).unwrap();
        let (head, tail) = split_head_tail(&d, threshold);
        prop_assert_eq!(head.len() + tail.len(), d.len());
        let mut ids: Vec<&String> = head.instances.iter().chain(&tail.instances).map(|i| &i.instance_id).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), d.len());
        let counts = d.intent_counts();
        prop_assert!(tail.instances.iter().all(|i| counts[i.logged_intent()] < threshold));
        prop_assert!(head.instances.iter().all(|i| counts[i.logged_intent()] >= threshold));
    }
}
