mod common;

use std::collections::BTreeSet;

use hetaug_autograd::{Graph, ParamStore, Tensor};
use hetaug_core::corpus::{
    generate_corpus, CorpusSchema, NluInterpretation, Slot, SyntheticSchemaOptions, UtteranceFields,
};
use hetaug_core::sampling::SamplingConfig;
use hetaug_core::seq2seq::{
    face_loss, face_loss_graph, face_post_weight, face_pre_raw_weights, face_pre_weights, masked_contrastive_graph,
    masked_contrastive_loss, masked_contrastive_terms, train_seq2seq, FaceMode, FaceWeighting, Seq2SeqConfig,
    Seq2SeqParams, Seq2SeqVocab, TokenFrequencyTable, EOS,
};
use hetaug_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn schema() -> CorpusSchema {
    CorpusSchema::synthetic(&SyntheticSchemaOptions {
        intents_per_domain: 3,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_config() -> Seq2SeqConfig {
    Seq2SeqConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        model_dim: 16,
        heads: 2,
        ..Default::default()
    }
}

// ----- layout ---------------------------------------------------------------

#[test]
fn serialization_is_deterministic_and_localised() {
    let s = schema();
    let v = Seq2SeqVocab::build(&s, ["play some music"]);
    let a = &s.intents[0];
    let b = s.intents.iter().find(|i| i.domain == a.domain && i.name != a.name).unwrap();
    let nlu = |intent: &str| NluInterpretation {
        domain: a.domain.clone(),
        intent: intent.into(),
        slots: vec![Slot {
            key: a.slot_keys[0].clone(),
            value: "x".into(),
        }],
    };
    let x1 = v.serialize_condition(&nlu(&a.name), &a.skill).unwrap();
    assert_eq!(x1, v.serialize_condition(&nlu(&a.name), &a.skill).unwrap());
    let x2 = v.serialize_condition(&nlu(&b.name), &a.skill).unwrap();
    let diff: Vec<usize> = (0..x1.len()).filter(|&i| x1[i] != x2[i]).collect();
    assert_eq!(x1.len(), x2.len());
    assert_eq!(diff, vec![3]);
    let words: Vec<&str> = x1.iter().map(|&i| v.tokens.token(i)).collect();
    assert_eq!(
        words,
        vec!["<DOM>", &a.domain, "<INT>", &a.name, "<SLOT>", &a.slot_keys[0], "<SKILL>", &a.skill, "<X0>", "<X1>", "<X2>"]
    );
    assert!(matches!(
        v.serialize_condition(&nlu("no.such_intent"), &a.skill),
        Err(Error::Vocabulary(_))
    ));
}

#[test]
fn target_parse_inverts_serialization() {
    let s = schema();
    let corpus = generate_corpus(&s, 300, 4).unwrap();
    let v = Seq2SeqVocab::build(&s, corpus.instances.iter().map(|i| i.hypotheses[0].text.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for inst in corpus.instances.iter().take(100) {
        let mut u = inst.utterance();
        u.device_type = s.device_types[rng.random_range(0..s.device_types.len())].clone();
        u.device_status = s.device_statuses[rng.random_range(0..s.device_statuses.len())].clone();
        let ids = v.serialize_target(&u).unwrap();
        assert_eq!(v.parse_target(&ids).unwrap(), u);
        // Sentinels in the target appear in input order.
        let sent: Vec<&str> = ids.iter().map(|&i| v.tokens.token(i)).filter(|t| t.starts_with("<X")).collect();
        assert_eq!(sent, vec!["<X0>", "<X1>", "<X2>"]);
    }
}

proptest! {
    #[test]
    fn non_viable_prefix_never_parses(inst in 0usize..50, pos in 0usize..8, tok in 0usize..10_000, extra in proptest::collection::vec(0usize..10_000, 0..4)) {
        let s = schema();
        let corpus = generate_corpus(&s, 50, 4).unwrap();
        let v = Seq2SeqVocab::build(&s, corpus.instances.iter().map(|i| i.hypotheses[0].text.as_str()));
        let mut ids = v.serialize_target(&corpus.instances[inst].utterance()).unwrap();
        let eos = ids.len() - 1;
        let pos = pos.min(eos - 1);
        ids[pos] = tok % v.len();
        // Arbitrary tokens after the mutation, still before <EOS>.
        ids.splice(pos + 1..pos + 1, extra.iter().map(|t| t % v.len()));
        let end = ids.iter().position(|&i| i == v.id(EOS)).unwrap();
        let body = &ids[..end];
        let viable = body.iter().enumerate().all(|(p, &i)| v.viable_at(p, i));
        if !viable {
            prop_assert!(v.parse_target(&ids).is_err());
        }
        if v.parse_target(&ids).is_ok() {
            prop_assert!(viable);
        }
    }
}

#[test]
fn malformed_targets_are_rejected() {
    let s = schema();
    let v = Seq2SeqVocab::build(&s, ["hello there"]);
    let u = UtteranceFields {
        text: "hello there".into(),
        device_type: s.device_types[0].clone(),
        device_status: s.device_statuses[0].clone(),
    };
    let good = v.serialize_target(&u).unwrap();
    assert!(v.parse_target(&good[..good.len() - 1]).is_err());
    let mut swapped = good.clone();
    swapped.swap(1, 3);
    assert!(v.parse_target(&swapped).is_err());
    let mut no_words = good[..5].to_vec();
    no_words.push(*good.last().unwrap());
    assert!(v.parse_target(&no_words).is_err());
    assert!(v.parse_target(&good[1..]).is_err());
}

// ----- FACE -----------------------------------------------------------------

#[test]
fn pre_weights_match_hand_arithmetic() {
    let t = TokenFrequencyTable::from_counts(vec![5, 3, 2]);
    let raw = face_pre_raw_weights(&t).unwrap();
    for (a, b) in raw.iter().zip([0.0, 0.4, 0.6]) {
        assert!(close(*a, b, 1e-12));
    }
    let norm = face_pre_weights(&t).unwrap();
    assert!(!norm.fell_back);
    for (a, b) in norm.weights.iter().zip([0.0, 1.2, 1.8]) {
        assert!(close(*a, b, 1e-12));
    }
    let uniform = face_pre_weights(&TokenFrequencyTable::from_counts(vec![4, 4, 4])).unwrap();
    assert!(uniform.fell_back);
    assert_eq!(uniform.weights, vec![1.0; 3]);
    let with_zero = face_pre_raw_weights(&TokenFrequencyTable::from_counts(vec![4, 0, 1])).unwrap();
    assert_eq!(with_zero[1], 1.0);
    assert!(matches!(
        face_pre_raw_weights(&TokenFrequencyTable::from_counts(vec![0, 0])),
        Err(Error::Input(_))
    ));
}

#[test]
fn post_weight_examples() {
    // f = (0.5, 0.1, 0.4)
    let t = TokenFrequencyTable::from_counts(vec![5, 1, 4]);
    assert_eq!(face_post_weight(1, 1, &t), 1.0);
    assert!(close(face_post_weight(0, 1, &t), 1.4, 1e-12));
    assert_eq!(face_post_weight(1, 0, &t), 1.0);
}

fn hand_nll(row: &[f64], t: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    -(row[t].exp() / z).ln()
}

#[test]
fn face_loss_on_a_three_step_toy() {
    let rows = vec![vec![2.0, 0.5, -1.0], vec![0.1, 0.2, 3.0], vec![1.0, 1.0, 0.0]];
    let logits = Tensor::<f64>::from_rows(&rows);
    let targets = [1usize, 2, 0];
    // f = (0.5, 0.3, 0.2): raw pre (0, 0.4, 0.6), normalized (0, 1.2, 1.8).
    let t = TokenFrequencyTable::from_counts(vec![5, 3, 2]);
    let pre = FaceWeighting::new(FaceMode::PreWeight, &t, false).unwrap();
    let hand_pre = 1.2 * hand_nll(&rows[0], 1) + 1.8 * hand_nll(&rows[1], 2) + 0.0 * hand_nll(&rows[2], 0);
    assert!(close(face_loss(&logits, &targets, &pre).unwrap(), hand_pre, 1e-6));
    // Argmax predictions (0, 2, 0): step 0 over-predicts a frequent token.
    let post = FaceWeighting::new(FaceMode::PostWeight, &t, false).unwrap();
    let hand_post = (1.0 + (0.5 - 0.3)) * hand_nll(&rows[0], 1) + hand_nll(&rows[1], 2) + hand_nll(&rows[2], 0);
    assert!(close(face_loss(&logits, &targets, &post).unwrap(), hand_post, 1e-6));
    let raw = FaceWeighting::new(FaceMode::PreWeight, &t, true).unwrap();
    let hand_raw = 0.4 * hand_nll(&rows[0], 1) + 0.6 * hand_nll(&rows[1], 2);
    assert!(close(face_loss(&logits, &targets, &raw).unwrap(), hand_raw, 1e-6));
    assert!(matches!(face_loss(&logits, &targets[..2], &pre), Err(Error::Input(_))));
}

#[test]
fn face_reductions_to_plain_cross_entropy() {
    let ps = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits_t = Tensor::<f64>::normal(4, 3, 1.0, &mut rng);
    let targets = [0usize, 2, 1, 1];
    let plain = {
        let mut g = Graph::inference(&ps);
        let l = g.constant(logits_t.clone());
        let ce = g.cross_entropy(l, &targets, None);
        g.item(ce)
    };
    let off = {
        let mut g = Graph::inference(&ps);
        let l = g.constant(logits_t.clone());
        let v = face_loss_graph(&mut g, l, &targets, &FaceWeighting::off()).unwrap();
        g.item(v)
    };
    assert_eq!(plain.to_bits(), off.to_bits());
    let uniform = TokenFrequencyTable::from_counts(vec![2, 2, 2]);
    let pre = FaceWeighting::new(FaceMode::PreWeight, &uniform, false).unwrap();
    assert!(pre.fell_back);
    assert!(close(face_loss(&logits_t, &targets, &pre).unwrap(), plain, 1e-12));
    // Post-weights with every argmax correct are all 1.
    let argmax: Vec<usize> = (0..4).map(|r| logits_t.argmax_row(r)).collect();
    let post = FaceWeighting::new(FaceMode::PostWeight, &TokenFrequencyTable::from_counts(vec![7, 1, 2]), false).unwrap();
    let mut g = Graph::inference(&ps);
    let l = g.constant(logits_t.clone());
    let ce = g.cross_entropy(l, &argmax, None);
    let expect = g.item(ce);
    assert!(close(face_loss(&logits_t, &argmax, &post).unwrap(), expect, 1e-12));
}

proptest! {
    #[test]
    fn face_weight_invariants(counts in proptest::collection::vec(0u64..50, 2..12)) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let t = TokenFrequencyTable::from_counts(counts.clone());
        let raw = face_pre_raw_weights(&t).unwrap();
        prop_assert!(raw.iter().all(|&w| (0.0..=1.0).contains(&w)));
        let max = *counts.iter().max().unwrap();
        if counts.iter().filter(|&&c| c == max).count() == 1 {
            prop_assert_eq!(raw.iter().filter(|&&w| w == 0.0).count(), 1);
        }
        for p in 0..counts.len() {
            for q in 0..counts.len() {
                let w = face_post_weight(p, q, &t);
                prop_assert!(w >= 1.0);
                if counts[p] <= counts[q] {
                    prop_assert_eq!(w, 1.0);
                }
            }
        }
    }
}

// ----- masked contrastive loss ----------------------------------------------

fn keys(k: &[&str]) -> Vec<String> {
    k.iter().map(|s| s.to_string()).collect()
}

#[test]
fn contrastive_closed_form() {
    let zx = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let zy = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let t = masked_contrastive_terms(&zx, &zy, &keys(&["a", "b"]), 1.0).unwrap();
    let e = 1f64.exp();
    assert!(close(t[0], -(e / (e + 1.0)).ln(), 1e-12));
    assert_eq!(masked_contrastive_loss(&zx, &zy, &keys(&["a", "a"]), 1.0).unwrap(), 0.0);
    assert!(matches!(
        masked_contrastive_loss(&zx[..1], &zy[..1], &keys(&["a"]), 1.0),
        Err(Error::Input(_))
    ));
}

#[test]
fn contrastive_graph_matches_plain_function() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zx = Tensor::<f64>::normal(5, 4, 1.0, &mut rng);
    let zy = Tensor::<f64>::normal(5, 4, 1.0, &mut rng);
    let k = keys(&["a", "b", "a", "c", "c"]);
    let rows = |t: &Tensor<f64>| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
    let expect = masked_contrastive_loss(&rows(&zx), &rows(&zy), &k, 0.1).unwrap();
    let ps = ParamStore::<f64>::new();
    let mut g = Graph::inference(&ps);
    let a = g.constant(zx);
    let b = g.constant(zy);
    let l = masked_contrastive_graph(&mut g, a, b, &k, 0.1).unwrap();
    assert!(close(g.item(l), expect, 1e-9));
}

#[test]
fn mask_is_vacuous_when_conditions_are_unique() {
    let zx = vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![-0.5, 0.5]];
    let zy = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.1, -1.0]];
    let unique = masked_contrastive_loss(&zx, &zy, &keys(&["a", "b", "c"]), 0.5).unwrap();
    let other = masked_contrastive_loss(&zx, &zy, &keys(&["x", "y", "z"]), 0.5).unwrap();
    assert_eq!(unique, other);
}

fn vec2() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, 3).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

proptest! {
    #[test]
    fn contrastive_loss_is_non_negative(
        zx in proptest::collection::vec(vec2(), 2..6),
        zy_seed in 0u64..1000,
        key_ids in proptest::collection::vec(0u8..3, 6),
        tau in 0.05f64..2.0,
    ) {
        let n = zx.len();
        let mut rng = ChaCha8Rng::seed_from_u64(zy_seed);
        let zy: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let k: Vec<String> = key_ids[..n].iter().map(|i| i.to_string()).collect();
        prop_assert!(masked_contrastive_loss(&zx, &zy, &k, tau).unwrap() >= 0.0);
    }

    #[test]
    fn duplicating_a_condition_never_grows_other_negative_sets(key_ids in proptest::collection::vec(0u8..4, 2..7), dup in 0usize..7) {
        let k: Vec<String> = key_ids.iter().map(|i| i.to_string()).collect();
        let dup = dup % k.len();
        let mut k2 = k.clone();
        k2.push(k[dup].clone());
        for i in 0..k.len() {
            let before: BTreeSet<usize> = (0..k.len()).filter(|&j| k[j] != k[i]).collect();
            let after: BTreeSet<usize> = (0..k.len()).filter(|&j| k2[j] != k2[i]).collect();
            prop_assert!(after.is_subset(&before));
        }
    }
}

#[test]
fn contrastive_term_falls_as_positive_cosine_rises() {
    let k = keys(&["a", "b"]);
    let zy = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let mut last = f64::INFINITY;
    for angle in [1.5f64, 1.0, 0.5, 0.0] {
        let zx = vec![vec![angle.cos(), angle.sin()], vec![0.0, 1.0]];
        let t = masked_contrastive_terms(&zx, &zy, &k, 0.5).unwrap()[0];
        assert!(t < last);
        last = t;
    }
}

// ----- model ----------------------------------------------------------------

#[test]
fn untrained_generator_refuses_to_sample() {
    let s = schema();
    let corpus = generate_corpus(&s, 40, 1).unwrap();
    let m = Seq2SeqParams::<f32>::init(&corpus, &tiny_config()).unwrap();
    let c = corpus.instances[0].condition();
    assert!(matches!(m.generate(&c, &SamplingConfig::default(), 3, 0), Err(Error::State(_))));
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    let s = schema();
    let corpus = generate_corpus(&s, 6, 3).unwrap();
    let mut batch = corpus.clone();
    // Repeat one condition so the contrastive mask is exercised.
    let mut dup = batch.instances[0].clone();
    dup.instance_id = "dup".into();
    dup.hypotheses[0].text = "another phrasing of it".into();
    batch.instances.push(dup);
    for mode in [FaceMode::PreWeight, FaceMode::PostWeight] {
        let cfg = Seq2SeqConfig {
            face_mode: mode,
            use_mcl: true,
            mcl_weight: 1.0,
            ..tiny_config()
        };
        let mut m = Seq2SeqParams::<f64>::init(&batch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let report = m.gradient_check(&batch, 6, 1e-5, 1e-3, &mut rng).unwrap();
        assert!(
            report.pass_fraction() >= 0.99,
            "{mode:?}: {}/{} passed, failures {:?}",
            report.passed,
            report.checked,
            report.failures
        );
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let s = schema();
    let corpus = generate_corpus(&s, 64, 2).unwrap();
    let cfg = Seq2SeqConfig {
        epochs: 2,
        learning_rate: 1e-3,
        ..tiny_config()
    };
    let (a, la) = train_seq2seq(&corpus, &cfg).unwrap();
    let (b, lb) = train_seq2seq(&corpus, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
    assert_eq!(la.token_loss.len(), 2);
    assert!(la.mcl_loss.iter().all(|m| m.is_finite() && *m >= 0.0));
    let other = train_seq2seq(&corpus, &Seq2SeqConfig { seed: 9, ..cfg }).unwrap().1;
    assert_ne!(la, other);
}

#[test]
fn checkpoint_round_trip() {
    let s = schema();
    let corpus = generate_corpus(&s, 32, 2).unwrap();
    let cfg = Seq2SeqConfig {
        epochs: 1,
        ..tiny_config()
    };
    let (m, _) = train_seq2seq(&corpus, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    m.save(&path).unwrap();
    let back = Seq2SeqParams::<f32>::load(&path).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.vocab, m.vocab);
    let c = corpus.instances[0].condition();
    let g = SamplingConfig::greedy();
    assert_eq!(
        m.generate(&c, &g, 2, 1).map_err(|e| e.to_string()),
        back.generate(&c, &g, 2, 1).map_err(|e| e.to_string())
    );
}

#[test]
fn schema_mismatch_is_reported() {
    let s = schema();
    let corpus = generate_corpus(&s, 32, 2).unwrap();
    let m = Seq2SeqParams::<f32>::init(&corpus, &tiny_config()).unwrap();
    let other = generate_corpus(&common::separable_schema(4), 10, 1).unwrap();
    assert!(matches!(m.pairs(&other), Err(Error::Schema(_))));
}
