#![allow(dead_code)]

use std::collections::BTreeMap;

use hetaug_core::corpus::{CorpusSchema, IntentSpec};

/// Small schema in which every intent owns a disjoint word list, so the
/// utterance text alone identifies the intent.
pub fn separable_schema(n_intents: usize) -> CorpusSchema {
    let domains = vec!["alpha".to_string(), "beta".to_string()];
    let mut intents = Vec::new();
    // One skill per domain: distractors then always differ in intent, which
    // the text determines.
    let skills = vec!["skill_alpha".to_string(), "skill_beta".to_string()];
    for i in 0..n_intents {
        let domain = domains[i % 2].clone();
        let skill = skills[i % 2].clone();
        let (v, n, x) = (format!("verb{i}"), format!("noun{i}"), format!("extra{i}"));
        intents.push(IntentSpec {
            name: format!("{domain}.intent{i}"),
            domain,
            skill,
            slot_keys: vec!["thing".into()],
            templates: vec![
                format!("{v} the {n} {{thing}}"),
                format!("please {v} {x} {n}"),
                format!("{x} {v} {n} {{thing}} {x}"),
            ],
        });
    }
    let mut lex = BTreeMap::new();
    lex.insert("thing".to_string(), vec!["red".to_string(), "blue box".to_string(), "green".to_string()]);
    CorpusSchema {
        domains,
        intents,
        slot_keys: vec!["thing".into()],
        slot_lexicons: lex,
        device_types: vec!["speaker".into(), "screen".into()],
        device_statuses: vec!["idle".into(), "busy".into()],
        skills,
        domain_skills: BTreeMap::new(),
        zipf_exponent: 0.0,
        frequency_rank: vec![],
        device_type_weights: BTreeMap::new(),
        device_status_weights: BTreeMap::new(),
        max_hypotheses: 5,
        max_utterance_len: 32,
    }
}
