use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{bleu, dist_n, ent_n, field_kl, perplexity, unique_rate, NgramLanguageModel};
use crate::corpus::Dataset;

pub const FIELD_KL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    /// Intent of the condition the sample was generated for.
    pub intent: String,
    pub text: String,
    /// Absent for text-only generators.
    pub device_type: Option<String>,
    pub device_status: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub intent: String,
    pub reference: String,
    pub hypothesis: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorOutput {
    pub name: String,
    pub samples: Vec<GeneratedSample>,
    pub reconstructions: Vec<Reconstruction>,
    pub reconstruction_loss: Option<f64>,
}

/// One table row; `None` renders as `-`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub perplexity: Option<f64>,
    pub unique_rate: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub ent4: Option<f64>,
    pub kl_device_type: Option<f64>,
    pub kl_device_status: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu2: Option<f64>,
    pub reconstruction_loss: Option<f64>,
}

pub const COLUMNS: [&str; 11] = [
    "model",
    "perplexity",
    "unique_rate",
    "dist1",
    "dist2",
    "ent4",
    "kl_device_type",
    "kl_device_status",
    "bleu1",
    "bleu2",
    "recon_loss",
];

impl MetricRow {
    pub fn cells(&self) -> [Option<f64>; 10] {
        [
            self.perplexity,
            self.unique_rate,
            self.dist1,
            self.dist2,
            self.ent4,
            self.kl_device_type,
            self.kl_device_status,
            self.bleu1,
            self.bleu2,
            self.reconstruction_loss,
        ]
    }

    pub fn populated(&self) -> usize {
        self.cells().iter().filter(|c| c.is_some()).count()
    }
}

/// Full-traffic table and the low-count-intent sub-table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub full: Vec<MetricRow>,
    pub low_count: Vec<MetricRow>,
    pub low_count_intents: Vec<String>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl MetricReport {
    /// Tab-separated rendering with a leading `table` column.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("table\t{}\n", COLUMNS.join("\t"));
        for (name, rows) in [("full", &self.full), ("low_count", &self.low_count)] {
            for r in rows {
                let cells: Vec<String> = r.cells().iter().map(|&c| cell(c)).collect();
                let _ = writeln!(out, "{name}\t{}\t{}", r.model, cells.join("\t"));
            }
        }
        out
    }

    /// Column-aligned plain text with one block per table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (title, rows) in [
            ("All test conditions", &self.full),
            ("Low-count intents only", &self.low_count),
        ] {
            let _ = writeln!(out, "{title}");
            let mut grid = vec![COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
            for r in rows.iter() {
                let mut line = vec![r.model.clone()];
                line.extend(r.cells().iter().map(|&c| cell(c)));
                grid.push(line);
            }
            let widths: Vec<usize> = (0..COLUMNS.len())
                .map(|j| grid.iter().map(|l| l[j].len()).max().unwrap_or(0))
                .collect();
            for line in grid {
                let padded: Vec<String> = line
                    .iter()
                    .zip(&widths)
                    .map(|(c, &w)| format!("{c:<w$}"))
                    .collect();
                let _ = writeln!(out, "{}", padded.join("  ").trim_end());
            }
            out.push('\n');
        }
        out
    }
}

fn row(
    out: &GeneratorOutput,
    reference: &Dataset,
    lm: &NgramLanguageModel,
    keep: &dyn Fn(&str) -> bool,
) -> MetricRow {
    let samples: Vec<&GeneratedSample> = out.samples.iter().filter(|s| keep(&s.intent)).collect();
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let some = |v: crate::Result<f64>| if texts.is_empty() { None } else { v.ok() };

    let truth: Vec<_> = reference
        .instances
        .iter()
        .filter(|i| keep(i.logged_intent()))
        .map(|i| i.utterance())
        .collect();
    let field = |get: fn(&GeneratedSample) -> Option<&String>, truth_get: fn(&crate::corpus::UtteranceFields) -> &String, labels: &[String]| {
        let gen: Vec<&String> = samples.iter().filter_map(|s| get(s)).collect();
        if gen.is_empty() || truth.is_empty() {
            return None;
        }
        let t: Vec<&String> = truth.iter().map(truth_get).collect();
        field_kl(&t, &gen, labels, FIELD_KL_EPS).ok()
    };
    let recon: Vec<&Reconstruction> = out.reconstructions.iter().filter(|r| keep(&r.intent)).collect();
    let refs: Vec<&str> = recon.iter().map(|r| r.reference.as_str()).collect();
    let hyps: Vec<&str> = recon.iter().map(|r| r.hypothesis.as_str()).collect();
    let b = |n| if recon.is_empty() { None } else { bleu(&refs, &hyps, n).ok() };
    MetricRow {
        model: out.name.clone(),
        perplexity: some(perplexity(lm, &texts)),
        unique_rate: some(unique_rate(&texts)),
        dist1: some(dist_n(&texts, 1)),
        dist2: some(dist_n(&texts, 2)),
        ent4: some(ent_n(&texts, 4)),
        kl_device_type: field(|s| s.device_type.as_ref(), |u| &u.device_type, &reference.schema.device_types),
        kl_device_status: field(|s| s.device_status.as_ref(), |u| &u.device_status, &reference.schema.device_statuses),
        bleu1: b(1),
        bleu2: b(2),
        reconstruction_loss: out.reconstruction_loss,
    }
}

/// Builds both tables. Field KL compares generated categorical fields
/// with the reference corpus restricted to the same intents; cells whose
/// inputs are absent (e.g. text-only generators) stay empty.
pub fn intrinsic_report(
    outputs: &[GeneratorOutput],
    reference: &Dataset,
    lm: &NgramLanguageModel,
    low_count_intents: &BTreeSet<String>,
) -> MetricReport {
    let all = |_: &str| true;
    let tail = |i: &str| low_count_intents.contains(i);
    MetricReport {
        full: outputs.iter().map(|o| row(o, reference, lm, &all)).collect(),
        low_count: outputs
            .iter()
            .map(|o| {
                let mut r = row(o, reference, lm, &tail);
                // Reconstruction loss is a whole-corpus quantity.
                r.reconstruction_loss = None;
                r
            })
            .collect(),
        low_count_intents: low_count_intents.iter().cloned().collect(),
    }
}
