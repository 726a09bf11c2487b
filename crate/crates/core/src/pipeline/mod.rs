//! Extrinsic evaluation: augmentation sets built from tail data, router
//! variants trained on `[head; tail; augmentation]`, and the threshold,
//! delta and field-distribution analyses with their report files.

mod augment;
mod extrinsic;
pub mod plot;

use std::fmt::Write;
use std::path::{Path, PathBuf};

pub use augment::{
    build_augmentation_set, oversample, AugmentationConfig, AugmentationSet, Augmenter, AugmenterKind, Duplicate,
};
pub use extrinsic::{
    field_distribution, run_extrinsic_eval, sorted_deltas, threshold_series, ExtrinsicReport, ExtrinsicSetup,
    FieldDistribution, LabelShare, ThresholdPoint, Variant, VariantResult, HIGH_ACCURACY,
};

use crate::error::{Error, Result};

pub const TABLE_FILE: &str = "report.table";
pub const FIG_IMPROVEMENT: &str = "fig2_improvement.svg";
pub const FIG_HIGH_ACCURACY: &str = "fig3_98pct.svg";
pub const FIG_SORTED_DELTA: &str = "fig4_sorted_delta.svg";
pub const FIG_FIELDS: &str = "fig5_field_dist.svg";

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

/// Tab-separated sections, each introduced by a `# name` line and a header.
pub fn render_table(report: &ExtrinsicReport) -> String {
    let all: Vec<&VariantResult> = std::iter::once(&report.baseline).chain(&report.variants).collect();
    let mut out = String::new();
    out.push_str("# summary\nvariant\tstatus\ttrain_size\taugmented\tdropped\toverall_accuracy\ttail_accuracy\n");
    for v in &all {
        let status = v.failure.as_deref().map_or("ok".to_string(), |m| format!("failed: {}", m.replace(['\t', '\n'], " ")));
        let _ = writeln!(
            out,
            "{}\t{status}\t{}\t{}\t{}\t{}\t{}",
            v.name,
            v.train_size,
            v.augmented,
            v.dropped,
            num(v.overall_accuracy),
            num(v.tail_accuracy)
        );
    }
    out.push_str("\n# intent_accuracy\nintent\ttrain_count\ttest_count");
    for v in &all {
        let _ = write!(out, "\t{}", v.name);
    }
    out.push('\n');
    for (intent, count) in &report.intent_counts {
        let test_count = report.baseline.per_intent.get(intent).map_or(0, |a| a.count);
        let _ = write!(out, "{intent}\t{count}\t{test_count}");
        for v in &all {
            let _ = write!(out, "\t{}", num(v.per_intent.get(intent).map(|a| a.accuracy)));
        }
        out.push('\n');
    }
    out.push_str("\n# threshold\nvariant\tthreshold\tintents\timproved_pct\thigh_accuracy_diff_pp\n");
    for v in &report.variants {
        for p in &v.thresholds {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}",
                v.name, p.threshold, p.intents, p.improved_pct, p.high_accuracy_diff
            );
        }
    }
    out.push_str("\n# sorted_delta\nvariant\trank\tdelta\n");
    for v in &report.variants {
        for (i, d) in v.sorted_deltas.iter().enumerate() {
            let _ = writeln!(out, "{}\t{i}\t{d:.6}", v.name);
        }
    }
    out.push_str("\n# field_distribution\nvariant\tfield\tlabel\treference\tgenerated\n");
    for v in &report.variants {
        if let Some(f) = &v.fields {
            for (field, shares) in [("device_type", &f.device_type), ("device_status", &f.device_status)] {
                for s in shares {
                    let _ = writeln!(out, "{}\t{field}\t{}\t{:.6}\t{:.6}", v.name, s.label, s.reference, s.generated);
                }
            }
        }
    }
    out
}

fn write(path: PathBuf, content: &str) -> Result<PathBuf> {
    std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the data table and the four charts into `dir`, returning the
/// written paths. A report without variants is refused before anything is
/// written.
pub fn emit_report(report: &ExtrinsicReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if report.variants.is_empty() {
        return Err(Error::Input("report has no variants besides the baseline".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ok: Vec<&VariantResult> = report.variants.iter().filter(|v| v.succeeded()).collect();

    let categories: Vec<String> = report.thresholds.iter().map(|t| format!("< {t}")).collect();
    let improvement: Vec<(String, Vec<f64>)> = ok
        .iter()
        .map(|v| (v.name.clone(), v.thresholds.iter().map(|p| p.improved_pct).collect()))
        .collect();
    let high: Vec<(String, Vec<f64>)> = ok
        .iter()
        .map(|v| (v.name.clone(), v.thresholds.iter().map(|p| p.high_accuracy_diff).collect()))
        .collect();
    let deltas: Vec<(String, Vec<f64>)> = ok.iter().map(|v| (v.name.clone(), v.sorted_deltas.clone())).collect();

    let mut field_cats = Vec::new();
    let mut reference = Vec::new();
    let mut generated: Vec<(String, Vec<f64>)> = ok.iter().map(|v| (v.name.clone(), Vec::new())).collect();
    if let Some(first) = ok.iter().find_map(|v| v.fields.as_ref()) {
        for (field, shares) in [("type", &first.device_type), ("status", &first.device_status)] {
            for s in shares {
                field_cats.push(format!("{field}:{}", s.label));
                reference.push(s.reference);
            }
        }
        for (v, (_, vals)) in ok.iter().zip(generated.iter_mut()) {
            if let Some(f) = &v.fields {
                vals.extend(f.device_type.iter().chain(&f.device_status).map(|s| s.generated));
            }
        }
    }
    let mut field_series = vec![("reference".to_string(), reference)];
    field_series.extend(generated);

    Ok(vec![
        write(dir.join(TABLE_FILE), &render_table(report))?,
        write(
            dir.join(FIG_IMPROVEMENT),
            &plot::bar_chart(
                "Intents improved over baseline",
                "training-count threshold",
                "% of intents",
                &categories,
                &improvement,
            ),
        )?,
        write(
            dir.join(FIG_HIGH_ACCURACY),
            &plot::bar_chart(
                "Change in intents above 98% accuracy",
                "training-count threshold",
                "percentage points",
                &categories,
                &high,
            ),
        )?,
        write(
            dir.join(FIG_SORTED_DELTA),
            &plot::line_chart("Sorted per-intent accuracy change", "intent rank", "accuracy - baseline", &deltas),
        )?,
        write(
            dir.join(FIG_FIELDS),
            &plot::bar_chart("Categorical field distribution", "field:label", "share", &field_cats, &field_series),
        )?,
    ])
}
