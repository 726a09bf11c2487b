//! Experiment configuration: one TOML file, optionally patched with
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use hetaug_core::corpus::SyntheticSchemaOptions;
use hetaug_core::mlm::MlmConfig;
use hetaug_core::pipeline::{AugmentationConfig, AugmenterKind};
use hetaug_core::router::RouterConfig;
use hetaug_core::seq2seq::Seq2SeqConfig;
use hetaug_core::vae::VaeConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed. Every component seed below is XOR-ed into it.
    pub seed: u64,
    /// Relative paths are resolved against the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schema: SchemaConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub generators: GeneratorsConfig,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub extrinsic: ExtrinsicConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A schema file, or the built-in synthetic schema when `path` is unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSchemaOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_size: usize,
    /// 0 disables validation-based model selection for the router.
    pub valid_size: usize,
    pub test_size: usize,
    /// Intents with fewer training instances than this form the tail.
    pub tail_threshold: usize,
    /// Size of the test set spread evenly over the tail intents.
    pub tail_test_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_size: 20_000,
            valid_size: 0,
            test_size: 2_000,
            tail_threshold: 30,
            tail_test_size: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorsConfig {
    pub enabled: Vec<AugmenterKind>,
    /// Generators train on the tail plus at most this many head instances;
    /// unset trains on the whole training set.
    pub max_head_instances: Option<usize>,
    /// Shared by `cvae` and `pcvae`; the prior choice follows the name.
    pub vae: VaeConfig,
    pub mlm: MlmConfig,
    pub seq2seq: Seq2SeqConfig,
}

impl Default for GeneratorsConfig {
    fn default() -> Self {
        Self {
            enabled: vec![AugmenterKind::Cvae, AugmenterKind::Pcvae, AugmenterKind::Mlm, AugmenterKind::Seq2seq],
            max_head_instances: None,
            vae: VaeConfig::default(),
            mlm: MlmConfig::default(),
            seq2seq: Seq2SeqConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrinsicConfig {
    pub thresholds: Vec<usize>,
    pub router_seeds: Vec<u64>,
    pub variants: Vec<AugmentationConfig>,
}

impl Default for ExtrinsicConfig {
    fn default() -> Self {
        let v = |augmenter, ratio, nlubin_prob| AugmentationConfig {
            augmenter,
            ratio,
            nlubin_prob,
            seed: 0,
        };
        Self {
            thresholds: vec![10, 30, 100, 300, 1000],
            router_seeds: vec![0],
            variants: vec![
                v(AugmenterKind::Seq2seq, 1, 0.0),
                v(AugmenterKind::Seq2seq, 5, 0.0),
                v(AugmenterKind::Seq2seq, 5, 0.8),
                v(AugmenterKind::Mlm, 1, 0.0),
                v(AugmenterKind::Pcvae, 1, 0.0),
                v(AugmenterKind::Oversample, 5, 0.0),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ngram_order: usize,
    pub ngram_alpha: f64,
    pub samples_per_condition: usize,
    /// Conditions drawn from each of the test and tail-test sets.
    pub max_conditions: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ngram_order: 3,
            ngram_alpha: 0.01,
            samples_per_condition: 5,
            max_conditions: 200,
        }
    }
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` and validates. Errors name the
    /// offending file or key.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut table: toml::Table =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = table
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(p) = &cfg.schema.path {
            cfg.schema.path = Some(base.join(p));
        }
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.schema.path {
            if !p.is_file() {
                bail!("schema file {} does not exist", p.display());
            }
        }
        let c = &self.corpus;
        if c.train_size == 0 || c.test_size == 0 || c.tail_test_size == 0 {
            bail!("corpus.train_size, corpus.test_size and corpus.tail_test_size must be ≥ 1");
        }
        if self.generators.enabled.contains(&AugmenterKind::Oversample) {
            bail!("generators.enabled lists `oversample`, which is not a generator");
        }
        self.generators.vae.validate()?;
        self.generators.mlm.validate()?;
        self.generators.seq2seq.validate()?;
        self.router.validate()?;
        if self.extrinsic.router_seeds.is_empty() {
            bail!("extrinsic.router_seeds must not be empty");
        }
        let mut labels = std::collections::BTreeSet::new();
        for v in &self.extrinsic.variants {
            v.validate()?;
            if !labels.insert(v.label()) {
                bail!("two variants share the label `{}`", v.label());
            }
            if v.augmenter != AugmenterKind::Oversample && !self.generators.enabled.contains(&v.augmenter) {
                bail!("variant `{}` uses generator `{}`, which is not enabled", v.label(), v.augmenter.as_str());
            }
        }
        let m = &self.metrics;
        if m.ngram_order == 0 || !(m.ngram_alpha > 0.0) || m.samples_per_condition == 0 || m.max_conditions == 0 {
            bail!("metrics: ngram_order, samples_per_condition and max_conditions must be ≥ 1 and ngram_alpha > 0");
        }
        Ok(())
    }

    /// The global seed mixed with a component's own seed.
    pub fn mix(&self, component: u64) -> u64 {
        self.seed ^ component
    }
}

/// `a.b.c=value`: the value is parsed as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in prefix {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{spec}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
