//! One function per subcommand. Each returns the artifact paths it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hetaug_core::corpus::{
    generate_corpus, generate_for_intents, load_dataset, save_dataset, split_head_tail, tail_intents, CorpusSchema,
    Dataset, RoutingInstance, SplitTag, SyntheticSchemaOptions,
};
use hetaug_core::metrics::{intrinsic_report, GeneratedSample, GeneratorOutput, NgramLanguageModel, Reconstruction};
use hetaug_core::mlm::{train_mlm, MlmParams};
use hetaug_core::pipeline::{
    build_augmentation_set, emit_report, run_extrinsic_eval, AugmentationConfig, Augmenter, AugmenterKind, Duplicate,
    ExtrinsicReport, ExtrinsicSetup, Variant,
};
use hetaug_core::router::{replication_accuracy, train_router, RouterConfig};
use hetaug_core::seq2seq::{train_seq2seq, Seq2SeqParams};
use hetaug_core::vae::{train_vae, VaeConfig, VaeParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;

const INTRINSIC_SEED: u64 = 0x5eed_0007;

/// Artifact locations under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn corpus(&self, name: &str) -> PathBuf {
        self.root.join("corpus").join(name)
    }

    pub fn model(&self, kind: AugmenterKind) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", kind.as_str()))
    }

    pub fn router(&self) -> PathBuf {
        self.root.join("models").join("router.ckpt")
    }

    pub fn augmentation(&self, label: &str) -> PathBuf {
        self.root.join("augment").join(format!("{label}.jsonl"))
    }

    pub fn intrinsic(&self, name: &str) -> PathBuf {
        self.root.join("intrinsic").join(name)
    }

    pub fn extrinsic_data(&self) -> PathBuf {
        self.root.join("extrinsic.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<PathBuf> {
    ensure_parent(&path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn write_text(path: PathBuf, text: &str) -> Result<PathBuf> {
    ensure_parent(&path)?;
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn save(path: PathBuf, data: &Dataset) -> Result<PathBuf> {
    ensure_parent(&path)?;
    save_dataset(data, &path)?;
    Ok(path)
}

/// Resolved configuration, written next to the artifacts.
pub fn record_config(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_json(cfg.output_dir.join("experiment.json"), cfg)
}

fn retag(d: Dataset, split: SplitTag) -> Dataset {
    d.with_instances(d.instances.clone(), split)
}

pub fn gen_corpus(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let schema = match &cfg.schema.path {
        Some(p) => CorpusSchema::load(p)?,
        None => CorpusSchema::synthetic(&SyntheticSchemaOptions {
            seed: cfg.mix(cfg.schema.synthetic.seed),
            ..cfg.schema.synthetic.clone()
        })?,
    };
    let c = &cfg.corpus;
    let train = generate_corpus(&schema, c.train_size, cfg.seed)?;
    let test = retag(generate_corpus(&schema, c.test_size, cfg.seed.wrapping_add(2))?, SplitTag::Test);
    let tails = tail_intents(&train, c.tail_threshold);
    if tails.is_empty() {
        bail!("no intent has fewer than {} training instances; raise corpus.tail_threshold", c.tail_threshold);
    }
    let tail_test = generate_for_intents(&schema, &tails, c.tail_test_size, cfg.seed.wrapping_add(3), SplitTag::Test)?;
    eprintln!(
        "corpus: {} train instances, {} tail intents below {}",
        train.len(),
        tails.len(),
        c.tail_threshold
    );
    let mut out = vec![
        write_json(layout.corpus("schema.json"), &schema)?,
        save(layout.corpus("train.jsonl"), &train)?,
    ];
    if c.valid_size > 0 {
        let valid = retag(generate_corpus(&schema, c.valid_size, cfg.seed.wrapping_add(1))?, SplitTag::Valid);
        out.push(save(layout.corpus("valid.jsonl"), &valid)?);
    }
    out.push(save(layout.corpus("test.jsonl"), &test)?);
    out.push(save(layout.corpus("tail_test.jsonl"), &tail_test)?);
    Ok(out)
}

pub struct Corpus {
    pub train: Dataset,
    pub head: Dataset,
    pub tail: Dataset,
    pub valid: Option<Dataset>,
    pub test: Dataset,
    pub tail_test: Dataset,
}

fn load(path: PathBuf) -> Result<Dataset> {
    load_dataset(&path).with_context(|| format!("cannot load {}; run gen-corpus first", path.display()))
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let layout = Layout::new(cfg);
    let train = load(layout.corpus("train.jsonl"))?;
    let (head, tail) = split_head_tail(&train, cfg.corpus.tail_threshold);
    if tail.is_empty() {
        bail!("training set has no tail intents below {}", cfg.corpus.tail_threshold);
    }
    let valid = if cfg.corpus.valid_size > 0 {
        Some(load(layout.corpus("valid.jsonl"))?)
    } else {
        None
    };
    Ok(Corpus {
        head,
        tail,
        valid,
        test: load(layout.corpus("test.jsonl"))?,
        tail_test: load(layout.corpus("tail_test.jsonl"))?,
        train,
    })
}

/// Tail plus the leading `max_head_instances` of the head.
pub fn generator_training_set(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Dataset> {
    match cfg.generators.max_head_instances {
        None => Ok(corpus.train.clone()),
        Some(n) => {
            let head: Vec<RoutingInstance> = corpus.head.instances.iter().take(n).cloned().collect();
            let head = corpus.head.with_instances(head, SplitTag::Train);
            Ok(Dataset::concat(&[&head, &corpus.tail], SplitTag::Train)?)
        }
    }
}

fn vae_config(cfg: &ExperimentConfig, kind: AugmenterKind) -> VaeConfig {
    VaeConfig {
        use_prior_network: kind == AugmenterKind::Pcvae,
        seed: cfg.mix(cfg.generators.vae.seed),
        ..cfg.generators.vae.clone()
    }
}

pub fn train_augmenters(cfg: &ExperimentConfig, only: &[AugmenterKind]) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let corpus = load_corpus(cfg)?;
    let data = generator_training_set(cfg, &corpus)?;
    let kinds: Vec<AugmenterKind> = if only.is_empty() {
        cfg.generators.enabled.clone()
    } else {
        only.to_vec()
    };
    let mut out = Vec::new();
    for kind in kinds {
        eprintln!("training {} on {} instances", kind.as_str(), data.len());
        let path = layout.model(kind);
        ensure_parent(&path)?;
        let log_path = path.with_extension("log.json");
        match kind {
            AugmenterKind::Cvae | AugmenterKind::Pcvae => {
                let (m, log) = train_vae(&data, &vae_config(cfg, kind))?;
                m.save(&path)?;
                out.push(write_json(log_path, &log)?);
            }
            AugmenterKind::Mlm => {
                let mc = hetaug_core::mlm::MlmConfig {
                    seed: cfg.mix(cfg.generators.mlm.seed),
                    ..cfg.generators.mlm.clone()
                };
                let (m, log) = train_mlm(&data, &mc)?;
                m.save(&path)?;
                out.push(write_json(log_path, &log)?);
            }
            AugmenterKind::Seq2seq => {
                let sc = hetaug_core::seq2seq::Seq2SeqConfig {
                    seed: cfg.mix(cfg.generators.seq2seq.seed),
                    ..cfg.generators.seq2seq.clone()
                };
                let (m, log) = train_seq2seq(&data, &sc)?;
                m.save(&path)?;
                out.push(write_json(log_path, &log)?);
            }
            AugmenterKind::Oversample => bail!("`oversample` has no model to train"),
        }
        out.push(path);
    }
    Ok(out)
}

fn load_model(layout: &Layout, kind: AugmenterKind) -> Result<Box<dyn Augmenter>> {
    let path = layout.model(kind);
    if kind != AugmenterKind::Oversample && !path.is_file() {
        bail!("checkpoint {} is missing; run train-augmenter first", path.display());
    }
    let ctx = || format!("cannot load {}", path.display());
    Ok(match kind {
        AugmenterKind::Cvae | AugmenterKind::Pcvae => Box::new(VaeParams::<f32>::load(&path).with_context(ctx)?),
        AugmenterKind::Mlm => Box::new(MlmParams::<f32>::load(&path).with_context(ctx)?),
        AugmenterKind::Seq2seq => Box::new(Seq2SeqParams::<f32>::load(&path).with_context(ctx)?),
        AugmenterKind::Oversample => Box::new(Duplicate),
    })
}

fn load_models(layout: &Layout, kinds: impl IntoIterator<Item = AugmenterKind>) -> Result<BTreeMap<AugmenterKind, Box<dyn Augmenter>>> {
    let mut out = BTreeMap::new();
    for k in kinds {
        if !out.contains_key(&k) {
            out.insert(k, load_model(layout, k)?);
        }
    }
    Ok(out)
}

fn variant_config(cfg: &ExperimentConfig, v: &AugmentationConfig) -> AugmentationConfig {
    AugmentationConfig {
        seed: cfg.mix(v.seed),
        ..v.clone()
    }
}

#[derive(Serialize)]
struct AugmentSummary {
    label: String,
    requested: usize,
    generated: usize,
    dropped: usize,
}

pub fn augment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let corpus = load_corpus(cfg)?;
    let models = load_models(&layout, cfg.extrinsic.variants.iter().map(|v| v.augmenter))?;
    let mut out = Vec::new();
    let mut summary = Vec::new();
    for v in &cfg.extrinsic.variants {
        let set = build_augmentation_set(&corpus.tail, models[&v.augmenter].as_ref(), &variant_config(cfg, v))?;
        summary.push(AugmentSummary {
            label: v.label(),
            requested: set.requested,
            generated: set.dataset.len(),
            dropped: set.dropped,
        });
        out.push(save(layout.augmentation(&v.label()), &set.dataset)?);
    }
    out.push(write_json(layout.root.join("augment").join("summary.json"), &summary)?);
    Ok(out)
}

fn router_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    cfg.extrinsic.router_seeds.iter().map(|&s| cfg.mix(s)).collect()
}

#[derive(Serialize)]
struct RouterEval {
    train_size: usize,
    augmentation: Option<String>,
    overall_accuracy: f64,
    tail_accuracy: f64,
    log: hetaug_core::router::TrainingLog,
}

/// Trains one router on `[head; tail]`, or on `[head; tail; augmentation]`
/// when a label written by `augment` is given.
pub fn train_router_cmd(cfg: &ExperimentConfig, augmentation: Option<&str>) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let corpus = load_corpus(cfg)?;
    let train = match augmentation {
        None => corpus.train.clone(),
        Some(label) => {
            let aug = load(layout.augmentation(label))?;
            Dataset::concat(&[&corpus.head, &corpus.tail, &aug], SplitTag::Train)?
        }
    };
    let empty = train.with_instances(Vec::new(), SplitTag::Valid);
    let rc = RouterConfig {
        seed: router_seeds(cfg)[0],
        ..cfg.router.clone()
    };
    eprintln!("training router on {} instances", train.len());
    let (router, log) = train_router(&train, corpus.valid.as_ref().unwrap_or(&empty), &rc)?;
    let path = layout.router();
    ensure_parent(&path)?;
    router.save(&path)?;
    let eval = RouterEval {
        train_size: train.len(),
        augmentation: augmentation.map(str::to_string),
        overall_accuracy: replication_accuracy(&router, &corpus.test)?,
        tail_accuracy: replication_accuracy(&router, &corpus.tail_test)?,
        log,
    };
    Ok(vec![path, write_json(layout.root.join("models").join("router_eval.json"), &eval)?])
}

fn take(d: &Dataset, n: usize) -> Vec<RoutingInstance> {
    d.instances.iter().take(n).cloned().collect()
}

fn generator_output(
    kind: AugmenterKind,
    model: &dyn Augmenter,
    conditions: &[RoutingInstance],
    layout: &Layout,
    cfg: &ExperimentConfig,
    reference: &Dataset,
) -> Result<GeneratorOutput> {
    let n = cfg.metrics.samples_per_condition;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INTRINSIC_SEED);
    let generated = model.generate(conditions, n, &mut rng)?;
    let text_only = !model.replaces_categoricals();
    let samples = conditions
        .iter()
        .zip(generated)
        .flat_map(|(inst, outs)| {
            let intent = inst.logged_intent().to_string();
            outs.into_iter().map(move |u| GeneratedSample {
                intent: intent.clone(),
                text: u.text,
                device_type: (!text_only).then_some(u.device_type),
                device_status: (!text_only).then_some(u.device_status),
            })
        })
        .collect();
    let mut out = GeneratorOutput {
        name: kind.as_str().to_string(),
        samples,
        ..Default::default()
    };
    if matches!(kind, AugmenterKind::Cvae | AugmenterKind::Pcvae) {
        let vae = VaeParams::<f32>::load(layout.model(kind))?;
        let hyps = vae.reconstruct(conditions)?;
        out.reconstructions = conditions
            .iter()
            .zip(hyps)
            .map(|(i, h)| Reconstruction {
                intent: i.logged_intent().to_string(),
                reference: i.hypotheses[0].text.clone(),
                hypothesis: h,
            })
            .collect();
        let data = reference.with_instances(conditions.to_vec(), SplitTag::Test);
        out.reconstruction_loss = Some(vae.evaluate(&data, cfg.seed ^ INTRINSIC_SEED)?.reconstruction);
    }
    Ok(out)
}

/// Samples every enabled generator on test and tail-test conditions and
/// scores them against the training corpus.
pub fn eval_intrinsic(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let corpus = load_corpus(cfg)?;
    let models = load_models(&layout, cfg.generators.enabled.iter().copied())?;
    let mut conditions = take(&corpus.test, cfg.metrics.max_conditions);
    conditions.extend(take(&corpus.tail_test, cfg.metrics.max_conditions));
    let texts: Vec<&str> = corpus.train.instances.iter().map(|i| i.hypotheses[0].text.as_str()).collect();
    let lm = NgramLanguageModel::train(&texts, cfg.metrics.ngram_order, cfg.metrics.ngram_alpha)?;
    let mut outputs = Vec::new();
    for (&kind, model) in &models {
        eprintln!("sampling {}", kind.as_str());
        outputs.push(generator_output(kind, model.as_ref(), &conditions, &layout, cfg, &corpus.train)?);
    }
    let low: BTreeSet<String> = tail_intents(&corpus.train, cfg.corpus.tail_threshold).into_iter().collect();
    let report = intrinsic_report(&outputs, &corpus.train, &lm, &low);
    Ok(vec![
        write_text(layout.intrinsic("intrinsic.tsv"), &report.to_tsv())?,
        write_text(layout.intrinsic("intrinsic.txt"), &report.to_text())?,
        write_json(layout.intrinsic("intrinsic.json"), &report)?,
        write_json(layout.intrinsic("samples.json"), &outputs)?,
    ])
}

pub fn eval_extrinsic(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let corpus = load_corpus(cfg)?;
    if cfg.extrinsic.variants.is_empty() {
        bail!("extrinsic.variants is empty; nothing to compare with the baseline");
    }
    let models = load_models(&layout, cfg.extrinsic.variants.iter().map(|v| v.augmenter))?;
    let variants: Vec<Variant<'_>> = cfg
        .extrinsic
        .variants
        .iter()
        .map(|v| Variant::new(models[&v.augmenter].as_ref(), variant_config(cfg, v)))
        .collect();
    let setup = ExtrinsicSetup {
        head: &corpus.head,
        tail: &corpus.tail,
        valid: corpus.valid.as_ref(),
        test: &corpus.test,
        tail_test: &corpus.tail_test,
        thresholds: cfg.extrinsic.thresholds.clone(),
        router: cfg.router.clone(),
        router_seeds: router_seeds(cfg),
    };
    eprintln!(
        "extrinsic: baseline + {} variants x {} router seeds",
        variants.len(),
        setup.router_seeds.len()
    );
    let report = run_extrinsic_eval(&setup, &variants)?;
    for v in report.variants.iter().filter(|v| !v.succeeded()) {
        eprintln!("variant {} failed: {}", v.name, v.failure.as_deref().unwrap_or_default());
    }
    let mut out = vec![write_json(layout.extrinsic_data(), &report)?];
    out.extend(emit_report(&report, layout.report_dir())?);
    Ok(out)
}

/// Re-renders the report directory from the saved extrinsic data.
pub fn report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let path = layout.extrinsic_data();
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}; run eval-extrinsic first", path.display()))?;
    let report: ExtrinsicReport =
        serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))?;
    Ok(emit_report(&report, layout.report_dir())?)
}

pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut out = gen_corpus(cfg)?;
    out.extend(train_augmenters(cfg, &[])?);
    out.extend(augment(cfg)?);
    out.extend(train_router_cmd(cfg, None)?);
    out.extend(eval_intrinsic(cfg)?);
    out.extend(eval_extrinsic(cfg)?);
    Ok(out)
}
