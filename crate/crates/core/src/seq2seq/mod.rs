//! Joint encoder-decoder generator: from a condition `(n1, s1)` it writes the
//! device type, device status and utterance as one sentinel-delimited
//! sequence. Trained with frequency-aware cross-entropy and an optional
//! masked contrastive term between pooled encoder and decoder states.

mod layout;
mod objectives;

use std::path::Path;

use hetaug_autograd::gradcheck::{check_gradients, GradCheckReport};
use hetaug_autograd::nn::{attention_mask, segment_mean, LayerNorm, Linear, TokenPositionEmbedding, TransformerBlock};
use hetaug_autograd::{Adam, Graph, ParamStore, Scalar, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layout::{Malformed, Seq2SeqVocab, SequencePair, BOS, DOM, EOS, INT, SENTINELS, SKILL, SLOT, UNK};
pub use objectives::{
    face_loss, face_loss_graph, face_post_weight, face_pre_raw_weights, face_pre_weights, masked_contrastive_graph,
    masked_contrastive_loss, masked_contrastive_terms, FaceMode, FaceWeighting, PreWeights, TokenFrequencyTable,
};

use crate::checkpoint;
use crate::corpus::{Condition, Dataset, UtteranceFields};
use crate::error::{Error, Result};
use crate::sampling::{sample_index, SamplingConfig};

const CHECKPOINT_KIND: &str = "seq2seq";
const DECODE_BATCH: usize = 32;
const EVAL_BATCH: usize = 64;

/// How FACE token frequencies evolve during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyUpdate {
    /// Target-token frequencies of the training corpus, computed once.
    #[default]
    Static,
    /// After each epoch, frequencies of the model's own argmax predictions.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seq2SeqConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub use_mcl: bool,
    pub mcl_weight: f64,
    pub mcl_temperature: f64,
    pub face_mode: FaceMode,
    /// Use `1 - f/max f` pre-weights without rescaling to mean 1.
    pub face_raw_weights: bool,
    pub frequency_update: FrequencyUpdate,
    pub sampling: SamplingConfig,
    pub retry_limit: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            decoder_layers: 4,
            model_dim: 128,
            heads: 4,
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 5,
            use_mcl: true,
            mcl_weight: 0.1,
            mcl_temperature: 0.1,
            face_mode: FaceMode::PostWeight,
            face_raw_weights: false,
            frequency_update: FrequencyUpdate::Static,
            sampling: SamplingConfig::default(),
            retry_limit: 5,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Input(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Input("learning_rate must be positive".into()));
        }
        if !(self.mcl_temperature > 0.0) {
            return Err(Error::Input(format!("mcl_temperature must be positive, got {}", self.mcl_temperature)));
        }
        if !(self.mcl_weight.is_finite() && self.mcl_weight >= 0.0) {
            return Err(Error::Input("mcl_weight must be non-negative".into()));
        }
        self.sampling.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Net {
    embed: TokenPositionEmbedding,
    encoder: Vec<TransformerBlock>,
    encoder_ln: LayerNorm,
    decoder: Vec<TransformerBlock>,
    decoder_ln: LayerNorm,
    out: Linear,
}

impl Net {
    fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &Seq2SeqConfig, vocab: &Seq2SeqVocab, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let max_len = vocab.max_input_len.max(vocab.max_target_len()) + 1;
        let embed = TokenPositionEmbedding::new(ps, "embed", vocab.len(), max_len, d, rng);
        let encoder = (0..cfg.encoder_layers)
            .map(|i| TransformerBlock::new(ps, &format!("enc{i}"), d, cfg.heads, false, rng))
            .collect();
        let encoder_ln = LayerNorm::new(ps, "enc_ln", d);
        let decoder = (0..cfg.decoder_layers)
            .map(|i| TransformerBlock::new(ps, &format!("dec{i}"), d, cfg.heads, true, rng))
            .collect();
        let decoder_ln = LayerNorm::new(ps, "dec_ln", d);
        let out = Linear::new(ps, "out", d, vocab.len(), rng);
        Self {
            embed,
            encoder,
            encoder_ln,
            decoder,
            decoder_ln,
            out,
        }
    }

    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, srcs: &[Vec<usize>]) -> Var {
        let lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
        let mut x = self.embed.forward(g, srcs);
        let mask = g.constant(attention_mask(&lens, &lens, false));
        for b in &self.encoder {
            x = b.forward(g, x, mask, None);
        }
        self.encoder_ln.forward(g, x)
    }

    fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var, src_lens: &[usize], tgt_in: &[Vec<usize>]) -> Var {
        let lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let mut y = self.embed.forward(g, tgt_in);
        let self_mask = g.constant(attention_mask(&lens, &lens, true));
        let cross_mask = g.constant(attention_mask(&lens, src_lens, false));
        for b in &self.decoder {
            y = b.forward(g, y, self_mask, Some((memory, cross_mask)));
        }
        self.decoder_ln.forward(g, y)
    }
}

/// Objective pieces shared by training, evaluation and gradient checks.
struct Objective {
    face: FaceWeighting,
    use_mcl: bool,
    mcl_weight: f64,
    tau: f64,
}

struct BatchOutput {
    total: Var,
    ce: Var,
    mcl: Option<Var>,
    predictions: Vec<usize>,
    correct: usize,
    tokens: usize,
}

fn decoder_inputs(bos: usize, batch: &[&SequencePair]) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|p| {
            let mut v = Vec::with_capacity(p.output.len());
            v.push(bos);
            v.extend_from_slice(&p.output[..p.output.len() - 1]);
            v
        })
        .collect()
}

impl Net {
    fn batch_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        bos: usize,
        batch: &[&SequencePair],
        obj: &Objective,
    ) -> Result<BatchOutput> {
        let srcs: Vec<Vec<usize>> = batch.iter().map(|p| p.input.clone()).collect();
        let src_lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
        let tgt_in = decoder_inputs(bos, batch);
        let tgt_lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|p| p.output.iter().copied()).collect();
        let mem = self.encode(g, &srcs);
        let states = self.decode(g, mem, &src_lens, &tgt_in);
        let logits = self.out.forward(g, states);
        let lv = g.value(logits);
        let predictions: Vec<usize> = (0..lv.rows()).map(|r| lv.argmax_row(r)).collect();
        let correct = predictions.iter().zip(&targets).filter(|(p, t)| p == t).count();
        let sum = face_loss_graph(g, logits, &targets, &obj.face)?;
        let ce = g.scale(sum, T::lit(1.0 / targets.len() as f64));
        let mut total = ce;
        let mut mcl = None;
        if obj.use_mcl && batch.len() >= 2 {
            let zx = segment_mean(g, mem, &src_lens);
            let zy = segment_mean(g, states, &tgt_lens);
            let keys: Vec<String> = batch.iter().map(|p| p.condition_key.clone()).collect();
            let l = masked_contrastive_graph(g, zx, zy, &keys, obj.tau)?;
            let weighted = g.scale(l, T::lit(obj.mcl_weight));
            total = g.add(total, weighted);
            mcl = Some(l);
        }
        Ok(BatchOutput {
            total,
            ce,
            mcl,
            predictions,
            correct,
            tokens: targets.len(),
        })
    }
}

/// Per-epoch loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqTrainingLog {
    pub token_loss: Vec<f64>,
    pub mcl_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
    /// Uniform frequencies forced all-ones pre-weights at some point.
    pub face_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct Seq2SeqParams<T: Scalar> {
    pub config: Seq2SeqConfig,
    pub vocab: Seq2SeqVocab,
    pub schema_hash: String,
    pub freqs: TokenFrequencyTable,
    pub params: ParamStore<T>,
    pub trained: bool,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct Seq2SeqMeta {
    config: Seq2SeqConfig,
    vocab: Seq2SeqVocab,
    schema_hash: String,
    freqs: TokenFrequencyTable,
    trained: bool,
}

impl<T: Scalar> Seq2SeqParams<T> {
    /// Untrained model with vocabulary and frequencies taken from `corpus`.
    pub fn init(corpus: &Dataset, config: &Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Seq2SeqVocab::build(&corpus.schema, corpus.instances.iter().map(|i| i.hypotheses[0].text.as_str()));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let net = Net::new(&mut params, config, &vocab, &mut rng);
        let mut model = Self {
            config: config.clone(),
            vocab,
            schema_hash: corpus.schema.hash(),
            freqs: TokenFrequencyTable::from_counts(Vec::new()),
            params,
            trained: false,
            net,
        };
        let pairs = model.pairs(corpus)?;
        model.freqs = TokenFrequencyTable::from_sequences(model.vocab.len(), pairs.iter().map(|p| p.output.as_slice()));
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqParams<U> {
        Seq2SeqParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            freqs: self.freqs.clone(),
            params: self.params.cast(),
            trained: self.trained,
            net: self.net.clone(),
        }
    }

    fn check_schema(&self, data: &Dataset) -> Result<()> {
        if data.schema.hash() != self.schema_hash {
            return Err(Error::Schema("dataset schema differs from the generator's training schema".into()));
        }
        Ok(())
    }

    /// Training pairs: each instance's logged condition and utterance fields.
    pub fn pairs(&self, data: &Dataset) -> Result<Vec<SequencePair>> {
        self.check_schema(data)?;
        data.instances
            .iter()
            .map(|i| self.vocab.pair(&i.condition(), &i.utterance()))
            .collect()
    }

    fn objective(&self, freqs: &TokenFrequencyTable) -> Result<Objective> {
        Ok(Objective {
            face: FaceWeighting::new(self.config.face_mode, freqs, self.config.face_raw_weights)?,
            use_mcl: self.config.use_mcl,
            mcl_weight: self.config.mcl_weight,
            tau: self.config.mcl_temperature,
        })
    }

    fn bos(&self) -> usize {
        self.vocab.id(BOS)
    }

    /// Fraction of target tokens predicted by argmax under teacher forcing.
    pub fn teacher_forced_accuracy(&self, data: &Dataset) -> Result<f64> {
        let pairs = self.pairs(data)?;
        if pairs.is_empty() {
            return Err(Error::Input("empty evaluation set".into()));
        }
        let obj = Objective {
            face: FaceWeighting::off(),
            use_mcl: false,
            mcl_weight: 0.0,
            tau: 1.0,
        };
        let (mut correct, mut total) = (0, 0);
        for chunk in pairs.chunks(EVAL_BATCH) {
            let refs: Vec<&SequencePair> = chunk.iter().collect();
            let mut g = Graph::inference(&self.params);
            let out = self.net.batch_loss(&mut g, self.bos(), &refs, &obj)?;
            correct += out.correct;
            total += out.tokens;
        }
        Ok(correct as f64 / total as f64)
    }

    /// Mean per-token cross-entropy under teacher forcing.
    pub fn token_loss(&self, data: &Dataset) -> Result<f64> {
        let pairs = self.pairs(data)?;
        if pairs.is_empty() {
            return Err(Error::Input("empty evaluation set".into()));
        }
        let obj = Objective {
            face: FaceWeighting::off(),
            use_mcl: false,
            mcl_weight: 0.0,
            tau: 1.0,
        };
        let (mut sum, mut total) = (0.0, 0);
        for chunk in pairs.chunks(EVAL_BATCH) {
            let refs: Vec<&SequencePair> = chunk.iter().collect();
            let mut g = Graph::inference(&self.params);
            let out = self.net.batch_loss(&mut g, self.bos(), &refs, &obj)?;
            sum += g.item(out.ce).as_f64() * out.tokens as f64;
            total += out.tokens;
        }
        Ok(sum / total as f64)
    }

    /// Combined training loss (token term + weighted contrastive term) on a
    /// fixed batch, without updating anything.
    pub fn combined_loss(&self, batch: &Dataset) -> Result<f64> {
        let pairs = self.pairs(batch)?;
        let refs: Vec<&SequencePair> = pairs.iter().collect();
        let obj = self.objective(&self.freqs)?;
        let mut g = Graph::inference(&self.params);
        let out = self.net.batch_loss(&mut g, self.bos(), &refs, &obj)?;
        Ok(g.item(out.total).as_f64())
    }

    /// Finite-difference check of the combined loss on a frozen batch.
    pub fn gradient_check<R: Rng>(
        &mut self,
        batch: &Dataset,
        coords_per_param: usize,
        eps: f64,
        rel_tol: f64,
        rng: &mut R,
    ) -> Result<GradCheckReport> {
        let pairs = self.pairs(batch)?;
        let refs: Vec<&SequencePair> = pairs.iter().collect();
        let obj = self.objective(&self.freqs)?;
        let bos = self.bos();
        {
            let mut g = Graph::inference(&self.params);
            self.net.batch_loss(&mut g, bos, &refs, &obj)?;
        }
        let net = &self.net;
        Ok(check_gradients(
            &mut self.params,
            |g| net.batch_loss(g, bos, &refs, &obj).expect("validated above").total,
            coords_per_param,
            eps,
            rel_tol,
            1e-9,
            rng,
        ))
    }

    /// Decodes one target sequence per source, sampling every step.
    fn decode_batch<R: Rng>(&self, srcs: &[Vec<usize>], sampling: &SamplingConfig, rng: &mut R) -> Vec<Vec<usize>> {
        let src_lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
        let memory = {
            let mut g = Graph::inference(&self.params);
            let m = self.net.encode(&mut g, srcs);
            g.value(m).clone()
        };
        let eos = self.vocab.id(EOS);
        let n = srcs.len();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![self.bos()]; n];
        let mut done = vec![false; n];
        for step in 0..self.vocab.max_target_len() {
            let mut g = Graph::inference(&self.params);
            let mem = g.constant(memory.clone());
            let states = self.net.decode(&mut g, mem, &src_lens, &prefixes);
            let last: Vec<usize> = (0..n).map(|r| r * (step + 1) + step).collect();
            let rows = g.gather_rows(states, &last);
            let logits = self.net.out.forward(&mut g, rows);
            let lv = g.value(logits);
            for r in 0..n {
                let tok = if done[r] {
                    eos
                } else {
                    let row: Vec<f64> = lv.row(r).iter().map(|x| x.as_f64()).collect();
                    sample_index(&row, sampling, &[], rng)
                };
                prefixes[r].push(tok);
                // A malformed prefix is rejected on parse anyway; stop it here.
                done[r] |= tok == eos || !self.vocab.viable_at(step, tok);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        prefixes.into_iter().map(|mut p| p.split_off(1)).collect()
    }

    /// Up to `n` well-formed samples per condition. Rejected decodes are
    /// retried up to `retry_limit` times each and then dropped, so lists may
    /// come back short or empty.
    pub fn generate_batch<R: Rng>(
        &self,
        conditions: &[Condition],
        n: usize,
        sampling: &SamplingConfig,
        rng: &mut R,
    ) -> Result<Vec<Vec<UtteranceFields>>> {
        if !self.trained {
            return Err(Error::State("generator has not been trained".into()));
        }
        sampling.validate()?;
        let srcs: Vec<Vec<usize>> = conditions
            .iter()
            .map(|c| self.vocab.serialize_condition(&c.nlu, &c.skill))
            .collect::<Result<_>>()?;
        let mut out: Vec<Vec<UtteranceFields>> = vec![Vec::new(); conditions.len()];
        for _attempt in 0..=self.config.retry_limit {
            let requests: Vec<usize> = out
                .iter()
                .enumerate()
                .flat_map(|(i, got)| std::iter::repeat_n(i, n.saturating_sub(got.len())))
                .collect();
            if requests.is_empty() {
                break;
            }
            for chunk in requests.chunks(DECODE_BATCH) {
                let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| srcs[i].clone()).collect();
                let decoded = self.decode_batch(&batch, sampling, rng);
                for (&i, ids) in chunk.iter().zip(decoded) {
                    if let Ok(f) = self.vocab.parse_target(&ids) {
                        out[i].push(f);
                    }
                }
            }
        }
        Ok(out)
    }

    /// `n` samples for one condition from a seeded stream.
    pub fn generate(&self, condition: &Condition, sampling: &SamplingConfig, n: usize, seed: u64) -> Result<Vec<UtteranceFields>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let got = self
            .generate_batch(std::slice::from_ref(condition), n, sampling, &mut rng)?
            .pop()
            .unwrap_or_default();
        if got.is_empty() && n > 0 {
            return Err(Error::GenerationExhausted(format!(
                "no well-formed sample for {} after {} retries",
                condition.key(),
                self.config.retry_limit
            )));
        }
        Ok(got)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = Seq2SeqMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            freqs: self.freqs.clone(),
            trained: self.trained,
        };
        checkpoint::save(path, CHECKPOINT_KIND, serde_json::to_value(meta)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let meta: Seq2SeqMeta = serde_json::from_value(checkpoint::expect_kind(&manifest, CHECKPOINT_KIND)?.clone())?;
        meta.config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Net::new(&mut params, &meta.config, &meta.vocab, &mut rng);
        checkpoint::restore(&mut params, &tensors)?;
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            schema_hash: meta.schema_hash,
            freqs: meta.freqs,
            params,
            trained: meta.trained,
            net,
        })
    }
}

/// Trains the joint generator on every instance of `corpus`.
pub fn train_seq2seq(corpus: &Dataset, config: &Seq2SeqConfig) -> Result<(Seq2SeqParams<f32>, Seq2SeqTrainingLog)> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let mut model = Seq2SeqParams::<f32>::init(corpus, config)?;
    let pairs = model.pairs(corpus)?;
    let bos = model.bos();
    let mut freqs = model.freqs.clone();
    let mut obj = model.objective(&freqs)?;
    let mut log = Seq2SeqTrainingLog {
        face_fallback: obj.face.fell_back,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let mut adam = Adam::new(config.learning_rate);
    if let Some(c) = config.clip_norm {
        adam = adam.with_clip_norm(c);
    }
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.epochs {
        idx.shuffle(&mut rng);
        let (mut tok_sum, mut mcl_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut mcl_batches = 0usize;
        let mut predicted = vec![0u64; model.vocab.len()];
        for chunk in idx.chunks(config.batch_size) {
            let refs: Vec<&SequencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (out_vals, grads, preds) = {
                let mut g = Graph::new(&model.params);
                let out = model.net.batch_loss(&mut g, bos, &refs, &obj)?;
                let vals = (g.item(out.total), g.item(out.ce), out.mcl.map(|m| g.item(m)));
                (vals, g.backward(out.total), out.predictions)
            };
            let (total, ce, mcl) = out_vals;
            if !total.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite seq2seq loss or gradient (loss = {total})"),
                });
            }
            adam.step(&mut model.params, grads);
            let w = chunk.len() as f64;
            tok_sum += ce as f64 * w;
            total_sum += total as f64 * w;
            if let Some(m) = mcl {
                mcl_sum += m as f64;
                mcl_batches += 1;
            }
            for p in preds {
                predicted[p] += 1;
            }
        }
        let n = pairs.len() as f64;
        log.token_loss.push(tok_sum / n);
        log.total_loss.push(total_sum / n);
        log.mcl_loss.push(if mcl_batches > 0 { mcl_sum / mcl_batches as f64 } else { 0.0 });
        if config.frequency_update == FrequencyUpdate::PerEpoch {
            freqs = TokenFrequencyTable::from_counts(predicted);
            obj = model.objective(&freqs)?;
            log.face_fallback |= obj.face.fell_back;
        }
    }
    model.freqs = freqs;
    model.trained = true;
    Ok((model, log))
}
