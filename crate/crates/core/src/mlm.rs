//! Conditional variational masked LM. A transformer is split into an encoder
//! half and a decoder half. The encoder output at `[CLS]` is replaced by a
//! latent `z`, drawn from a posterior over the pooled encoder states during
//! training and from a condition prior when perturbing. The condition
//! embedding is added at every position in place of segment embeddings.
//!
//! Sequences use the layout
//! `(device_type, device_status, confidence_bin, [CLS], w_1 .. w_T, [SEP])`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use hetaug_autograd::gradcheck::{check_gradients, GradCheckReport};
use hetaug_autograd::nn::{attention_mask, segment_mean, LayerNorm, Linear, TokenPositionEmbedding, TransformerBlock};
use hetaug_autograd::{log_sum_exp, Adam, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::condition::{ConditionEncoder, ConditionVocab, EncodedCondition};
use crate::corpus::{Condition, ConfidenceBin, CorpusSchema, Dataset, RoutingInstance, UtteranceFields};
use crate::error::{Error, Result};
use crate::sampling::{sample_index, SamplingConfig};
use crate::vae::gaussian_kl_graph;

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
/// Number of categorical positions before `[CLS]`.
pub const CATEGORICAL: usize = 3;
pub const CLS_POS: usize = 3;
const CHECKPOINT_KIND: &str = "mlm";
const EVAL_BATCH: usize = 64;

const DT: &str = "dt:";
const DS: &str = "ds:";
const CB: &str = "cb:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmConfig {
    /// Split evenly between the encoder and decoder halves.
    pub layers_total: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub prior_net_bottleneck: usize,
    pub mask_prob_categorical: f64,
    pub mask_prob_utterance: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub kl_weight: f64,
    pub sampling: SamplingConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            layers_total: 8,
            model_dim: 128,
            heads: 4,
            prior_net_bottleneck: 100,
            mask_prob_categorical: 0.9,
            mask_prob_utterance: 0.3,
            batch_size: 32,
            learning_rate: 5e-5,
            epochs: 15,
            kl_weight: 0.1,
            sampling: SamplingConfig {
                top_p: 1.0,
                temperature: 1.0,
            },
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers_total == 0 || self.layers_total % 2 != 0 {
            return Err(Error::Input(format!("layers_total must be even and positive, got {}", self.layers_total)));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Input(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        for (name, p) in [
            ("mask_prob_categorical", self.mask_prob_categorical),
            ("mask_prob_utterance", self.mask_prob_utterance),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Input(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.batch_size == 0 || self.prior_net_bottleneck == 0 {
            return Err(Error::Input("batch_size and prior_net_bottleneck must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Input("learning_rate must be positive".into()));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::Input("kl_weight must be non-negative".into()));
        }
        self.sampling.validate()
    }
}

/// Builds the layout sequence for one set of utterance fields. Words keep
/// their original spelling.
pub fn layout(u: &UtteranceFields, bin: ConfidenceBin) -> Vec<String> {
    let mut seq = vec![
        format!("{DT}{}", u.device_type),
        format!("{DS}{}", u.device_status),
        format!("{CB}{bin}"),
        CLS.to_string(),
    ];
    seq.extend(u.text.split_whitespace().map(str::to_string));
    seq.push(SEP.to_string());
    seq
}

fn instance_layout(inst: &RoutingInstance) -> Vec<String> {
    layout(&inst.utterance(), inst.logged().confidence_bin)
}

fn check_layout(seq: &[String]) -> Result<()> {
    check_layout_with(seq, false)
}

fn check_layout_with(seq: &[String], allow_mask: bool) -> Result<()> {
    let n = seq.len();
    if n < CATEGORICAL + 3 {
        return Err(Error::Input(format!("sequence of length {n} is too short for the masked-LM layout")));
    }
    if seq[CLS_POS] != CLS || seq[n - 1] != SEP {
        return Err(Error::Input("sequence lacks [CLS] at position 3 or a final [SEP]".into()));
    }
    let prefixes = [DT, DS, CB];
    for (i, p) in prefixes.iter().enumerate() {
        if !seq[i].starts_with(p) && !(allow_mask && seq[i] == MASK) {
            return Err(Error::Input(format!("position {i} must hold a `{p}` field, found `{}`", seq[i])));
        }
    }
    if seq[CLS_POS + 1..n - 1].iter().any(|t| t == CLS || t == SEP || (!allow_mask && t == MASK)) {
        return Err(Error::Input("special token inside the utterance span".into()));
    }
    Ok(())
}

/// A layout sequence with some positions replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<String>,
    /// Ascending.
    pub mask_positions: Vec<usize>,
    /// Original tokens at `mask_positions`, in the same order.
    pub originals: Vec<String>,
}

impl MaskedSequence {
    /// Masks exactly the given positions.
    pub fn with_positions(seq: &[String], positions: &[usize]) -> Result<Self> {
        check_layout(seq)?;
        let mut pos: Vec<usize> = positions.to_vec();
        pos.sort_unstable();
        pos.dedup();
        for &p in &pos {
            if p == CLS_POS || p + 1 >= seq.len() {
                return Err(Error::Input(format!("position {p} cannot be masked")));
            }
        }
        let mut tokens = seq.to_vec();
        let originals = pos.iter().map(|&p| std::mem::replace(&mut tokens[p], MASK.to_string())).collect();
        Ok(Self {
            tokens,
            mask_positions: pos,
            originals,
        })
    }
}

/// Masks each position independently with its own probability (`None` means
/// never). If nothing was masked, one eligible position is chosen uniformly.
fn mask_with<R: Rng + ?Sized>(seq: &[String], probs: &[Option<f64>], rng: &mut R) -> Result<MaskedSequence> {
    let mut picked: Vec<usize> = probs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.filter(|&p| rng.random::<f64>() < p).map(|_| i))
        .collect();
    if picked.is_empty() {
        let eligible: Vec<usize> = probs.iter().enumerate().filter(|(_, p)| p.is_some()).map(|(i, _)| i).collect();
        if let Some(&i) = eligible.choose(rng) {
            picked.push(i);
        }
    }
    MaskedSequence::with_positions(seq, &picked)
}

/// Training-time masking: categorical positions with
/// `mask_prob_categorical`, utterance tokens with `mask_prob_utterance`;
/// `[CLS]` and `[SEP]` never. At least one position is always masked.
pub fn mask_sequence<R: Rng + ?Sized>(seq: &[String], config: &MlmConfig, rng: &mut R) -> Result<MaskedSequence> {
    check_layout(seq)?;
    let n = seq.len();
    let probs: Vec<Option<f64>> = (0..n)
        .map(|i| match i {
            _ if i < CATEGORICAL => Some(config.mask_prob_categorical),
            CLS_POS => None,
            _ if i == n - 1 => None,
            _ => Some(config.mask_prob_utterance),
        })
        .collect();
    mask_with(seq, &probs, rng)
}

/// Decides which utterance words may be rewritten when perturbing.
pub trait ContentWordTagger {
    fn is_content(&self, word: &str) -> bool;
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "all", "am", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do", "does", "doing",
    "down", "during", "each", "few", "for", "from", "further", "had", "has", "have", "having", "he", "her", "here",
    "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "may", "me", "might", "more", "most", "must", "my", "myself", "no", "nor", "not", "now", "of", "off", "on",
    "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "please", "same", "shall", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them", "themselves", "then", "there",
    "these", "they", "this", "those", "through", "to", "too", "under", "until", "up", "very", "was", "we", "were",
    "what", "when", "where", "which", "while", "who", "whom", "whose", "why", "will", "with", "would", "you", "your",
    "yours", "yourself", "yourselves",
];

/// Closed-class stoplist: a word is content unless it is a listed function
/// word or has no alphabetic character.
#[derive(Clone, Debug)]
pub struct StoplistTagger {
    stop: BTreeSet<String>,
}

impl Default for StoplistTagger {
    fn default() -> Self {
        Self {
            stop: STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl StoplistTagger {
    pub fn with_stopwords(words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            stop: words.into_iter().map(Into::into).collect(),
        }
    }
}

impl ContentWordTagger for StoplistTagger {
    fn is_content(&self, word: &str) -> bool {
        let w = word.to_lowercase();
        w.chars().any(char::is_alphabetic) && !self.stop.contains(&w)
    }
}

/// Only listed words (for instance known verbs and nouns) are content.
#[derive(Clone, Debug, Default)]
pub struct LexiconTagger {
    pub content: BTreeSet<String>,
}

impl ContentWordTagger for LexiconTagger {
    fn is_content(&self, word: &str) -> bool {
        self.content.contains(&word.to_lowercase())
    }
}

/// Joint token vocabulary plus the candidate sets used to refill each kind
/// of position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmVocab {
    pub tokens: crate::vocab::Vocab,
    pub condition: ConditionVocab,
    pub device_types: Vec<usize>,
    pub device_statuses: Vec<usize>,
    pub bins: Vec<usize>,
    pub words: Vec<usize>,
    pub max_len: usize,
}

impl MlmVocab {
    pub fn build<'a>(schema: &CorpusSchema, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = crate::vocab::Vocab::from_tokens([UNK, CLS, SEP, MASK]);
        let device_types = schema.device_types.iter().map(|d| tokens.add(format!("{DT}{d}"))).collect();
        let device_statuses = schema.device_statuses.iter().map(|d| tokens.add(format!("{DS}{d}"))).collect();
        let bins = ConfidenceBin::ALL.iter().map(|b| tokens.add(format!("{CB}{b}"))).collect();
        let mut words = BTreeSet::new();
        let mut longest = 1;
        for t in texts {
            let ws: Vec<String> = t.split_whitespace().map(str::to_lowercase).collect();
            longest = longest.max(ws.len());
            for w in ws {
                words.insert(tokens.add(w));
            }
        }
        Self {
            tokens,
            condition: ConditionVocab::build(schema),
            device_types,
            device_statuses,
            bins,
            words: words.into_iter().collect(),
            max_len: longest + CATEGORICAL + 2,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn id(&self, tok: &str) -> usize {
        let unk = 0;
        self.tokens.id(tok).or_else(|| self.tokens.id(&tok.to_lowercase())).unwrap_or(unk)
    }

    fn encode(&self, seq: &[String]) -> Result<Vec<usize>> {
        if seq.len() > self.max_len {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds the model's maximum {}",
                seq.len(),
                self.max_len
            )));
        }
        Ok(seq.iter().map(|t| self.id(t)).collect())
    }

    /// Candidate ids for refilling position `pos`.
    fn candidates(&self, pos: usize) -> &[usize] {
        match pos {
            0 => &self.device_types,
            1 => &self.device_statuses,
            2 => &self.bins,
            _ => &self.words,
        }
    }

    /// Surface form of a refilled token (categorical prefixes kept).
    fn surface(&self, id: usize) -> &str {
        self.tokens.token(id)
    }
}

/// Cross-entropy summed over the masked rows only. Rows outside `positions`
/// have weight zero, so their logits get an exactly zero gradient.
pub fn masked_token_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize], positions: &[usize]) -> Var {
    let mut w = vec![T::zero(); targets.len()];
    for &p in positions {
        w[p] = T::one();
    }
    g.cross_entropy(logits, targets, Some(&w))
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Net {
    embed: TokenPositionEmbedding,
    cond: ConditionEncoder,
    encoder: Vec<TransformerBlock>,
    encoder_ln: LayerNorm,
    post_mu: Linear,
    post_lv: Linear,
    prior_hidden: Linear,
    prior_mu: Linear,
    prior_lv: Linear,
    decoder: Vec<TransformerBlock>,
    decoder_ln: LayerNorm,
    out: Linear,
    dim: usize,
}

struct Example {
    full: Vec<usize>,
    masked: Vec<usize>,
    positions: Vec<usize>,
    cond: EncodedCondition,
}

struct BatchVars {
    total: Var,
    ce: Var,
    kl: Var,
}

impl Net {
    fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &MlmConfig, vocab: &MlmVocab, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        let half = cfg.layers_total / 2;
        Self {
            embed: TokenPositionEmbedding::new(ps, "embed", vocab.len(), vocab.max_len, d, rng),
            cond: ConditionEncoder::new(ps, "cond", &vocab.condition, (d / 4).max(1), d, rng),
            encoder: (0..half)
                .map(|i| TransformerBlock::new(ps, &format!("enc{i}"), d, cfg.heads, false, rng))
                .collect(),
            encoder_ln: LayerNorm::new(ps, "enc_ln", d),
            post_mu: Linear::new(ps, "post.mu", d, d, rng),
            post_lv: Linear::new(ps, "post.logvar", d, d, rng),
            prior_hidden: Linear::new(ps, "prior.hidden", d, cfg.prior_net_bottleneck, rng),
            prior_mu: Linear::new(ps, "prior.mu", cfg.prior_net_bottleneck, d, rng),
            prior_lv: Linear::new(ps, "prior.logvar", cfg.prior_net_bottleneck, d, rng),
            decoder: (0..half)
                .map(|i| TransformerBlock::new(ps, &format!("dec{i}"), d, cfg.heads, false, rng))
                .collect(),
            decoder_ln: LayerNorm::new(ps, "dec_ln", d),
            out: Linear::new(ps, "out", d, vocab.len(), rng),
            dim: d,
        }
    }

    fn condition<T: Scalar>(&self, g: &mut Graph<'_, T>, conds: &[&EncodedCondition]) -> Var {
        self.cond.forward(g, conds)
    }

    fn prior<T: Scalar>(&self, g: &mut Graph<'_, T>, c: Var) -> (Var, Var) {
        let h = self.prior_hidden.forward(g, c);
        let h = g.tanh(h);
        (self.prior_mu.forward(g, h), self.prior_lv.forward(g, h))
    }

    /// Encoder half over packed sequences with `c` added at every position.
    fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, seqs: &[Vec<usize>], c: Var, mask: Var) -> Var {
        let rows: Vec<usize> = seqs.iter().enumerate().flat_map(|(r, s)| std::iter::repeat_n(r, s.len())).collect();
        let x = self.embed.forward(g, seqs);
        let cr = g.gather_rows(c, &rows);
        let mut x = g.add(x, cr);
        for b in &self.encoder {
            x = b.forward(g, x, mask, None);
        }
        self.encoder_ln.forward(g, x)
    }

    /// Replaces each sequence's `[CLS]` row by its `z` and runs the decoder
    /// half to vocabulary logits.
    fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var, lens: &[usize], z: Var, mask: Var) -> Var {
        let n: usize = lens.iter().sum();
        let mut rows = Vec::with_capacity(n);
        let mut is_cls = vec![false; n];
        let mut off = 0;
        for (r, &l) in lens.iter().enumerate() {
            rows.extend(std::iter::repeat_n(r, l));
            is_cls[off + CLS_POS] = true;
            off += l;
        }
        let zr = g.gather_rows(z, &rows);
        let mut x = g.blend(zr, h, &is_cls);
        for b in &self.decoder {
            x = b.forward(g, x, mask, None);
        }
        let x = self.decoder_ln.forward(g, x);
        self.out.forward(g, x)
    }

    fn objective<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &[&Example], noise: &Tensor<T>, kl_weight: f64) -> BatchVars {
        let lens: Vec<usize> = batch.iter().map(|e| e.full.len()).collect();
        let mask = g.constant(attention_mask(&lens, &lens, false));
        let conds: Vec<&EncodedCondition> = batch.iter().map(|e| &e.cond).collect();
        let c = self.condition(g, &conds);

        let full: Vec<Vec<usize>> = batch.iter().map(|e| e.full.clone()).collect();
        let hf = self.encode(g, &full, c, mask);
        let pooled = segment_mean(g, hf, &lens);
        let mu = self.post_mu.forward(g, pooled);
        let lv = self.post_lv.forward(g, pooled);
        let half = g.scale(lv, T::lit(0.5));
        let std = g.exp(half);
        let eps = g.constant(noise.clone());
        let e = g.mul(std, eps);
        let z = g.add(mu, e);

        let masked: Vec<Vec<usize>> = batch.iter().map(|e| e.masked.clone()).collect();
        let hm = self.encode(g, &masked, c, mask);
        let logits = self.decode(g, hm, &lens, z, mask);

        let targets: Vec<usize> = full.iter().flatten().copied().collect();
        let mut positions = Vec::new();
        let mut off = 0;
        for e in batch {
            positions.extend(e.positions.iter().map(|&p| off + p));
            off += e.full.len();
        }
        let sum = masked_token_loss(g, logits, &targets, &positions);
        let ce = g.scale(sum, T::lit(1.0 / positions.len().max(1) as f64));

        let (mu_p, lv_p) = self.prior(g, c);
        let kl = gaussian_kl_graph(g, mu, lv, Some((mu_p, lv_p)));
        let kl = g.mean_all(kl);
        let wkl = g.scale(kl, T::lit(kl_weight));
        BatchVars {
            total: g.add(ce, wkl),
            ce,
            kl,
        }
    }
}

/// Per-epoch means of the masked-token loss and the KL term.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmTrainingLog {
    pub token_loss: Vec<f64>,
    pub kl: Vec<f64>,
    /// Smallest per-batch KL seen in each epoch.
    pub min_batch_kl: Vec<f64>,
}

/// A perturbation with the mask that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Perturbation {
    pub masked: MaskedSequence,
    /// The layout after refilling.
    pub filled: Vec<String>,
    pub fields: UtteranceFields,
}

#[derive(Clone, Debug)]
pub struct MlmParams<T: Scalar> {
    pub config: MlmConfig,
    pub vocab: MlmVocab,
    pub schema_hash: String,
    pub params: ParamStore<T>,
    pub trained: bool,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct MlmMeta {
    config: MlmConfig,
    vocab: MlmVocab,
    schema_hash: String,
    trained: bool,
}

impl<T: Scalar> MlmParams<T> {
    pub fn init(corpus: &Dataset, config: &MlmConfig) -> Result<Self> {
        config.validate()?;
        let texts: Vec<&str> = corpus.instances.iter().map(|i| i.hypotheses[0].text.as_str()).collect();
        let vocab = MlmVocab::build(&corpus.schema, texts);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let net = Net::new(&mut params, config, &vocab, &mut rng);
        Ok(Self {
            config: config.clone(),
            vocab,
            schema_hash: corpus.schema.hash(),
            params,
            trained: false,
            net,
        })
    }

    pub fn cast<U: Scalar>(&self) -> MlmParams<U> {
        MlmParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            params: self.params.cast(),
            trained: self.trained,
            net: self.net.clone(),
        }
    }

    fn check_schema(&self, data: &Dataset) -> Result<()> {
        if data.schema.hash() != self.schema_hash {
            return Err(Error::Schema("dataset schema differs from the masked LM's training schema".into()));
        }
        Ok(())
    }

    fn example(&self, masked: &MaskedSequence, c: &Condition) -> Result<Example> {
        let mut full = masked.tokens.clone();
        for (&p, o) in masked.mask_positions.iter().zip(&masked.originals) {
            full[p].clone_from(o);
        }
        Ok(Example {
            full: self.vocab.encode(&full)?,
            masked: self.vocab.encode(&masked.tokens)?,
            positions: masked.mask_positions.clone(),
            cond: self.vocab.condition.encode(c)?,
        })
    }

    fn masked_examples<R: Rng>(&self, data: &Dataset, rng: &mut R) -> Result<Vec<Example>> {
        self.check_schema(data)?;
        data.instances
            .iter()
            .map(|inst| {
                let m = mask_sequence(&instance_layout(inst), &self.config, rng)?;
                self.example(&m, &inst.condition())
            })
            .collect()
    }

    /// Fraction of masked tokens recovered by argmax, with masks drawn from
    /// the training distribution and `z` fixed at the prior mean.
    pub fn masked_recovery_accuracy(&self, data: &Dataset, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = self.masked_examples(data, &mut rng)?;
        if ex.is_empty() {
            return Err(Error::Input("empty evaluation set".into()));
        }
        let (mut correct, mut total) = (0, 0);
        for chunk in ex.chunks(EVAL_BATCH) {
            let mut g = Graph::inference(&self.params);
            let lens: Vec<usize> = chunk.iter().map(|e| e.full.len()).collect();
            let mask = g.constant(attention_mask(&lens, &lens, false));
            let conds: Vec<&EncodedCondition> = chunk.iter().map(|e| &e.cond).collect();
            let c = self.net.condition(&mut g, &conds);
            let (mu_p, _) = self.net.prior(&mut g, c);
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.masked.clone()).collect();
            let h = self.net.encode(&mut g, &seqs, c, mask);
            let logits = self.net.decode(&mut g, h, &lens, mu_p, mask);
            let lv = g.value(logits);
            let mut off = 0;
            for e in chunk {
                for &p in &e.positions {
                    correct += usize::from(lv.argmax_row(off + p) == e.full[p]);
                    total += 1;
                }
                off += e.full.len();
            }
        }
        Ok(correct as f64 / total as f64)
    }

    /// Training objective on fixed masks and noise.
    pub fn loss_with(&self, masked: &[(MaskedSequence, Condition)], noise: &Tensor<T>) -> Result<(f64, f64)> {
        let ex: Vec<Example> = masked.iter().map(|(m, c)| self.example(m, c)).collect::<Result<_>>()?;
        let refs: Vec<&Example> = ex.iter().collect();
        let mut g = Graph::inference(&self.params);
        let v = self.net.objective(&mut g, &refs, noise, self.config.kl_weight);
        Ok((g.item(v.ce).as_f64(), g.item(v.kl).as_f64()))
    }

    /// Finite-difference check of the training objective with frozen masks
    /// and reparameterisation noise.
    pub fn gradient_check<R: Rng>(
        &mut self,
        batch: &Dataset,
        coords_per_param: usize,
        eps: f64,
        rel_tol: f64,
        rng: &mut R,
    ) -> Result<GradCheckReport> {
        let ex = self.masked_examples(batch, rng)?;
        let refs: Vec<&Example> = ex.iter().collect();
        let noise = Tensor::normal(ex.len(), self.net.dim, 1.0, rng);
        let w = self.config.kl_weight;
        let net = &self.net;
        Ok(check_gradients(
            &mut self.params,
            |g| net.objective(g, &refs, &noise, w).total,
            coords_per_param,
            eps,
            rel_tol,
            1e-9,
            rng,
        ))
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("masked LM has not been trained".into()))
        }
    }

    /// Draws `z ~ p(z | c)`.
    pub fn sample_prior<R: Rng>(&self, c: &Condition, rng: &mut R) -> Result<Vec<f64>> {
        let enc = self.vocab.condition.encode(c)?;
        let mut g = Graph::inference(&self.params);
        let cv = self.net.condition(&mut g, &[&enc]);
        let (mu, lv) = self.net.prior(&mut g, cv);
        let (mu, lv) = (g.value(mu), g.value(lv));
        let eps: Tensor<f64> = Tensor::normal(1, self.net.dim, 1.0, rng);
        Ok((0..self.net.dim)
            .map(|i| mu.data()[i].as_f64() + (0.5 * lv.data()[i].as_f64()).exp() * eps.data()[i])
            .collect())
    }

    fn masked_logits(&self, masked: &MaskedSequence, c: &Condition, z: &[f64]) -> Result<Tensor<f64>> {
        check_layout_with(&masked.tokens, true)?;
        if z.len() != self.net.dim {
            return Err(Error::Input(format!("latent has {} entries, expected {}", z.len(), self.net.dim)));
        }
        let ids = self.vocab.encode(&masked.tokens)?;
        let enc = self.vocab.condition.encode(c)?;
        let lens = [ids.len()];
        let mut g = Graph::inference(&self.params);
        let mask = g.constant(attention_mask(&lens, &lens, false));
        let cv = self.net.condition(&mut g, &[&enc]);
        let zv = g.constant(Tensor::from_vec(1, z.len(), z.iter().map(|&x| T::lit(x)).collect()));
        let h = self.net.encode(&mut g, &[ids], cv, mask);
        let logits = self.net.decode(&mut g, h, &lens, zv, mask);
        Ok(g.value(logits).cast())
    }

    /// Refill distribution at every masked position, restricted to the
    /// tokens valid there and renormalised (temperature 1).
    pub fn masked_distributions(&self, masked: &MaskedSequence, c: &Condition, z: &[f64]) -> Result<Vec<BTreeMap<String, f64>>> {
        let logits = self.masked_logits(masked, c, z)?;
        Ok(masked
            .mask_positions
            .iter()
            .map(|&p| {
                let cand = self.vocab.candidates(p);
                let vals: Vec<f64> = cand.iter().map(|&i| logits.get(p, i)).collect();
                let lse = log_sum_exp(&vals);
                cand.iter()
                    .zip(&vals)
                    .map(|(&i, &v)| (strip(self.vocab.surface(i)).to_string(), (v - lse).exp()))
                    .collect()
            })
            .collect())
    }

    /// Samples a token for every masked position; other tokens are copied.
    pub fn fill<R: Rng>(&self, masked: &MaskedSequence, c: &Condition, z: &[f64], rng: &mut R) -> Result<Vec<String>> {
        self.require_trained()?;
        let logits = self.masked_logits(masked, c, z)?;
        let mut out = masked.tokens.clone();
        for &p in &masked.mask_positions {
            let cand = self.vocab.candidates(p);
            let vals: Vec<f64> = cand.iter().map(|&i| logits.get(p, i)).collect();
            let k = sample_index(&vals, &self.config.sampling, &[], rng);
            out[p] = self.vocab.surface(cand[k]).to_string();
        }
        Ok(out)
    }

    /// Perturbation-time mask: categorical fields and content words, each
    /// with its configured probability.
    pub fn perturbation_mask<R: Rng>(
        &self,
        inst: &RoutingInstance,
        tagger: &dyn ContentWordTagger,
        rng: &mut R,
    ) -> Result<MaskedSequence> {
        let seq = instance_layout(inst);
        let n = seq.len();
        let probs: Vec<Option<f64>> = seq
            .iter()
            .enumerate()
            .map(|(i, tok)| {
                if i < CATEGORICAL {
                    Some(self.config.mask_prob_categorical)
                } else if i == CLS_POS || i == n - 1 || !tagger.is_content(tok) {
                    None
                } else {
                    Some(self.config.mask_prob_utterance)
                }
            })
            .collect();
        mask_with(&seq, &probs, rng)
    }

    /// Masks the instance, draws `z` from the prior of its condition, and
    /// refills the masked positions.
    pub fn perturb_with<R: Rng>(
        &self,
        inst: &RoutingInstance,
        tagger: &dyn ContentWordTagger,
        rng: &mut R,
    ) -> Result<Perturbation> {
        self.require_trained()?;
        let masked = self.perturbation_mask(inst, tagger, rng)?;
        let n = masked.tokens.len();
        let c = inst.condition();
        let z = self.sample_prior(&c, rng)?;
        let filled = self.fill(&masked, &c, &z, rng)?;
        let fields = UtteranceFields {
            text: filled[CLS_POS + 1..n - 1].join(" "),
            device_type: filled[0][DT.len()..].to_string(),
            device_status: filled[1][DS.len()..].to_string(),
        };
        Ok(Perturbation { masked, filled, fields })
    }

    /// New utterance-level fields for `inst` using the stoplist tagger.
    pub fn perturb<R: Rng>(&self, inst: &RoutingInstance, rng: &mut R) -> Result<UtteranceFields> {
        Ok(self.perturb_with(inst, &StoplistTagger::default(), rng)?.fields)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = MlmMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            trained: self.trained,
        };
        checkpoint::save(path, CHECKPOINT_KIND, serde_json::to_value(meta)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let meta: MlmMeta = serde_json::from_value(checkpoint::expect_kind(&manifest, CHECKPOINT_KIND)?.clone())?;
        meta.config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Net::new(&mut params, &meta.config, &meta.vocab, &mut rng);
        checkpoint::restore(&mut params, &tensors)?;
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            schema_hash: meta.schema_hash,
            params,
            trained: meta.trained,
            net,
        })
    }
}

fn strip(tok: &str) -> &str {
    [DT, DS, CB].iter().find_map(|p| tok.strip_prefix(p)).unwrap_or(tok)
}

/// Trains the masked LM; masks are redrawn every epoch.
pub fn train_mlm(corpus: &Dataset, config: &MlmConfig) -> Result<(MlmParams<f32>, MlmTrainingLog)> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let mut model = MlmParams::<f32>::init(corpus, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0004);
    let mut adam = Adam::new(config.learning_rate);
    if let Some(c) = config.clip_norm {
        adam = adam.with_clip_norm(c);
    }
    let mut log = MlmTrainingLog::default();
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 1..=config.epochs {
        let ex = model.masked_examples(corpus, &mut rng)?;
        idx.shuffle(&mut rng);
        let (mut ce_sum, mut kl_sum, mut min_kl) = (0.0, 0.0, f64::INFINITY);
        for chunk in idx.chunks(config.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &ex[i]).collect();
            let noise = Tensor::normal(chunk.len(), model.net.dim, 1.0, &mut rng);
            let (vals, grads) = {
                let mut g = Graph::new(&model.params);
                let v = model.net.objective(&mut g, &refs, &noise, config.kl_weight);
                let vals = (g.item(v.total), g.item(v.ce), g.item(v.kl));
                (vals, g.backward(v.total))
            };
            if !vals.0.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite masked-LM loss or gradient (loss = {})", vals.0),
                });
            }
            adam.step(&mut model.params, grads);
            let w = chunk.len() as f64;
            ce_sum += vals.1 as f64 * w;
            kl_sum += vals.2 as f64 * w;
            min_kl = min_kl.min(vals.2 as f64);
        }
        let n = corpus.len() as f64;
        log.token_loss.push(ce_sum / n);
        log.kl.push(kl_sum / n);
        log.min_batch_kl.push(min_kl);
    }
    model.trained = true;
    Ok((model, log))
}
