//! Conditional VAE utterance generator. A bidirectional GRU encodes the
//! utterance; with the condition embedding it parameterises a diagonal
//! Gaussian posterior. The prior is either `N(0, I)` (cVAE) or produced from
//! the condition by a small prior network (pcVAE). A GRU decoder receives
//! `[z; Emb(c)]` in its initial state and at every step.

use std::path::Path;

use hetaug_autograd::gradcheck::{check_gradients, GradCheckReport};
use hetaug_autograd::nn::{step_masks, Embedding, GruCell, Linear};
use hetaug_autograd::{Adam, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::condition::{ConditionEncoder, ConditionVocab, EncodedCondition};
use crate::corpus::{Condition, CorpusSchema, Dataset, RoutingInstance};
use crate::error::{Error, Result};
use crate::sampling::{sample_index, SamplingConfig};
use crate::vocab::{tokenize, Vocab};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
const CHECKPOINT_KIND: &str = "vae";
const EVAL_BATCH: usize = 256;
const SAMPLE_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub word_embedding_dim: usize,
    /// Per direction.
    pub utterance_encoder_hidden: usize,
    pub context_encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub latent_dim: usize,
    pub prior_net_bottleneck: usize,
    pub kl_weight: f64,
    /// Linear KL warm-up over this many epochs; 0 keeps the weight fixed.
    pub kl_anneal_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// pcVAE when set, cVAE otherwise.
    pub use_prior_network: bool,
    /// Every dimension above is divided by this (minimum 1).
    pub desk_scale_factor: usize,
    pub sampling: SamplingConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            word_embedding_dim: 512,
            utterance_encoder_hidden: 1024,
            context_encoder_hidden: 128,
            decoder_hidden: 1024,
            latent_dim: 128,
            prior_net_bottleneck: 100,
            kl_weight: 0.1,
            kl_anneal_epochs: 0,
            batch_size: 256,
            learning_rate: 1e-3,
            epochs: 30,
            use_prior_network: false,
            desk_scale_factor: 8,
            sampling: SamplingConfig {
                top_p: 1.0,
                temperature: 1.0,
            },
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Dimensions after desk scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeDims {
    pub embed: usize,
    pub encoder: usize,
    pub context: usize,
    pub decoder: usize,
    pub latent: usize,
    pub bottleneck: usize,
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_embedding_dim,
            self.utterance_encoder_hidden,
            self.context_encoder_hidden,
            self.decoder_hidden,
            self.latent_dim,
            self.prior_net_bottleneck,
            self.batch_size,
            self.desk_scale_factor,
        ];
        if dims.contains(&0) {
            return Err(Error::Input("VAE dimensions, batch size and scale factor must be ≥ 1".into()));
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::Input("kl_weight must be non-negative".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Input("learning_rate must be positive".into()));
        }
        self.sampling.validate()
    }

    pub fn dims(&self) -> VaeDims {
        let s = |d: usize| (d / self.desk_scale_factor).max(1);
        VaeDims {
            embed: s(self.word_embedding_dim),
            encoder: s(self.utterance_encoder_hidden),
            context: s(self.context_encoder_hidden),
            decoder: s(self.decoder_hidden),
            latent: s(self.latent_dim),
            bottleneck: s(self.prior_net_bottleneck),
        }
    }

    fn kl_weight_at(&self, epoch: usize) -> f64 {
        if self.kl_anneal_epochs == 0 {
            self.kl_weight
        } else {
            self.kl_weight * (epoch as f64 / self.kl_anneal_epochs as f64).min(1.0)
        }
    }
}

/// `KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p))` for diagonal Gaussians.
pub fn gaussian_kl(mu_q: &[f64], logvar_q: &[f64], mu_p: &[f64], logvar_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|i| {
            let d = mu_q[i] - mu_p[i];
            0.5 * (logvar_p[i] - logvar_q[i] + (logvar_q[i].exp() + d * d) / logvar_p[i].exp() - 1.0)
        })
        .sum()
}

/// Row-wise KL as a `B x 1` column; `prior = None` means `N(0, I)`.
pub fn gaussian_kl_graph<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, logvar: Var, prior: Option<(Var, Var)>) -> Var {
    let var_q = g.exp(logvar);
    let (num, lv_p) = match prior {
        None => {
            let mu2 = g.mul(mu, mu);
            (g.add(var_q, mu2), None)
        }
        Some((mu_p, lv_p)) => {
            let d = g.sub(mu, mu_p);
            let d2 = g.mul(d, d);
            let num = g.add(var_q, d2);
            let neg = g.neg(lv_p);
            let inv = g.exp(neg);
            (g.mul(num, inv), Some(lv_p))
        }
    };
    let mut t = g.sub(num, logvar);
    if let Some(lv_p) = lv_p {
        t = g.add(t, lv_p);
    }
    let t = g.add_scalar(t, -T::one());
    let s = g.row_sums(t);
    g.scale(s, T::lit(0.5))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `-log P(x | z, c)` summed over tokens (including end of sequence).
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeVocab {
    pub words: Vocab,
    pub condition: ConditionVocab,
    pub max_len: usize,
}

impl VaeVocab {
    pub fn build(schema: &CorpusSchema, texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut words = Vocab::from_tokens([UNK, BOS, EOS]);
        for t in texts {
            for w in tokenize(t.as_ref()) {
                words.add(w);
            }
        }
        Self {
            words,
            condition: ConditionVocab::build(schema),
            max_len: schema.max_utterance_len,
        }
    }

    fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().map(|w| self.words.id(w).unwrap_or(0)).collect();
        if ids.is_empty() {
            ids.push(0);
        }
        ids
    }
}

#[derive(Clone, Debug)]
struct Example {
    words: Vec<usize>,
    cond: EncodedCondition,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Net {
    words: Embedding,
    cond: ConditionEncoder,
    enc_fwd: GruCell,
    enc_bwd: GruCell,
    post_mu: Linear,
    post_lv: Linear,
    prior: Option<(Linear, Linear, Linear)>,
    dec_init: Linear,
    dec: GruCell,
    out: Linear,
    latent: usize,
}

struct ElboVars {
    reconstruction: Var,
    kl: Var,
}

impl Net {
    fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, cfg: &VaeConfig, vocab: &VaeVocab, rng: &mut R) -> Self {
        let d = cfg.dims();
        let v = vocab.words.len();
        let post_in = 2 * d.encoder + d.context;
        let zc = d.latent + d.context;
        let prior = cfg.use_prior_network.then(|| {
            (
                Linear::new(ps, "prior.hidden", d.context, d.bottleneck, rng),
                Linear::new(ps, "prior.mu", d.bottleneck, d.latent, rng),
                Linear::new(ps, "prior.logvar", d.bottleneck, d.latent, rng),
            )
        });
        Self {
            words: Embedding::new(ps, "words", v, d.embed, rng),
            cond: ConditionEncoder::new(ps, "cond", &vocab.condition, d.context, d.context, rng),
            enc_fwd: GruCell::new(ps, "enc_fwd", d.embed, d.encoder, rng),
            enc_bwd: GruCell::new(ps, "enc_bwd", d.embed, d.encoder, rng),
            post_mu: Linear::new(ps, "post.mu", post_in, d.latent, rng),
            post_lv: Linear::new(ps, "post.logvar", post_in, d.latent, rng),
            prior,
            dec_init: Linear::new(ps, "dec_init", zc, d.decoder, rng),
            dec: GruCell::new(ps, "dec", d.embed + zc, d.decoder, rng),
            out: Linear::new(ps, "out", d.decoder, v, rng),
            latent: d.latent,
        }
    }

    fn prior_params<T: Scalar>(&self, g: &mut Graph<'_, T>, c: Var) -> Option<(Var, Var)> {
        self.prior.as_ref().map(|(h, mu, lv)| {
            let x = h.forward(g, c);
            let x = g.tanh(x);
            (mu.forward(g, x), lv.forward(g, x))
        })
    }

    fn posterior<T: Scalar>(&self, g: &mut Graph<'_, T>, seqs: &[&[usize]], c: Var) -> (Var, Var) {
        let b = seqs.len();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut fwd = vec![0; steps * b];
        let mut bwd = vec![0; steps * b];
        for (r, s) in seqs.iter().enumerate() {
            for t in 0..s.len() {
                fwd[t * b + r] = s[t];
                bwd[t * b + r] = s[s.len() - 1 - t];
            }
        }
        let masks = step_masks(&lens, steps);
        let xf = self.words.forward(g, &fwd);
        let (_, hf) = self.enc_fwd.run(g, xf, b, &masks, None);
        let xb = self.words.forward(g, &bwd);
        let (_, hb) = self.enc_bwd.run(g, xb, b, &masks, None);
        let h = g.concat_cols(&[hf, hb, c]);
        (self.post_mu.forward(g, h), self.post_lv.forward(g, h))
    }

    /// Teacher-forced `-log P(x | z, c)` summed over the batch.
    fn reconstruction<T: Scalar>(&self, g: &mut Graph<'_, T>, seqs: &[&[usize]], zc: Var) -> Var {
        let b = seqs.len();
        let lens: Vec<usize> = seqs.iter().map(|s| s.len() + 1).collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let (bos, eos) = (1usize, 2usize);
        let mut inputs = vec![bos; steps * b];
        let mut targets = vec![eos; steps * b];
        let mut weights = vec![T::zero(); steps * b];
        for (r, s) in seqs.iter().enumerate() {
            for t in 0..=s.len() {
                if t > 0 {
                    inputs[t * b + r] = s[t - 1];
                }
                targets[t * b + r] = if t < s.len() { s[t] } else { eos };
                weights[t * b + r] = T::one();
            }
        }
        let masks = step_masks(&lens, steps);
        let h0 = self.dec_init.forward(g, zc);
        let h0 = g.tanh(h0);
        let emb = self.words.forward(g, &inputs);
        let tile: Vec<usize> = (0..steps * b).map(|i| i % b).collect();
        let zc_t = g.gather_rows(zc, &tile);
        let x = g.concat_cols(&[emb, zc_t]);
        let (outs, _) = self.dec.run(g, x, b, &masks, Some(h0));
        let hs = g.concat_rows(&outs);
        let logits = self.out.forward(g, hs);
        g.cross_entropy(logits, &targets, Some(&weights))
    }

    /// Per-batch means of the reconstruction and KL terms, with the
    /// reparameterisation noise supplied by the caller.
    fn elbo<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &[&Example], noise: &Tensor<T>) -> ElboVars {
        let b = batch.len();
        let conds: Vec<&EncodedCondition> = batch.iter().map(|e| &e.cond).collect();
        let seqs: Vec<&[usize]> = batch.iter().map(|e| e.words.as_slice()).collect();
        let c = self.cond.forward(g, &conds);
        let (mu, lv) = self.posterior(g, &seqs, c);
        let half = g.scale(lv, T::lit(0.5));
        let std = g.exp(half);
        let eps = g.constant(noise.clone());
        let e = g.mul(std, eps);
        let z = g.add(mu, e);
        let zc = g.concat_cols(&[z, c]);
        let rec = self.reconstruction(g, &seqs, zc);
        let prior = self.prior_params(g, c);
        let kl = gaussian_kl_graph(g, mu, lv, prior);
        let kl = g.sum_all(kl);
        let inv = T::lit(1.0 / b as f64);
        ElboVars {
            reconstruction: g.scale(rec, inv),
            kl: g.scale(kl, inv),
        }
    }

    fn objective<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &[&Example], noise: &Tensor<T>, kl_weight: f64) -> (Var, ElboVars) {
        let terms = self.elbo(g, batch, noise);
        let kl = g.scale(terms.kl, T::lit(kl_weight));
        (g.add(terms.reconstruction, kl), terms)
    }
}

fn noise<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::normal(rows, cols, 1.0, rng)
}

/// Per-epoch means; index 0 is a pass at initialisation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainingLog {
    pub reconstruction: Vec<f64>,
    pub kl: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeParams<T: Scalar> {
    pub config: VaeConfig,
    pub vocab: VaeVocab,
    pub schema_hash: String,
    pub params: ParamStore<T>,
    pub trained: bool,
    net: Net,
}

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    vocab: VaeVocab,
    schema_hash: String,
    trained: bool,
}

impl<T: Scalar> VaeParams<T> {
    pub fn init(corpus: &Dataset, config: &VaeConfig) -> Result<Self> {
        config.validate()?;
        let vocab = VaeVocab::build(&corpus.schema, corpus.instances.iter().map(|i| i.hypotheses[0].text.as_str()));
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

    pub fn cast<U: Scalar>(&self) -> VaeParams<U> {
        VaeParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            params: self.params.cast(),
            trained: self.trained,
            net: self.net.clone(),
        }
    }

    pub fn is_conditional_prior(&self) -> bool {
        self.net.prior.is_some()
    }

    fn example(&self, text: &str, c: &Condition) -> Result<Example> {
        Ok(Example {
            words: self.vocab.encode_text(text),
            cond: self.vocab.condition.encode(c)?,
        })
    }

    fn examples(&self, data: &Dataset) -> Result<Vec<Example>> {
        if data.schema.hash() != self.schema_hash {
            return Err(Error::Schema("dataset schema differs from the generator's training schema".into()));
        }
        data.instances
            .iter()
            .map(|i| self.example(&i.hypotheses[0].text, &i.condition()))
            .collect()
    }

    /// One-sample ELBO terms for a single utterance under condition `c`.
    pub fn elbo<R: Rng>(&self, text: &str, c: &Condition, rng: &mut R) -> Result<ElboTerms> {
        let ex = self.example(text, c)?;
        let eps = noise(1, self.net.latent, rng);
        let mut g = Graph::inference(&self.params);
        let t = self.net.elbo(&mut g, &[&ex], &eps);
        let terms = ElboTerms {
            reconstruction: g.item(t.reconstruction).as_f64(),
            kl: g.item(t.kl).as_f64(),
        };
        if !(terms.reconstruction.is_finite() && terms.kl.is_finite()) {
            return Err(Error::Numeric(format!("non-finite ELBO terms {terms:?}")));
        }
        Ok(terms)
    }

    fn evaluate_examples<R: Rng>(&self, ex: &[Example], rng: &mut R) -> ElboTerms {
        let mut acc = ElboTerms::default();
        for chunk in ex.chunks(EVAL_BATCH) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let eps = noise(chunk.len(), self.net.latent, rng);
            let mut g = Graph::inference(&self.params);
            let t = self.net.elbo(&mut g, &refs, &eps);
            let w = chunk.len() as f64;
            acc.reconstruction += g.item(t.reconstruction).as_f64() * w;
            acc.kl += g.item(t.kl).as_f64() * w;
        }
        let n = ex.len().max(1) as f64;
        ElboTerms {
            reconstruction: acc.reconstruction / n,
            kl: acc.kl / n,
        }
    }

    /// Mean per-utterance ELBO terms over a dataset, one posterior sample each.
    pub fn evaluate(&self, data: &Dataset, seed: u64) -> Result<ElboTerms> {
        let ex = self.examples(data)?;
        if ex.is_empty() {
            return Err(Error::Input("empty evaluation set".into()));
        }
        Ok(self.evaluate_examples(&ex, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    /// Finite-difference check of the training objective on a frozen batch
    /// with frozen reparameterisation noise.
    pub fn gradient_check<R: Rng>(
        &mut self,
        batch: &Dataset,
        coords_per_param: usize,
        eps: f64,
        rel_tol: f64,
        rng: &mut R,
    ) -> Result<GradCheckReport> {
        let ex = self.examples(batch)?;
        let refs: Vec<&Example> = ex.iter().collect();
        let z_noise = noise(ex.len(), self.net.latent, rng);
        let w = self.config.kl_weight;
        let net = &self.net;
        Ok(check_gradients(
            &mut self.params,
            |g| net.objective(g, &refs, &z_noise, w).0,
            coords_per_param,
            eps,
            rel_tol,
            1e-9,
            rng,
        ))
    }

    /// Prior mean for condition `c`; zeros for the cVAE.
    pub fn prior_mean(&self, c: &Condition) -> Result<Vec<f64>> {
        let enc = self.vocab.condition.encode(c)?;
        let mut g = Graph::inference(&self.params);
        let cv = self.net.cond.forward(&mut g, &[&enc]);
        Ok(match self.net.prior_params(&mut g, cv) {
            Some((mu, _)) => g.value(mu).data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; self.net.latent],
        })
    }

    /// Decodes from given latent codes; greedy when `sampling` is greedy.
    fn decode<R: Rng>(&self, g: &mut Graph<'_, T>, zc: Var, b: usize, max_len: usize, sampling: &SamplingConfig, rng: &mut R) -> Vec<Vec<String>> {
        let (bos, eos) = (self.vocab.words.id(BOS).unwrap_or(1), self.vocab.words.id(EOS).unwrap_or(2));
        let h0 = self.net.dec_init.forward(g, zc);
        let mut h = g.tanh(h0);
        let mut prev = vec![bos; b];
        let mut out: Vec<Vec<String>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let step_mask = vec![vec![true; b]];
        for _ in 0..=max_len {
            let emb = self.net.words.forward(g, &prev);
            let x = g.concat_cols(&[emb, zc]);
            let (_, h_new) = self.net.dec.run(g, x, b, &step_mask, Some(h));
            h = h_new;
            let logits = self.net.out.forward(g, h);
            let lv = g.value(logits).clone();
            for r in 0..b {
                if done[r] {
                    continue;
                }
                let row: Vec<f64> = lv.row(r).iter().map(|x| x.as_f64()).collect();
                let tok = sample_index(&row, sampling, &[bos], rng);
                if tok == eos || out[r].len() == max_len {
                    done[r] = true;
                } else {
                    out[r].push(self.vocab.words.token(tok).to_string());
                }
                prev[r] = tok;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        out
    }

    /// `n` token sequences per condition, latent codes drawn from the prior.
    pub fn sample_batch<R: Rng>(
        &self,
        conditions: &[Condition],
        n: usize,
        max_len: usize,
        sampling: &SamplingConfig,
        rng: &mut R,
    ) -> Result<Vec<Vec<Vec<String>>>> {
        if !self.trained {
            return Err(Error::State("VAE has not been trained".into()));
        }
        sampling.validate()?;
        let enc: Vec<EncodedCondition> = conditions
            .iter()
            .map(|c| self.vocab.condition.encode(c))
            .collect::<Result<_>>()?;
        let requests: Vec<usize> = (0..conditions.len()).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let mut out: Vec<Vec<Vec<String>>> = vec![Vec::new(); conditions.len()];
        for chunk in requests.chunks(SAMPLE_BATCH) {
            let conds: Vec<&EncodedCondition> = chunk.iter().map(|&i| &enc[i]).collect();
            let b = chunk.len();
            let mut g = Graph::inference(&self.params);
            let c = self.net.cond.forward(&mut g, &conds);
            let eps = g.constant(noise(b, self.net.latent, rng));
            let z = match self.net.prior_params(&mut g, c) {
                Some((mu, lv)) => {
                    let half = g.scale(lv, T::lit(0.5));
                    let std = g.exp(half);
                    let e = g.mul(std, eps);
                    g.add(mu, e)
                }
                None => eps,
            };
            let zc = g.concat_cols(&[z, c]);
            for (&i, seq) in chunk.iter().zip(self.decode(&mut g, zc, b, max_len, sampling, rng)) {
                out[i].push(seq);
            }
        }
        Ok(out)
    }

    /// `n` sampled utterances for one condition from a seeded stream.
    pub fn sample_utterances(&self, c: &Condition, n: usize, max_len: usize, seed: u64) -> Result<Vec<Vec<String>>> {
        if n == 0 {
            return Err(Error::Input("sample count must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampling = self.config.sampling;
        Ok(self
            .sample_batch(std::slice::from_ref(c), n, max_len, &sampling, &mut rng)?
            .pop()
            .unwrap_or_default())
    }

    /// Greedy decode from the posterior mean of each instance's utterance.
    pub fn reconstruct(&self, instances: &[RoutingInstance]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(SAMPLE_BATCH) {
            let ex: Vec<Example> = chunk
                .iter()
                .map(|i| self.example(&i.hypotheses[0].text, &i.condition()))
                .collect::<Result<_>>()?;
            let conds: Vec<&EncodedCondition> = ex.iter().map(|e| &e.cond).collect();
            let seqs: Vec<&[usize]> = ex.iter().map(|e| e.words.as_slice()).collect();
            let mut g = Graph::inference(&self.params);
            let c = self.net.cond.forward(&mut g, &conds);
            let (mu, _) = self.net.posterior(&mut g, &seqs, c);
            let zc = g.concat_cols(&[mu, c]);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let decoded = self.decode(&mut g, zc, chunk.len(), self.vocab.max_len, &SamplingConfig::greedy(), &mut rng);
            out.extend(decoded.into_iter().map(|s| s.join(" ")));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = VaeMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            trained: self.trained,
        };
        checkpoint::save(path, CHECKPOINT_KIND, serde_json::to_value(meta)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let meta: VaeMeta = serde_json::from_value(checkpoint::expect_kind(&manifest, CHECKPOINT_KIND)?.clone())?;
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

/// Minimises the mean negative ELBO over `(utterance, top-1 condition)` pairs.
pub fn train_vae(corpus: &Dataset, config: &VaeConfig) -> Result<(VaeParams<f32>, VaeTrainingLog)> {
    if corpus.is_empty() {
        return Err(Error::Input("empty training corpus".into()));
    }
    let mut model = VaeParams::<f32>::init(corpus, config)?;
    let ex = model.examples(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0003);
    let mut adam = Adam::new(config.learning_rate);
    if let Some(c) = config.clip_norm {
        adam = adam.with_clip_norm(c);
    }
    let mut log = VaeTrainingLog::default();
    let init = model.evaluate_examples(&ex, &mut rng);
    log.reconstruction.push(init.reconstruction);
    log.kl.push(init.kl);
    let mut idx: Vec<usize> = (0..ex.len()).collect();
    for epoch in 1..=config.epochs {
        idx.shuffle(&mut rng);
        let w = config.kl_weight_at(epoch);
        let (mut rec, mut kl) = (0.0, 0.0);
        for chunk in idx.chunks(config.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &ex[i]).collect();
            let eps = noise(chunk.len(), model.net.latent, &mut rng);
            let (vals, grads) = {
                let mut g = Graph::new(&model.params);
                let (obj, terms) = model.net.objective(&mut g, &refs, &eps, w);
                let vals = (g.item(obj), g.item(terms.reconstruction), g.item(terms.kl));
                (vals, g.backward(obj))
            };
            if !vals.0.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite VAE objective or gradient (objective = {})", vals.0),
                });
            }
            adam.step(&mut model.params, grads);
            rec += vals.1 as f64 * chunk.len() as f64;
            kl += vals.2 as f64 * chunk.len() as f64;
        }
        log.reconstruction.push(rec / ex.len() as f64);
        log.kl.push(kl / ex.len() as f64);
    }
    model.trained = true;
    Ok((model, log))
}
