//! Hypothesis-ranking skill router: a BiLSTM utterance encoder, per-field
//! categorical embeddings, a BiLSTM over confidence-sorted hypotheses and a
//! per-position MLP producing action probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use hetaug_autograd::gradcheck::{check_gradients, GradCheckReport};
use hetaug_autograd::nn::{step_masks, Embedding, Linear, LstmCell, Mlp};
use hetaug_autograd::{Adam, Graph, ParamStore, Scalar, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{ConfidenceBin, CorpusSchema, Dataset, Hypothesis, RoutingInstance};
use crate::error::{Error, Result};
use crate::vocab::{tokenize, Vocab};

pub const UNK: &str = "<unk>";
pub const NO_SLOT: &str = "<none>";
const CHECKPOINT_KIND: &str = "router";
const INFERENCE_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub word_embedding_dim: usize,
    pub categorical_embedding_dim: usize,
    pub text_encoder_hidden: usize,
    pub hypothesis_sequence_hidden: usize,
    pub mlp_hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// One output MLP shared by every hypothesis position, or one per position.
    pub share_position_mlp: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            word_embedding_dim: 64,
            categorical_embedding_dim: 16,
            text_encoder_hidden: 64,
            hypothesis_sequence_hidden: 64,
            mlp_hidden: 64,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            share_position_mlp: true,
            clip_norm: Some(5.0),
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_embedding_dim,
            self.categorical_embedding_dim,
            self.text_encoder_hidden,
            self.hypothesis_sequence_hidden,
            self.mlp_hidden,
            self.batch_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Input("router dimensions and batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Input("router learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Width of one encoded hypothesis: two text directions plus six
    /// categorical slices (device type, device status, interpretation,
    /// slot-key bag, confidence bin, skill).
    pub fn hypothesis_dim(&self) -> usize {
        2 * self.text_encoder_hidden + 6 * self.categorical_embedding_dim
    }
}

/// Token and label vocabularies. Words have an OOV bucket; categorical
/// fields do not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterVocab {
    pub words: Vocab,
    pub device_types: Vocab,
    pub device_statuses: Vocab,
    pub domains: Vocab,
    pub intents: Vocab,
    pub slot_keys: Vocab,
    pub skills: Vocab,
    pub max_hypotheses: usize,
}

impl RouterVocab {
    pub fn build(schema: &CorpusSchema, texts: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut words = Vocab::from_tokens([UNK]);
        for t in texts {
            for w in tokenize(t.as_ref()) {
                words.add(w);
            }
        }
        let mut slot_keys = Vocab::from_tokens([NO_SLOT]);
        for k in &schema.slot_keys {
            slot_keys.add(k.as_str());
        }
        Self {
            words,
            device_types: Vocab::from_tokens(&schema.device_types),
            device_statuses: Vocab::from_tokens(&schema.device_statuses),
            domains: Vocab::from_tokens(&schema.domains),
            intents: Vocab::from_tokens(schema.intents.iter().map(|i| i.name.as_str())),
            slot_keys,
            skills: Vocab::from_tokens(&schema.skills),
            max_hypotheses: schema.max_hypotheses,
        }
    }
}

#[derive(Clone, Debug)]
struct EncodedHyp {
    device_type: usize,
    device_status: usize,
    domain: usize,
    intent: usize,
    slots: Vec<usize>,
    bin: usize,
    skill: usize,
}

/// An instance with ids resolved and hypotheses in confidence order.
#[derive(Clone, Debug)]
struct Encoded {
    words: Vec<usize>,
    hyps: Vec<EncodedHyp>,
    /// `order[j]` is the original index of sorted position `j`.
    order: Vec<usize>,
    /// Sorted position of the logged action.
    target: usize,
}

#[derive(Clone, Debug)]
struct Layers {
    words: Embedding,
    device_type: Embedding,
    device_status: Embedding,
    domain: Embedding,
    intent: Embedding,
    slot_key: Embedding,
    bin: Embedding,
    skill: Embedding,
    text_fwd: LstmCell,
    text_bwd: LstmCell,
    seq_fwd: LstmCell,
    seq_bwd: LstmCell,
    /// One MLP when shared, else one per hypothesis position.
    mlps: Vec<Mlp>,
}

impl Layers {
    fn new<T: Scalar, R: Rng>(ps: &mut ParamStore<T>, c: &RouterConfig, v: &RouterVocab, rng: &mut R) -> Self {
        let cd = c.categorical_embedding_dim;
        let n_mlps = if c.share_position_mlp { 1 } else { v.max_hypotheses };
        let mlps = (0..n_mlps)
            .map(|j| Mlp {
                hidden: Linear::new(ps, &format!("mlp{j}.hidden"), 2 * c.hypothesis_sequence_hidden, c.mlp_hidden, rng),
                // Zero output layer: an untrained router is exactly uniform.
                out: Linear::zeroed(ps, &format!("mlp{j}.out"), c.mlp_hidden, 1),
            })
            .collect();
        Self {
            words: Embedding::new(ps, "emb.words", v.words.len(), c.word_embedding_dim, rng),
            device_type: Embedding::new(ps, "emb.device_type", v.device_types.len(), cd, rng),
            device_status: Embedding::new(ps, "emb.device_status", v.device_statuses.len(), cd, rng),
            domain: Embedding::new(ps, "emb.domain", v.domains.len(), cd, rng),
            intent: Embedding::new(ps, "emb.intent", v.intents.len(), cd, rng),
            slot_key: Embedding::new(ps, "emb.slot_key", v.slot_keys.len(), cd, rng),
            bin: Embedding::new(ps, "emb.bin", ConfidenceBin::ALL.len(), cd, rng),
            skill: Embedding::new(ps, "emb.skill", v.skills.len(), cd, rng),
            text_fwd: LstmCell::new(ps, "text.fwd", c.word_embedding_dim, c.text_encoder_hidden, rng),
            text_bwd: LstmCell::new(ps, "text.bwd", c.word_embedding_dim, c.text_encoder_hidden, rng),
            seq_fwd: LstmCell::new(ps, "seq.fwd", c.hypothesis_dim(), c.hypothesis_sequence_hidden, rng),
            seq_bwd: LstmCell::new(ps, "seq.bwd", c.hypothesis_dim(), c.hypothesis_sequence_hidden, rng),
            mlps,
        }
    }

    /// BiLSTM final states for a batch of token-id sequences: `B x 2H`.
    fn encode_text<T: Scalar>(&self, g: &mut Graph<'_, T>, seqs: &[&[usize]]) -> Var {
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
        let (_, hf) = self.text_fwd.run(g, xf, b, &masks);
        let xb = self.words.forward(g, &bwd);
        let (_, hb) = self.text_bwd.run(g, xb, b, &masks);
        g.concat_cols(&[hf, hb])
    }

    /// Hypothesis vectors `[text | c^d | c^s | nlu | slots | bin | skill]`.
    /// `text_rows[m]` selects the row of `text` belonging to hypothesis `m`.
    fn embed_hyps<T: Scalar>(&self, g: &mut Graph<'_, T>, text: Var, text_rows: &[usize], hyps: &[&EncodedHyp]) -> Var {
        let pick = |f: fn(&EncodedHyp) -> usize| hyps.iter().map(|h| f(h)).collect::<Vec<_>>();
        let tx = g.gather_rows(text, text_rows);
        let dt = self.device_type.forward(g, &pick(|h| h.device_type));
        let ds = self.device_status.forward(g, &pick(|h| h.device_status));
        let dom = self.domain.forward(g, &pick(|h| h.domain));
        let int = self.intent.forward(g, &pick(|h| h.intent));
        let nlu = g.add(dom, int);
        let bags: Vec<Vec<usize>> = hyps.iter().map(|h| h.slots.clone()).collect();
        let slots = self.slot_key.mean_bags(g, &bags);
        let bin = self.bin.forward(g, &pick(|h| h.bin));
        let skill = self.skill.forward(g, &pick(|h| h.skill));
        g.concat_cols(&[tx, dt, ds, nlu, slots, bin, skill])
    }

    /// Log-probabilities over each instance's sorted hypotheses, stacked as
    /// an `M x 1` column (instance-major), plus per-instance row offsets.
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &[&Encoded]) -> (Var, Vec<usize>) {
        let b = batch.len();
        let seqs: Vec<&[usize]> = batch.iter().map(|e| e.words.as_slice()).collect();
        let text = self.encode_text(g, &seqs);

        let counts: Vec<usize> = batch.iter().map(|e| e.hyps.len()).collect();
        let mut offsets = Vec::with_capacity(b);
        let mut text_rows = Vec::new();
        let mut hyps = Vec::new();
        let mut positions = Vec::new();
        for (r, e) in batch.iter().enumerate() {
            offsets.push(hyps.len());
            for (j, h) in e.hyps.iter().enumerate() {
                text_rows.push(r);
                hyps.push(h);
                positions.push(j);
            }
        }
        let emb = self.embed_hyps(g, text, &text_rows, &hyps);

        let steps = counts.iter().copied().max().unwrap_or(0);
        let masks = step_masks(&counts, steps);
        let mut f_idx = vec![0; steps * b];
        let mut b_idx = vec![0; steps * b];
        for r in 0..b {
            for p in 0..steps {
                let (o, n) = (offsets[r], counts[r]);
                f_idx[p * b + r] = if p < n { o + p } else { o };
                b_idx[p * b + r] = if p < n { o + n - 1 - p } else { o };
            }
        }
        let xf = g.gather_rows(emb, &f_idx);
        let (outs_f, _) = self.seq_fwd.run(g, xf, b, &masks);
        let xb = g.gather_rows(emb, &b_idx);
        let (outs_b, _) = self.seq_bwd.run(g, xb, b, &masks);
        let of = g.concat_rows(&outs_f);
        let ob = g.concat_rows(&outs_b);
        let mut fi = Vec::with_capacity(hyps.len());
        let mut bi = Vec::with_capacity(hyps.len());
        for r in 0..b {
            for j in 0..counts[r] {
                fi.push(j * b + r);
                bi.push((counts[r] - 1 - j) * b + r);
            }
        }
        let hf = g.gather_rows(of, &fi);
        let hb = g.gather_rows(ob, &bi);
        let h = g.concat_cols(&[hf, hb]);

        let logits = if self.mlps.len() == 1 {
            self.mlps[0].forward(g, h)
        } else {
            let mut parts = Vec::new();
            let mut placed = vec![0; hyps.len()];
            let mut next = 0;
            for (j, mlp) in self.mlps.iter().enumerate() {
                let rows: Vec<usize> = (0..hyps.len()).filter(|&m| positions[m] == j).collect();
                if rows.is_empty() {
                    continue;
                }
                for &m in &rows {
                    placed[m] = next;
                    next += 1;
                }
                let sub = g.gather_rows(h, &rows);
                parts.push(mlp.forward(g, sub));
            }
            let cat = g.concat_rows(&parts);
            g.gather_rows(cat, &placed)
        };
        (g.segment_log_softmax(logits, &counts), offsets)
    }

    /// Mean negative log-likelihood of the logged actions.
    fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &[&Encoded]) -> Var {
        let (logp, offsets) = self.forward(g, batch);
        let rows: Vec<usize> = batch.iter().zip(&offsets).map(|(e, o)| o + e.target).collect();
        let picked = g.gather_rows(logp, &rows);
        let s = g.sum_all(picked);
        g.scale(s, T::lit(-1.0 / batch.len() as f64))
    }
}

/// Per-epoch training record. Index 0 is the initialisation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
    pub valid_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// Trained (or freshly initialised) router parameters with their vocabulary.
#[derive(Clone, Debug)]
pub struct RouterParams<T: Scalar> {
    pub config: RouterConfig,
    pub vocab: RouterVocab,
    pub schema_hash: String,
    pub params: ParamStore<T>,
    pub best_epoch: usize,
    pub valid_accuracy: Option<f64>,
    layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct RouterMeta {
    config: RouterConfig,
    vocab: RouterVocab,
    schema_hash: String,
    best_epoch: usize,
    valid_accuracy: Option<f64>,
}

impl<T: Scalar> RouterParams<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &RouterConfig, schema: &CorpusSchema, vocab: RouterVocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layers = Layers::new(&mut params, config, &vocab, &mut rng);
        Ok(Self {
            config: config.clone(),
            vocab,
            schema_hash: schema.hash(),
            params,
            best_epoch: 0,
            valid_accuracy: None,
            layers,
        })
    }

    /// Same model in another scalar type.
    pub fn cast<U: Scalar>(&self) -> RouterParams<U> {
        RouterParams {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            params: self.params.cast(),
            best_epoch: self.best_epoch,
            valid_accuracy: self.valid_accuracy,
            layers: self.layers.clone(),
        }
    }

    fn encode_hyp(&self, h: &Hypothesis) -> Result<EncodedHyp> {
        let v = &self.vocab;
        let mut slots: Vec<usize> = h
            .nlu
            .slots
            .iter()
            .map(|s| v.slot_keys.require(&s.key, "slot key"))
            .collect::<Result<_>>()?;
        if slots.is_empty() {
            slots.push(0);
        }
        Ok(EncodedHyp {
            device_type: v.device_types.require(&h.device_type, "device type")?,
            device_status: v.device_statuses.require(&h.device_status, "device status")?,
            domain: v.domains.require(&h.nlu.domain, "domain")?,
            intent: v.intents.require(&h.nlu.intent, "intent")?,
            slots,
            bin: h.confidence_bin.rank(),
            skill: v.skills.require(&h.skill, "skill")?,
        })
    }

    fn encode_words(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text)
            .iter()
            .map(|w| self.vocab.words.id(w).unwrap_or(0))
            .collect();
        if ids.is_empty() {
            ids.push(0);
        }
        ids
    }

    fn encode(&self, hyps: &[Hypothesis], logged: usize) -> Result<Encoded> {
        if hyps.is_empty() {
            return Err(Error::Input("empty hypothesis list".into()));
        }
        if hyps.len() > self.vocab.max_hypotheses {
            return Err(Error::Input(format!(
                "{} hypotheses exceed the limit of {}",
                hyps.len(),
                self.vocab.max_hypotheses
            )));
        }
        let mut enc: Vec<EncodedHyp> = hyps.iter().map(|h| self.encode_hyp(h)).collect::<Result<_>>()?;
        // Within a bin, order by content so that the order-sensitive sequence
        // encoder sees the same sequence however equal-bin inputs arrive;
        // exact duplicates keep their original order.
        let mut order: Vec<usize> = (0..hyps.len()).collect();
        order.sort_by_key(|&i| {
            let e = &enc[i];
            (e.bin, e.intent, e.skill, e.domain, e.slots.clone(), i)
        });
        let mut slots: Vec<Option<EncodedHyp>> = enc.drain(..).map(Some).collect();
        let enc: Vec<EncodedHyp> = order.iter().map(|&i| slots[i].take().expect("each index once")).collect();
        let target = order.iter().position(|&i| i == logged).unwrap_or(0);
        Ok(Encoded {
            words: self.encode_words(&hyps[0].text),
            hyps: enc,
            order,
            target,
        })
    }

    fn encode_all(&self, instances: &[RoutingInstance]) -> Result<Vec<Encoded>> {
        instances
            .iter()
            .map(|i| self.encode(&i.hypotheses, i.logged_action))
            .collect()
    }

    /// The `d`-dimensional representation of one hypothesis.
    pub fn encode_hypothesis(&self, h: &Hypothesis) -> Result<Vec<T>> {
        let enc = self.encode_hyp(h)?;
        let words = self.encode_words(&h.text);
        let mut g = Graph::inference(&self.params);
        let text = self.layers.encode_text(&mut g, &[&words]);
        let e = self.layers.embed_hyps(&mut g, text, &[0], &[&enc]);
        Ok(g.value(e).data().to_vec())
    }

    /// Action probabilities in the original hypothesis order.
    pub fn route(&self, hyps: &[Hypothesis]) -> Result<Vec<f64>> {
        let enc = self.encode(hyps, 0)?;
        Ok(self.probabilities(&[&enc]).pop().expect("one instance"))
    }

    fn probabilities(&self, batch: &[&Encoded]) -> Vec<Vec<f64>> {
        let mut g = Graph::inference(&self.params);
        let (logp, offsets) = self.layers.forward(&mut g, batch);
        let lp = g.value(logp).data();
        batch
            .iter()
            .zip(&offsets)
            .map(|(e, &o)| {
                let mut p = vec![0.0; e.hyps.len()];
                for (j, &orig) in e.order.iter().enumerate() {
                    p[orig] = lp[o + j].as_f64().exp();
                }
                p
            })
            .collect()
    }

    /// Mean training loss over instances, without updating anything.
    pub fn mean_loss(&self, instances: &[RoutingInstance]) -> Result<f64> {
        let enc = self.encode_all(instances)?;
        Ok(self.mean_loss_encoded(&enc))
    }

    fn mean_loss_encoded(&self, enc: &[Encoded]) -> f64 {
        let mut total = 0.0;
        for chunk in enc.chunks(INFERENCE_BATCH) {
            let refs: Vec<&Encoded> = chunk.iter().collect();
            let mut g = Graph::inference(&self.params);
            let l = self.layers.loss(&mut g, &refs);
            total += g.item(l).as_f64() * chunk.len() as f64;
        }
        total / enc.len().max(1) as f64
    }

    /// Finite-difference check of the training loss on a frozen batch.
    pub fn gradient_check<R: Rng>(
        &mut self,
        batch: &[RoutingInstance],
        coords_per_param: usize,
        eps: f64,
        rel_tol: f64,
        rng: &mut R,
    ) -> Result<GradCheckReport> {
        let enc = self.encode_all(batch)?;
        let refs: Vec<&Encoded> = enc.iter().collect();
        let layers = &self.layers;
        Ok(check_gradients(
            &mut self.params,
            |g| layers.loss(g, &refs),
            coords_per_param,
            eps,
            rel_tol,
            1e-9,
            rng,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = RouterMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            schema_hash: self.schema_hash.clone(),
            best_epoch: self.best_epoch,
            valid_accuracy: self.valid_accuracy,
        };
        checkpoint::save(path, CHECKPOINT_KIND, serde_json::to_value(meta)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = checkpoint::load(path)?;
        let meta: RouterMeta = serde_json::from_value(checkpoint::expect_kind(&manifest, CHECKPOINT_KIND)?.clone())?;
        meta.config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layers = Layers::new(&mut params, &meta.config, &meta.vocab, &mut rng);
        checkpoint::restore(&mut params, &tensors)?;
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            schema_hash: meta.schema_hash,
            params,
            best_epoch: meta.best_epoch,
            valid_accuracy: meta.valid_accuracy,
            layers,
        })
    }
}

/// Anything that maps an instance's hypotheses to action probabilities.
pub trait RoutingPolicy {
    fn route_batch(&self, instances: &[RoutingInstance]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Scalar> RoutingPolicy for RouterParams<T> {
    fn route_batch(&self, instances: &[RoutingInstance]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode_all(instances)?;
        let mut out = Vec::with_capacity(enc.len());
        for chunk in enc.chunks(INFERENCE_BATCH) {
            let refs: Vec<&Encoded> = chunk.iter().collect();
            out.extend(self.probabilities(&refs));
        }
        Ok(out)
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn hits(policy: &dyn RoutingPolicy, test: &Dataset) -> Result<Vec<bool>> {
    if test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let probs = policy.route_batch(&test.instances)?;
    Ok(probs
        .iter()
        .zip(&test.instances)
        .map(|(p, inst)| argmax(p) == inst.logged_action)
        .collect())
}

/// Fraction of instances whose argmax action equals the logged action.
pub fn replication_accuracy(policy: &dyn RoutingPolicy, test: &Dataset) -> Result<f64> {
    let h = hits(policy, test)?;
    Ok(h.iter().filter(|&&x| x).count() as f64 / h.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentAccuracy {
    pub accuracy: f64,
    pub count: usize,
}

/// Replication accuracy grouped by logged-action intent.
pub fn per_intent_accuracy(
    policy: &dyn RoutingPolicy,
    test: &Dataset,
) -> Result<BTreeMap<String, IntentAccuracy>> {
    let h = hits(policy, test)?;
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (inst, ok) in test.instances.iter().zip(h) {
        let e = tally.entry(inst.logged_intent().to_string()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(k, (c, n))| {
            (
                k,
                IntentAccuracy {
                    accuracy: c as f64 / n as f64,
                    count: n,
                },
            )
        })
        .collect())
}

/// Trains with cross-entropy against the logged action and returns the
/// parameters of the epoch with the best validation accuracy.
pub fn train_router(
    train: &Dataset,
    valid: &Dataset,
    config: &RouterConfig,
) -> Result<(RouterParams<f32>, TrainingLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if train.schema != valid.schema {
        return Err(Error::Schema("train and valid datasets use different schemas".into()));
    }
    let vocab = RouterVocab::build(&train.schema, train.instances.iter().map(|i| i.hypotheses[0].text.as_str()));
    let mut model = RouterParams::<f32>::init(config, &train.schema, vocab)?;
    let enc_train = model.encode_all(&train.instances)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(config.learning_rate);
    if let Some(c) = config.clip_norm {
        adam = adam.with_clip_norm(c);
    }
    let valid_acc = |m: &RouterParams<f32>| -> Result<Option<f64>> {
        if valid.is_empty() {
            Ok(None)
        } else {
            replication_accuracy(m, valid).map(Some)
        }
    };
    let mut log = TrainingLog::default();
    log.epoch_loss.push(model.mean_loss_encoded(&enc_train));
    let init_acc = valid_acc(&model)?;
    log.valid_accuracy.push(init_acc.unwrap_or(f64::NAN));
    let mut best = (init_acc, model.params.clone(), 0usize);

    let mut idx: Vec<usize> = (0..enc_train.len()).collect();
    for epoch in 1..=config.epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in idx.chunks(config.batch_size) {
            let refs: Vec<&Encoded> = chunk.iter().map(|&i| &enc_train[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::new(&model.params);
                let l = model.layers.loss(&mut g, &refs);
                (g.item(l), g.backward(l))
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss or gradient (loss = {loss})"),
                });
            }
            adam.step(&mut model.params, grads);
            total += loss as f64 * chunk.len() as f64;
        }
        log.epoch_loss.push(total / enc_train.len() as f64);
        let acc = valid_acc(&model)?;
        log.valid_accuracy.push(acc.unwrap_or(f64::NAN));
        let improved = match (acc, best.0) {
            (Some(a), Some(b)) => a > b,
            (None, _) => true,
            (Some(_), None) => true,
        };
        if improved {
            best = (acc, model.params.clone(), epoch);
        }
    }
    model.params = best.1;
    model.best_epoch = best.2;
    model.valid_accuracy = best.0;
    log.best_epoch = best.2;
    Ok((model, log))
}
