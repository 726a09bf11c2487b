//! Frequency-aware cross-entropy and the masked contrastive objective, each
//! as a plain function and as a graph builder used in training.

use hetaug_autograd::nn::MASKED_LOGIT;
use hetaug_autograd::{log_sum_exp, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceMode {
    /// Plain cross-entropy.
    Off,
    PreWeight,
    #[default]
    PostWeight,
}

/// Relative token frequencies `f_i` over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFrequencyTable {
    counts: Vec<u64>,
    total: u64,
}

impl TokenFrequencyTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    pub fn from_sequences<'a>(vocab_size: usize, seqs: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut counts = vec![0u64; vocab_size];
        for s in seqs {
            for &t in s {
                counts[t] += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn freq(&self, token: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.counts[token] as f64 / self.total as f64
    }

    pub fn freqs(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|i| self.freq(i)).collect()
    }
}

/// `w_i = 1 - f_i / max_j f_j`.
pub fn face_pre_raw_weights(freqs: &TokenFrequencyTable) -> Result<Vec<f64>> {
    if freqs.is_empty() {
        return Err(Error::Input("empty frequency table".into()));
    }
    if freqs.total() == 0 {
        return Err(Error::Input("all token frequencies are zero".into()));
    }
    let f = freqs.freqs();
    let max = f.iter().copied().fold(0.0, f64::max);
    Ok(f.iter().map(|&x| 1.0 - x / max).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreWeights {
    pub weights: Vec<f64>,
    /// Raw weights were all zero (uniform frequencies) and all-ones was used.
    pub fell_back: bool,
}

/// Raw pre-weights rescaled to mean 1 over the vocabulary.
pub fn face_pre_weights(freqs: &TokenFrequencyTable) -> Result<PreWeights> {
    let raw = face_pre_raw_weights(freqs)?;
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean <= 0.0 {
        return Ok(PreWeights {
            weights: vec![1.0; raw.len()],
            fell_back: true,
        });
    }
    Ok(PreWeights {
        weights: raw.iter().map(|w| w / mean).collect(),
        fell_back: false,
    })
}

/// `1 + ReLU(f(predicted) - f(target)) / sum_j f_j`.
pub fn face_post_weight(predicted: usize, target: usize, freqs: &TokenFrequencyTable) -> f64 {
    let mass: f64 = freqs.freqs().iter().sum();
    if mass <= 0.0 {
        return 1.0;
    }
    1.0 + (freqs.freq(predicted) - freqs.freq(target)).max(0.0) / mass
}

/// Per-step weighting rule resolved from a mode and a frequency table.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceWeighting {
    pub mode: FaceMode,
    freqs: Vec<f64>,
    mass: f64,
    pre: Vec<f64>,
    pub fell_back: bool,
}

impl FaceWeighting {
    /// `raw` skips the mean-1 rescaling of pre-weights.
    pub fn new(mode: FaceMode, freqs: &TokenFrequencyTable, raw: bool) -> Result<Self> {
        let (pre, fell_back) = match mode {
            FaceMode::PreWeight if raw => (face_pre_raw_weights(freqs)?, false),
            FaceMode::PreWeight => {
                let p = face_pre_weights(freqs)?;
                (p.weights, p.fell_back)
            }
            _ => (Vec::new(), false),
        };
        let f = freqs.freqs();
        Ok(Self {
            mode,
            mass: f.iter().sum(),
            freqs: f,
            pre,
            fell_back,
        })
    }

    pub fn off() -> Self {
        Self {
            mode: FaceMode::Off,
            freqs: Vec::new(),
            mass: 0.0,
            pre: Vec::new(),
            fell_back: false,
        }
    }

    /// Weights for each row of `logits`; `None` under [`FaceMode::Off`].
    pub fn step_weights<T: Scalar>(&self, logits: &Tensor<T>, targets: &[usize]) -> Result<Option<Vec<T>>> {
        if logits.rows() != targets.len() {
            return Err(Error::Input(format!(
                "{} logit rows for {} targets",
                logits.rows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
            return Err(Error::Input(format!("target {t} outside a vocabulary of {}", logits.cols())));
        }
        let width = match self.mode {
            FaceMode::Off => return Ok(None),
            FaceMode::PreWeight => self.pre.len(),
            FaceMode::PostWeight => self.freqs.len(),
        };
        if width != logits.cols() {
            return Err(Error::Input(format!(
                "frequency table covers {width} tokens, logits have {}",
                logits.cols()
            )));
        }
        let w = match self.mode {
            FaceMode::PreWeight => targets.iter().map(|&t| T::lit(self.pre[t])).collect(),
            FaceMode::PostWeight => targets
                .iter()
                .enumerate()
                .map(|(r, &t)| {
                    let p = logits.argmax_row(r);
                    let w = if self.mass > 0.0 {
                        1.0 + (self.freqs[p] - self.freqs[t]).max(0.0) / self.mass
                    } else {
                        1.0
                    };
                    T::lit(w)
                })
                .collect(),
            FaceMode::Off => unreachable!(),
        };
        Ok(Some(w))
    }
}

/// `-sum_t w(t) * log softmax(logits_t)[target_t]`.
pub fn face_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize], weighting: &FaceWeighting) -> Result<f64> {
    let w = weighting.step_weights(logits, targets)?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|x| x.as_f64()).collect();
        let nll = log_sum_exp(&row) - row[t];
        total += w.as_ref().map_or(1.0, |w| w[r].as_f64()) * nll;
    }
    Ok(total)
}

/// Graph form of [`face_loss`]; with the mode off this is exactly
/// `g.cross_entropy(logits, targets, None)`.
pub fn face_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    weighting: &FaceWeighting,
) -> Result<Var> {
    let w = weighting.step_weights(g.value(logits), targets)?;
    Ok(g.cross_entropy(logits, targets, w.as_deref()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn check_batch(n_x: usize, n_y: usize, n_keys: usize, tau: f64) -> Result<()> {
    if n_x < 2 {
        return Err(Error::Input(format!("contrastive batch needs at least 2 items, got {n_x}")));
    }
    if n_y != n_x || n_keys != n_x {
        return Err(Error::Input("contrastive inputs have mismatched lengths".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Input(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Per-item contrastive terms `-log(e^{s_ii} / (e^{s_ii} + sum_j e^{s_ij}))`,
/// `s = cos / tau`, over negatives `j` whose condition key differs from
/// item `i`'s. Items without negatives get 0.
pub fn masked_contrastive_terms(zx: &[Vec<f64>], zy: &[Vec<f64>], keys: &[String], tau: f64) -> Result<Vec<f64>> {
    check_batch(zx.len(), zy.len(), keys.len(), tau)?;
    let n = zx.len();
    Ok((0..n)
        .map(|i| {
            let negs: Vec<usize> = (0..n).filter(|&j| keys[j] != keys[i]).collect();
            if negs.is_empty() {
                return 0.0;
            }
            let mut s = vec![cosine(&zx[i], &zy[i]) / tau];
            s.extend(negs.iter().map(|&j| cosine(&zx[i], &zy[j]) / tau));
            log_sum_exp(&s) - s[0]
        })
        .collect())
}

/// Mean of [`masked_contrastive_terms`] over the batch.
pub fn masked_contrastive_loss(zx: &[Vec<f64>], zy: &[Vec<f64>], keys: &[String], tau: f64) -> Result<f64> {
    let t = masked_contrastive_terms(zx, zy, keys, tau)?;
    Ok(t.iter().sum::<f64>() / t.len() as f64)
}

/// Graph form of [`masked_contrastive_loss`] over `B x d` representations.
pub fn masked_contrastive_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    zx: Var,
    zy: Var,
    keys: &[String],
    tau: f64,
) -> Result<Var> {
    let (bx, _) = g.shape(zx);
    let (by, _) = g.shape(zy);
    check_batch(bx, by, keys.len(), tau)?;
    let n = bx;
    let mut mask = Tensor::zeros(n, n);
    let mut active = Tensor::zeros(n, 1);
    for i in 0..n {
        for j in 0..n {
            if j != i && keys[j] == keys[i] {
                mask.set(i, j, T::lit(MASKED_LOGIT));
            }
        }
        if keys.iter().any(|k| *k != keys[i]) {
            active.set(i, 0, T::one());
        }
    }
    let nx = g.l2_normalize_rows(zx, T::lit(1e-12));
    let ny = g.l2_normalize_rows(zy, T::lit(1e-12));
    let s = g.matmul_t(nx, false, ny, true);
    let s = g.scale(s, T::lit(1.0 / tau));
    let mask = g.constant(mask);
    let s = g.add(s, mask);
    let lsm = g.log_softmax_rows(s);
    let diag: Vec<usize> = (0..n).collect();
    let pos = g.pick(lsm, &diag);
    let active = g.constant(active);
    let pos = g.mul(pos, active);
    let total = g.sum_all(pos);
    Ok(g.scale(total, T::lit(-1.0 / n as f64)))
}
