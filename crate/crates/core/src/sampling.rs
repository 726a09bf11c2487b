//! Token sampling shared by the generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Nucleus mass in `(0, 1]`.
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 1.0,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            top_p: 1.0,
            temperature: 0.0,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= GREEDY_TEMPERATURE
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Input(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Input(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Draws one index from unnormalised logits. Indices in `banned` are never
/// drawn unless every index is banned.
pub fn sample_index<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, banned: &[usize], rng: &mut R) -> usize {
    let allowed = |i: usize| !banned.contains(&i) || banned.len() >= logits.len();
    if cfg.is_greedy() {
        let mut best: Option<usize> = None;
        for (i, &v) in logits.iter().enumerate() {
            if allowed(i) && best.is_none_or(|b| v > logits[b]) {
                best = Some(i);
            }
        }
        return best.unwrap_or(0);
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(i, &v)| (i, ((v - max) / cfg.temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for p in &probs {
        kept += 1;
        mass += p.1 / z;
        if mass >= cfg.top_p {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let total: f64 = nucleus.iter().map(|p| p.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(i, p) in nucleus {
        if u < p {
            return i;
        }
        u -= p;
    }
    nucleus[kept - 1].0
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn greedy_picks_argmax_and_respects_bans() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = SamplingConfig::greedy();
        assert_eq!(sample_index(&[0.1, 2.0, 2.0, -1.0], &g, &[], &mut rng), 1);
        assert_eq!(sample_index(&[0.1, 2.0, 2.0, -1.0], &g, &[1], &mut rng), 2);
    }

    #[test]
    fn small_nucleus_keeps_only_the_top_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplingConfig {
            top_p: 0.5,
            temperature: 1.0,
        };
        for _ in 0..200 {
            assert_eq!(sample_index(&[3.0, 0.0, 0.0], &cfg, &[], &mut rng), 0);
        }
    }

    #[test]
    fn full_nucleus_matches_softmax_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = SamplingConfig {
            top_p: 1.0,
            temperature: 1.0,
        };
        let logits = [0.0, 2f64.ln()];
        let n = 20_000;
        let ones = (0..n).filter(|_| sample_index(&logits, &cfg, &[], &mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 2.0 / 3.0).abs() < 0.015);
    }
}
