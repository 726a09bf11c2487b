//! Intrinsic metrics: n-gram LM perplexity, unique rate, Dist-n, Ent-n,
//! field KL and corpus BLEU, plus the report that tabulates them.

mod report;

use std::collections::{BTreeMap, HashMap, HashSet};

pub use report::{
    intrinsic_report, GeneratedSample, GeneratorOutput, MetricReport, MetricRow, Reconstruction, COLUMNS, FIELD_KL_EPS,
};

use crate::error::{Error, Result};

const BOS: &str = "<s>";
const EOS: &str = "</s>";
const UNK: &str = "<unk>";

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Additively smoothed n-gram model with begin/end padding:
/// `P(w | ctx) = (c(ctx, w) + α) / (c(ctx) + α |V|)`, where `V` holds the
/// training words, the end marker and an unknown-word bucket.
#[derive(Clone, Debug)]
pub struct NgramLanguageModel {
    order: usize,
    alpha: f64,
    vocab: HashMap<String, u32>,
    ngrams: HashMap<Vec<u32>, u64>,
    contexts: HashMap<Vec<u32>, u64>,
}

impl NgramLanguageModel {
    pub fn train<S: AsRef<str>>(texts: &[S], order: usize, alpha: f64) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Input("cannot train a language model on an empty corpus".into()));
        }
        let mut vocab_words: Vec<&str> = texts.iter().flat_map(|t| words(t.as_ref())).collect();
        vocab_words.sort_unstable();
        vocab_words.dedup();
        let mut lm = Self::uniform(vocab_words, order, alpha)?;
        for t in texts {
            let ids = lm.padded(t.as_ref());
            for end in order - 1..ids.len() {
                let gram = &ids[end + 1 - order..=end];
                *lm.ngrams.entry(gram.to_vec()).or_insert(0) += 1;
                *lm.contexts.entry(gram[..order - 1].to_vec()).or_insert(0) += 1;
            }
        }
        Ok(lm)
    }

    /// A model with no counts: every next-token distribution is uniform
    /// over the given words plus the end and unknown markers.
    pub fn uniform<S: AsRef<str>>(words: impl IntoIterator<Item = S>, order: usize, alpha: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::Input("n-gram order must be at least 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Input("smoothing α must be positive, otherwise unseen n-grams have zero probability".into()));
        }
        let mut vocab = HashMap::new();
        for w in [EOS, UNK].into_iter().map(str::to_string).chain(words.into_iter().map(|w| w.as_ref().to_string())) {
            let n = vocab.len() as u32;
            vocab.entry(w).or_insert(n);
        }
        // The begin marker is context-only and never predicted.
        let bos = vocab.len() as u32;
        vocab.insert(BOS.to_string(), bos);
        Ok(Self {
            order,
            alpha,
            vocab,
            ngrams: HashMap::new(),
            contexts: HashMap::new(),
        })
    }

    /// Size of the predicted vocabulary (words, end marker, unknown bucket).
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() - 1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn id(&self, w: &str) -> u32 {
        self.vocab.get(w).copied().unwrap_or(self.vocab[UNK])
    }

    fn padded(&self, text: &str) -> Vec<u32> {
        let bos = self.vocab[BOS];
        let mut ids = vec![bos; self.order - 1];
        ids.extend(words(text).into_iter().map(|w| self.id(w)));
        ids.push(self.vocab[EOS]);
        ids
    }

    fn prob_ids(&self, gram: &[u32]) -> f64 {
        let ctx = &gram[..gram.len() - 1];
        let c = self.ngrams.get(gram).copied().unwrap_or(0) as f64;
        let cc = self.contexts.get(ctx).copied().unwrap_or(0) as f64;
        (c + self.alpha) / (cc + self.alpha * self.vocab_size() as f64)
    }

    /// `P(word | context)`; the context is right-aligned and padded with the
    /// begin marker when shorter than `order - 1`.
    pub fn prob(&self, context: &[&str], word: &str) -> f64 {
        let need = self.order - 1;
        let mut gram: Vec<u32> = vec![self.vocab[BOS]; need.saturating_sub(context.len())];
        gram.extend(context[context.len().saturating_sub(need)..].iter().map(|w| self.id(w)));
        gram.push(self.id(word));
        self.prob_ids(&gram)
    }

    /// Predictable tokens, for exhaustive checks.
    pub fn predicted_tokens(&self) -> Vec<String> {
        let mut v: Vec<(&String, &u32)> = self.vocab.iter().filter(|(w, _)| *w != BOS).collect();
        v.sort_by_key(|(_, &i)| i);
        v.into_iter().map(|(w, _)| w.clone()).collect()
    }

    /// Total log-probability of a sentence including its end marker, and
    /// the number of predicted tokens.
    pub fn sentence_logprob(&self, text: &str) -> (f64, usize) {
        let ids = self.padded(text);
        let mut lp = 0.0;
        for end in self.order - 1..ids.len() {
            lp += self.prob_ids(&ids[end + 1 - self.order..=end]).ln();
        }
        (lp, ids.len() + 1 - self.order)
    }
}

/// `exp` of the mean per-token negative log-likelihood, end tokens included.
pub fn perplexity<S: AsRef<str>>(lm: &NgramLanguageModel, texts: &[S]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Input("perplexity of an empty text list".into()));
    }
    let (mut lp, mut n) = (0.0, 0usize);
    for t in texts {
        let (l, k) = lm.sentence_logprob(t.as_ref());
        lp += l;
        n += k;
    }
    Ok((-lp / n as f64).exp())
}

fn normalise(text: &str) -> String {
    words(text).join(" ")
}

/// Distinct whitespace-normalised texts over total texts.
pub fn unique_rate<S: AsRef<str>>(texts: &[S]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Input("unique rate of an empty text list".into()));
    }
    let distinct: HashSet<String> = texts.iter().map(|t| normalise(t.as_ref())).collect();
    Ok(distinct.len() as f64 / texts.len() as f64)
}

fn ngram_counts<S: AsRef<str>>(texts: &[S], n: usize) -> Result<BTreeMap<Vec<String>, usize>> {
    if n < 1 {
        return Err(Error::Input("n-gram size must be at least 1".into()));
    }
    let mut counts = BTreeMap::new();
    for t in texts {
        let w = words(t.as_ref());
        for gram in w.windows(n) {
            *counts
                .entry(gram.iter().map(|s| s.to_string()).collect())
                .or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Input(format!("no {n}-grams in the text list")));
    }
    Ok(counts)
}

/// Unique n-grams over total n-gram occurrences, pooled across texts.
pub fn dist_n<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    let counts = ngram_counts(texts, n)?;
    let total: usize = counts.values().sum();
    Ok(counts.len() as f64 / total as f64)
}

/// Entropy (natural log) of the pooled empirical n-gram distribution.
pub fn ent_n<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    let counts = ngram_counts(texts, n)?;
    let total: f64 = counts.values().sum::<usize>() as f64;
    Ok(-counts
        .values()
        .map(|&f| {
            let p = f as f64 / total;
            p * p.ln()
        })
        .sum::<f64>())
}

/// `KL(true ‖ generated)` between empirical label distributions over
/// `labels`, each smoothed as `(p + ε) / (1 + |labels| ε)`.
pub fn field_kl<S: AsRef<str>>(true_samples: &[S], generated: &[S], labels: &[String], eps: f64) -> Result<f64> {
    if true_samples.is_empty() || generated.is_empty() {
        return Err(Error::Input("field KL needs non-empty sample sets".into()));
    }
    if labels.is_empty() || !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::Input("field KL needs a label space and ε ≥ 0".into()));
    }
    let dist = |samples: &[S]| -> Result<Vec<f64>> {
        let mut c = vec![0.0; labels.len()];
        for s in samples {
            let i = labels
                .iter()
                .position(|l| l == s.as_ref())
                .ok_or_else(|| Error::Schema(format!("label `{}` is outside the field's label space", s.as_ref())))?;
            c[i] += 1.0;
        }
        let n = samples.len() as f64;
        let z = 1.0 + labels.len() as f64 * eps;
        Ok(c.into_iter().map(|x| (x / n + eps) / z).collect())
    };
    let p = dist(true_samples)?;
    let q = dist(generated)?;
    let kl: f64 = p
        .iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Corpus BLEU with uniform weights over 1..=max_n and the standard
/// brevity penalty `exp(1 - r/c)` when `c <= r`.
pub fn bleu<S: AsRef<str>>(references: &[S], hypotheses: &[S], max_n: usize) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Input(format!(
            "{} references for {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if max_n < 1 {
        return Err(Error::Input("BLEU order must be at least 1".into()));
    }
    let (mut c, mut r) = (0usize, 0usize);
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (rf, hy) in references.iter().zip(hypotheses) {
        let rw = words(rf.as_ref());
        let hw = words(hy.as_ref());
        c += hw.len();
        r += rw.len();
        for n in 1..=max_n {
            let mut rc: HashMap<&[&str], usize> = HashMap::new();
            for g in rw.windows(n) {
                *rc.entry(g).or_insert(0) += 1;
            }
            let mut hc: HashMap<&[&str], usize> = HashMap::new();
            for g in hw.windows(n) {
                *hc.entry(g).or_insert(0) += 1;
            }
            total[n - 1] += hw.len().saturating_sub(n - 1);
            matched[n - 1] += hc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_p.exp())
}
