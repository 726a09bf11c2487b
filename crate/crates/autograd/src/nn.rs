//! Layers used by the routing model and the generators.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so that a
//! whole model can be cast, checkpointed or optimised as one flat store.
//! Sequences of a batch are processed "packed": all tokens stacked as rows,
//! with per-sequence lengths carried alongside.

use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Large negative logit used to exclude attention / softmax entries. Its
/// exponential underflows to exactly zero in both f32 and f64.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::xavier(in_dim, out_dim, rng));
        let b = Some(ps.add(format!("{name}.b"), Tensor::zeros(1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    /// Zero-initialised weight and bias.
    pub fn zeroed<T: Scalar>(ps: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(in_dim, out_dim));
        let b = Some(ps.add(format!("{name}.b"), Tensor::zeros(1, out_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = ps.add(format!("{name}.table"), Tensor::normal(rows, dim, 0.1, rng));
        Self { table, rows, dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }

    /// Mean of embedding rows per bag, via a constant averaging matrix.
    /// Every bag must be non-empty.
    pub fn mean_bags<T: Scalar>(&self, g: &mut Graph<'_, T>, bags: &[Vec<usize>]) -> Var {
        let mut avg = Tensor::zeros(bags.len(), self.rows);
        for (r, bag) in bags.iter().enumerate() {
            assert!(!bag.is_empty(), "empty embedding bag");
            let w = T::one() / T::lit(bag.len() as f64);
            for &id in bag {
                let v = avg.get(r, id) + w;
                avg.set(r, id, v);
            }
        }
        let avg = g.constant(avg);
        let t = g.param(self.table);
        g.matmul(avg, t)
    }
}

/// Affine layer normalisation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add(format!("{name}.gain"), Tensor::full(1, dim, T::one())),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.layer_norm(x, T::lit(1e-5));
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Per-step row masks for a batch of variable-length sequences, left-aligned.
pub fn step_masks(lengths: &[usize], steps: usize) -> Vec<Vec<bool>> {
    (0..steps)
        .map(|t| lengths.iter().map(|&l| t < l).collect())
        .collect()
}

/// Long short-term memory cell, gate order (input, forget, cell, output).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = ps.add(format!("{name}.w_ih"), Tensor::xavier(input, 4 * hidden, rng));
        let w_hh = ps.add(format!("{name}.w_hh"), Tensor::xavier(hidden, 4 * hidden, rng));
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        let b = ps.add(format!("{name}.b"), bias);
        Self { w_ih, w_hh, b, hidden }
    }

    /// Runs the cell over `steps` time steps.
    ///
    /// `inputs` stacks the step inputs as rows `[t * batch + r]`; rows of
    /// finished sequences (mask false) carry their previous state forward.
    /// Returns per-step hidden outputs and the final hidden state.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: Var,
        batch: usize,
        masks: &[Vec<bool>],
    ) -> (Vec<Var>, Var) {
        let h_dim = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b = g.param(self.b);
        let xw = g.matmul(inputs, w_ih);
        let xw = g.add_row(xw, b);
        let mut h = g.constant(Tensor::zeros(batch, h_dim));
        let mut c = g.constant(Tensor::zeros(batch, h_dim));
        let mut outs = Vec::with_capacity(masks.len());
        for (t, mask) in masks.iter().enumerate() {
            let x_t = g.slice_rows(xw, t * batch, batch);
            let hw = g.matmul(h, w_hh);
            let gates = g.add(x_t, hw);
            let i_lin = g.slice_cols(gates, 0, h_dim);
            let f_lin = g.slice_cols(gates, h_dim, h_dim);
            let c_lin = g.slice_cols(gates, 2 * h_dim, h_dim);
            let o_lin = g.slice_cols(gates, 3 * h_dim, h_dim);
            let i_g = g.sigmoid(i_lin);
            let f_g = g.sigmoid(f_lin);
            let c_g = g.tanh(c_lin);
            let o_g = g.sigmoid(o_lin);
            let fc = g.mul(f_g, c);
            let ic = g.mul(i_g, c_g);
            let c_new = g.add(fc, ic);
            let tc = g.tanh(c_new);
            let h_new = g.mul(o_g, tc);
            if mask.iter().all(|&m| m) {
                h = h_new;
                c = c_new;
            } else {
                h = g.blend(h_new, h, mask);
                c = g.blend(c_new, c, mask);
            }
            outs.push(h);
        }
        (outs, h)
    }
}

/// Gated recurrent unit, gate order (reset, update, new).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_ih: ps.add(format!("{name}.w_ih"), Tensor::xavier(input, 3 * hidden, rng)),
            w_hh: ps.add(format!("{name}.w_hh"), Tensor::xavier(hidden, 3 * hidden, rng)),
            b_ih: ps.add(format!("{name}.b_ih"), Tensor::zeros(1, 3 * hidden)),
            b_hh: ps.add(format!("{name}.b_hh"), Tensor::zeros(1, 3 * hidden)),
            hidden,
        }
    }

    /// Same packing conventions as [`LstmCell::run`]; `h0` defaults to zeros.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: Var,
        batch: usize,
        masks: &[Vec<bool>],
        h0: Option<Var>,
    ) -> (Vec<Var>, Var) {
        let hd = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b_ih = g.param(self.b_ih);
        let b_hh = g.param(self.b_hh);
        let xw = g.matmul(inputs, w_ih);
        let xw = g.add_row(xw, b_ih);
        let mut h = h0.unwrap_or_else(|| g.constant(Tensor::zeros(batch, hd)));
        let mut outs = Vec::with_capacity(masks.len());
        for (t, mask) in masks.iter().enumerate() {
            let x_t = g.slice_rows(xw, t * batch, batch);
            let hw = g.matmul(h, w_hh);
            let hw = g.add_row(hw, b_hh);
            let x_rz = g.slice_cols(x_t, 0, 2 * hd);
            let h_rz = g.slice_cols(hw, 0, 2 * hd);
            let rz = g.add(x_rz, h_rz);
            let rz = g.sigmoid(rz);
            let r = g.slice_cols(rz, 0, hd);
            let z = g.slice_cols(rz, hd, hd);
            let x_n = g.slice_cols(x_t, 2 * hd, hd);
            let h_n = g.slice_cols(hw, 2 * hd, hd);
            let rh = g.mul(r, h_n);
            let n = g.add(x_n, rh);
            let n = g.tanh(n);
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            let h_new = g.add(n, zd);
            h = if mask.iter().all(|&m| m) {
                h_new
            } else {
                g.blend(h_new, h, mask)
            };
            outs.push(h);
        }
        (outs, h)
    }
}

/// Two-layer perceptron with ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Additive mask for packed attention: query rows of segment `s` may only
/// see key rows of segment `s` (and, if `causal`, only keys at or before the
/// query position).
pub fn attention_mask<T: Scalar>(q_lens: &[usize], k_lens: &[usize], causal: bool) -> Tensor<T> {
    assert_eq!(q_lens.len(), k_lens.len(), "segment count mismatch");
    let nq: usize = q_lens.iter().sum();
    let nk: usize = k_lens.iter().sum();
    let mut m = Tensor::full(nq, nk, T::lit(MASKED_LOGIT));
    let (mut qo, mut ko) = (0, 0);
    for (&ql, &kl) in q_lens.iter().zip(k_lens) {
        for i in 0..ql {
            let upto = if causal { (i + 1).min(kl) } else { kl };
            for j in 0..upto {
                m.set(qo + i, ko + j, T::zero());
            }
        }
        qo += ql;
        ko += kl;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "model dim must divide into heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Attention of packed queries over packed keys under an additive mask
    /// built with [`attention_mask`].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, q_in: Var, kv_in: Var, mask: Var) -> Var {
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, q_in);
        let k = self.k.forward(g, kv_in);
        let v = self.v.forward(g, kv_in);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, false, kh, true);
            let s = g.scale(s, scale);
            let s = g.add(s, mask);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }
}

/// Pre-norm transformer block; with `cross` set it is a decoder block with
/// attention over an encoder memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ff: LayerNorm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut R,
    ) -> Self {
        let ln_self = LayerNorm::new(ps, &format!("{name}.ln_self"), dim);
        let self_attn = MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng);
        let cross = with_cross.then(|| {
            (
                LayerNorm::new(ps, &format!("{name}.ln_cross"), dim),
                MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, rng),
            )
        });
        let ln_ff = LayerNorm::new(ps, &format!("{name}.ln_ff"), dim);
        let ff = Mlp {
            hidden: Linear::new(ps, &format!("{name}.ff1"), dim, 4 * dim, rng),
            out: Linear::new(ps, &format!("{name}.ff2"), 4 * dim, dim, rng),
        };
        Self { ln_self, self_attn, cross, ln_ff, ff }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        self_mask: Var,
        memory: Option<(Var, Var)>,
    ) -> Var {
        let n = self.ln_self.forward(g, x);
        let a = self.self_attn.forward(g, n, n, self_mask);
        let mut x = g.add(x, a);
        if let (Some((ln, attn)), Some((mem, mem_mask))) = (&self.cross, memory) {
            let n = ln.forward(g, x);
            let a = attn.forward(g, n, mem, mem_mask);
            x = g.add(x, a);
        }
        let n = self.ln_ff.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}

/// Token + learned position embeddings for packed sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPositionEmbedding {
    pub tokens: Embedding,
    pub positions: Embedding,
}

impl TokenPositionEmbedding {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            tokens: Embedding::new(ps, &format!("{name}.tok"), vocab, dim, rng),
            positions: Embedding::new(ps, &format!("{name}.pos"), max_len, dim, rng),
        }
    }

    pub fn max_len(&self) -> usize {
        self.positions.rows
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, seqs: &[Vec<usize>]) -> Var {
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let pos: Vec<usize> = seqs
            .iter()
            .flat_map(|s| {
                assert!(s.len() <= self.max_len(), "sequence longer than position table");
                0..s.len()
            })
            .collect();
        let t = self.tokens.forward(g, &ids);
        let p = self.positions.forward(g, &pos);
        g.add(t, p)
    }
}

/// Mean over each consecutive row segment: `sum(lens) x d -> segments x d`.
pub fn segment_mean<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lens: &[usize]) -> Var {
    let n: usize = lens.iter().sum();
    let mut avg = Tensor::zeros(lens.len(), n);
    let mut off = 0;
    for (r, &l) in lens.iter().enumerate() {
        assert!(l > 0, "empty segment");
        let w = T::one() / T::lit(l as f64);
        for j in off..off + l {
            avg.set(r, j, w);
        }
        off += l;
    }
    let avg = g.constant(avg);
    g.matmul(avg, x)
}
