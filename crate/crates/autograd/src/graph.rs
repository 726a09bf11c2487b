//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every parameter that took part.
//! Parameters are borrowed from a [`ParamStore`], never copied.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::gemm_into;
use crate::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    SliceRows { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    Blend { a: usize, b: usize, mask: Vec<bool> },
    Transpose(usize),
    SumAll(usize),
    SumRows(usize),
    RowSums(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    SegmentLogSoftmax { a: usize, segs: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<T>, probs: Tensor<T> },
    Pick { a: usize, cols: Vec<usize> },
    LayerNorm { a: usize, inv_std: Vec<T> },
    L2NormalizeRows { a: usize, norms: Vec<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    track: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph that records gradients for parameters.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            track: true,
        }
    }

    /// A graph for inference: parameters are treated as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(v.0)
    }

    #[inline]
    fn val(&self, i: usize) -> &Tensor<T> {
        match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.track,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = Tensor::zeros(m, n);
        gemm_into(av, ta, bv, tb, T::zero(), &mut out);
        self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0), &[a.0])
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1 x n row");
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row expects a 1 x n row");
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a.0, row.0), &[a.0, row.0])
    }

    /// Scales row `i` of `a` by entry `i` of an `m x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects an m x 1 column");
        let mut out = av.clone();
        for i in 0..out.rows() {
            let s = cv.data()[i];
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a.0, col.0), &[a.0, col.0])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.push(out, Op::Exp(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::ln);
        self.push(out, Op::Log(a.0), &[a.0])
    }

    // ----- structure ------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let src = self.val(p.0).row(r);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a: a.0, start }, &[a.0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { a: a.0, start }, &[a.0])
    }

    /// Row gather; indices may repeat (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < av.rows(), "gather_rows index {i} out of range {}", av.rows());
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data);
        self.push(out, Op::GatherRows { a: a.0, idx: idx.to_vec() }, &[a.0])
    }

    /// Row-wise select: row `r` comes from `a` where `mask[r]`, else from `b`.
    pub fn blend(&mut self, a: Var, b: Var, mask: &[bool]) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "blend shape mismatch");
        assert_eq!(mask.len(), av.rows(), "blend mask length");
        let mut out = bv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        self.push(out, Op::Blend { a: a.0, b: b.0, mask: mask.to_vec() }, &[a.0, b.0])
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), &[a.0])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Column sums: `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a.0), &[a.0])
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).rows();
        let s = self.sum_rows(a);
        self.scale(s, T::one() / T::lit(m as f64))
    }

    /// Row sums: `m x n -> m x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().copied().sum()).collect();
        self.push(Tensor::column(data), Op::RowSums(a.0), &[a.0])
    }

    // ----- normalisation --------------------------------------------------

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a.0), &[a.0])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for x in row {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a.0), &[a.0])
    }

    /// Log-softmax of an `n x 1` column taken independently over consecutive
    /// segments of the given lengths.
    pub fn segment_log_softmax(&mut self, a: Var, segs: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1, "segment_log_softmax expects a column");
        assert_eq!(segs.iter().sum::<usize>(), av.rows(), "segment lengths");
        let mut out = av.clone();
        let mut off = 0;
        for &len in segs {
            let seg = &mut out.data_mut()[off..off + len];
            let lse = log_sum_exp(seg);
            for x in seg {
                *x -= lse;
            }
            off += len;
        }
        self.push(out, Op::SegmentLogSoftmax { a: a.0, segs: segs.to_vec() }, &[a.0])
    }

    /// `sum_i w_i * -log softmax(logits_i)[targets_i]` as a `1 x 1` tensor.
    /// Weights default to one.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "cross_entropy target count");
        let weights = match weights {
            Some(w) => {
                assert_eq!(w.len(), targets.len(), "cross_entropy weight count");
                w.to_vec()
            }
            None => vec![T::one(); targets.len()],
        };
        let probs = softmax_rows(lv);
        let mut loss = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            assert!(t < lv.cols(), "cross_entropy target out of range");
            let row = lv.row(r);
            let nll = log_sum_exp(row) - row[t];
            loss += w * nll;
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), weights, probs },
            &[logits.0],
        )
    }

    /// Picks one entry per row: `out[r] = a[r, cols[r]]` as an `m x 1` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(cols.len(), av.rows(), "pick index count");
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        self.push(Tensor::column(data), Op::Pick { a: a.0, cols: cols.to_vec() }, &[a.0])
    }

    /// Row standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let n = T::lit(av.cols() as f64);
        let mut out = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { a: a.0, inv_std }, &[a.0])
    }

    /// Scales each row to unit L2 norm (`x / sqrt(|x|^2 + eps)`).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { a: a.0, norms }, &[a.0])
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of the `1 x 1` node `root` with respect to all parameters.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.shape(root), (1, 1), "backward from a non-scalar node");
        let mut pgrads = Grads::new(self.params.len());
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Value::Param(id) = node.value {
                pgrads.accumulate(id, g);
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        pgrads
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if self.wants(a) {
                    let bv = self.val(b);
                    if ta {
                        acc_gemm(grads, a, self.val(a).shape(), bv, tb, &g, true);
                    } else {
                        acc_gemm(grads, a, self.val(a).shape(), &g, false, bv, !tb);
                    }
                }
                if self.wants(b) {
                    let av = self.val(a);
                    if tb {
                        acc_gemm(grads, b, self.val(b).shape(), &g, true, av, ta);
                    } else {
                        acc_gemm(grads, b, self.val(b).shape(), av, !ta, &g, false);
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(grads, a, g.clone());
                }
                if self.wants(b) {
                    acc(grads, b, g);
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(grads, a, g.clone());
                }
                if self.wants(b) {
                    acc(grads, b, g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(grads, a, zip(&g, self.val(b), |x, y| x * y));
                }
                if self.wants(b) {
                    acc(grads, b, zip(&g, self.val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, r) => {
                if self.wants(r) {
                    acc(grads, r, col_sums(&g));
                }
                if self.wants(a) {
                    acc(grads, a, g);
                }
            }
            &Op::MulRow(a, r) => {
                let (av, rv) = (self.val(a), self.val(r));
                if self.wants(r) {
                    acc(grads, r, col_sums(&zip(&g, av, |x, y| x * y)));
                }
                if self.wants(a) {
                    let mut ga = g;
                    for row in 0..ga.rows() {
                        for (x, &s) in ga.row_mut(row).iter_mut().zip(rv.data()) {
                            *x *= s;
                        }
                    }
                    acc(grads, a, ga);
                }
            }
            &Op::MulCol(a, c) => {
                let (av, cv) = (self.val(a), self.val(c));
                if self.wants(c) {
                    let data = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum())
                        .collect();
                    acc(grads, c, Tensor::column(data));
                }
                if self.wants(a) {
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(grads, a, ga);
                }
            }
            &Op::Scale(a, s) => acc(grads, a, g.map(|x| x * s)),
            &Op::AddScalar(a) => acc(grads, a, g),
            &Op::Sigmoid(a) => acc(grads, a, zip(&g, out, |gx, y| gx * y * (T::one() - y))),
            &Op::Tanh(a) => acc(grads, a, zip(&g, out, |gx, y| gx * (T::one() - y * y))),
            &Op::Relu(a) => acc(
                grads,
                a,
                zip(&g, self.val(a), |gx, x| if x > T::zero() { gx } else { T::zero() }),
            ),
            &Op::Exp(a) => acc(grads, a, zip(&g, out, |gx, y| gx * y)),
            &Op::Log(a) => acc(grads, a, zip(&g, self.val(a), |gx, x| gx / x)),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.wants(p) {
                        let mut gp = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(grads, p, gp);
                    }
                    off += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let (rows, cols) = self.val(a).shape();
                let target = slot(grads, a, rows, cols);
                for r in 0..rows {
                    let dst = &mut target.row_mut(r)[start..start + g.cols()];
                    for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let h = self.val(p).rows();
                    if self.wants(p) {
                        let gp = Tensor::from_vec(h, c, g.data()[off * c..(off + h) * c].to_vec());
                        acc(grads, p, gp);
                    }
                    off += h;
                }
            }
            &Op::SliceRows { a, start } => {
                let (rows, cols) = self.val(a).shape();
                let target = slot(grads, a, rows, cols);
                let dst = &mut target.data_mut()[start * cols..(start + g.rows()) * cols];
                for (d, &x) in dst.iter_mut().zip(g.data()) {
                    *d += x;
                }
            }
            Op::GatherRows { a, idx } => {
                let (rows, cols) = self.val(*a).shape();
                let target = slot(grads, *a, rows, cols);
                for (r, &src) in idx.iter().enumerate() {
                    for (d, &x) in target.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
            }
            Op::Blend { a, b, mask } => {
                let (rows, cols) = g.shape();
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            ga.row_mut(r).copy_from_slice(g.row(r));
                        }
                    }
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = g;
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            gb.row_mut(r).fill(T::zero());
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            &Op::Transpose(a) => acc(grads, a, g.transpose()),
            &Op::SumAll(a) => {
                let (r, c) = self.val(a).shape();
                acc(grads, a, Tensor::full(r, c, g.item()));
            }
            &Op::SumRows(a) => {
                let (r, c) = self.val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).copy_from_slice(g.data());
                }
                acc(grads, a, ga);
            }
            &Op::RowSums(a) => {
                let (r, c) = self.val(a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).fill(g.data()[row]);
                }
                acc(grads, a, ga);
            }
            &Op::SoftmaxRows(a) => {
                let mut ga = g;
                for r in 0..ga.rows() {
                    let y = out.row(r);
                    let dot: T = ga.row(r).iter().zip(y).map(|(&x, &p)| x * p).sum();
                    for (x, &p) in ga.row_mut(r).iter_mut().zip(y) {
                        *x = p * (*x - dot);
                    }
                }
                acc(grads, a, ga);
            }
            &Op::LogSoftmaxRows(a) => {
                let mut ga = g;
                for r in 0..ga.rows() {
                    let y = out.row(r);
                    let s: T = ga.row(r).iter().copied().sum();
                    for (x, &lp) in ga.row_mut(r).iter_mut().zip(y) {
                        *x -= lp.exp() * s;
                    }
                }
                acc(grads, a, ga);
            }
            Op::SegmentLogSoftmax { a, segs } => {
                let mut ga = g;
                let mut off = 0;
                for &len in segs {
                    let s: T = ga.data()[off..off + len].iter().copied().sum();
                    let y = &out.data()[off..off + len];
                    for (x, &lp) in ga.data_mut()[off..off + len].iter_mut().zip(y) {
                        *x -= lp.exp() * s;
                    }
                    off += len;
                }
                acc(grads, *a, ga);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let gs = g.item();
                let mut gl = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = gl.row_mut(r);
                    row[t] -= T::one();
                    let f = gs * w;
                    for x in row {
                        *x *= f;
                    }
                }
                acc(grads, *logits, gl);
            }
            Op::Pick { a, cols } => {
                let (rows, c) = self.val(*a).shape();
                let target = slot(grads, *a, rows, c);
                for (r, &col) in cols.iter().enumerate() {
                    let v = target.get(r, col) + g.data()[r];
                    target.set(r, col, v);
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let n = T::lit(g.cols() as f64);
                let mut ga = g;
                for r in 0..ga.rows() {
                    let y = out.row(r);
                    let mean_g = ga.row(r).iter().copied().sum::<T>() / n;
                    let mean_gy = ga.row(r).iter().zip(y).map(|(&x, &v)| x * v).sum::<T>() / n;
                    let is = inv_std[r];
                    for (x, &v) in ga.row_mut(r).iter_mut().zip(y) {
                        *x = is * (*x - mean_g - v * mean_gy);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::L2NormalizeRows { a, norms } => {
                let mut ga = g;
                for r in 0..ga.rows() {
                    let y = out.row(r);
                    let dot: T = ga.row(r).iter().zip(y).map(|(&x, &v)| x * v).sum();
                    let n = norms[r];
                    for (x, &v) in ga.row_mut(r).iter_mut().zip(y) {
                        *x = (*x - v * dot) / n;
                    }
                }
                acc(grads, *a, ga);
            }
        }
    }
}

fn slot<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    i: usize,
    rows: usize,
    cols: usize,
) -> &mut Tensor<T> {
    grads[i].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) {
    match &mut grads[i] {
        Some(t) => t.add_assign(&g),
        s @ None => *s = Some(g),
    }
}

/// Accumulates `op(x) * op(y)` into the gradient slot `i` without an
/// intermediate allocation when the slot already exists.
fn acc_gemm<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    i: usize,
    shape: (usize, usize),
    x: &Tensor<T>,
    tx: bool,
    y: &Tensor<T>,
    ty: bool,
) {
    match &mut grads[i] {
        Some(t) => gemm_into(x, tx, y, ty, T::one(), t),
        s @ None => {
            let mut t = Tensor::zeros(shape.0, shape.1);
            gemm_into(x, tx, y, ty, T::zero(), &mut t);
            *s = Some(t);
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn col_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` entries contribute nothing.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}
