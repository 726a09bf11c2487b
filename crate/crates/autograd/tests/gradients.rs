use hetaug_autograd::gradcheck::check_gradients;
use hetaug_autograd::nn::{
    attention_mask, segment_mean, step_masks, Embedding, GruCell, LayerNorm, Linear, LstmCell,
    TransformerBlock,
};
use hetaug_autograd::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

fn assert_all_pass(ps: &mut ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) {
    let report = check_gradients(ps, f, 12, 1e-5, 1e-4, 1e-9, &mut rng());
    assert!(
        report.passed == report.checked,
        "gradient mismatches: {:?}",
        report.failures
    );
}

#[test]
fn elementwise_and_structural_ops() {
    let mut r = rng();
    let mut ps = ParamStore::<f64>::new();
    let a = ps.add("a", Tensor::normal(3, 4, 1.0, &mut r));
    let b = ps.add("b", Tensor::normal(3, 4, 1.0, &mut r));
    let row = ps.add("row", Tensor::normal(1, 4, 1.0, &mut r));
    let col = ps.add("col", Tensor::normal(3, 1, 1.0, &mut r));
    let w = ps.add("w", Tensor::normal(4, 2, 1.0, &mut r));
    assert_all_pass(&mut ps, |g| {
        let (a, b, row, col, w) = (g.param(a), g.param(b), g.param(row), g.param(col), g.param(w));
        let x = g.add(a, b);
        let x = g.mul(x, a);
        let x = g.sub(x, b);
        let x = g.add_row(x, row);
        let x = g.mul_row(x, row);
        let x = g.mul_col(x, col);
        let s = g.sigmoid(x);
        let t = g.tanh(b);
        let y = g.concat_cols(&[s, t]);
        let y = g.slice_cols(y, 2, 4);
        let y2 = g.concat_rows(&[y, a]);
        let y2 = g.slice_rows(y2, 1, 4);
        let gathered = g.gather_rows(y2, &[0, 0, 3, 2]);
        let bl = g.blend(gathered, y2, &[true, false, true, false]);
        let m = g.matmul(bl, w);
        let mt = g.matmul_t(w, true, bl, true);
        let mt = g.transpose(mt);
        let z = g.add(m, mt);
        let e = g.exp(z);
        let e = g.add_scalar(e, 1.0);
        let l = g.log(e);
        let rsum = g.row_sums(l);
        let csum = g.sum_rows(l);
        let a1 = g.sum_all(rsum);
        let a2 = g.mean_all(csum);
        let a2 = g.scale(a2, 0.3);
        g.add(a1, a2)
    });
}

#[test]
fn softmax_family_and_losses() {
    let mut r = rng();
    let mut ps = ParamStore::<f64>::new();
    let a = ps.add("a", Tensor::normal(4, 5, 1.0, &mut r));
    let c = ps.add("c", Tensor::normal(6, 1, 1.0, &mut r));
    assert_all_pass(&mut ps, |g| {
        let a = g.param(a);
        let c = g.param(c);
        let sm = g.softmax_rows(a);
        let lsm = g.log_softmax_rows(a);
        let x = g.mul(sm, lsm);
        let s1 = g.sum_all(x);
        let ce = g.cross_entropy(a, &[0, 4, 2, 2], Some(&[1.0, 0.5, 2.0, 0.0]));
        let seg = g.segment_log_softmax(c, &[2, 1, 3]);
        let picked = g.pick(lsm, &[1, 1, 0, 3]);
        let s2 = g.sum_all(seg);
        let s3 = g.sum_all(picked);
        let ln = g.layer_norm(a, 1e-5);
        let ln = g.mul(ln, a);
        let s4 = g.sum_all(ln);
        let nrm = g.l2_normalize_rows(a, 1e-12);
        let nrm = g.mul(nrm, a);
        let s5 = g.sum_all(nrm);
        let relu = g.relu(a);
        let s6 = g.sum_all(relu);
        let t = g.add(s1, ce);
        let t = g.add(t, s2);
        let t = g.add(t, s3);
        let t = g.add(t, s4);
        let t = g.add(t, s5);
        g.add(t, s6)
    });
}

#[test]
fn recurrent_cells_with_ragged_batches() {
    let mut r = rng();
    let mut ps = ParamStore::<f64>::new();
    let emb = Embedding::new(&mut ps, "emb", 7, 3, &mut r);
    let lstm = LstmCell::new(&mut ps, "lstm", 3, 4, &mut r);
    let gru = GruCell::new(&mut ps, "gru", 3, 4, &mut r);
    let head = Linear::new(&mut ps, "head", 8, 2, &mut r);
    let lens = [3usize, 1, 2];
    // Packed step-major ids: row t * batch + b.
    let ids = [1usize, 4, 2, 5, 0, 6, 3, 0, 0];
    assert_all_pass(&mut ps, |g| {
        let x = emb.forward(g, &ids);
        let masks = step_masks(&lens, 3);
        let (_, h1) = lstm.run(g, x, 3, &masks);
        let (outs, h2) = gru.run(g, x, 3, &masks, None);
        let h = g.concat_cols(&[h1, h2]);
        let y = head.forward(g, h);
        let ce = g.cross_entropy(y, &[0, 1, 1], None);
        let o = g.sum_all(outs[1]);
        g.add(ce, o)
    });
}

#[test]
fn transformer_blocks_and_bag_embeddings() {
    let mut r = rng();
    let mut ps = ParamStore::<f64>::new();
    let emb = Embedding::new(&mut ps, "emb", 9, 8, &mut r);
    let enc = TransformerBlock::new(&mut ps, "enc", 8, 2, false, &mut r);
    let dec = TransformerBlock::new(&mut ps, "dec", 8, 2, true, &mut r);
    let head = Linear::new(&mut ps, "head", 8, 9, &mut r);
    let src_lens = [3usize, 2];
    let tgt_lens = [2usize, 3];
    let src = [1usize, 2, 3, 4, 5];
    let tgt = [6usize, 7, 8, 1, 2];
    assert_all_pass(&mut ps, |g| {
        let x = emb.forward(g, &src);
        let smask = g.constant(attention_mask(&src_lens, &src_lens, false));
        let mem = enc.forward(g, x, smask, None);
        let y = emb.forward(g, &tgt);
        let cmask = g.constant(attention_mask(&tgt_lens, &tgt_lens, true));
        let xmask = g.constant(attention_mask(&tgt_lens, &src_lens, false));
        let h = dec.forward(g, y, cmask, Some((mem, xmask)));
        let pooled = segment_mean(g, mem, &src_lens);
        let bags = emb.mean_bags(g, &[vec![1, 2], vec![3]]);
        let pb = g.mul(pooled, bags);
        let logits = head.forward(g, h);
        let ce = g.cross_entropy(logits, &[1, 2, 3, 4, 5], None);
        let s = g.sum_all(pb);
        g.add(ce, s)
    });
}

#[test]
fn causal_mask_blocks_future_and_other_segments() {
    let m = attention_mask::<f32>(&[2, 1], &[2, 1], true);
    let allowed: Vec<Vec<bool>> = (0..3)
        .map(|i| (0..3).map(|j| m.get(i, j) == 0.0).collect())
        .collect();
    assert_eq!(
        allowed,
        vec![
            vec![true, false, false],
            vec![true, true, false],
            vec![false, false, true]
        ]
    );
}

#[test]
fn layer_norm_rows_have_zero_mean_unit_variance() {
    let mut ps = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut ps, "ln", 4);
    let mut g = Graph::inference(&ps);
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 10.0]]));
    let y = ln.forward(&mut g, x);
    let v = g.value(y).data().to_vec();
    let mean: f64 = v.iter().sum::<f64>() / 4.0;
    let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);
}

proptest! {
    #[test]
    fn softmax_rows_lie_on_the_simplex(vals in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
        let n = vals.len();
        let ps = ParamStore::<f64>::new();
        let mut g = Graph::inference(&ps);
        let x = g.constant(Tensor::from_vec(1, n, vals));
        let s = g.softmax_rows(x);
        let out = g.value(s);
        prop_assert!(out.data().iter().all(|&p| p >= 0.0));
        prop_assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f32_and_f64_forward_agree(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let run = |v: &[f64]| -> f64 {
            let ps = ParamStore::<f64>::new();
            let mut g = Graph::inference(&ps);
            let x = g.constant(Tensor::from_vec(2, 3, v.to_vec()));
            let l = g.log_softmax_rows(x);
            let t = g.tanh(l);
            let s = g.sum_all(t);
            g.item(s)
        };
        let run32 = |v: &[f64]| -> f64 {
            let ps = ParamStore::<f32>::new();
            let mut g = Graph::inference(&ps);
            let x = g.constant(Tensor::from_vec(2, 3, v.iter().map(|&x| x as f32).collect()));
            let l = g.log_softmax_rows(x);
            let t = g.tanh(l);
            let s = g.sum_all(t);
            g.item(s) as f64
        };
        prop_assert!((run(&vals) - run32(&vals)).abs() < 1e-4);
    }
}
