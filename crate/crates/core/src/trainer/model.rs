//! Toy DiT-style stack with a hand-written backward pass.
//!
//! `h0 = u W_in + b_in`; each block applies `h += sum_h attn_h(h) W_o^h`
//! then `h += silu(h W_1 + b_1) W_2 + b_2`; the velocity head is
//! `y = h W_out + b_out`. There is no normalization layer: `W_o` and `W_2`
//! start at zero so every block is the identity at initialization.

use rand::Rng;

use crate::attention::{softmax_in_place, CriticalIndexSet};
use crate::error::{CoreError, Result};
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_k x d_model` slice of the output projection.
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub heads: Vec<HeadParams>,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub blocks: Vec<BlockParams>,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

/// Layer sizes of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub mlp: usize,
    pub output: usize,
    pub blocks: usize,
}

impl ModelParams {
    /// Normal init with std `1/sqrt(fan_in)`; `W_o`, `W_2` and all biases
    /// start at zero. Column `j` of each query and key projection is scaled by
    /// `qk_gain * qk_decay^j`, renormalized so the mean squared column scale is
    /// `qk_gain^2`. A decay below 1 concentrates the logit form in a few
    /// directions.
    pub fn init<R: Rng + ?Sized>(dims: &Dims, qk_gain: f64, qk_decay: f64, rng: &mut R) -> Self {
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let raw: Vec<f64> = (0..dims.d_k).map(|j| qk_decay.powi(j as i32)).collect();
        let rms = (raw.iter().map(|s| s * s).sum::<f64>() / dims.d_k as f64).sqrt();
        let column_scale: Vec<f64> = raw.iter().map(|s| qk_gain * s / rms).collect();
        let qk = |rng: &mut R| {
            let mut w = Matrix::random_normal(dims.model, dims.d_k, std(dims.model), rng);
            for row in w.data_mut().chunks_mut(dims.d_k) {
                row.iter_mut().zip(&column_scale).for_each(|(v, s)| *v *= s);
            }
            w
        };
        let w_in = Matrix::random_normal(dims.input, dims.model, std(dims.input), rng);
        let blocks = (0..dims.blocks)
            .map(|_| BlockParams {
                heads: (0..dims.heads)
                    .map(|_| HeadParams {
                        wq: qk(rng),
                        wk: qk(rng),
                        wv: Matrix::random_normal(dims.model, dims.d_k, std(dims.model), rng),
                        wo: Matrix::zeros(dims.d_k, dims.model),
                    })
                    .collect(),
                w1: Matrix::random_normal(dims.model, dims.mlp, std(dims.model), rng),
                b1: Matrix::zeros(1, dims.mlp),
                w2: Matrix::zeros(dims.mlp, dims.model),
                b2: Matrix::zeros(1, dims.model),
            })
            .collect();
        let w_out = Matrix::random_normal(dims.model, dims.output, std(dims.model), rng);
        ModelParams {
            w_in,
            b_in: Matrix::zeros(1, dims.model),
            blocks,
            w_out,
            b_out: Matrix::zeros(1, dims.output),
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.w_in, &self.b_in];
        for b in &self.blocks {
            for h in &b.heads {
                out.extend([&h.wq, &h.wk, &h.wv, &h.wo]);
            }
            out.extend([&b.w1, &b.b1, &b.w2, &b.b2]);
        }
        out.extend([&self.w_out, &self.b_out]);
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.w_in, &mut self.b_in];
        for b in &mut self.blocks {
            for h in &mut b.heads {
                out.extend([&mut h.wq, &mut h.wk, &mut h.wv, &mut h.wo]);
            }
            out.extend([&mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2]);
        }
        out.extend([&mut self.w_out, &mut self.b_out]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// How one block computes attention for one sample.
#[derive(Debug, Clone)]
pub enum BlockMode {
    Full,
    /// One index set per head; gradients flow only through selected pairs.
    Sparse(Vec<CriticalIndexSet>),
}

/// Attention probabilities kept for the backward pass.
#[derive(Debug, Clone)]
enum HeadProbs {
    Full(Matrix),
    Sparse { sets: Vec<Vec<usize>>, probs: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: HeadProbs,
    o: Matrix,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x: Matrix,
    heads: Vec<HeadCache>,
    h_mid: Matrix,
    z: Matrix,
    a: Matrix,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    u: Matrix,
    blocks: Vec<BlockCache>,
    h_out: Matrix,
    pub y: Matrix,
}

impl ForwardCache {
    /// Input of block `b` (the tensor its Q, K, V are projected from).
    pub fn block_input(&self, b: usize) -> &Matrix {
        &self.blocks[b].x
    }

    /// Per-head `(Q, K, V)` of block `b`.
    pub fn head_qkv(&self, b: usize, h: usize) -> (&Matrix, &Matrix, &Matrix) {
        let c = &self.blocks[b].heads[h];
        (&c.q, &c.k, &c.v)
    }

    /// Per-head attention output of block `b`, before `W_o`.
    pub fn head_output(&self, b: usize, h: usize) -> &Matrix {
        &self.blocks[b].heads[h].o
    }
}

fn add_bias(m: &mut Matrix, b: &Matrix) {
    let cols = m.cols();
    for row in m.data_mut().chunks_exact_mut(cols) {
        row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

fn col_sum(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        out.data_mut().iter_mut().zip(m.row(i)).for_each(|(o, x)| *o += x);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul(b).expect("layer shapes are fixed at init")
}

fn mm_t(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul_t(b).expect("layer shapes are fixed at init")
}

fn t_mm(a: &Matrix, b: &Matrix) -> Matrix {
    a.t_matmul(b).expect("layer shapes are fixed at init")
}

fn head_forward(q: &Matrix, k: &Matrix, v: &Matrix, set: Option<&CriticalIndexSet>) -> (HeadProbs, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    match set {
        None => {
            let mut p = mm_t(q, k).scale(scale);
            for i in 0..p.rows() {
                softmax_in_place(p.row_mut(i));
            }
            let o = mm(&p, v);
            (HeadProbs::Full(p), o)
        }
        Some(idx) => {
            let mut o = Matrix::zeros(q.rows(), v.cols());
            let mut probs = Vec::with_capacity(q.rows());
            for i in 0..q.rows() {
                let mut p: Vec<f64> = idx.set(i).iter().map(|&j| dot(q.row(i), k.row(j)) * scale).collect();
                softmax_in_place(&mut p);
                let out = o.row_mut(i);
                for (&j, &pj) in idx.set(i).iter().zip(&p) {
                    out.iter_mut().zip(v.row(j)).for_each(|(a, b)| *a += pj * b);
                }
                probs.push(p);
            }
            (HeadProbs::Sparse { sets: idx.sets.clone(), probs }, o)
        }
    }
}

/// Returns `(dq, dk, dv)` for `do_` flowing into one head.
fn head_backward(c: &HeadCache, d_o: &Matrix) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (c.q.cols() as f64).sqrt();
    match &c.probs {
        HeadProbs::Full(p) => {
            let dv = t_mm(p, d_o);
            let mut ds = mm_t(d_o, &c.v);
            for i in 0..ds.rows() {
                let pr = p.row(i);
                let r = dot(pr, ds.row(i));
                ds.row_mut(i).iter_mut().zip(pr).for_each(|(d, &pp)| *d = pp * (*d - r) * scale);
            }
            (mm(&ds, &c.k), t_mm(&ds, &c.q), dv)
        }
        HeadProbs::Sparse { sets, probs } => {
            let (mut dq, mut dk, mut dv) = (Matrix::zeros(c.q.rows(), c.q.cols()), Matrix::zeros(c.k.rows(), c.k.cols()), Matrix::zeros(c.v.rows(), c.v.cols()));
            let mut dp = Vec::new();
            for (i, (set, p)) in sets.iter().zip(probs).enumerate() {
                let g = d_o.row(i);
                dp.clear();
                dp.extend(set.iter().map(|&j| dot(g, c.v.row(j))));
                let r: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for ((&j, &pj), &dpj) in set.iter().zip(p).zip(&dp) {
                    dv.row_mut(j).iter_mut().zip(g).for_each(|(a, b)| *a += pj * b);
                    let ds = pj * (dpj - r) * scale;
                    dq.row_mut(i).iter_mut().zip(c.k.row(j)).for_each(|(a, b)| *a += ds * b);
                    dk.row_mut(j).iter_mut().zip(c.q.row(i)).for_each(|(a, b)| *a += ds * b);
                }
            }
            (dq, dk, dv)
        }
    }
}

/// Forward pass. `select(block, x)` returns the mode for a block given its
/// input; it runs after `x` is known so predictors can look at it.
pub fn forward(
    params: &ModelParams,
    u: &Matrix,
    mut select: impl FnMut(usize, &Matrix, &[(Matrix, Matrix, Matrix)]) -> Result<BlockMode>,
) -> Result<ForwardCache> {
    if u.cols() != params.w_in.rows() {
        return Err(CoreError::shape("toy forward", format!("input width {} != {}", u.cols(), params.w_in.rows())));
    }
    let mut h = mm(u, &params.w_in);
    add_bias(&mut h, &params.b_in);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (b, bp) in params.blocks.iter().enumerate() {
        let x = h;
        let qkv: Vec<(Matrix, Matrix, Matrix)> = bp.heads.iter().map(|hp| (mm(&x, &hp.wq), mm(&x, &hp.wk), mm(&x, &hp.wv))).collect();
        let mode = select(b, &x, &qkv)?;
        if let BlockMode::Sparse(sets) = &mode {
            if sets.len() != bp.heads.len() {
                return Err(CoreError::shape("toy forward", format!("{} index sets for {} heads", sets.len(), bp.heads.len())));
            }
        }
        let mut h_mid = x.clone();
        let mut heads = Vec::with_capacity(bp.heads.len());
        for (hi, ((q, k, v), hp)) in qkv.into_iter().zip(&bp.heads).enumerate() {
            let set = match &mode {
                BlockMode::Full => None,
                BlockMode::Sparse(sets) => Some(&sets[hi]),
            };
            let (probs, o) = head_forward(&q, &k, &v, set);
            h_mid.add_assign(&mm(&o, &hp.wo));
            heads.push(HeadCache { q, k, v, probs, o });
        }
        let mut z = mm(&h_mid, &bp.w1);
        add_bias(&mut z, &bp.b1);
        let a = z.map(|t| t * sigmoid(t));
        let mut out = mm(&a, &bp.w2);
        add_bias(&mut out, &bp.b2);
        out.add_assign(&h_mid);
        blocks.push(BlockCache { x, heads, h_mid, z, a });
        h = out;
    }
    let mut y = mm(&h, &params.w_out);
    add_bias(&mut y, &params.b_out);
    Ok(ForwardCache { u: u.clone(), blocks, h_out: h, y })
}

/// Gradients of a scalar loss given `dy = dL/dy`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dy: &Matrix) -> ModelParams {
    let mut g = params.zeros_like();
    g.w_out = t_mm(&cache.h_out, dy);
    g.b_out = col_sum(dy);
    let mut dh = mm_t(dy, &params.w_out);
    for (b, (bp, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut g.blocks[b];
        // MLP residual.
        gb.w2 = t_mm(&bc.a, &dh);
        gb.b2 = col_sum(&dh);
        let mut dz = mm_t(&dh, &bp.w2);
        for (d, &z) in dz.data_mut().iter_mut().zip(bc.z.data()) {
            let s = sigmoid(z);
            *d *= s * (1.0 + z * (1.0 - s));
        }
        gb.w1 = t_mm(&bc.h_mid, &dz);
        gb.b1 = col_sum(&dz);
        let mut dmid = dh;
        dmid.add_assign(&mm_t(&dz, &bp.w1));
        // Attention residual.
        let mut dx = dmid.clone();
        for ((hp, hc), gh) in bp.heads.iter().zip(&bc.heads).zip(&mut gb.heads) {
            gh.wo = t_mm(&hc.o, &dmid);
            let d_o = mm_t(&dmid, &hp.wo);
            let (dq, dk, dv) = head_backward(hc, &d_o);
            gh.wq = t_mm(&bc.x, &dq);
            gh.wk = t_mm(&bc.x, &dk);
            gh.wv = t_mm(&bc.x, &dv);
            dx.add_assign(&mm_t(&dq, &hp.wq));
            dx.add_assign(&mm_t(&dk, &hp.wk));
            dx.add_assign(&mm_t(&dv, &hp.wv));
        }
        dh = dx;
    }
    g.w_in = t_mm(&cache.u, &dh);
    g.b_in = col_sum(&dh);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Dims, ModelParams, Matrix, Matrix) {
        let dims = Dims { input: 3, model: 4, heads: 2, d_k: 2, mlp: 5, output: 2, blocks: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParams::init(&dims, 1.0, 1.0, &mut rng);
        // Nonzero residual outputs so every path carries gradient.
        for t in p.tensors_mut() {
            if t.data().iter().all(|&x| x == 0.0) {
                *t = Matrix::random_normal(t.rows(), t.cols(), 0.3, &mut rng);
            }
        }
        let u = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let target = Matrix::random_normal(6, 2, 1.0, &mut rng);
        (dims, p, u, target)
    }

    fn sparse_sets() -> Vec<CriticalIndexSet> {
        let sets = |shift: usize| (0..6).map(|i| { let mut s = vec![i, (i + shift) % 6]; s.sort(); s.dedup(); s }).collect();
        vec![CriticalIndexSet::new(6, None, sets(1)).unwrap(), CriticalIndexSet::new(6, None, sets(3)).unwrap()]
    }

    fn loss(p: &ModelParams, u: &Matrix, target: &Matrix, sparse: bool) -> (f64, ModelParams) {
        let cache = forward(p, u, |_, _, _| Ok(if sparse { BlockMode::Sparse(sparse_sets()) } else { BlockMode::Full })).unwrap();
        let diff = cache.y.sub(target).unwrap();
        let l = 0.5 * diff.data().iter().map(|x| x * x).sum::<f64>();
        (l, backward(p, &cache, &diff))
    }

    #[test]
    fn backward_matches_central_differences() {
        for sparse in [false, true] {
            let (_, p, u, target) = tiny();
            let (_, g) = loss(&p, &u, &target, sparse);
            let h = 1e-6;
            let n = p.tensors().len();
            for ti in 0..n {
                for e in 0..p.tensors()[ti].data().len() {
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti].data_mut()[e] += h;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti].data_mut()[e] -= h;
                    let fd = (loss(&plus, &u, &target, sparse).0 - loss(&minus, &u, &target, sparse).0) / (2.0 * h);
                    let an = g.tensors()[ti].data()[e];
                    assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "sparse={sparse} tensor {ti} entry {e}: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn complete_sparse_sets_reproduce_full_attention() {
        let (_, p, u, _) = tiny();
        let full = forward(&p, &u, |_, _, _| Ok(BlockMode::Full)).unwrap();
        let all = vec![CriticalIndexSet::complete(6, 6); 2];
        let sparse = forward(&p, &u, |_, _, _| Ok(BlockMode::Sparse(all.clone()))).unwrap();
        assert!(full.y.max_abs_diff(&sparse.y).unwrap() < 1e-12);
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let dims = Dims { input: 3, model: 4, heads: 2, d_k: 2, mlp: 5, output: 2, blocks: 3 };
        let p = ModelParams::init(&dims, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let u = Matrix::random_normal(5, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let c = forward(&p, &u, |_, _, _| Ok(BlockMode::Full)).unwrap();
        assert_eq!(c.block_input(0), c.block_input(2));
    }
}
