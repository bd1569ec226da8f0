//! Low-rank critical-KV predictor.
//!
//! Two `d x d_lr` projections map a block's input `X` to `Q_lr = X W_q` and
//! `K_lr = X W_k` so that `Q_lr K_lr^T` ranks keys like the head's `Q K^T`.
//! Training minimizes `w_cos * CosLoss + w_norm * NormLoss` on sampled query
//! rows with hand-derived gradients and Adam.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionScores, CriticalIndexSet};
use crate::error::{CoreError, Result};
use crate::io::{read_tensor, write_tensor};
use crate::optim::{AdamConfig, AdamState};
use crate::selection::{k_from_sparsity, streaming_topk_with, SelectOptions};
use crate::tensor::{dot, HeadTensor, Matrix};

/// Floor on the target norm in the relative Frobenius term.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cos: f64,
    pub norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cos: 0.95, norm: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorLossReport {
    /// `1 - mean_i cos(a_i, t_i)` over rows.
    pub cos_loss: f64,
    /// `||A_hat - T||_F / max(||T||_F, eps)`.
    pub norm_loss: f64,
    pub total: f64,
    /// Rows whose target is all zeros; they count as cosine 1.
    pub zero_target_rows: usize,
}

/// `X W`.
pub fn project(x: &HeadTensor, w: &Matrix) -> Result<HeadTensor> {
    if x.cols() != w.rows() {
        return Err(CoreError::shape("project", format!("X {:?} with W {:?}", x.shape(), w.shape())));
    }
    x.matmul(w)
}

fn row_norm(r: &[f64]) -> f64 {
    dot(r, r).sqrt()
}

/// Loss of `a_hat` against `target` with the default weights.
pub fn predictor_loss(a_hat: &Matrix, target: &Matrix) -> Result<PredictorLossReport> {
    loss_and_gradient(a_hat, target, &LossWeights::default(), false).map(|(r, _)| r)
}

/// Loss and, when `want_grad`, `dL / dA_hat`.
///
/// For a row with `c = a.t / (|a||t|)`, `dc/da = t / (|a||t|) - c a / |a|^2`.
/// Rows with a zero prediction or zero target contribute no cosine gradient,
/// and a zero difference contributes no norm gradient.
pub fn loss_and_gradient(
    a_hat: &Matrix,
    target: &Matrix,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(PredictorLossReport, Option<Matrix>)> {
    if a_hat.shape() != target.shape() || a_hat.rows() == 0 {
        return Err(CoreError::shape("predictor_loss", format!("{:?} vs {:?}", a_hat.shape(), target.shape())));
    }
    let rows = a_hat.rows() as f64;
    let mut grad = want_grad.then(|| Matrix::zeros(a_hat.rows(), a_hat.cols()));

    let mut cos_sum = 0.0;
    let mut zero_target_rows = 0;
    for i in 0..a_hat.rows() {
        let (a, t) = (a_hat.row(i), target.row(i));
        let (na, nt) = (row_norm(a), row_norm(t));
        if nt == 0.0 {
            zero_target_rows += 1;
            cos_sum += 1.0;
            continue;
        }
        if na == 0.0 {
            continue;
        }
        let c = dot(a, t) / (na * nt);
        cos_sum += c;
        if let Some(g) = grad.as_mut() {
            let scale = -weights.cos / rows;
            for ((gj, &aj), &tj) in g.row_mut(i).iter_mut().zip(a).zip(t) {
                *gj = scale * (tj / (na * nt) - c * aj / (na * na));
            }
        }
    }
    let cos_loss = (1.0 - cos_sum / rows).max(0.0);

    let t_norm = target.frobenius_norm().max(NORM_EPS);
    let diff_norm = a_hat.data().iter().zip(target.data()).map(|(a, t)| (a - t) * (a - t)).sum::<f64>().sqrt();
    let norm_loss = diff_norm / t_norm;
    if let Some(g) = grad.as_mut() {
        if diff_norm > 0.0 {
            let scale = weights.norm / (diff_norm * t_norm);
            for ((gj, &a), &t) in g.data_mut().iter_mut().zip(a_hat.data()).zip(target.data()) {
                *gj += scale * (a - t);
            }
        }
    }

    let total = weights.cos * cos_loss + weights.norm * norm_loss;
    Ok((PredictorLossReport { cos_loss, norm_loss, total, zero_target_rows }, grad))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: PredictorLossReport,
    /// The gradient was non-finite and no update was applied.
    pub skipped: bool,
}

/// Gradients of the loss with respect to both projections.
#[derive(Debug, Clone)]
pub struct PredictorGrads {
    pub loss: PredictorLossReport,
    pub w_q: Matrix,
    pub w_k: Matrix,
}

/// Projections for one attention head plus their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub step: u64,
    state_q: AdamState,
    state_k: AdamState,
}

impl PredictorParams {
    pub const DEFAULT_LR: f64 = 1e-3;

    pub fn from_weights(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(CoreError::shape("PredictorParams", format!("W_q {:?} vs W_k {:?}", w_q.shape(), w_k.shape())));
        }
        w_q.ensure_finite("PredictorParams")?;
        w_k.ensure_finite("PredictorParams")?;
        let (state_q, state_k) = (AdamState::for_param(&w_q), AdamState::for_param(&w_k));
        Ok(PredictorParams {
            w_q,
            w_k,
            adam: AdamConfig::with_lr(Self::DEFAULT_LR),
            weights: LossWeights::default(),
            step: 0,
            state_q,
            state_k,
        })
    }

    /// Gaussian init with standard deviation `1 / sqrt(d)`.
    pub fn random<R: Rng + ?Sized>(d: usize, d_lr: usize, rng: &mut R) -> Result<Self> {
        if d_lr == 0 || d == 0 {
            return Err(CoreError::invalid("PredictorParams", format!("d = {d}, d_lr = {d_lr}")));
        }
        let std = 1.0 / (d as f64).sqrt();
        Self::from_weights(Matrix::random_normal(d, d_lr, std, rng), Matrix::random_normal(d, d_lr, std, rng))
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_lr(&self) -> usize {
        self.w_q.cols()
    }

    /// `(Q_lr, K_lr)` for every row of `x`.
    pub fn project_all(&self, x: &HeadTensor) -> Result<(Matrix, Matrix)> {
        Ok((project(x, &self.w_q)?, project(x, &self.w_k)?))
    }

    /// Predicted scores for the listed query rows against all keys.
    pub fn predict_rows(&self, x: &HeadTensor, rows: &[usize]) -> Result<Matrix> {
        let ql = project(&x.select_rows(rows), &self.w_q)?;
        let kl = project(x, &self.w_k)?;
        ql.matmul_t(&kl)
    }

    /// Loss and gradients for query `rows` of `x` against `target`
    /// (`rows.len() x S`).
    pub fn gradients(&self, x: &HeadTensor, rows: &[usize], target: &Matrix) -> Result<PredictorGrads> {
        if target.shape() != (rows.len(), x.rows()) {
            return Err(CoreError::shape(
                "train_step",
                format!("target {:?} for {} rows of {} tokens", target.shape(), rows.len(), x.rows()),
            ));
        }
        let xs = x.select_rows(rows);
        let ql = project(&xs, &self.w_q)?;
        let kl = project(x, &self.w_k)?;
        let a_hat = ql.matmul_t(&kl)?;
        let (loss, g) = loss_and_gradient(&a_hat, target, &self.weights, true)?;
        let g = g.expect("gradient requested");
        // dL/dQ_lr = G K_lr, dL/dK_lr = G^T Q_lr.
        let w_q = xs.t_matmul(&g.matmul(&kl)?)?;
        let w_k = x.t_matmul(&g.t_matmul(&ql)?)?;
        Ok(PredictorGrads { loss, w_q, w_k })
    }

    /// One Adam step. Only `self` is mutated; `x` and `target` are read-only.
    pub fn train_step(&mut self, x: &HeadTensor, rows: &[usize], target: &Matrix) -> Result<StepReport> {
        let grads = self.gradients(x, rows, target)?;
        if !grads.w_q.is_finite() || !grads.w_k.is_finite() || !grads.loss.total.is_finite() {
            return Ok(StepReport { loss: grads.loss, skipped: true });
        }
        self.step += 1;
        self.state_q.apply(&self.adam, self.step, &mut self.w_q, &grads.w_q);
        self.state_k.apply(&self.adam, self.step, &mut self.w_k, &grads.w_k);
        Ok(StepReport { loss: grads.loss, skipped: false })
    }

    /// Top-`k` keys of `Q_lr K_lr^T` for every query.
    pub fn estimate_critical(&self, x: &HeadTensor, budget: Budget<'_>) -> Result<CriticalIndexSet> {
        let s = x.rows();
        let ks = match budget {
            Budget::K(k) => {
                if k == 0 {
                    return Err(CoreError::invalid("estimate_critical", "k must be at least 1"));
                }
                vec![k; s]
            }
            Budget::Sparsity(sp) => vec![k_from_sparsity(sp, s)?; s],
            Budget::PerQuery(ks) => ks.to_vec(),
        };
        let (ql, kl) = self.project_all(x)?;
        let (top, _) = streaming_topk_with(&ql, &kl, &ks, &SelectOptions::default(), None)?;
        Ok(top.into_index_set())
    }

    /// Writes `<stem>.wq.svt`, `<stem>.wk.svt` and `<stem>.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, stem: &str, meta: &CheckpointMeta) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_tensor(&dir.join(format!("{stem}.wq.svt")), &self.w_q)?;
        write_tensor(&dir.join(format!("{stem}.wk.svt")), &self.w_k)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }

    /// Restores weights and metadata; optimizer moments start fresh.
    pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(Self, CheckpointMeta)> {
        let w_q = read_tensor(&dir.join(format!("{stem}.wq.svt")))?;
        let w_k = read_tensor(&dir.join(format!("{stem}.wk.svt")))?;
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if (meta.d, meta.d_lr) != w_q.shape() {
            return Err(CoreError::Format(format!("metadata says {}x{}, weights are {:?}", meta.d, meta.d_lr, w_q.shape())));
        }
        let mut p = Self::from_weights(w_q, w_k)?;
        p.step = meta.step;
        Ok((p, meta))
    }
}

/// How many keys [`PredictorParams::estimate_critical`] keeps per query.
#[derive(Debug, Clone, Copy)]
pub enum Budget<'a> {
    K(usize),
    Sparsity(f64),
    PerQuery(&'a [usize]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub block: usize,
    pub head: usize,
    pub d: usize,
    pub d_lr: usize,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

/// Recall and score coverage of estimated sets against oracle sets, both
/// averaged over queries. Coverage is the estimated set's attention mass
/// divided by the oracle set's.
pub fn prediction_accuracy(
    estimated: &CriticalIndexSet,
    oracle: &CriticalIndexSet,
    scores: &AttentionScores,
) -> Result<(f64, f64)> {
    if estimated.queries() != oracle.queries() || oracle.queries() != scores.queries() || estimated.keys != oracle.keys {
        return Err(CoreError::shape("prediction_accuracy", "estimated, oracle and score shapes differ"));
    }
    let mut recall = 0.0;
    let mut coverage = 0.0;
    for q in 0..oracle.queries() {
        let (est, orc) = (estimated.set(q), oracle.set(q));
        let row = scores.row(q);
        let hits = est.iter().filter(|i| orc.binary_search(i).is_ok()).count();
        recall += if orc.is_empty() { 1.0 } else { hits as f64 / orc.len() as f64 };
        let mass = |set: &[usize]| set.iter().map(|&j| row[j]).sum::<f64>();
        let om = mass(orc);
        coverage += if om > 0.0 { mass(est) / om } else { 1.0 };
    }
    let n = oracle.queries().max(1) as f64;
    Ok((recall / n, coverage / n))
}
