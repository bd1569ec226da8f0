//! Per-head sparsity profiling from sampled query rows, smoothed with an
//! exponential moving average.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{critical_prefix, softmax_in_place};
use crate::error::{CoreError, Result};
use crate::tensor::{HeadTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SampleConfig {
    /// One query row is measured per `factor` rows.
    pub factor: usize,
    pub seed: u64,
    /// Iterations between measurements before the stage transition.
    pub stage1_period: usize,
    /// Iterations between measurements once sparse attention is active.
    pub stage2_period: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { factor: 16, seed: 0, stage1_period: 50, stage2_period: 500 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.stage1_period == 0 || self.stage2_period == 0 {
            return Err(CoreError::invalid("SampleConfig", "factor and periods must be at least 1"));
        }
        Ok(())
    }

    /// Derived configuration whose seed is unique per (block, iteration).
    pub fn for_step(&self, block: usize, iteration: usize) -> SampleConfig {
        let mix = (block as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iteration as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        SampleConfig { seed: self.seed ^ mix, ..*self }
    }
}

/// `ceil(S / factor)` distinct query rows, uniform without replacement,
/// returned in ascending order.
pub fn sample_queries(s: usize, cfg: &SampleConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if s == 0 {
        return Err(CoreError::invalid("sample_queries", "no queries to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = rand::seq::index::sample(&mut rng, s, s.div_ceil(cfg.factor)).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

/// Sparsity of one head over the given query rows: for each row, the share
/// of keys outside its critical set at `theta`.
pub fn sampled_head_sparsity<T: Real>(q: &HeadTensor<T>, k: &HeadTensor<T>, theta: f64, rows: &[usize]) -> Result<f64> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(CoreError::invalid("measure_block_sparsity", format!("theta {theta} outside (0, 1]")));
    }
    if q.cols() != k.cols() || k.rows() == 0 {
        return Err(CoreError::shape("measure_block_sparsity", format!("Q {:?} vs K {:?}", q.shape(), k.shape())));
    }
    if rows.is_empty() || rows.iter().any(|&r| r >= q.rows()) {
        return Err(CoreError::invalid("measure_block_sparsity", "sampled rows empty or out of range"));
    }
    let logits = q.select_rows(rows).matmul_t(k)?;
    logits.ensure_finite("measure_block_sparsity")?;
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let keys = k.rows() as f64;
    let mut buf = Vec::with_capacity(k.rows());
    let mut total = 0.0;
    for i in 0..rows.len() {
        buf.clear();
        buf.extend(logits.row(i).iter().map(|&x| x * scale));
        softmax_in_place(&mut buf);
        total += (keys - critical_prefix(&buf, theta).len() as f64) / keys;
    }
    Ok(total / rows.len() as f64)
}

/// Per-head sparsity `P` of one block, measured on a fresh query sample.
pub fn measure_block_sparsity<T: Real>(
    qs: &[HeadTensor<T>],
    ks: &[HeadTensor<T>],
    theta: f64,
    cfg: &SampleConfig,
) -> Result<Vec<f64>> {
    if qs.len() != ks.len() || qs.is_empty() {
        return Err(CoreError::shape("measure_block_sparsity", format!("{} query heads, {} key heads", qs.len(), ks.len())));
    }
    let rows = sample_queries(qs[0].rows(), cfg)?;
    qs.iter().zip(ks).map(|(q, k)| sampled_head_sparsity(q, k, theta, &rows)).collect()
}

/// `alpha * sample + (1 - alpha) * prev`.
pub fn ema_update(prev: f64, sample: f64, alpha: f64) -> Result<f64> {
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    if !unit(prev) || !unit(sample) || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CoreError::invalid("ema_update", format!("prev {prev}, sample {sample}, alpha {alpha}")));
    }
    Ok((alpha * sample + (1.0 - alpha) * prev).clamp(prev.min(sample), prev.max(sample)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub block: usize,
    pub head: usize,
    /// Smoothed sparsity; the first measurement seeds it.
    pub ema: f64,
    pub sample: f64,
    pub iteration: usize,
}

/// Smoothed sparsity state for every (block, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub alpha: f64,
    heads: usize,
    /// Row-major by block; `None` until the head is first measured.
    entries: Vec<Option<HeadProfile>>,
}

impl SparsityProfile {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn new(blocks: usize, heads: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || blocks == 0 || heads == 0 {
            return Err(CoreError::invalid("SparsityProfile", format!("{blocks} blocks, {heads} heads, alpha {alpha}")));
        }
        Ok(SparsityProfile { alpha, heads, entries: vec![None; blocks * heads] })
    }

    pub fn blocks(&self) -> usize {
        self.entries.len() / self.heads
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Folds one measurement per head of `block` into the EMA.
    pub fn update(&mut self, block: usize, samples: &[f64], iteration: usize) -> Result<()> {
        if block >= self.blocks() || samples.len() != self.heads {
            return Err(CoreError::shape("SparsityProfile::update", format!("block {block}, {} samples", samples.len())));
        }
        for (head, &p) in samples.iter().enumerate() {
            let slot = &mut self.entries[block * self.heads + head];
            let ema = match slot {
                Some(prev) => ema_update(prev.ema, p, self.alpha)?,
                None => ema_update(p, p, 1.0)?,
            };
            *slot = Some(HeadProfile { block, head, ema, sample: p, iteration });
        }
        Ok(())
    }

    pub fn get(&self, block: usize, head: usize) -> Option<&HeadProfile> {
        self.entries.get(block * self.heads + head)?.as_ref()
    }

    /// Smoothed per-head sparsity of a block; unmeasured heads read as 0.
    pub fn block_emas(&self, block: usize) -> Vec<f64> {
        (0..self.heads).map(|h| self.get(block, h).map_or(0.0, |e| e.ema)).collect()
    }

    /// Mean smoothed sparsity over a block's heads.
    pub fn block_mean(&self, block: usize) -> f64 {
        self.block_emas(block).iter().sum::<f64>() / self.heads as f64
    }

    pub fn snapshot(&self) -> Vec<HeadProfile> {
        self.entries.iter().flatten().copied().collect()
    }
}
