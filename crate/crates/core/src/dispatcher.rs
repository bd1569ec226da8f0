//! Per-block gate between full and sparse attention.
//!
//! A calibrated [`CostProfileTable`] gives, per (length bucket, sparsity
//! bucket), the cost of the full path and of the sparse path (score
//! estimation, top-k selection, sparse attention). A block runs sparse when
//! its profiled sparsity reaches the crossover of its length bucket and the
//! index buffer fits in the free memory budget.

use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{full_attention_counted, sparse_attention_counted};
use crate::error::{CoreError, Result};
use crate::io::fixed_index_bytes;
use crate::selection::{k_from_sparsity, streaming_topk_with, SelectOptions};
use crate::tensor::Matrix;

/// Width of a sparsity bucket.
pub const SPARSITY_STEP: f64 = 0.05;
const BUCKETS_PER_UNIT: f64 = 20.0;

/// Power-of-two bucket holding `length`.
pub fn length_bucket(length: usize) -> usize {
    length.max(1).next_power_of_two()
}

/// Index of the 0.05-wide sparsity bucket at or below `s`.
pub fn sparsity_bucket(s: f64) -> u32 {
    (s * BUCKETS_PER_UNIT + 1e-9).floor().max(0.0) as u32
}

/// Lower edge of a bucket; division keeps edges like 0.15 exact.
pub fn bucket_sparsity(bucket: u32) -> f64 {
    bucket as f64 / BUCKETS_PER_UNIT
}

/// Analytic FLOP counts of both paths for one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathFlops {
    pub full_score: u64,
    pub full_score_value: u64,
    /// Low-rank score products plus one comparison per candidate.
    pub estimation: u64,
    pub sparse_score: u64,
    pub sparse_score_value: u64,
}

impl PathFlops {
    /// Counts for `length` queries and keys keeping `k` keys per query, with
    /// value width equal to `d_k`.
    pub fn model(length: usize, k: usize, d_k: usize, d_lr: usize) -> Self {
        let (s, k, d_k, d_lr) = (length as u64, k as u64, d_k as u64, d_lr as u64);
        PathFlops {
            full_score: 2 * s * s * d_k,
            full_score_value: 2 * s * s * d_k,
            estimation: 2 * s * s * d_lr + s * s,
            sparse_score: 2 * s * k * d_k,
            sparse_score_value: 2 * s * k * d_k,
        }
    }

    pub fn full_total(&self) -> u64 {
        self.full_score + self.full_score_value
    }

    pub fn sparse_total(&self) -> u64 {
        self.estimation + self.sparse_score + self.sparse_score_value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum TimingMode {
    /// Time = FLOPs / rate; deterministic.
    Model,
    /// Median wall-clock seconds over the repetitions.
    WallClock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CalibrateConfig {
    pub d_k: usize,
    pub d_lr: usize,
    pub reps: usize,
    pub mode: TimingMode,
    /// FLOP/s assumed in model mode.
    pub flop_rate: f64,
    pub seed: u64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        CalibrateConfig { d_k: 64, d_lr: 16, reps: 3, mode: TimingMode::Model, flop_rate: 1e9, seed: 0 }
    }
}

/// One calibrated (length bucket, sparsity bucket) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub length: usize,
    pub sparsity_bucket: u32,
    pub k: usize,
    pub full_time: f64,
    /// Whole sparse path, estimation included.
    pub sparse_time: f64,
    pub estimation_time: f64,
    pub full_score_flops: u64,
    pub full_score_value_flops: u64,
    pub estimation_flops: u64,
    pub sparse_score_flops: u64,
    pub sparse_score_value_flops: u64,
    /// Fixed-width index buffer for `length` queries of `k` entries.
    pub index_bytes: u64,
}

impl CostEntry {
    pub fn sparsity(&self) -> f64 {
        bucket_sparsity(self.sparsity_bucket)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostProfileTable {
    pub entries: Vec<CostEntry>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    // Clamp so the table invariant `time > 0` holds on coarse clocks.
    Ok((out, start.elapsed().as_secs_f64().max(1e-9)))
}

fn measure_cell(length: usize, k: usize, cfg: &CalibrateConfig, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64, PathFlops)> {
    let q = Matrix::<f64>::random_normal(length, cfg.d_k, 1.0, rng);
    let kk = Matrix::<f64>::random_normal(length, cfg.d_k, 1.0, rng);
    let v = Matrix::<f64>::random_normal(length, cfg.d_k, 1.0, rng);
    let ql = Matrix::<f64>::random_normal(length, cfg.d_lr, 1.0, rng);
    let kl = Matrix::<f64>::random_normal(length, cfg.d_lr, 1.0, rng);
    let ks = vec![k; length];
    let (mut full_t, mut est_t, mut sparse_t) = (Vec::new(), Vec::new(), Vec::new());
    let mut flops = None;
    for _ in 0..cfg.reps.max(1) {
        let ((_, ff), tf) = timed(|| full_attention_counted(&q, &kk, &v))?;
        let ((top, st), te) = timed(|| streaming_topk_with(&ql, &kl, &ks, &SelectOptions::default(), None))?;
        let idx = top.into_index_set();
        let ((_, sf), ts) = timed(|| sparse_attention_counted(&q, &kk, &v, &idx))?;
        full_t.push(tf);
        est_t.push(te);
        sparse_t.push(te + ts);
        flops = Some(PathFlops {
            full_score: ff.score,
            full_score_value: ff.score_value,
            estimation: st.flops(),
            sparse_score: sf.score,
            sparse_score_value: sf.score_value,
        });
    }
    Ok((median(full_t), median(sparse_t), median(est_t), flops.expect("at least one rep")))
}

/// Builds the cost table over `lengths x sparsities`.
pub fn calibrate(lengths: &[usize], sparsities: &[f64], cfg: &CalibrateConfig) -> Result<CostProfileTable> {
    if lengths.is_empty() || sparsities.is_empty() {
        return Err(CoreError::invalid("calibrate", "empty length or sparsity grid"));
    }
    if cfg.d_k == 0 || cfg.d_lr == 0 || !(cfg.flop_rate > 0.0) {
        return Err(CoreError::invalid("calibrate", format!("{cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buckets: Vec<u32> = sparsities.iter().map(|&s| sparsity_bucket(s)).collect();
    buckets.sort_unstable();
    buckets.dedup();
    let mut lens: Vec<usize> = lengths.iter().map(|&l| length_bucket(l)).collect();
    lens.sort_unstable();
    lens.dedup();

    let mut entries = Vec::new();
    for &length in &lens {
        for &b in &buckets {
            let k = k_from_sparsity(bucket_sparsity(b).min(1.0 - 1e-12), length)?;
            let (full_time, sparse_time, estimation_time, flops) = match cfg.mode {
                TimingMode::Model => {
                    let f = PathFlops::model(length, k, cfg.d_k, cfg.d_lr);
                    let t = |x: u64| x as f64 / cfg.flop_rate;
                    (t(f.full_total()), t(f.sparse_total()), t(f.estimation), f)
                }
                TimingMode::WallClock => measure_cell(length, k, cfg, &mut rng)?,
            };
            entries.push(CostEntry {
                length,
                sparsity_bucket: b,
                k,
                full_time,
                sparse_time,
                estimation_time,
                full_score_flops: flops.full_score,
                full_score_value_flops: flops.full_score_value,
                estimation_flops: flops.estimation,
                sparse_score_flops: flops.sparse_score,
                sparse_score_value_flops: flops.sparse_score_value,
                index_bytes: fixed_index_bytes(length, k),
            });
        }
    }
    Ok(CostProfileTable { entries })
}

impl CostProfileTable {
    pub fn lengths(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.entries.iter().map(|e| e.length).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Smallest sparsity bucket of `length` where the sparse path is faster.
    pub fn crossover(&self, length: usize) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.length == length && e.sparse_time < e.full_time)
            .map(|e| e.sparsity_bucket)
            .min()
            .map(bucket_sparsity)
    }

    /// Calibrated bucket for `length`, or the nearest one in log scale
    /// (smaller on ties) with `true` marking the fallback.
    pub fn resolve_length(&self, length: usize) -> Option<(usize, bool)> {
        let want = length_bucket(length);
        let lens = self.lengths();
        if lens.contains(&want) {
            return Some((want, false));
        }
        let dist = |l: usize| (l.trailing_zeros() as i64 - want.trailing_zeros() as i64).abs();
        lens.into_iter().min_by_key(|&l| (dist(l), l)).map(|l| (l, true))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let entries = r.deserialize().collect::<std::result::Result<Vec<CostEntry>, _>>()?;
        if entries.is_empty() {
            return Err(CoreError::Format("cost table has no entries".into()));
        }
        if let Some(e) = entries.iter().find(|e| !(e.full_time > 0.0 && e.sparse_time > 0.0 && e.estimation_time > 0.0)) {
            return Err(CoreError::Format(format!("non-positive time in cost entry {e:?}")));
        }
        Ok(CostProfileTable { entries })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchReason {
    Enabled,
    SparsityBelowThreshold,
    MemoryExceeded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchDecision {
    pub block: usize,
    pub enabled: bool,
    pub reason: DispatchReason,
    /// Keys kept per query if the block runs sparse.
    pub k: usize,
    pub index_bytes: u64,
    /// Crossover used; `None` when sparse never wins for the bucket.
    pub crossover: Option<f64>,
    /// The length was not calibrated and a neighbouring bucket was used.
    pub fallback_bucket: bool,
}

/// Gate for one block at `sparsity` over `length` tokens.
pub fn decide(block: usize, sparsity: f64, length: usize, mem_free: u64, table: &CostProfileTable) -> Result<DispatchDecision> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(CoreError::invalid("decide", format!("sparsity {sparsity} outside [0, 1]")));
    }
    let (bucket, fallback_bucket) =
        table.resolve_length(length).ok_or_else(|| CoreError::invalid("decide", "cost table is empty"))?;
    let crossover = table.crossover(bucket);
    let k = k_from_sparsity(sparsity.min(1.0 - 1e-12), length)?;
    let index_bytes = fixed_index_bytes(length, k);
    // The 1e-12 slack keeps bucket edges such as 0.7 inclusive.
    let reason = match crossover {
        Some(c) if sparsity + 1e-12 >= c => {
            if index_bytes <= mem_free {
                DispatchReason::Enabled
            } else {
                DispatchReason::MemoryExceeded
            }
        }
        _ => DispatchReason::SparsityBelowThreshold,
    };
    Ok(DispatchDecision {
        block,
        enabled: reason == DispatchReason::Enabled,
        reason,
        k,
        index_bytes,
        crossover,
        fallback_bucket,
    })
}

/// Change of a block's gate between two profiling updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub iteration: usize,
    pub block: usize,
    pub enabled: bool,
    pub reason: DispatchReason,
}

/// Latest decision per block plus a log of every flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchState {
    pub decisions: Vec<Option<DispatchDecision>>,
    pub transitions: Vec<Transition>,
}

impl DispatchState {
    pub fn new(blocks: usize) -> Self {
        DispatchState { decisions: vec![None; blocks], transitions: Vec::new() }
    }

    pub fn apply(&mut self, iteration: usize, decision: DispatchDecision) {
        let slot = &mut self.decisions[decision.block];
        let was = slot.is_some_and(|d| d.enabled);
        if was != decision.enabled || slot.is_none() && decision.enabled {
            self.transitions.push(Transition {
                iteration,
                block: decision.block,
                enabled: decision.enabled,
                reason: decision.reason,
            });
        }
        *slot = Some(decision);
    }

    pub fn enabled(&self, block: usize) -> bool {
        self.decisions[block].is_some_and(|d| d.enabled)
    }
}
