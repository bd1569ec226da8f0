//! Two-stage training harness on a toy DiT-style stack.
//!
//! Stage 1 trains everything with full attention while per-(block, head)
//! low-rank predictors learn `Q K^T` from the detached block inputs. Once the
//! rolling mean of the block-averaged predictor loss falls below the
//! threshold, stage 2 lets the dispatcher switch blocks to predictor-selected
//! sparse attention. The transition happens once and is never undone.
//!
//! The objective is linear-interpolant flow matching on smooth synthetic
//! latents: `x_t = (1 - t) noise + t x_1`, regress `v = x_1 - noise`.

pub mod model;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::CriticalIndexSet;
use crate::dispatcher::{calibrate, decide, CalibrateConfig, CostProfileTable, DispatchState, TimingMode};
use crate::error::{CoreError, Result};
use crate::grid::TokenGrid;
use crate::grouping::{build_groups, GroupDims, VoxelGroupPlan};
use crate::io::write_tensor;
use crate::optim::{AdamConfig, AdamState};
use crate::predictor::{Budget, CheckpointMeta, PredictorParams};
use crate::profiler::{sample_queries, sampled_head_sparsity, HeadProfile, SampleConfig, SparsityProfile};
use crate::selection::k_from_sparsity;
use crate::synth::{positional_features, smooth_field, FieldConfig};
use crate::tensor::Matrix;

use model::{backward, forward, BlockMode, Dims, ForwardCache, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct ToyDiTConfig {
    pub grid: TokenGrid,
    pub blocks: usize,
    pub heads: usize,
    pub d_k: usize,
    /// Residual stream width.
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub latent_channels: usize,
    pub d_lr: usize,
    pub lr: f64,
    pub predictor_lr: f64,
    pub seed: u64,
    pub theta: f64,
    /// Stage-1 exit: rolling mean predictor loss must fall below this.
    pub threshold: f64,
    pub window: usize,
    pub batch: usize,
    pub iterations: usize,
    /// Multiplier on the init std of query/key projections; larger values
    /// give peakier attention from the start.
    pub qk_gain: f64,
    /// Per-column geometric decay of query/key init scales (1 = isotropic).
    pub qk_decay: f64,
    pub sampling: SampleConfig,
    /// Iterations between predictor updates in stage 2.
    pub stage2_predictor_period: usize,
    pub alpha: f64,
    /// Index memory available to one block's sparse path.
    pub mem_budget_bytes: u64,
    pub group: Option<GroupDims>,
    /// `false` keeps every block on full attention in stage 2 (baseline run).
    pub allow_sparse: bool,
    pub field: FieldConfig,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        let sampling = SampleConfig::default();
        ToyDiTConfig {
            grid: TokenGrid { frames: 8, height: 8, width: 8 },
            blocks: 4,
            heads: 4,
            d_k: 8,
            d_model: 32,
            mlp_hidden: 64,
            latent_channels: 4,
            d_lr: 4,
            lr: 1e-4,
            predictor_lr: 1e-2,
            seed: 0,
            theta: 0.9,
            threshold: 0.01,
            window: 100,
            batch: 4,
            iterations: 1000,
            qk_gain: 2.5,
            qk_decay: 0.5,
            sampling,
            stage2_predictor_period: sampling.stage2_period,
            alpha: SparsityProfile::DEFAULT_ALPHA,
            mem_budget_bytes: 1 << 30,
            group: None,
            allow_sparse: true,
            field: FieldConfig { noise: 0.05, ..FieldConfig::default() },
        }
    }
}

impl ToyDiTConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let dims = [self.blocks, self.heads, self.d_k, self.d_model, self.mlp_hidden, self.latent_channels, self.d_lr, self.batch, self.window];
        if dims.contains(&0) || self.stage2_predictor_period == 0 {
            return Err(CoreError::invalid("ToyDiTConfig", "dimensions, batch, window and periods must be positive"));
        }
        if !(self.threshold > 0.0) || !(self.lr > 0.0) || !(self.predictor_lr > 0.0) || !(self.qk_gain > 0.0) {
            return Err(CoreError::invalid("ToyDiTConfig", "threshold, learning rates and qk_gain must be positive"));
        }
        if !(self.qk_decay > 0.0 && self.qk_decay <= 1.0) {
            return Err(CoreError::invalid("ToyDiTConfig", format!("qk_decay {} outside (0, 1]", self.qk_decay)));
        }
        if self.d_lr >= self.d_k {
            return Err(CoreError::invalid("ToyDiTConfig", format!("d_lr {} must be below d_k {}", self.d_lr, self.d_k)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CoreError::invalid("ToyDiTConfig", format!("theta {} / alpha {} outside (0, 1]", self.theta, self.alpha)));
        }
        self.sampling.validate()
    }

    fn dims(&self) -> Dims {
        Dims {
            input: self.latent_channels + 7,
            model: self.d_model,
            heads: self.heads,
            d_k: self.d_k,
            mlp: self.mlp_hidden,
            output: self.latent_channels,
            blocks: self.blocks,
        }
    }
}

/// Mean squared velocity error and its gradient w.r.t. `pred`, for the
/// interpolant `x_t = (1 - t) noise + t data`.
pub fn flow_matching_loss(pred: &Matrix, noise: &Matrix, data: &Matrix, t: f64) -> Result<(f64, Matrix)> {
    if pred.shape() != noise.shape() || pred.shape() != data.shape() || pred.data().is_empty() {
        return Err(CoreError::shape("flow_matching_loss", format!("{:?} / {:?} / {:?}", pred.shape(), noise.shape(), data.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::invalid("flow_matching_loss", format!("t = {t} outside [0, 1]")));
    }
    let n = pred.data().len() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for (((g, &p), &x0), &x1) in grad.data_mut().iter_mut().zip(pred.data()).zip(noise.data()).zip(data.data()) {
        let r = p - (x1 - x0);
        loss += r * r;
        *g = 2.0 * r / n;
    }
    Ok((loss / n, grad))
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub noise: Matrix,
    pub data: Matrix,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Full,
    Sparse,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Full => 1,
            Stage::Sparse => 2,
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub stage: u8,
    pub task_loss: f64,
    /// Block-averaged predictor loss, when predictors were updated.
    pub predictor_loss: Option<f64>,
    pub sparse_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed iterations.
    pub iteration: usize,
    pub transition_iteration: Option<usize>,
    pub dispatch: DispatchState,
    pub history: Vec<StepRecord>,
    /// Block-averaged predictor loss of every stage-1 update, in order.
    pub predictor_trace: Vec<f64>,
    pub profile: SparsityProfile,
    pub profile_log: Vec<HeadProfile>,
}

/// Mean of the last `window` entries, if there are that many.
pub fn rolling_mean(trace: &[f64], window: usize) -> Option<f64> {
    (window > 0 && trace.len() >= window).then(|| trace[trace.len() - window..].iter().sum::<f64>() / window as f64)
}

/// Index of the first trace entry whose trailing window mean is below
/// `threshold`.
pub fn first_transition(trace: &[f64], window: usize, threshold: f64) -> Option<usize> {
    (window.max(1)..=trace.len()).find(|&end| rolling_mean(&trace[..end], window).is_some_and(|m| m < threshold)).map(|end| end - 1)
}

/// Run summary written next to the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub iterations: usize,
    pub transition_iteration: Option<usize>,
    /// Mean task loss over the last `tail` iterations.
    pub final_task_loss: f64,
    pub tail: usize,
    pub sparse_blocks_final: usize,
    pub final_predictor_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: ToyDiTConfig,
    params: ModelParams,
    adam: Vec<AdamState>,
    adam_cfg: AdamConfig,
    adam_step: u64,
    predictors: Vec<Vec<PredictorParams>>,
    predictor_head_losses: Vec<Vec<Vec<f64>>>,
    table: CostProfileTable,
    plan: Option<VoxelGroupPlan>,
    pos: Matrix,
    data_rng: ChaCha8Rng,
    state: TrainState,
}

const DATA_STREAM: u64 = 0x6461_7461;
const INIT_STREAM: u64 = 0x696e_6974;
const PREDICTOR_STREAM: u64 = 0x7072_6564;

/// Cost table from the FLOP model at the toy's head dims, every 0.05 bucket.
pub fn default_table(cfg: &ToyDiTConfig) -> Result<CostProfileTable> {
    let sparsities: Vec<f64> = (0..20).map(|b| b as f64 / 20.0).collect();
    let cal = CalibrateConfig { d_k: cfg.d_k, d_lr: cfg.d_lr, mode: TimingMode::Model, ..CalibrateConfig::default() };
    calibrate(&[cfg.grid.len()], &sparsities, &cal)
}

impl Trainer {
    /// `table = None` uses [`default_table`].
    pub fn new(cfg: ToyDiTConfig, table: Option<CostProfileTable>) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims();
        let params = ModelParams::init(&dims, cfg.qk_gain, cfg.qk_decay, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM));
        let adam = params.tensors().into_iter().map(AdamState::for_param).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PREDICTOR_STREAM);
        let mut predictors = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            let mut row = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                let mut p = PredictorParams::random(cfg.d_model, cfg.d_lr, &mut prng)?;
                p.adam = AdamConfig::with_lr(cfg.predictor_lr);
                row.push(p);
            }
            predictors.push(row);
        }
        let table = match table {
            Some(t) => t,
            None => default_table(&cfg)?,
        };
        let plan = cfg.group.map(|g| build_groups(&cfg.grid, g)).transpose()?;
        let state = TrainState {
            stage: Stage::Full,
            iteration: 0,
            transition_iteration: None,
            dispatch: DispatchState::new(cfg.blocks),
            history: Vec::new(),
            predictor_trace: Vec::new(),
            profile: SparsityProfile::new(cfg.blocks, cfg.heads, cfg.alpha)?,
            profile_log: Vec::new(),
        };
        Ok(Trainer {
            pos: positional_features(&cfg.grid),
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM),
            adam_cfg: AdamConfig::with_lr(cfg.lr),
            adam_step: 0,
            predictor_head_losses: vec![vec![Vec::new(); cfg.heads]; cfg.blocks],
            cfg,
            params,
            adam,
            predictors,
            table,
            plan,
            state,
        })
    }

    pub fn config(&self) -> &ToyDiTConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn predictors(&self) -> &[Vec<PredictorParams>] {
        &self.predictors
    }

    pub fn predictors_mut(&mut self) -> &mut [Vec<PredictorParams>] {
        &mut self.predictors
    }

    pub fn table(&self) -> &CostProfileTable {
        &self.table
    }

    /// Turns sparse execution off for the rest of the run (baseline fork).
    pub fn disable_sparse(&mut self) {
        self.cfg.allow_sparse = false;
    }

    /// Draws the next batch from the data stream. Batches depend only on the
    /// seed and the number of batches drawn so far.
    pub fn next_batch(&mut self) -> Vec<Sample> {
        let (s, c) = (self.cfg.grid.len(), self.cfg.latent_channels);
        (0..self.cfg.batch)
            .map(|_| {
                let data = smooth_field(&self.cfg.grid, c, &self.cfg.field, &mut self.data_rng);
                let noise = Matrix::random_normal(s, c, 1.0, &mut self.data_rng);
                let t = self.data_rng.random_range(0.0..=1.0);
                Sample { noise, data, t }
            })
            .collect()
    }

    /// `[x_t | positional features | t]` per token.
    pub fn model_input(&self, sample: &Sample) -> Matrix {
        let c = self.cfg.latent_channels;
        Matrix::from_fn(self.cfg.grid.len(), c + 7, |i, j| {
            if j < c {
                (1.0 - sample.t) * sample.noise.get(i, j) + sample.t * sample.data.get(i, j)
            } else if j < c + 6 {
                self.pos.get(i, j - c)
            } else {
                sample.t
            }
        })
    }

    /// Keys kept per query for a head, from its smoothed sparsity.
    fn head_k(&self, block: usize, head: usize) -> Result<usize> {
        let ema = self.state.profile.get(block, head).map_or(0.0, |p| p.ema);
        k_from_sparsity(ema.min(1.0 - 1e-12), self.cfg.grid.len())
    }

    /// Predictor-selected index sets for every head of `block` given its input.
    pub fn estimate_block(&self, block: usize, x: &Matrix) -> Result<Vec<CriticalIndexSet>> {
        (0..self.cfg.heads)
            .map(|h| {
                let est = self.predictors[block][h].estimate_critical(x, Budget::K(self.head_k(block, h)?))?;
                match &self.plan {
                    Some(plan) => CriticalIndexSet::new(est.keys, None, plan.shared_query_sets(&est.sets)?),
                    None => Ok(est),
                }
            })
            .collect()
    }

    fn sparse_active(&self, block: usize) -> bool {
        self.state.stage == Stage::Sparse && self.cfg.allow_sparse && self.state.dispatch.enabled(block)
    }

    /// Forward with the current dispatch decisions.
    pub fn forward(&self, sample: &Sample) -> Result<ForwardCache> {
        let u = self.model_input(sample);
        forward(&self.params, &u, |b, x, _| {
            if self.sparse_active(b) {
                Ok(BlockMode::Sparse(self.estimate_block(b, x)?))
            } else {
                Ok(BlockMode::Full)
            }
        })
    }

    fn diverged(&self, detail: impl Into<String>) -> CoreError {
        CoreError::Diverged { iteration: self.state.iteration, detail: detail.into() }
    }

    /// Forward, backward and one Adam step on the main weights. Returns the
    /// batch loss and the first sample's activations.
    fn main_update(&mut self, batch: &[Sample]) -> Result<(f64, ForwardCache)> {
        if batch.is_empty() {
            return Err(CoreError::invalid("train step", "empty batch"));
        }
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        let mut first = None;
        for sample in batch {
            let cache = self.forward(sample)?;
            let (loss, dy) = flow_matching_loss(&cache.y, &sample.noise, &sample.data, sample.t)?;
            if !loss.is_finite() {
                return Err(self.diverged(format!("task loss {loss}")));
            }
            total += loss;
            grads.add_scaled(&backward(&self.params, &cache, &dy), 1.0 / batch.len() as f64);
            first.get_or_insert(cache);
        }
        if !grads.is_finite() {
            return Err(self.diverged("non-finite gradient"));
        }
        self.adam_step += 1;
        for ((p, g), st) in self.params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut self.adam) {
            st.apply(&self.adam_cfg, self.adam_step, p, g);
        }
        Ok((total / batch.len() as f64, first.expect("batch is nonempty")))
    }

    fn sample_cfg(&self, block: usize) -> SampleConfig {
        let base = SampleConfig { seed: self.cfg.sampling.seed ^ self.cfg.seed.wrapping_mul(0xA24B_AED4_963E_E407), ..self.cfg.sampling };
        base.for_step(block, self.state.iteration)
    }

    /// One Adam step per (block, head) predictor against raw `Q K^T` on
    /// sampled rows of the detached activations. Touches only predictor
    /// state. Returns the block-averaged loss.
    pub fn update_predictors(&mut self, cache: &ForwardCache) -> Result<f64> {
        let s = self.cfg.grid.len();
        let mut block_sum = 0.0;
        for b in 0..self.cfg.blocks {
            let rows = sample_queries(s, &self.sample_cfg(b))?;
            let x = cache.block_input(b);
            let mut head_sum = 0.0;
            for h in 0..self.cfg.heads {
                let (q, k, _) = cache.head_qkv(b, h);
                let target = q.select_rows(&rows).matmul_t(k)?;
                let report = self.predictors[b][h].train_step(x, &rows, &target)?;
                if !report.loss.total.is_finite() {
                    return Err(self.diverged(format!("predictor loss at block {b} head {h}")));
                }
                self.predictor_head_losses[b][h].push(report.loss.total);
                head_sum += report.loss.total;
            }
            block_sum += head_sum / self.cfg.heads as f64;
        }
        Ok(block_sum / self.cfg.blocks as f64)
    }

    /// Measures every head on a fresh query sample and folds it into the EMA.
    pub fn update_profile(&mut self, cache: &ForwardCache) -> Result<()> {
        let s = self.cfg.grid.len();
        for b in 0..self.cfg.blocks {
            let rows = sample_queries(s, &self.sample_cfg(b).for_step(usize::MAX, 0))?;
            let samples = (0..self.cfg.heads)
                .map(|h| {
                    let (q, k, _) = cache.head_qkv(b, h);
                    sampled_head_sparsity(q, k, self.cfg.theta, &rows)
                })
                .collect::<Result<Vec<f64>>>()?;
            self.state.profile.update(b, &samples, self.state.iteration)?;
            self.state.profile_log.extend((0..self.cfg.heads).filter_map(|h| self.state.profile.get(b, h).copied()));
        }
        Ok(())
    }

    /// Re-runs the dispatcher for every block from the current profile.
    pub fn redecide(&mut self) -> Result<()> {
        for b in 0..self.cfg.blocks {
            let d = decide(b, self.state.profile.block_mean(b), self.cfg.grid.len(), self.cfg.mem_budget_bytes, &self.table)?;
            self.state.dispatch.apply(self.state.iteration, d);
        }
        Ok(())
    }

    fn profile_due(&self) -> bool {
        let period = match self.state.stage {
            Stage::Full => self.cfg.sampling.stage1_period,
            Stage::Sparse => self.cfg.sampling.stage2_period,
        };
        self.state.iteration % period == 0
    }

    fn record(&mut self, task_loss: f64, predictor_loss: Option<f64>) {
        let sparse_blocks = (0..self.cfg.blocks).filter(|&b| self.sparse_active(b)).count();
        self.state.history.push(StepRecord {
            iteration: self.state.iteration,
            stage: self.state.stage.number(),
            task_loss,
            predictor_loss,
            sparse_blocks,
        });
        self.state.iteration += 1;
    }

    /// Full attention everywhere; predictors train every iteration.
    pub fn stage1_step(&mut self, batch: &[Sample]) -> Result<()> {
        if self.state.stage != Stage::Full {
            return Err(CoreError::invalid("stage1_step", "trainer is already in stage 2"));
        }
        let (loss, cache) = self.main_update(batch)?;
        let pl = self.update_predictors(&cache)?;
        self.state.predictor_trace.push(pl);
        if self.profile_due() {
            self.update_profile(&cache)?;
        }
        self.record(loss, Some(pl));
        Ok(())
    }

    /// Switches to stage 2 when the trailing window of predictor losses
    /// averages below the threshold. Returns whether the stage is now 2.
    pub fn check_transition(&mut self) -> Result<bool> {
        if self.state.stage == Stage::Sparse {
            return Ok(true);
        }
        if rolling_mean(&self.state.predictor_trace, self.cfg.window).is_some_and(|m| m < self.cfg.threshold) {
            self.state.stage = Stage::Sparse;
            self.state.transition_iteration = Some(self.state.iteration);
            self.redecide()?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Dispatcher-gated step; predictors and profiler run at the stage-2
    /// period and a profile update re-runs the dispatcher.
    pub fn stage2_step(&mut self, batch: &[Sample]) -> Result<()> {
        if self.state.stage != Stage::Sparse {
            return Err(CoreError::invalid("stage2_step", "trainer is still in stage 1"));
        }
        let (loss, cache) = self.main_update(batch)?;
        let pl = if self.state.iteration % self.cfg.stage2_predictor_period == 0 {
            Some(self.update_predictors(&cache)?)
        } else {
            None
        };
        if self.profile_due() {
            self.update_profile(&cache)?;
            self.redecide()?;
        }
        self.record(loss, pl);
        Ok(())
    }

    /// Draws a batch and runs the step for the current stage.
    pub fn step(&mut self) -> Result<()> {
        let batch = self.next_batch();
        match self.state.stage {
            Stage::Full => {
                self.stage1_step(&batch)?;
                self.check_transition()?;
                Ok(())
            }
            Stage::Sparse => self.stage2_step(&batch),
        }
    }

    /// Steps until `iterations` have completed in total.
    pub fn run_until(&mut self, iterations: usize) -> Result<()> {
        while self.state.iteration < iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Runs the configured number of iterations.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.iterations)
    }

    pub fn summary(&self, tail: usize) -> TrainSummary {
        let h = &self.state.history;
        let tail = tail.clamp(1, h.len().max(1));
        let last = &h[h.len().saturating_sub(tail)..];
        TrainSummary {
            seed: self.cfg.seed,
            iterations: self.state.iteration,
            transition_iteration: self.state.transition_iteration,
            final_task_loss: if last.is_empty() { f64::NAN } else { last.iter().map(|r| r.task_loss).sum::<f64>() / last.len() as f64 },
            tail,
            sparse_blocks_final: h.last().map_or(0, |r| r.sparse_blocks),
            final_predictor_loss: h.iter().rev().find_map(|r| r.predictor_loss),
        }
    }

    /// Writes `losses.csv`, `profile.json`, `decisions.json`, `summary.json`
    /// and `checkpoints/` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
        for r in &self.state.history {
            w.serialize(r)?;
        }
        w.flush()?;
        fs::write(dir.join("profile.json"), serde_json::to_string_pretty(&self.state.profile_log)?)?;
        let decisions = serde_json::json!({
            "transition_iteration": self.state.transition_iteration,
            "dispatch": self.state.dispatch,
        });
        fs::write(dir.join("decisions.json"), serde_json::to_string_pretty(&decisions)?)?;
        let ck = dir.join("checkpoints");
        for (b, row) in self.predictors.iter().enumerate() {
            for (h, p) in row.iter().enumerate() {
                let meta = CheckpointMeta {
                    block: b,
                    head: h,
                    d: p.d(),
                    d_lr: p.d_lr(),
                    step: p.step,
                    loss_history: self.predictor_head_losses[b][h].clone(),
                };
                p.save_checkpoint(&ck, &format!("predictor_b{b}_h{h}"), &meta)?;
            }
        }
        let model_dir = ck.join("model");
        fs::create_dir_all(&model_dir)?;
        for (i, t) in self.params.tensors().into_iter().enumerate() {
            write_tensor(&model_dir.join(format!("{i:03}.svt")), t)?;
        }
        let summary = self.summary(50);
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    }
}
