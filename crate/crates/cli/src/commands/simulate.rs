//! Message-level run of hybrid sparse context parallelism on random
//! tensors with predictor-estimated index sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use vidsparse_core::attention::sparse_attention;
use vidsparse_core::grouping::{build_groups, GroupDims};
use vidsparse_core::predictor::{Budget, PredictorParams};
use vidsparse_core::{CriticalIndexSet, Matrix, TokenGrid};
use vidsparse_cp::sim::{shard, Message, Widths};
use vidsparse_cp::{
    balance_heads, hcp_comm, hcp_mem, run_hybrid_sparse_cp, scp_comm, scp_mem, verify_equivalence, AlphaSource, CpLayout,
    HeadLoadVector, Phase, Placement,
};

use super::Command;
use crate::config::Fail;
use crate::manifest::Outputs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SimScenario {
    pub seed: u64,
    pub grid: TokenGrid,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the block input the predictors project.
    pub d_model: usize,
    pub d_lr: usize,
    pub sparsity: f64,
    pub g_h: usize,
    pub g_s: usize,
    pub placement: Placement,
    /// Voxel groups sharing one index set per group.
    pub group: Option<GroupDims>,
    pub widths: Widths,
    pub tol: f64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario {
            seed: 0,
            grid: TokenGrid { frames: 4, height: 4, width: 4 },
            heads: 8,
            head_dim: 8,
            d_model: 16,
            d_lr: 4,
            sparsity: 0.8,
            g_h: 4,
            g_s: 2,
            placement: Placement::HcpFirst,
            group: None,
            widths: Widths::default(),
            tol: 1e-6,
        }
    }
}

/// Measured per-device bytes next to the closed forms.
#[derive(Debug, Serialize)]
struct DeviceAccounting {
    rank: usize,
    span: usize,
    hcp_rank: usize,
    heads: Vec<usize>,
    hcp_measured: u64,
    hcp_formula: u64,
    scp_measured: u64,
    scp_formula: f64,
    qkvo_bytes: u64,
    hcp_mem_formula: u64,
    remote_kv_bytes: u64,
    scp_mem_formula: f64,
    index_exchange_bytes: u64,
}

#[derive(Debug, Serialize)]
struct Accounting {
    layout: CpLayout,
    assignment: Vec<usize>,
    exact: bool,
    devices: Vec<DeviceAccounting>,
}

impl Command for SimScenario {
    const NAME: &'static str = "simulate";
    const SEED_PATH: Option<&'static [&'static str]> = Some(&["seed"]);

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn run(&self, out: &mut Outputs) -> anyhow::Result<()> {
        let s = self.grid.len();
        let (h, d) = (self.heads, self.head_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut draw = |cols: usize| (0..h).map(|_| Matrix::random_normal(s, cols, 1.0, &mut rng)).collect::<Vec<_>>();
        let (q, k, v) = (draw(d), draw(d), draw(d));
        let x = Matrix::random_normal(s, self.d_model, 1.0, &mut rng);
        let groups = self.group.map(|g| build_groups(&self.grid, g)).transpose()?;
        let mut sets = Vec::with_capacity(h);
        for _ in 0..h {
            let est = PredictorParams::random(self.d_model, self.d_lr, &mut rng)?.estimate_critical(&x, Budget::Sparsity(self.sparsity))?;
            sets.push(match &groups {
                Some(plan) => CriticalIndexSet::new(s, None, plan.shared_query_sets(&est.sets)?)?,
                None => est,
            });
        }
        let layout = CpLayout { g_h: self.g_h, g_s: self.g_s, placement: self.placement };
        let plan = balance_heads(&HeadLoadVector::from_index_sets(&sets, d), self.g_h)?;
        let outcome = run_hybrid_sparse_cp(shard(&q, &k, &v, &layout)?, &layout, &plan, &sets, self.widths)?;
        let reference = (0..h).map(|i| sparse_attention(&q[i], &k[i], &v[i], &sets[i])).collect::<Result<Vec<_>, _>>()?;
        let report = verify_equivalence(&outcome.outputs, &reference, &layout, self.tol)?;

        let w = self.widths.element;
        let span = s / self.g_s;
        let mx = |rank, phase| outcome.log.sent(rank, phase).max(outcome.log.received(rank, phase));
        let mut devices = Vec::new();
        for rank in 0..layout.devices() {
            let (a, r) = layout.coords(rank);
            let held = plan.heads_of(r);
            let alpha = AlphaSource::Indices(&sets).for_heads(&held, self.g_s, s)?;
            devices.push(DeviceAccounting {
                rank,
                span: a,
                hcp_rank: r,
                hcp_measured: mx(rank, Phase::HcpFwd) + mx(rank, Phase::OutputRedistribute),
                hcp_formula: hcp_comm(h, held.len(), span, d, self.g_h, w)?,
                scp_measured: mx(rank, Phase::ScpKv),
                scp_formula: scp_comm(&alpha, a, d, w),
                qkvo_bytes: outcome.qkvo_bytes[rank],
                hcp_mem_formula: hcp_mem(held.len(), span, d, w),
                remote_kv_bytes: outcome.remote_kv_bytes[rank],
                scp_mem_formula: scp_mem(&alpha, a, d, w),
                index_exchange_bytes: mx(rank, Phase::ScpIndexExchange),
                heads: held,
            });
        }
        let exact = devices.iter().all(|x| {
            x.hcp_measured == x.hcp_formula
                && x.scp_measured as f64 == x.scp_formula
                && x.qkvo_bytes == x.hcp_mem_formula
                && x.remote_kv_bytes as f64 == x.scp_mem_formula
        });
        let ledger: Vec<Message> = outcome.log.messages().to_vec();
        out.csv("ledger.csv", &ledger)?;
        out.json("equivalence.json", &report)?;
        out.json("accounting.json", &Accounting { layout, assignment: plan.assignment.clone(), exact, devices })?;
        if !report.pass {
            return Err(Fail::Numerical(format!("simulated output deviates by {} (tol {})", report.max_abs_error, report.tol)).into());
        }
        if !exact {
            return Err(Fail::Numerical("message ledger disagrees with the closed-form volumes".into()).into());
        }
        Ok(())
    }
}
