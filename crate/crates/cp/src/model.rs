//! Closed-form communication and memory volumes for head-parallel (HCP) and
//! sequence-parallel (SCP) attention under sparsity, and the hybrid planner.
//!
//! A hybrid layout with degrees `(g_h, g_s)` splits the sequence into `g_s`
//! contiguous spans. Span `a` is held by one HCP group of `g_h` devices; its
//! member `r` initially owns chunk `a * g_h + r` of length `S / N`. All HCP
//! groups share one head plan, so member `r` of every group ends up with the
//! same heads, and those `g_s` devices form SCP group `r`.

use serde::{Deserialize, Serialize};
use vidsparse_core::CriticalIndexSet;

use crate::balance::{balance_heads, HcpPlan, HeadLoadVector};
use crate::error::{Constraint, CpError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub devices: usize,
    pub devices_per_node: usize,
    /// Bytes per second between devices of one node.
    pub intra_node_bw: f64,
    /// Bytes per second across nodes.
    pub inter_node_bw: f64,
    /// Score-value multiply-adds per second per device.
    pub compute_rate: f64,
    pub mem_cap_bytes: u64,
    /// Bytes per tensor element.
    pub elem_width: u64,
}

impl Default for ClusterSpec {
    /// One node of eight devices with 80 GB each.
    fn default() -> Self {
        ClusterSpec {
            devices: 8,
            devices_per_node: 8,
            intra_node_bw: 2e11,
            inter_node_bw: 2.5e10,
            compute_rate: 1e14,
            mem_cap_bytes: 80_000_000_000,
            elem_width: 2,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.intra_node_bw, self.inter_node_bw, self.compute_rate];
        if self.devices == 0 || self.devices_per_node == 0 || self.mem_cap_bytes == 0 || self.elem_width == 0 {
            return Err(CpError::invalid("ClusterSpec", "counts, memory cap and element width must be positive"));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(CpError::invalid("ClusterSpec", "bandwidths and compute rate must be positive and finite"));
        }
        if self.devices % self.devices_per_node != 0 && self.devices > self.devices_per_node {
            return Err(CpError::invalid(
                "ClusterSpec",
                format!("{} devices per node does not divide {} devices", self.devices_per_node, self.devices),
            ));
        }
        Ok(())
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.devices_per_node
    }
}

/// Sequence length and per-head width of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct AttnShape {
    pub seq_len: usize,
    pub head_dim: usize,
}

fn chunk_len(op: &'static str, seq_len: usize, devices: usize) -> Result<usize> {
    if devices == 0 || seq_len % devices != 0 || seq_len == 0 {
        return Err(CpError::invalid(op, format!("sequence of {seq_len} tokens does not split over {devices} devices")));
    }
    Ok(seq_len / devices)
}

/// Per-device bytes of the four uneven all-to-alls of a head-parallel group
/// of `devices` over `seq_len` tokens (`Q`, `K`, `V` in, output back):
/// `w * (3 S D max(Hr (N-1)/N, (H-Hr)/N) + S D max((H-Hr)/N, Hr (N-1)/N))`.
pub fn hcp_comm(heads: usize, heads_here: usize, seq_len: usize, head_dim: usize, devices: usize, width: u64) -> Result<u64> {
    if heads_here > heads {
        return Err(CpError::invalid("hcp_comm", format!("{heads_here} of {heads} heads")));
    }
    let c = chunk_len("hcp_comm", seq_len, devices)? as u64;
    let recv = (heads_here * (devices - 1)) as u64 * c;
    let sent = (heads - heads_here) as u64 * c;
    Ok(width * head_dim as u64 * (3 * recv.max(sent) + sent.max(recv)))
}

/// Resident `Q`, `K`, `V` and output bytes of `heads_here` heads over
/// `seq_len` tokens.
pub fn hcp_mem(heads_here: usize, seq_len: usize, head_dim: usize, width: u64) -> u64 {
    4 * (seq_len * head_dim * heads_here) as u64 * width
}

/// Fractions of remote KV needed between the members of one sequence-parallel
/// group, stored as row counts summed over the group's heads so that volumes
/// stay exact: `alpha(i, j) = rows(i, j) / (heads * chunk)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaMatrix {
    pub devices: usize,
    pub heads: usize,
    /// Tokens owned by each member.
    pub chunk: usize,
    /// Row-major `devices x devices`; entry `(i, j)` counts rows of `j`'s
    /// chunk needed by `i`, summed over heads. The diagonal is zero.
    pub rows: Vec<f64>,
}

impl AlphaMatrix {
    /// From explicit fractions (row-major, diagonal ignored).
    pub fn from_fractions(devices: usize, heads: usize, chunk: usize, alpha: &[f64]) -> Result<Self> {
        if alpha.len() != devices * devices {
            return Err(CpError::invalid("AlphaMatrix", format!("{} entries for {devices} devices", alpha.len())));
        }
        if let Some(a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(CpError::invalid("AlphaMatrix", format!("fraction {a} outside [0, 1]")));
        }
        let scale = (heads * chunk) as f64;
        let rows = (0..devices * devices).map(|e| if e / devices == e % devices { 0.0 } else { alpha[e] * scale }).collect();
        Ok(AlphaMatrix { devices, heads, chunk, rows })
    }

    /// Same fraction for every off-diagonal pair.
    pub fn uniform(devices: usize, heads: usize, chunk: usize, alpha: f64) -> Result<Self> {
        Self::from_fractions(devices, heads, chunk, &vec![alpha; devices * devices])
    }

    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        if i == j || self.heads == 0 {
            return 0.0;
        }
        self.rows[i * self.devices + j] / (self.heads * self.chunk) as f64
    }

    /// Rows `i` pulls from every other member.
    pub fn needed_by(&self, i: usize) -> f64 {
        (0..self.devices).filter(|&j| j != i).map(|j| self.rows[i * self.devices + j]).sum()
    }

    /// Rows every other member pulls from `i`.
    pub fn needed_from(&self, i: usize) -> f64 {
        (0..self.devices).filter(|&j| j != i).map(|j| self.rows[j * self.devices + i]).sum()
    }
}

/// Distinct keys each member's queries select from each other member's chunk,
/// for contiguous equal chunks over `devices` members, summed over `sets`
/// (one per head).
pub fn alpha_from_indices(sets: &[&CriticalIndexSet], devices: usize) -> Result<AlphaMatrix> {
    let Some(first) = sets.first() else {
        return Err(CpError::invalid("alpha_from_indices", "no heads"));
    };
    let s = first.keys;
    let chunk = chunk_len("alpha_from_indices", s, devices)?;
    let mut rows = vec![0.0; devices * devices];
    let mut seen = vec![usize::MAX; s];
    for (h, set) in sets.iter().enumerate() {
        if set.keys != s || set.queries() != s {
            return Err(CpError::invalid(
                "alpha_from_indices",
                format!("head {h}: {} queries over {} keys, expected {s} x {s}", set.queries(), set.keys),
            ));
        }
        set.validate()?;
        for i in 0..devices {
            let stamp = h * devices + i;
            for q in i * chunk..(i + 1) * chunk {
                for &key in set.set(q) {
                    let owner = key / chunk;
                    if owner != i && seen[key] != stamp {
                        seen[key] = stamp;
                        rows[i * devices + owner] += 1.0;
                    }
                }
            }
        }
    }
    Ok(AlphaMatrix { devices, heads: sets.len(), chunk, rows })
}

/// Per-device selective KV gather bytes:
/// `w * 2 H D S/N * max(sum_j alpha(i, j), sum_j alpha(j, i))`.
pub fn scp_comm(alpha: &AlphaMatrix, i: usize, head_dim: usize, width: u64) -> f64 {
    (2 * head_dim as u64 * width) as f64 * alpha.needed_by(i).max(alpha.needed_from(i))
}

/// Bytes of remote critical KV resident on device `i`:
/// `w * 2 H D sum_j alpha(i, j) S/N`.
pub fn scp_mem(alpha: &AlphaMatrix, i: usize, head_dim: usize, width: u64) -> f64 {
    (2 * head_dim as u64 * width) as f64 * alpha.needed_by(i)
}

/// Which group kind occupies consecutive ranks (and so shares nodes first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    HcpFirst,
    ScpFirst,
}

/// Degrees and rank mapping of a hybrid configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpLayout {
    pub g_h: usize,
    pub g_s: usize,
    pub placement: Placement,
}

impl CpLayout {
    pub fn devices(&self) -> usize {
        self.g_h * self.g_s
    }

    /// Rank of HCP member `r` of the group for span `a`.
    pub fn rank(&self, span: usize, hcp_rank: usize) -> usize {
        match self.placement {
            Placement::HcpFirst => span * self.g_h + hcp_rank,
            Placement::ScpFirst => hcp_rank * self.g_s + span,
        }
    }

    /// `(span, hcp_rank)` of a device.
    pub fn coords(&self, rank: usize) -> (usize, usize) {
        match self.placement {
            Placement::HcpFirst => (rank / self.g_h, rank % self.g_h),
            Placement::ScpFirst => (rank % self.g_s, rank / self.g_s),
        }
    }

    /// Sequence chunk a device owns before any exchange.
    pub fn chunk_of(&self, span: usize, hcp_rank: usize) -> usize {
        span * self.g_h + hcp_rank
    }

    fn hcp_group_ranks(&self, span: usize) -> Vec<usize> {
        (0..self.g_h).map(|r| self.rank(span, r)).collect()
    }

    fn scp_group_ranks(&self, hcp_rank: usize) -> Vec<usize> {
        (0..self.g_s).map(|a| self.rank(a, hcp_rank)).collect()
    }
}

/// Where the planner gets `alpha` for a set of heads split over `g_s` spans.
#[derive(Debug, Clone, Copy)]
pub enum AlphaSource<'a> {
    /// The same remote fraction for every pair.
    Uniform(f64),
    /// Per-head global index sets (`S x S`), counted exactly.
    Indices(&'a [CriticalIndexSet]),
}

impl AlphaSource<'_> {
    pub fn for_heads(&self, heads: &[usize], g_s: usize, seq_len: usize) -> Result<AlphaMatrix> {
        let chunk = chunk_len("AlphaSource", seq_len, g_s)?;
        match *self {
            AlphaSource::Uniform(a) => AlphaMatrix::uniform(g_s, heads.len(), chunk, a),
            AlphaSource::Indices(sets) => {
                if heads.is_empty() {
                    return Ok(AlphaMatrix { devices: g_s, heads: 0, chunk, rows: vec![0.0; g_s * g_s] });
                }
                let picked = heads
                    .iter()
                    .map(|&h| sets.get(h).ok_or_else(|| CpError::invalid("AlphaSource", format!("no index set for head {h}"))))
                    .collect::<Result<Vec<_>>>()?;
                alpha_from_indices(&picked, g_s)
            }
        }
    }
}

/// One hybrid configuration before placement: degrees, shared head plan and
/// per-SCP-group alpha.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub shape: AttnShape,
    pub g_h: usize,
    pub g_s: usize,
    pub plan: HcpPlan,
    /// Indexed by HCP rank `r` (= SCP group).
    pub alphas: Vec<AlphaMatrix>,
}

/// Predicted cost of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceCost {
    pub rank: usize,
    pub span: usize,
    pub hcp_rank: usize,
    pub heads: Vec<usize>,
    pub hcp_bytes: u64,
    pub scp_bytes: f64,
    pub mem_bytes: f64,
    pub t_comm: f64,
    pub t_comp: f64,
}

impl DeviceCost {
    pub fn time(&self) -> f64 {
        self.t_comm + self.t_comp
    }
}

/// Evaluated hybrid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CPConfig {
    pub layout: CpLayout,
    pub plan: HcpPlan,
    /// Largest per-device score-value burden.
    pub comp_hcp: f64,
    pub devices: Vec<DeviceCost>,
    /// `max_i (t_comm_i + t_comp_i)` in seconds.
    pub objective: f64,
    pub peak_mem_bytes: f64,
    pub feasible: bool,
}

/// Bytes moved between two devices, identified by `(span, hcp_rank)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub bytes: f64,
    pub hcp: bool,
}

impl Candidate {
    pub fn new(loads: &HeadLoadVector, alpha: AlphaSource<'_>, shape: AttnShape, g_h: usize, g_s: usize, plan: HcpPlan) -> Result<Self> {
        if plan.devices != g_h || plan.heads() != loads.heads() {
            return Err(CpError::invalid(
                "Candidate",
                format!("plan for {} heads on {} devices, need {} on {g_h}", plan.heads(), plan.devices, loads.heads()),
            ));
        }
        chunk_len("Candidate", shape.seq_len, g_h * g_s)?;
        let alphas = (0..g_h).map(|r| alpha.for_heads(&plan.heads_of(r), g_s, shape.seq_len)).collect::<Result<_>>()?;
        Ok(Candidate { shape, g_h, g_s, plan, alphas })
    }

    fn span_len(&self) -> usize {
        self.shape.seq_len / self.g_s
    }

    /// Every point-to-point payload of the configuration.
    pub fn transfers(&self, width: u64) -> Vec<Transfer> {
        let d = self.shape.head_dim as f64;
        let c = (self.shape.seq_len / (self.g_h * self.g_s)) as f64;
        let w = width as f64;
        let counts = self.plan.head_counts();
        let mut out = Vec::new();
        for a in 0..self.g_s {
            for r in 0..self.g_h {
                for r2 in (0..self.g_h).filter(|&r2| r2 != r) {
                    // QKV of r's chunk for r2's heads, then r's outputs for r2's chunk.
                    let bytes = (3 * counts[r2] + counts[r]) as f64 * c * d * w;
                    out.push(Transfer { from: (a, r), to: (a, r2), bytes, hcp: true });
                }
            }
        }
        for (r, alpha) in self.alphas.iter().enumerate() {
            for a in 0..self.g_s {
                for b in (0..self.g_s).filter(|&b| b != a) {
                    let bytes = alpha.rows[a * self.g_s + b] * 2.0 * d * w;
                    out.push(Transfer { from: (b, r), to: (a, r), bytes, hcp: false });
                }
            }
        }
        out
    }

    /// `(hcp, scp)` bytes crossing node boundaries under `placement`.
    pub fn inter_node_bytes(&self, placement: Placement, cluster: &ClusterSpec) -> (f64, f64) {
        let layout = CpLayout { g_h: self.g_h, g_s: self.g_s, placement };
        let mut cross = (0.0, 0.0);
        for t in self.transfers(cluster.elem_width) {
            let (src, dst) = (layout.rank(t.from.0, t.from.1), layout.rank(t.to.0, t.to.1));
            if cluster.node_of(src) != cluster.node_of(dst) {
                if t.hcp {
                    cross.0 += t.bytes;
                } else {
                    cross.1 += t.bytes;
                }
            }
        }
        cross
    }

    fn group_bw(cluster: &ClusterSpec, ranks: &[usize]) -> f64 {
        let node = cluster.node_of(ranks[0]);
        if ranks.iter().all(|&r| cluster.node_of(r) == node) {
            cluster.intra_node_bw
        } else {
            cluster.inter_node_bw
        }
    }

    /// Times, memory and objective under `placement`.
    pub fn evaluate(&self, placement: Placement, cluster: &ClusterSpec) -> Result<CPConfig> {
        let layout = CpLayout { g_h: self.g_h, g_s: self.g_s, placement };
        if layout.devices() != cluster.devices {
            return Err(CpError::invalid("evaluate", format!("{} x {} layout on {} devices", self.g_h, self.g_s, cluster.devices)));
        }
        let (shape, w) = (self.shape, cluster.elem_width);
        let heads = self.plan.heads();
        let span = self.span_len();
        let comp_hcp = self.plan.max_burden as f64 / self.g_s as f64;
        let t_comp = comp_hcp / cluster.compute_rate;
        let mut devices = Vec::with_capacity(layout.devices());
        for rank in 0..layout.devices() {
            let (a, r) = layout.coords(rank);
            let held = self.plan.heads_of(r);
            let hcp_bytes = hcp_comm(heads, held.len(), span, shape.head_dim, self.g_h, w)?;
            let scp_bytes = scp_comm(&self.alphas[r], a, shape.head_dim, w);
            let mem_bytes = hcp_mem(held.len(), span, shape.head_dim, w) as f64 + scp_mem(&self.alphas[r], a, shape.head_dim, w);
            let hcp_bw = Self::group_bw(cluster, &layout.hcp_group_ranks(a));
            let scp_bw = Self::group_bw(cluster, &layout.scp_group_ranks(r));
            let t_comm = hcp_bytes as f64 / hcp_bw + scp_bytes / scp_bw;
            devices.push(DeviceCost { rank, span: a, hcp_rank: r, heads: held, hcp_bytes, scp_bytes, mem_bytes, t_comm, t_comp });
        }
        let objective = devices.iter().map(DeviceCost::time).fold(0.0, f64::max);
        let peak_mem_bytes = devices.iter().map(|d| d.mem_bytes).fold(0.0, f64::max);
        Ok(CPConfig {
            layout,
            plan: self.plan.clone(),
            comp_hcp,
            devices,
            objective,
            peak_mem_bytes,
            feasible: peak_mem_bytes <= cluster.mem_cap_bytes as f64,
        })
    }
}

/// Placement with the smaller cross-node volume, comparing the larger of the
/// HCP and SCP parts under each mapping; ties go to HCP-first.
pub fn choose_placement(candidate: &Candidate, cluster: &ClusterSpec) -> Placement {
    let worst = |p| {
        let (h, s) = candidate.inter_node_bytes(p, cluster);
        h.max(s)
    };
    if worst(Placement::ScpFirst) < worst(Placement::HcpFirst) {
        Placement::ScpFirst
    } else {
        Placement::HcpFirst
    }
}

/// Every evaluated configuration plus the chosen one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridSolution {
    pub best: CPConfig,
    /// Ascending `g_h`.
    pub candidates: Vec<CPConfig>,
}

/// Enumerates `g_h * g_s = N` with `g_h <= H`, balances heads per degree,
/// picks the placement, and returns the feasible configuration with the
/// smallest objective (smaller `g_h` on ties).
pub fn solve_hybrid(loads: &HeadLoadVector, alpha: AlphaSource<'_>, shape: AttnShape, cluster: &ClusterSpec) -> Result<HybridSolution> {
    cluster.validate()?;
    let n = cluster.devices;
    chunk_len("solve_hybrid", shape.seq_len, n)?;
    if loads.heads() == 0 {
        return Err(CpError::Infeasible { binding: Constraint::HeadCount, detail: "no attention heads".into() });
    }
    let mut candidates = Vec::new();
    for g_h in (1..=n.min(loads.heads())).filter(|g| n % g == 0) {
        let plan = balance_heads(loads, g_h)?;
        let cand = Candidate::new(loads, alpha, shape, g_h, n / g_h, plan)?;
        candidates.push(cand.evaluate(choose_placement(&cand, cluster), cluster)?);
    }
    let best = candidates
        .iter()
        .filter(|c| c.feasible)
        .fold(None::<&CPConfig>, |best, c| match best {
            Some(b) if b.objective <= c.objective => Some(b),
            _ => Some(c),
        })
        .cloned();
    match best {
        Some(best) => Ok(HybridSolution { best, candidates }),
        None => {
            let least = candidates.iter().map(|c| c.peak_mem_bytes).fold(f64::INFINITY, f64::min);
            Err(CpError::Infeasible {
                binding: Constraint::Memory,
                detail: format!("smallest peak device memory {least} B exceeds cap {} B", cluster.mem_cap_bytes),
            })
        }
    }
}
