//! Voxel query grouping.
//!
//! Queries are tiled into axis-aligned `gt x gh x gw` voxels starting at the
//! grid origin; voxels on the far boundary may be truncated. One proxy query
//! per voxel selects critical keys and every member attends to that set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_selected, critical_prefix, softmax_in_place};
use crate::error::{CoreError, Result};
use crate::grid::TokenGrid;
use crate::tensor::{HeadTensor, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct GroupDims {
    pub gt: usize,
    pub gh: usize,
    pub gw: usize,
}

impl GroupDims {
    pub const fn new(gt: usize, gh: usize, gw: usize) -> Self {
        GroupDims { gt, gh, gw }
    }

    pub fn volume(&self) -> usize {
        self.gt * self.gh * self.gw
    }

    fn fits(&self, grid: &TokenGrid) -> bool {
        self.gt <= grid.frames && self.gh <= grid.height && self.gw <= grid.width
    }
}

/// Candidate sizes for calibration, in increasing member count.
pub const LADDER: [GroupDims; 6] = [
    GroupDims::new(1, 1, 1),
    GroupDims::new(2, 2, 1),
    GroupDims::new(2, 2, 2),
    GroupDims::new(4, 2, 2),
    GroupDims::new(4, 4, 2),
    GroupDims::new(4, 4, 4),
];

/// Groups sampled per ladder entry during calibration.
pub const CALIBRATION_GROUPS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGroupPlan {
    pub grid: TokenGrid,
    pub dims: GroupDims,
    /// Sorted flat member indices per group, groups ordered frame-major by voxel.
    pub groups: Vec<Vec<usize>>,
    pub proxies: Vec<usize>,
}

/// Serialized form; members are rebuilt from `grid` and `dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSpec {
    pub grid: TokenGrid,
    pub dims: GroupDims,
    pub proxies: Vec<usize>,
}

/// Member of `[lo, hi)^3` nearest the voxel center, lowest flat index on ties.
fn voxel_proxy(grid: &TokenGrid, lo: [usize; 3], hi: [usize; 3]) -> usize {
    // Doubled coordinates keep the center integral.
    let center2 = [0, 1, 2].map(|a| (lo[a] + hi[a] - 1) as i64);
    let mut best = (i64::MAX, usize::MAX);
    for t in lo[0]..hi[0] {
        for h in lo[1]..hi[1] {
            for w in lo[2]..hi[2] {
                let d2: i64 = [t, h, w].iter().zip(center2).map(|(&x, c)| (2 * x as i64 - c).pow(2)).sum();
                best = best.min((d2, grid.index(t, h, w)));
            }
        }
    }
    best.1
}

/// Tiles `grid` into voxels of `dims`.
pub fn build_groups(grid: &TokenGrid, dims: GroupDims) -> Result<VoxelGroupPlan> {
    grid.validate()?;
    if dims.gt == 0 || dims.gh == 0 || dims.gw == 0 {
        return Err(CoreError::invalid("build_groups", format!("zero group extent in {dims:?}")));
    }
    if !dims.fits(grid) {
        return Err(CoreError::invalid("build_groups", format!("{dims:?} larger than grid {grid:?}")));
    }
    let steps = [(grid.frames, dims.gt), (grid.height, dims.gh), (grid.width, dims.gw)];
    let mut groups = Vec::new();
    let mut proxies = Vec::new();
    for t0 in (0..grid.frames).step_by(dims.gt) {
        for h0 in (0..grid.height).step_by(dims.gh) {
            for w0 in (0..grid.width).step_by(dims.gw) {
                let lo = [t0, h0, w0];
                let hi = [0, 1, 2].map(|a| (lo[a] + steps[a].1).min(steps[a].0));
                let mut members = Vec::with_capacity(dims.volume());
                for t in lo[0]..hi[0] {
                    for h in lo[1]..hi[1] {
                        for w in lo[2]..hi[2] {
                            members.push(grid.index(t, h, w));
                        }
                    }
                }
                members.sort_unstable();
                proxies.push(voxel_proxy(grid, lo, hi));
                groups.push(members);
            }
        }
    }
    Ok(VoxelGroupPlan { grid: *grid, dims, groups, proxies })
}

impl VoxelGroupPlan {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group id of every flat token index.
    pub fn membership(&self) -> Vec<usize> {
        let mut of = vec![0; self.grid.len()];
        for (g, members) in self.groups.iter().enumerate() {
            for &m in members {
                of[m] = g;
            }
        }
        of
    }

    pub fn spec(&self) -> PlanSpec {
        PlanSpec { grid: self.grid, dims: self.dims, proxies: self.proxies.clone() }
    }

    pub fn from_spec(spec: &PlanSpec) -> Result<Self> {
        let plan = build_groups(&spec.grid, spec.dims)?;
        if plan.proxies != spec.proxies {
            return Err(CoreError::Format("plan proxies do not match the deterministic tiling".into()));
        }
        Ok(plan)
    }

    /// Each group's set taken from its proxy's entry in a per-query family.
    pub fn proxy_sets(&self, per_query: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        if per_query.len() != self.grid.len() {
            return Err(CoreError::shape("proxy_sets", format!("{} sets for {} tokens", per_query.len(), self.grid.len())));
        }
        Ok(self.proxies.iter().map(|&p| per_query[p].clone()).collect())
    }

    /// Per-query family in which every member carries its group's proxy set.
    pub fn shared_query_sets(&self, per_query: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        let shared = self.proxy_sets(per_query)?;
        Ok(self.membership().into_iter().map(|g| shared[g].clone()).collect())
    }
}

/// Mean over non-proxy members of `|I_m ∩ I_proxy| / |I_m|`; 1 when the
/// group has no other member. All sets must be sorted.
pub fn overlap_ratio(proxy_set: &[usize], member_sets: &[&[usize]]) -> f64 {
    if member_sets.is_empty() {
        return 1.0;
    }
    let total: f64 = member_sets
        .iter()
        .map(|m| {
            if m.is_empty() {
                return 1.0;
            }
            let shared = m.iter().filter(|i| proxy_set.binary_search(i).is_ok()).count();
            shared as f64 / m.len() as f64
        })
        .sum();
    total / member_sets.len() as f64
}

/// How member critical sets are formed during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SetRule {
    /// Cumulative attention mass threshold.
    Theta(f64),
    /// Fixed number of top-scoring keys.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub chosen: GroupDims,
    /// `(dims, mean overlap)` for every ladder entry that fits the grid.
    pub candidates: Vec<(GroupDims, f64)>,
}

fn row_set(q_row: &[f64], k: &Matrix, rule: SetRule, buf: &mut Vec<f64>) -> Vec<usize> {
    let scale = 1.0 / (q_row.len() as f64).sqrt();
    buf.clear();
    buf.extend((0..k.rows()).map(|j| crate::tensor::dot(q_row, k.row(j)) * scale));
    match rule {
        SetRule::Theta(theta) => {
            softmax_in_place(buf);
            critical_prefix(buf, theta)
        }
        SetRule::TopK(n) => {
            let mut top = crate::attention::descending_order(buf);
            top.truncate(n.min(k.rows()));
            top.sort_unstable();
            top
        }
    }
}

/// Mean overlap of `plan` on up to [`CALIBRATION_GROUPS`] sampled groups,
/// averaged over heads.
pub fn plan_overlap(plan: &VoxelGroupPlan, qs: &[HeadTensor], ks: &[HeadTensor], rule: SetRule, seed: u64) -> Result<f64> {
    let sample = CALIBRATION_GROUPS.min(plan.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, plan.len(), sample).into_vec();
    picked.sort_unstable();
    let mut buf = Vec::new();
    let mut total = 0.0;
    for (q, k) in qs.iter().zip(ks) {
        for &g in &picked {
            let proxy = plan.proxies[g];
            let proxy_set = row_set(q.row(proxy), k, rule, &mut buf);
            let others: Vec<Vec<usize>> =
                plan.groups[g].iter().filter(|&&m| m != proxy).map(|&m| row_set(q.row(m), k, rule, &mut buf)).collect();
            let refs: Vec<&[usize]> = others.iter().map(Vec::as_slice).collect();
            total += overlap_ratio(&proxy_set, &refs);
        }
    }
    Ok(total / (sample * qs.len()) as f64)
}

/// Largest ladder entry whose mean sampled overlap reaches `target_ratio`;
/// `1 x 1 x 1` always qualifies.
pub fn calibrate_group_size(
    grid: &TokenGrid,
    qs: &[HeadTensor],
    ks: &[HeadTensor],
    rule: SetRule,
    target_ratio: f64,
    seed: u64,
) -> Result<CalibrationReport> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(CoreError::invalid("calibrate_group_size", format!("target ratio {target_ratio} outside (0, 1]")));
    }
    if qs.is_empty() || qs.len() != ks.len() {
        return Err(CoreError::shape("calibrate_group_size", format!("{} query heads, {} key heads", qs.len(), ks.len())));
    }
    for (q, k) in qs.iter().zip(ks) {
        if q.rows() != grid.len() || k.cols() != q.cols() {
            return Err(CoreError::shape("calibrate_group_size", format!("Q {:?}, K {:?} on {} tokens", q.shape(), k.shape(), grid.len())));
        }
    }
    let mut chosen = LADDER[0];
    let mut candidates = Vec::new();
    for dims in LADDER.iter().copied().filter(|d| d.fits(grid)) {
        let plan = build_groups(grid, dims)?;
        let ratio = plan_overlap(&plan, qs, ks, rule, seed)?;
        candidates.push((dims, ratio));
        if ratio >= target_ratio && dims.volume() > chosen.volume() {
            chosen = dims;
        }
    }
    Ok(CalibrationReport { chosen, candidates })
}

/// Every member of group `g` attends over `group_sets[g]`.
pub fn grouped_sparse_attention(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    plan: &VoxelGroupPlan,
    group_sets: &[Vec<usize>],
) -> Result<HeadTensor> {
    if q.rows() != plan.grid.len() || q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(CoreError::shape(
            "grouped_sparse_attention",
            format!("Q {:?}, K {:?}, V {:?} on {} tokens", q.shape(), k.shape(), v.shape(), plan.grid.len()),
        ));
    }
    if group_sets.len() != plan.len() {
        return Err(CoreError::shape("grouped_sparse_attention", format!("{} sets for {} groups", group_sets.len(), plan.len())));
    }
    for (g, set) in group_sets.iter().enumerate() {
        if set.is_empty() {
            return Err(CoreError::invalid("grouped_sparse_attention", format!("group {g} has an empty index set")));
        }
        if set.windows(2).any(|w| w[0] >= w[1]) || set.last().is_some_and(|&i| i >= k.rows()) {
            return Err(CoreError::invalid("grouped_sparse_attention", format!("group {g}: indices unsorted or out of range")));
        }
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut logits = Vec::new();
    for (members, set) in plan.groups.iter().zip(group_sets) {
        for &i in members {
            attend_selected(q.row(i), k, v, set, scale, &mut logits, out.row_mut(i));
        }
    }
    Ok(out)
}
