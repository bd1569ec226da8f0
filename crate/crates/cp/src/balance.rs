//! Min-max assignment of per-head attention work to the devices of a
//! head-parallel group.
//!
//! Loads are integer multiply-add counts, so every comparison is exact.
//! Among all assignments with the smallest maximum device load the exact
//! search returns the lexicographically smallest head -> device vector; the
//! planner's communication terms depend on which heads share a device, so a
//! canonical choice keeps plans reproducible.

use serde::{Deserialize, Serialize};
use vidsparse_core::CriticalIndexSet;

use crate::error::{CpError, Result};

/// Head counts up to this size are solved exactly.
pub const EXACT_HEAD_LIMIT: usize = 16;

/// Per-head attention burden in score-value multiply-adds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLoadVector {
    pub loads: Vec<u64>,
}

impl HeadLoadVector {
    pub fn new(loads: Vec<u64>) -> Self {
        HeadLoadVector { loads }
    }

    /// `round((1 - s) * S^2 * D)` per head.
    pub fn from_sparsity(sparsity: &[f64], seq_len: usize, head_dim: usize) -> Result<Self> {
        if let Some(s) = sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(CpError::invalid("HeadLoadVector", format!("sparsity {s} outside [0, 1]")));
        }
        let pairs = (seq_len * seq_len) as f64;
        Ok(HeadLoadVector {
            loads: sparsity.iter().map(|s| ((1.0 - s) * pairs).round() as u64 * head_dim as u64).collect(),
        })
    }

    /// Selected pairs times head dim; exact for measured index sets.
    pub fn from_index_sets(sets: &[CriticalIndexSet], head_dim: usize) -> Self {
        HeadLoadVector { loads: sets.iter().map(|s| s.total_selected() as u64 * head_dim as u64).collect() }
    }

    pub fn heads(&self) -> usize {
        self.loads.len()
    }

    pub fn total(&self) -> u64 {
        self.loads.iter().sum()
    }
}

/// Head -> device assignment inside one head-parallel group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HcpPlan {
    pub devices: usize,
    pub assignment: Vec<usize>,
    pub burdens: Vec<u64>,
    pub max_burden: u64,
    /// `true` when `max_burden` is proven minimal.
    pub optimal: bool,
}

impl HcpPlan {
    /// Builds a plan from an explicit assignment.
    pub fn from_assignment(loads: &HeadLoadVector, devices: usize, assignment: Vec<usize>, optimal: bool) -> Result<Self> {
        if assignment.len() != loads.heads() {
            return Err(CpError::invalid("HcpPlan", format!("{} assignments for {} heads", assignment.len(), loads.heads())));
        }
        if let Some(d) = assignment.iter().find(|&&d| d >= devices) {
            return Err(CpError::invalid("HcpPlan", format!("device {d} outside group of {devices}")));
        }
        let burdens = device_sums(&loads.loads, &assignment, devices);
        let max_burden = burdens.iter().copied().max().unwrap_or(0);
        Ok(HcpPlan { devices, assignment, burdens, max_burden, optimal })
    }

    /// Round-robin `head % devices`, the layout of plain head parallelism.
    pub fn round_robin(loads: &HeadLoadVector, devices: usize) -> Result<Self> {
        Self::from_assignment(loads, devices, (0..loads.heads()).map(|h| h % devices.max(1)).collect(), false)
    }

    pub fn heads(&self) -> usize {
        self.assignment.len()
    }

    /// Heads on `device`, ascending.
    pub fn heads_of(&self, device: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&h| self.assignment[h] == device).collect()
    }

    pub fn head_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.devices];
        self.assignment.iter().for_each(|&d| counts[d] += 1);
        counts
    }
}

fn device_sums(loads: &[u64], assignment: &[usize], devices: usize) -> Vec<u64> {
    let mut sums = vec![0u64; devices];
    for (&l, &d) in loads.iter().zip(assignment) {
        sums[d] += l;
    }
    sums
}

/// Longest-processing-time greedy: heaviest head first onto the least loaded
/// device (lowest index on ties).
pub fn lpt(loads: &HeadLoadVector, devices: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..loads.heads()).collect();
    order.sort_by(|&a, &b| loads.loads[b].cmp(&loads.loads[a]).then(a.cmp(&b)));
    let mut sums = vec![0u64; devices];
    let mut assignment = vec![0; loads.heads()];
    for h in order {
        let d = (0..devices).min_by_key(|&d| (sums[d], d)).expect("devices >= 1");
        sums[d] += loads.loads[h];
        assignment[h] = d;
    }
    assignment
}

enum Move {
    Shift { head: usize, to: usize },
    Swap { head: usize, with: usize, to: usize },
}

/// Moves and pairwise swaps off the most loaded device while they lower the
/// larger of the two affected sums.
pub fn refine_swaps(loads: &HeadLoadVector, devices: usize, assignment: &mut [usize]) {
    let l = &loads.loads;
    loop {
        let sums = device_sums(l, assignment, devices);
        let top = (0..devices).max_by_key(|&d| (sums[d], std::cmp::Reverse(d))).expect("devices >= 1");
        let mut best: Option<(u64, Move)> = None;
        for x in (0..assignment.len()).filter(|&h| assignment[h] == top) {
            for to in (0..devices).filter(|&d| d != top) {
                let partners = std::iter::once(None).chain((0..assignment.len()).filter(|&h| assignment[h] == to).map(Some));
                for y in partners {
                    let ly = y.map_or(0, |y| l[y]);
                    if ly >= l[x] {
                        continue;
                    }
                    let pair_max = (sums[top] - l[x] + ly).max(sums[to] + l[x] - ly);
                    if pair_max < sums[top] && best.as_ref().is_none_or(|(m, _)| pair_max < *m) {
                        let mv = match y {
                            Some(with) => Move::Swap { head: x, with, to },
                            None => Move::Shift { head: x, to },
                        };
                        best = Some((pair_max, mv));
                    }
                }
            }
        }
        match best {
            None => return,
            Some((_, Move::Shift { head, to })) => assignment[head] = to,
            Some((_, Move::Swap { head, with, to })) => {
                assignment[with] = top;
                assignment[head] = to;
            }
        }
    }
}

struct Search<'a> {
    loads: &'a [u64],
    devices: usize,
    suffix: Vec<u64>,
    suffix_max: Vec<u64>,
    sums: Vec<u64>,
    current: Vec<usize>,
    /// Largest admissible device sum for the next accepted leaf.
    limit: u64,
    found: Option<Vec<usize>>,
    /// Set once a zero-load leaf is found; nothing can beat it.
    done: bool,
}

impl Search<'_> {
    fn dfs(&mut self, h: usize, used: usize) {
        if self.done {
            return;
        }
        // The limit may have tightened since these sums were built.
        if self.sums.iter().any(|&s| s > self.limit) {
            return;
        }
        if h == self.loads.len() {
            let value = self.sums.iter().copied().max().unwrap_or(0);
            self.found = Some(self.current.clone());
            // Later leaves must be strictly better.
            match value.checked_sub(1) {
                Some(limit) => self.limit = limit,
                None => self.done = true,
            }
            return;
        }
        let residual: u64 = self.sums.iter().map(|&s| self.limit.saturating_sub(s)).sum();
        let lightest = self.sums.iter().copied().min().unwrap_or(0);
        if residual < self.suffix[h] || self.suffix_max[h] > self.limit.saturating_sub(lightest) {
            return;
        }
        let load = self.loads[h];
        for d in 0..(used + 1).min(self.devices) {
            if self.sums[d] + load > self.limit {
                continue;
            }
            self.sums[d] += load;
            self.current[h] = d;
            self.dfs(h + 1, used.max(d + 1));
            self.sums[d] -= load;
        }
    }
}

/// Lexicographically smallest assignment among those minimizing the maximum
/// device sum, by depth-first search in head order with an LPT incumbent.
fn exact(loads: &HeadLoadVector, devices: usize, upper: u64) -> Vec<usize> {
    let l = &loads.loads;
    let n = l.len();
    let mut suffix = vec![0u64; n + 1];
    let mut suffix_max = vec![0u64; n + 1];
    for h in (0..n).rev() {
        suffix[h] = suffix[h + 1] + l[h];
        suffix_max[h] = suffix_max[h + 1].max(l[h]);
    }
    let mut search = Search {
        loads: l,
        devices,
        suffix,
        suffix_max,
        sums: vec![0; devices],
        current: vec![0; n],
        limit: upper,
        found: None,
        done: false,
    };
    search.dfs(0, 0);
    search.found.expect("the incumbent bound admits at least one assignment")
}

/// Min-max head balancing: exact for up to [`EXACT_HEAD_LIMIT`] heads, LPT
/// plus swap refinement beyond.
pub fn balance_heads(loads: &HeadLoadVector, devices: usize) -> Result<HcpPlan> {
    if loads.heads() == 0 || devices == 0 {
        return Err(CpError::invalid("balance_heads", format!("{} heads over {devices} devices", loads.heads())));
    }
    let mut assignment = lpt(loads, devices);
    refine_swaps(loads, devices, &mut assignment);
    if loads.heads() > EXACT_HEAD_LIMIT {
        return HcpPlan::from_assignment(loads, devices, assignment, false);
    }
    let upper = HcpPlan::from_assignment(loads, devices, assignment, false)?.max_burden;
    HcpPlan::from_assignment(loads, devices, exact(loads, devices, upper), true)
}
