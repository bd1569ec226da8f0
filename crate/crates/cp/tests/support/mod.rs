//! Independent oracles for head balancing and hybrid planning. Nothing here
//! calls the planner; the only shared items are plain data types.

#![allow(dead_code)]

use std::collections::HashSet;

use vidsparse_core::CriticalIndexSet;
use vidsparse_cp::{ClusterSpec, Placement};

/// Minimum of the maximum device sum over all `n^H` assignments, with the
/// first optimal assignment in lexicographic order (head 0 most significant).
pub fn brute_force_balance(loads: &[u64], n: usize) -> (u64, Vec<usize>) {
    fn walk(loads: &[u64], h: usize, sums: &mut [u64], cur: &mut Vec<usize>, best: &mut Option<(u64, Vec<usize>)>) {
        if h == loads.len() {
            let m = sums.iter().copied().max().unwrap_or(0);
            if best.as_ref().is_none_or(|(b, _)| m < *b) {
                *best = Some((m, cur.clone()));
            }
            return;
        }
        for d in 0..sums.len() {
            sums[d] += loads[h];
            cur.push(d);
            walk(loads, h + 1, sums, cur, best);
            cur.pop();
            sums[d] -= loads[h];
        }
    }
    let mut best = None;
    walk(loads, 0, &mut vec![0; n], &mut Vec::new(), &mut best);
    best.expect("n >= 1")
}

/// First assignment in lexicographic order whose device sums all stay within
/// `cap`. Failed states are memoised on the multiset of sums.
pub fn lex_first_within(loads: &[u64], n: usize, cap: u64) -> Option<Vec<usize>> {
    fn walk(loads: &[u64], cap: u64, h: usize, sums: &mut [u64], cur: &mut Vec<usize>, dead: &mut HashSet<(usize, Vec<u64>)>) -> bool {
        if h == loads.len() {
            return true;
        }
        let mut key = sums.to_vec();
        key.sort_unstable();
        if dead.contains(&(h, key.clone())) {
            return false;
        }
        for d in 0..sums.len() {
            if sums[d] + loads[h] > cap {
                continue;
            }
            sums[d] += loads[h];
            cur.push(d);
            if walk(loads, cap, h + 1, sums, cur, dead) {
                return true;
            }
            cur.pop();
            sums[d] -= loads[h];
        }
        dead.insert((h, key));
        false
    }
    let mut cur = Vec::new();
    walk(loads, cap, 0, &mut vec![0; n], &mut cur, &mut HashSet::new()).then_some(cur)
}

/// Exhaustive min-max balance by raising the cap from the trivial lower bound.
pub fn min_max_assignment(loads: &[u64], n: usize) -> (u64, Vec<usize>) {
    let total: u64 = loads.iter().sum();
    let mut cap = loads.iter().copied().max().unwrap_or(0).max(total.div_ceil(n as u64));
    loop {
        if let Some(a) = lex_first_within(loads, n, cap) {
            return (cap, a);
        }
        cap += 1;
    }
}

#[derive(Clone, Copy)]
pub enum Alpha<'a> {
    Uniform(f64),
    Sets(&'a [CriticalIndexSet]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub g_h: usize,
    pub g_s: usize,
    pub placement: Placement,
    pub assignment: Vec<usize>,
    pub max_burden: u64,
    pub objective: f64,
    pub feasible: bool,
}

/// `rows[a][b]`: keys in span `b` selected by some query of span `a`, summed
/// over `heads`.
fn remote_rows(alpha: Alpha<'_>, heads: &[usize], s: usize, g_s: usize) -> Vec<Vec<f64>> {
    let span = s / g_s;
    let mut rows = vec![vec![0.0; g_s]; g_s];
    for a in 0..g_s {
        for b in (0..g_s).filter(|&b| b != a) {
            rows[a][b] = match alpha {
                Alpha::Uniform(x) => x * (heads.len() * span) as f64,
                Alpha::Sets(sets) => heads
                    .iter()
                    .map(|&h| (b * span..(b + 1) * span).filter(|key| (a * span..(a + 1) * span).any(|q| sets[h].set(q).contains(key))).count())
                    .sum::<usize>() as f64,
            };
        }
    }
    rows
}

fn rank_of(placement: Placement, g_h: usize, g_s: usize, a: usize, r: usize) -> usize {
    match placement {
        Placement::HcpFirst => a * g_h + r,
        Placement::ScpFirst => r * g_s + a,
    }
}

/// Every divisor pair `g_h * g_s = N` with `g_h <= H`, ascending `g_h`, each
/// with its brute-force balance, placement rule and device times.
pub fn exhaustive_plan(loads: &[u64], alpha: Alpha<'_>, s: usize, d: usize, cluster: &ClusterSpec) -> Vec<Evaluated> {
    let n = cluster.devices;
    let heads = loads.len();
    let w = cluster.elem_width;
    let node = |rank: usize| rank / cluster.devices_per_node;
    let mut out = Vec::new();
    for g_h in (1..=n.min(heads)).filter(|g| n % g == 0) {
        let g_s = n / g_h;
        let (max_burden, assignment) = min_max_assignment(loads, g_h);
        let held: Vec<Vec<usize>> = (0..g_h).map(|r| (0..heads).filter(|&h| assignment[h] == r).collect()).collect();
        let rows: Vec<Vec<Vec<f64>>> = held.iter().map(|hs| remote_rows(alpha, hs, s, g_s)).collect();
        let span = s / g_s;
        let c = span / g_h;

        // Cross-node (hcp, scp) volume of each mapping.
        let cross = |p: Placement| {
            let (mut hcp, mut scp) = (0.0f64, 0.0f64);
            for a in 0..g_s {
                for r in 0..g_h {
                    for r2 in (0..g_h).filter(|&r2| r2 != r) {
                        if node(rank_of(p, g_h, g_s, a, r)) != node(rank_of(p, g_h, g_s, a, r2)) {
                            hcp += ((3 * held[r2].len() + held[r].len()) * c * d) as f64 * w as f64;
                        }
                    }
                }
            }
            for r in 0..g_h {
                for a in 0..g_s {
                    for b in (0..g_s).filter(|&b| b != a) {
                        if node(rank_of(p, g_h, g_s, a, r)) != node(rank_of(p, g_h, g_s, b, r)) {
                            scp += rows[r][a][b] * (2 * d as u64 * w) as f64;
                        }
                    }
                }
            }
            hcp.max(scp)
        };
        let placement = if cross(Placement::ScpFirst) < cross(Placement::HcpFirst) { Placement::ScpFirst } else { Placement::HcpFirst };

        let bw = |ranks: Vec<usize>| {
            if ranks.iter().all(|&x| node(x) == node(ranks[0])) {
                cluster.intra_node_bw
            } else {
                cluster.inter_node_bw
            }
        };
        let t_comp = (max_burden as f64 / g_s as f64) / cluster.compute_rate;
        let (mut objective, mut peak) = (0.0f64, 0.0f64);
        for a in 0..g_s {
            for r in 0..g_h {
                let k = held[r].len() as u64;
                let recv = k * (g_h as u64 - 1) * c as u64;
                let sent = (heads as u64 - k) * c as u64;
                let hcp_bytes = w * d as u64 * (3 * recv.max(sent) + sent.max(recv));
                let pulled: f64 = (0..g_s).filter(|&b| b != a).map(|b| rows[r][a][b]).sum();
                let pushed: f64 = (0..g_s).filter(|&b| b != a).map(|b| rows[r][b][a]).sum();
                let scp_bytes = (2 * d as u64 * w) as f64 * pulled.max(pushed);
                let mem = (4 * span as u64 * d as u64 * k * w) as f64 + (2 * d as u64 * w) as f64 * pulled;
                let hcp_bw = bw((0..g_h).map(|r2| rank_of(placement, g_h, g_s, a, r2)).collect());
                let scp_bw = bw((0..g_s).map(|b| rank_of(placement, g_h, g_s, b, r)).collect());
                let t = hcp_bytes as f64 / hcp_bw + scp_bytes / scp_bw + t_comp;
                objective = objective.max(t);
                peak = peak.max(mem);
            }
        }
        out.push(Evaluated { g_h, g_s, placement, assignment, max_burden, objective, feasible: peak <= cluster.mem_cap_bytes as f64 });
    }
    out
}

/// Smallest feasible objective, smaller `g_h` on ties.
pub fn best(all: &[Evaluated]) -> Option<&Evaluated> {
    all.iter().filter(|e| e.feasible).fold(None, |b: Option<&Evaluated>, e| match b {
        Some(b) if b.objective <= e.objective => Some(b),
        _ => Some(e),
    })
}
