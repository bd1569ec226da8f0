//! Message-level simulation of hybrid sparse context parallelism (forward
//! only) over an in-memory bus.
//!
//! Phases run in order, each as a barrier: head rebalancing inside HCP
//! groups, selective KV gathering inside SCP groups (index requests, then KV
//! payloads), local sparse attention, and output redistribution inside HCP
//! groups. Every payload is logged with its byte size; sends are issued in
//! ascending (sender, receiver) order, so logs are deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vidsparse_core::attention::sparse_attention;
use vidsparse_core::{CriticalIndexSet, Matrix};

use crate::balance::HcpPlan;
use crate::error::{CpError, Result};
use crate::model::CpLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    HcpFwd,
    ScpIndexExchange,
    ScpKv,
    OutputRedistribute,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::HcpFwd, Phase::ScpIndexExchange, Phase::ScpKv, Phase::OutputRedistribute];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub phase: Phase,
    pub sender: usize,
    pub receiver: usize,
    pub bytes: u64,
}

/// Append-only record of every payload.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageLog {
    messages: Vec<Message>,
}

impl MessageLog {
    fn push(&mut self, phase: Phase, sender: usize, receiver: usize, bytes: u64) {
        self.messages.push(Message { phase, sender, receiver, bytes });
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn sent(&self, rank: usize, phase: Phase) -> u64 {
        self.messages.iter().filter(|m| m.phase == phase && m.sender == rank).map(|m| m.bytes).sum()
    }

    pub fn received(&self, rank: usize, phase: Phase) -> u64 {
        self.messages.iter().filter(|m| m.phase == phase && m.receiver == rank).map(|m| m.bytes).sum()
    }

    pub fn total(&self, phase: Phase) -> u64 {
        self.messages.iter().filter(|m| m.phase == phase).map(|m| m.bytes).sum()
    }
}

/// Byte widths used for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct Widths {
    pub element: u64,
    pub index: u64,
    /// One per-head count in the size preamble of an uneven all-to-all.
    pub count: u64,
}

impl Default for Widths {
    fn default() -> Self {
        Widths { element: 2, index: 4, count: 8 }
    }
}

/// Per-head token rows held by a device, starting at token `first`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rows {
    pub first: usize,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDevice {
    pub rank: usize,
    pub span: usize,
    pub hcp_rank: usize,
    /// Original contiguous chunk.
    pub chunk: usize,
    /// Heads currently held, with their rows.
    pub held: BTreeMap<usize, Rows>,
    /// Gathered remote `(key row, value row)` per head and global key.
    pub remote_kv: BTreeMap<usize, BTreeMap<usize, (Vec<f64>, Vec<f64>)>>,
    /// Output rows per held head (span rows after attention).
    pub output: BTreeMap<usize, Matrix>,
}

impl SimDevice {
    pub fn hcp_group(&self) -> usize {
        self.span
    }

    pub fn scp_group(&self) -> usize {
        self.hcp_rank
    }

    /// Resident `Q`, `K`, `V` and output element bytes.
    pub fn qkvo_bytes(&self, width: u64) -> u64 {
        let qkv: usize = self.held.values().map(|r| r.q.data().len() + r.k.data().len() + r.v.data().len()).sum();
        let o: usize = self.output.values().map(|m| m.data().len()).sum();
        (qkv + o) as u64 * width
    }

    /// Resident gathered remote KV bytes.
    pub fn remote_kv_bytes(&self, width: u64) -> u64 {
        let elems: usize = self.remote_kv.values().flat_map(|m| m.values()).map(|(k, v)| k.len() + v.len()).sum();
        elems as u64 * width
    }
}

fn slice_rows(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    Matrix::new(hi - lo, m.cols(), m.data()[lo * m.cols()..hi * m.cols()].to_vec()).expect("row slice of a valid matrix")
}

fn stack(parts: &[&Matrix]) -> Result<Matrix> {
    Ok(Matrix::vstack(parts)?)
}

/// Splits full per-head `Q`, `K`, `V` (`S x D` each) into the initial device
/// states of `layout`: every device holds its chunk for all heads.
pub fn shard(q: &[Matrix], k: &[Matrix], v: &[Matrix], layout: &CpLayout) -> Result<Vec<SimDevice>> {
    let heads = q.len();
    if heads == 0 || k.len() != heads || v.len() != heads {
        return Err(CpError::invalid("shard", format!("{} / {} / {} head tensors", q.len(), k.len(), v.len())));
    }
    let s = q[0].rows();
    let n = layout.devices();
    if n == 0 || s % n != 0 || s == 0 {
        return Err(CpError::invalid("shard", format!("{s} tokens over {n} devices")));
    }
    if (0..heads).any(|h| [&q[h], &k[h], &v[h]].iter().any(|m| m.rows() != s) || k[h].cols() != q[h].cols()) {
        return Err(CpError::invalid("shard", "head tensors disagree in shape"));
    }
    let c = s / n;
    Ok((0..n)
        .map(|rank| {
            let (span, hcp_rank) = layout.coords(rank);
            let chunk = layout.chunk_of(span, hcp_rank);
            let (lo, hi) = (chunk * c, (chunk + 1) * c);
            let held = (0..heads)
                .map(|h| (h, Rows { first: lo, q: slice_rows(&q[h], lo, hi), k: slice_rows(&k[h], lo, hi), v: slice_rows(&v[h], lo, hi) }))
                .collect();
            SimDevice { rank, span, hcp_rank, chunk, held, remote_kv: BTreeMap::new(), output: BTreeMap::new() }
        })
        .collect())
}

/// Final state of a simulated forward pass.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub devices: Vec<SimDevice>,
    pub log: MessageLog,
    /// Per rank: output rows of its original chunk, one matrix per head.
    pub outputs: Vec<Vec<Matrix>>,
    /// Per rank: resident QKVO bytes after the head exchange and attention.
    pub qkvo_bytes: Vec<u64>,
    /// Per rank: gathered remote KV bytes.
    pub remote_kv_bytes: Vec<u64>,
}

fn check_inputs(devices: &[SimDevice], layout: &CpLayout, plan: &HcpPlan, sets: &[CriticalIndexSet]) -> Result<(usize, usize)> {
    let n = layout.devices();
    if devices.len() != n {
        return Err(CpError::invalid("run_hybrid_sparse_cp", format!("{} devices for a {} x {} layout", devices.len(), layout.g_h, layout.g_s)));
    }
    if plan.devices != layout.g_h {
        return Err(CpError::invalid("run_hybrid_sparse_cp", format!("plan for {} devices, HCP degree {}", plan.devices, layout.g_h)));
    }
    let heads = devices[0].held.len();
    if plan.heads() != heads || sets.len() != heads {
        return Err(CpError::invalid(
            "run_hybrid_sparse_cp",
            format!("{} heads held, plan covers {}, {} index sets", heads, plan.heads(), sets.len()),
        ));
    }
    let c = devices[0].held.values().next().map_or(0, |r| r.q.rows());
    let s = c * n;
    for (rank, d) in devices.iter().enumerate() {
        let expect = layout.coords(rank);
        if d.rank != rank || (d.span, d.hcp_rank) != expect || d.held.len() != heads || d.held.values().any(|r| r.q.rows() != c) {
            return Err(CpError::invalid("run_hybrid_sparse_cp", format!("device {rank} does not match the layout")));
        }
    }
    for (h, set) in sets.iter().enumerate() {
        if set.keys != s || set.queries() != s {
            return Err(CpError::invalid("run_hybrid_sparse_cp", format!("head {h}: index sets are not {s} x {s}")));
        }
        set.validate()?;
        if set.sets.iter().any(Vec::is_empty) {
            return Err(CpError::invalid("run_hybrid_sparse_cp", format!("head {h}: a query selects nothing")));
        }
    }
    Ok((s, c))
}

/// Head rebalancing: member `r` of each HCP group ends with the full span for
/// the heads the plan gives it.
pub fn load_balance_hcp(devices: &mut [SimDevice], layout: &CpLayout, plan: &HcpPlan, width: u64, log: &mut MessageLog) -> Result<()> {
    if plan.devices != layout.g_h || devices.iter().any(|d| d.held.len() != plan.heads()) {
        return Err(CpError::invalid("load_balance_hcp", "plan does not match the held heads"));
    }
    if layout.g_h == 1 {
        return Ok(());
    }
    let mut bus: Vec<(usize, usize, usize, Rows)> = Vec::new();
    for (src, d) in devices.iter().enumerate() {
        for r2 in 0..layout.g_h {
            let dst = layout.rank(d.span, r2);
            for h in plan.heads_of(r2) {
                bus.push((src, dst, h, d.held[&h].clone()));
            }
        }
    }
    // Byte log in (sender, receiver) order, one message per pair.
    let mut pair_bytes: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (src, dst, _, rows) in &bus {
        if src != dst {
            let elems = rows.q.data().len() + rows.k.data().len() + rows.v.data().len();
            *pair_bytes.entry((*src, *dst)).or_default() += elems as u64 * width;
        }
    }
    for ((src, dst), bytes) in pair_bytes {
        log.push(Phase::HcpFwd, src, dst, bytes);
    }
    let mut incoming: BTreeMap<(usize, usize), Vec<Rows>> = BTreeMap::new();
    for (_, dst, h, rows) in bus {
        incoming.entry((dst, h)).or_default().push(rows);
    }
    for d in devices.iter_mut() {
        d.held.clear();
    }
    for ((dst, h), mut parts) in incoming {
        parts.sort_by_key(|p| p.first);
        let first = parts[0].first;
        let q = stack(&parts.iter().map(|p| &p.q).collect::<Vec<_>>())?;
        let k = stack(&parts.iter().map(|p| &p.k).collect::<Vec<_>>())?;
        let v = stack(&parts.iter().map(|p| &p.v).collect::<Vec<_>>())?;
        devices[dst].held.insert(h, Rows { first, q, k, v });
    }
    Ok(())
}

/// Selective KV gathering inside each SCP group: each member requests the
/// remote keys its queries select, owners answer with exactly those rows.
pub fn selective_comm_scp(devices: &mut [SimDevice], layout: &CpLayout, sets: &[CriticalIndexSet], widths: Widths, log: &mut MessageLog) -> Result<()> {
    if layout.g_s == 1 {
        return Ok(());
    }
    // Requests keyed by (requester, owner) -> per head key list.
    let mut requests: BTreeMap<(usize, usize), BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
    for (rank, d) in devices.iter().enumerate() {
        for (&h, rows) in &d.held {
            let span_len = rows.q.rows();
            let (lo, hi) = (rows.first, rows.first + span_len);
            let mut needed: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            let mut keys: Vec<usize> = (lo..hi).flat_map(|t| sets[h].set(t).iter().copied()).filter(|&key| key < lo || key >= hi).collect();
            keys.sort_unstable();
            keys.dedup();
            for key in keys {
                let owner_span = key / span_len;
                needed.entry(layout.rank(owner_span, d.hcp_rank)).or_default().push(key);
            }
            for a2 in (0..layout.g_s).filter(|&a2| a2 != d.span) {
                let owner = layout.rank(a2, d.hcp_rank);
                requests.entry((rank, owner)).or_default().insert(h, needed.remove(&owner).unwrap_or_default());
            }
        }
    }
    for (&(from, to), per_head) in &requests {
        let preamble = per_head.len() as u64 * widths.count;
        let indices: u64 = per_head.values().map(|k| k.len() as u64).sum::<u64>() * widths.index;
        log.push(Phase::ScpIndexExchange, from, to, preamble + indices);
    }
    // Owners answer: bytes logged owner -> requester, in (owner, requester) order.
    let mut replies: BTreeMap<(usize, usize), Vec<(usize, usize, Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for (&(requester, owner), per_head) in &requests {
        let od = &devices[owner];
        for (&h, keys) in per_head {
            let rows = od.held.get(&h).ok_or_else(|| CpError::Protocol(format!("rank {owner} does not hold head {h}")))?;
            for &key in keys {
                if key < rows.first || key >= rows.first + rows.k.rows() {
                    return Err(CpError::Protocol(format!("rank {requester} asked rank {owner} for key {key} it does not own")));
                }
                let i = key - rows.first;
                replies.entry((owner, requester)).or_default().push((h, key, rows.k.row(i).to_vec(), rows.v.row(i).to_vec()));
            }
        }
    }
    for (&(owner, requester), payload) in &replies {
        let elems: usize = payload.iter().map(|(_, _, k, v)| k.len() + v.len()).sum();
        log.push(Phase::ScpKv, owner, requester, elems as u64 * widths.element);
    }
    for ((_, requester), payload) in replies {
        for (h, key, k, v) in payload {
            devices[requester].remote_kv.entry(h).or_default().insert(key, (k, v));
        }
    }
    Ok(())
}

/// Sparse attention over local plus gathered keys. Keys are merged in global
/// order, so the arithmetic matches a single-device evaluation.
fn local_attention(devices: &mut [SimDevice], sets: &[CriticalIndexSet]) -> Result<()> {
    for d in devices.iter_mut() {
        let mut outputs = BTreeMap::new();
        for (&h, rows) in &d.held {
            let (lo, n_local) = (rows.first, rows.k.rows());
            let remote = d.remote_kv.get(&h);
            let mut global: Vec<usize> = (lo..lo + n_local).chain(remote.into_iter().flat_map(|m| m.keys().copied())).collect();
            global.sort_unstable();
            let position: BTreeMap<usize, usize> = global.iter().enumerate().map(|(i, &g)| (g, i)).collect();
            let row_of = |g: usize, local: &Matrix, pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
                if g >= lo && g < lo + n_local {
                    local.row(g - lo).to_vec()
                } else {
                    pick(&remote.expect("remote key present")[&g]).clone()
                }
            };
            let k = Matrix::from_rows(&global.iter().map(|&g| row_of(g, &rows.k, |p| &p.0)).collect::<Vec<_>>())?;
            let v = Matrix::from_rows(&global.iter().map(|&g| row_of(g, &rows.v, |p| &p.1)).collect::<Vec<_>>())?;
            let mut local_sets = Vec::with_capacity(rows.q.rows());
            for t in lo..lo + rows.q.rows() {
                let set = sets[h]
                    .set(t)
                    .iter()
                    .map(|g| position.get(g).copied().ok_or_else(|| CpError::Protocol(format!("rank {} lacks key {g} for head {h}", d.rank))))
                    .collect::<Result<Vec<_>>>()?;
                local_sets.push(set);
            }
            let idx = CriticalIndexSet::new(global.len(), sets[h].theta, local_sets)?;
            outputs.insert(h, sparse_attention(&rows.q, &k, &v, &idx)?);
        }
        d.output = outputs;
    }
    Ok(())
}

/// Sends each head's output rows back to the chunk owners of its HCP group.
fn redistribute_outputs(devices: &[SimDevice], layout: &CpLayout, heads: usize, c: usize, width: u64, log: &mut MessageLog) -> Vec<Vec<Matrix>> {
    let mut outputs: Vec<Vec<Option<Matrix>>> = vec![vec![None; heads]; devices.len()];
    let mut pair_bytes: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (src, d) in devices.iter().enumerate() {
        for (&h, out) in &d.output {
            let first = d.held[&h].first;
            for r2 in 0..layout.g_h {
                let dst = layout.rank(d.span, r2);
                let chunk = layout.chunk_of(d.span, r2);
                let lo = chunk * c - first;
                let part = slice_rows(out, lo, lo + c);
                if dst != src {
                    *pair_bytes.entry((src, dst)).or_default() += part.data().len() as u64 * width;
                }
                outputs[dst][h] = Some(part);
            }
        }
    }
    for ((src, dst), bytes) in pair_bytes {
        log.push(Phase::OutputRedistribute, src, dst, bytes);
    }
    outputs.into_iter().map(|per_head| per_head.into_iter().map(|m| m.expect("every head output reaches every chunk")).collect()).collect()
}

/// Runs the full forward protocol. `sets` holds the global per-head index
/// sets the devices estimated (`S x S`); the plan is shared by all HCP groups.
pub fn run_hybrid_sparse_cp(
    mut devices: Vec<SimDevice>,
    layout: &CpLayout,
    plan: &HcpPlan,
    sets: &[CriticalIndexSet],
    widths: Widths,
) -> Result<SimOutcome> {
    let (_, c) = check_inputs(&devices, layout, plan, sets)?;
    let heads = plan.heads();
    let mut log = MessageLog::default();
    load_balance_hcp(&mut devices, layout, plan, widths.element, &mut log)?;
    selective_comm_scp(&mut devices, layout, sets, widths, &mut log)?;
    local_attention(&mut devices, sets)?;
    let outputs = redistribute_outputs(&devices, layout, heads, c, widths.element, &mut log);
    let qkvo_bytes = devices.iter().map(|d| d.qkvo_bytes(widths.element)).collect();
    let remote_kv_bytes = devices.iter().map(|d| d.remote_kv_bytes(widths.element)).collect();
    Ok(SimOutcome { devices, log, outputs, qkvo_bytes, remote_kv_bytes })
}

/// Largest absolute difference between simulated outputs and a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tol: f64,
    pub max_abs_error: f64,
    /// `(head, token, column)` of the largest error.
    pub worst: Option<(usize, usize, usize)>,
    pub pass: bool,
}

/// Compares each rank's chunk outputs against reference rows
/// (`reference[h]` is `S x D`; rank chunk positions come from `layout`).
pub fn verify_equivalence(outputs: &[Vec<Matrix>], reference: &[Matrix], layout: &CpLayout, tol: f64) -> Result<EquivalenceReport> {
    if outputs.len() != layout.devices() {
        return Err(CpError::invalid("verify_equivalence", format!("{} outputs for {} devices", outputs.len(), layout.devices())));
    }
    let mut report = EquivalenceReport { tol, max_abs_error: 0.0, worst: None, pass: true };
    for (rank, per_head) in outputs.iter().enumerate() {
        if per_head.len() != reference.len() {
            return Err(CpError::invalid("verify_equivalence", format!("rank {rank} has {} heads", per_head.len())));
        }
        let (a, r) = layout.coords(rank);
        let chunk = layout.chunk_of(a, r);
        for (h, out) in per_head.iter().enumerate() {
            let c = out.rows();
            if reference[h].cols() != out.cols() || (chunk + 1) * c > reference[h].rows() {
                return Err(CpError::invalid("verify_equivalence", format!("rank {rank} head {h} shape mismatch")));
            }
            for i in 0..c {
                for (j, (&x, &y)) in out.row(i).iter().zip(reference[h].row(chunk * c + i)).enumerate() {
                    let e = (x - y).abs();
                    if !(e <= report.max_abs_error) {
                        report.max_abs_error = e;
                        report.worst = Some((h, chunk * c + i, j));
                    }
                }
            }
        }
    }
    report.pass = report.max_abs_error <= tol;
    Ok(report)
}
