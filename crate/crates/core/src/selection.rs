//! Critical-KV index selection without materializing the score matrix.
//!
//! [`streaming_topk`] walks key tiles and folds each partial product into a
//! bounded per-query selector, so auxiliary memory is `O(S * k)` rather than
//! `O(S^2)`. [`twopass_select`] is the threshold variant: pass one finds each
//! query's k-th score, pass two re-multiplies and emits indices at or above it.
//!
//! Ties are broken toward the lower key index everywhere.

use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::CriticalIndexSet;
use crate::error::{CoreError, Result};
use crate::tensor::Matrix;

/// Selected indices per query plus each query's k-th largest score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKResult {
    pub keys: usize,
    /// Ascending key indices per query.
    pub indices: Vec<Vec<usize>>,
    /// Score of the weakest selected key per query.
    pub thresholds: Vec<f64>,
}

impl TopKResult {
    pub fn into_index_set(self) -> CriticalIndexSet {
        CriticalIndexSet { keys: self.keys, theta: None, sets: self.indices }
    }

    pub fn to_index_set(&self) -> CriticalIndexSet {
        self.clone().into_index_set()
    }
}

/// Tuning knobs with no effect on the result.
#[derive(Debug, Clone, Copy)]
pub struct SelectOptions {
    /// Keys per partial product tile.
    pub tile_width: usize,
    /// Number of query partitions processed independently; `None` uses the
    /// rayon pool size.
    pub partitions: Option<usize>,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions { tile_width: 128, partitions: None }
    }
}

/// Work performed by a selection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectStats {
    /// Multiply-adds spent on low-rank score products.
    pub products: u64,
    /// Candidate scores offered to the selectors.
    pub candidates: u64,
}

impl SelectStats {
    /// Product FLOPs (2 per multiply-add) plus one comparison per candidate.
    pub fn flops(&self) -> u64 {
        2 * self.products + self.candidates
    }
}

/// Allocation accounting hook: tracks live and peak auxiliary entries
/// (scores, indices, heap slots) held by a selection routine.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, entries: usize) {
        let now = self.current.fetch_add(entries, AtomicOrdering::SeqCst) + entries;
        self.peak.fetch_max(now, AtomicOrdering::SeqCst);
    }

    pub fn free(&self, entries: usize) {
        self.current.fetch_sub(entries, AtomicOrdering::SeqCst);
    }

    pub fn current(&self) -> usize {
        self.current.load(AtomicOrdering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(AtomicOrdering::SeqCst)
    }
}

fn track(meter: Option<&MemoryMeter>, entries: usize) {
    if let Some(m) = meter {
        m.alloc(entries);
    }
}

fn untrack(meter: Option<&MemoryMeter>, entries: usize) {
    if let Some(m) = meter {
        m.free(entries);
    }
}

/// Number of keys to keep so that the fraction dropped is at most `sparsity`.
pub fn k_from_sparsity(sparsity: f64, keys: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(CoreError::invalid("k_from_sparsity", format!("sparsity {sparsity} outside [0, 1)")));
    }
    if keys == 0 {
        return Err(CoreError::invalid("k_from_sparsity", "no keys"));
    }
    // The slack absorbs representation error such as (1 - 0.7) * 10 = 3.0000000000000004.
    let k = ((1.0 - sparsity) * keys as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(keys))
}

/// Candidate packed so that a larger value is preferred: order-preserving
/// score bits in the high half, inverted key index in the low half (lower
/// index wins ties).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Rank(u128);

impl Rank {
    #[inline]
    fn new(score: f64, index: usize) -> Self {
        let bits = score.to_bits();
        let ordered = if bits >> 63 == 1 { !bits } else { bits | (1 << 63) };
        Rank(((ordered as u128) << 64) | !(index as u64) as u128)
    }

    fn score(self) -> f64 {
        let ordered = (self.0 >> 64) as u64;
        f64::from_bits(if ordered >> 63 == 1 { ordered & !(1 << 63) } else { !ordered })
    }

    fn index(self) -> usize {
        !(self.0 as u64) as usize
    }
}

/// Bounded top-k structure: an unordered buffer of at most `2k` candidates.
/// Once full it is cut back to the best `k` by quickselect, which also raises
/// the admission floor. Amortized cost per admitted candidate is `O(1)`.
struct Selector {
    k: usize,
    buf: Vec<Rank>,
    /// Score of the k-th best candidate after the last cut; `-inf` before.
    floor: f64,
}

impl Selector {
    fn new(k: usize) -> Self {
        Selector { k, buf: Vec::with_capacity(2 * k), floor: f64::NEG_INFINITY }
    }

    /// Entries held at peak.
    fn capacity_for(k: usize) -> usize {
        2 * k
    }

    /// Offers `row[off]` as key `start + off`.
    #[inline]
    fn offer_row(&mut self, start: usize, row: &[f64]) {
        for (off, &sc) in row.iter().enumerate() {
            // Equal scores pass: a lower index may still outrank the k-th.
            if sc >= self.floor {
                self.buf.push(Rank::new(sc, start + off));
                if self.buf.len() == 2 * self.k {
                    self.cut();
                }
            }
        }
    }

    /// Keeps the best k in arbitrary order.
    fn cut(&mut self) {
        if self.buf.len() > self.k {
            self.buf.select_nth_unstable_by(self.k - 1, |a, b| b.cmp(a));
            self.buf.truncate(self.k);
        }
        if self.buf.len() == self.k {
            self.floor = self.buf.iter().min().map_or(f64::NEG_INFINITY, |r| r.score());
        }
    }

    /// Final top-k and the weakest retained candidate.
    fn finish(mut self) -> (Vec<Rank>, Option<Rank>) {
        self.cut();
        let worst = self.buf.iter().copied().min();
        (self.buf, worst)
    }
}

fn check_inputs(op: &'static str, ql: &Matrix, kl: &Matrix, ks: &[usize]) -> Result<()> {
    if ql.cols() != kl.cols() {
        return Err(CoreError::shape(op, format!("query rank {} != key rank {}", ql.cols(), kl.cols())));
    }
    if ks.len() != ql.rows() {
        return Err(CoreError::shape(op, format!("{} budgets for {} queries", ks.len(), ql.rows())));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > kl.rows()) {
        return Err(CoreError::invalid(op, format!("k = {bad} outside [1, {}]", kl.rows())));
    }
    ql.ensure_finite(op)?;
    kl.ensure_finite(op)
}

fn partition_bounds(queries: usize, opts: &SelectOptions) -> Vec<(usize, usize)> {
    let parts = opts.partitions.unwrap_or_else(rayon::current_num_threads).clamp(1, queries.max(1));
    let per = queries.div_ceil(parts);
    (0..parts)
        .map(|p| (p * per, ((p + 1) * per).min(queries)))
        .filter(|(a, b)| a < b)
        .collect()
}

/// Queries whose score tiles are produced by one gemm call.
const QUERY_BLOCK: usize = 32;

/// Streams the scores of queries `rows.0..rows.1` into
/// `sink(query, first_key, scores)`, one `QUERY_BLOCK x width` tile at a
/// time. Each query sees its keys in ascending order.
fn scan_block(ql: &Matrix, kl: &Matrix, rows: (usize, usize), tile: &mut [f64], width: usize, mut sink: impl FnMut(usize, usize, &[f64])) {
    let keys = kl.rows();
    let mut start = 0;
    while start < keys {
        let end = (start + width).min(keys);
        let w = end - start;
        ql.matmul_t_block(rows.0..rows.1, kl, start..end, tile);
        for (r, i) in (rows.0..rows.1).enumerate() {
            sink(i, start, &tile[r * w..(r + 1) * w]);
        }
        start = end;
    }
}

fn query_blocks(lo: usize, hi: usize) -> impl Iterator<Item = (usize, usize)> {
    (lo..hi).step_by(QUERY_BLOCK).map(move |a| (a, (a + QUERY_BLOCK).min(hi)))
}

/// Top-`k` keys of `ql * kl^T` per query, ties to the lower index.
pub fn streaming_topk(ql: &Matrix, kl: &Matrix, k: usize) -> Result<TopKResult> {
    let ks = vec![k; ql.rows()];
    streaming_topk_with(ql, kl, &ks, &SelectOptions::default(), None).map(|(r, _)| r)
}

/// Streaming selection with a per-query budget, explicit options and an
/// optional memory meter.
pub fn streaming_topk_with(
    ql: &Matrix,
    kl: &Matrix,
    ks: &[usize],
    opts: &SelectOptions,
    meter: Option<&MemoryMeter>,
) -> Result<(TopKResult, SelectStats)> {
    check_inputs("streaming_topk", ql, kl, ks)?;
    let tile_width = opts.tile_width.max(1).min(kl.rows());
    let parts = partition_bounds(ql.rows(), opts);

    // Output storage: indices plus one threshold per query.
    track(meter, ks.iter().sum::<usize>() + ql.rows());

    let chunks: Vec<Vec<(Vec<usize>, f64)>> = parts
        .par_iter()
        .map(|&(lo, hi)| {
            let tile_len = QUERY_BLOCK.min(hi - lo) * tile_width;
            let mut tile = vec![0.0; tile_len];
            track(meter, tile_len);
            let mut out = Vec::with_capacity(hi - lo);
            for (a, b) in query_blocks(lo, hi) {
                let budget: usize = ks[a..b].iter().map(|&k| Selector::capacity_for(k)).sum();
                track(meter, budget);
                let mut sels: Vec<Selector> = ks[a..b].iter().map(|&k| Selector::new(k)).collect();
                scan_block(ql, kl, (a, b), &mut tile, tile_width, |i, start, row| sels[i - a].offer_row(start, row));
                out.extend(sels.into_iter().map(|sel| {
                    let (kept, worst) = sel.finish();
                    let threshold = worst.map_or(f64::NEG_INFINITY, Rank::score);
                    let mut idx: Vec<usize> = kept.into_iter().map(Rank::index).collect();
                    idx.sort_unstable();
                    (idx, threshold)
                }));
                untrack(meter, budget);
            }
            untrack(meter, tile_len);
            out
        })
        .collect();

    let (indices, thresholds) = chunks.into_iter().flatten().unzip();
    let pairs = (ql.rows() * kl.rows()) as u64;
    let stats = SelectStats { products: pairs * ql.cols() as u64, candidates: pairs };
    Ok((TopKResult { keys: kl.rows(), indices, thresholds }, stats))
}

/// Two-pass threshold selection. Equal to [`streaming_topk`] on every input.
pub fn twopass_select(ql: &Matrix, kl: &Matrix, k: usize) -> Result<TopKResult> {
    let ks = vec![k; ql.rows()];
    twopass_select_with(ql, kl, &ks, &SelectOptions::default(), None).map(|(r, _)| r)
}

pub fn twopass_select_with(
    ql: &Matrix,
    kl: &Matrix,
    ks: &[usize],
    opts: &SelectOptions,
    meter: Option<&MemoryMeter>,
) -> Result<(TopKResult, SelectStats)> {
    check_inputs("twopass_select", ql, kl, ks)?;
    let tile_width = opts.tile_width.max(1).min(kl.rows());
    let parts = partition_bounds(ql.rows(), opts);
    track(meter, ks.iter().sum::<usize>() + ql.rows());

    let chunks: Vec<Vec<(Vec<usize>, f64)>> = parts
        .par_iter()
        .map(|&(lo, hi)| {
            let tile_len = QUERY_BLOCK.min(hi - lo) * tile_width;
            let mut tile = vec![0.0; tile_len];
            track(meter, tile_len);
            let mut out = Vec::with_capacity(hi - lo);
            for (a, b) in query_blocks(lo, hi) {
                // Pass 1: k-th score per query and how many selected scores beat it.
                let budget: usize = ks[a..b].iter().map(|&k| Selector::capacity_for(k)).sum();
                track(meter, budget);
                let mut sels: Vec<Selector> = ks[a..b].iter().map(|&k| Selector::new(k)).collect();
                scan_block(ql, kl, (a, b), &mut tile, tile_width, |i, start, row| sels[i - a].offer_row(start, row));
                let mut pending: Vec<(Vec<usize>, f64, usize)> = sels
                    .into_iter()
                    .zip(&ks[a..b])
                    .map(|(sel, &k)| {
                        let (kept, worst) = sel.finish();
                        let threshold = worst.map_or(f64::NEG_INFINITY, Rank::score);
                        let above = kept.iter().filter(|r| r.score() > threshold).count();
                        (Vec::with_capacity(k), threshold, k - above)
                    })
                    .collect();
                untrack(meter, budget);

                // Pass 2: re-multiply, keep everything above the threshold and
                // the lowest-index ties up to k.
                scan_block(ql, kl, (a, b), &mut tile, tile_width, |i, start, row| {
                    let (idx, threshold, ties_left) = &mut pending[i - a];
                    for (off, &sc) in row.iter().enumerate() {
                        if sc > *threshold {
                            idx.push(start + off);
                        } else if sc == *threshold && *ties_left > 0 {
                            idx.push(start + off);
                            *ties_left -= 1;
                        }
                    }
                });
                out.extend(pending.into_iter().map(|(idx, t, _)| (idx, t)));
            }
            untrack(meter, tile_len);
            out
        })
        .collect();

    let (indices, thresholds) = chunks.into_iter().flatten().unzip();
    let pairs = (ql.rows() * kl.rows()) as u64;
    let stats = SelectStats { products: 2 * pairs * ql.cols() as u64, candidates: 2 * pairs };
    Ok((TopKResult { keys: kl.rows(), indices, thresholds }, stats))
}
