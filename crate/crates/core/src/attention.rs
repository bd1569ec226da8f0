//! Dense reference attention, the cumulative-mass critical-KV oracle and
//! sparse attention over explicit per-query index sets.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{dot, DType, HeadTensor, Matrix, Real};

/// Row-stochastic attention matrix (post-softmax), one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores<T = f64> {
    matrix: Matrix<T>,
}

/// Tolerance on row sums accepted by [`AttentionScores::new`].
pub const ROW_SUM_TOL: f64 = 1e-6;

impl<T: Real> AttentionScores<T> {
    /// Wraps a matrix whose rows are nonnegative and sum to one.
    pub fn new(matrix: Matrix<T>) -> Result<Self> {
        for i in 0..matrix.rows() {
            let row = matrix.row(i);
            if row.iter().any(|&v| !v.is_finite() || v < T::zero()) {
                return Err(CoreError::invalid("AttentionScores", format!("row {i} has negative or non-finite entries")));
            }
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            let tol = match T::DTYPE {
                DType::F64 => ROW_SUM_TOL,
                DType::F32 => 1e-4,
            };
            if (sum - 1.0).abs() > tol {
                return Err(CoreError::invalid("AttentionScores", format!("row {i} sums to {sum}")));
            }
        }
        Ok(AttentionScores { matrix })
    }

    /// Softmax of each logit row.
    pub fn from_logits(mut logits: Matrix<T>) -> Result<Self> {
        logits.ensure_finite("attention logits")?;
        for i in 0..logits.rows() {
            softmax_in_place(logits.row_mut(i));
        }
        Ok(AttentionScores { matrix: logits })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.matrix
    }

    pub fn queries(&self) -> usize {
        self.matrix.rows()
    }

    pub fn keys(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.matrix.row(i)
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Per-query sets of selected key/value indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct CriticalIndexSet {
    /// Number of keys the indices range over.
    pub keys: usize,
    /// Cumulative-mass threshold the sets were built for, if any.
    pub theta: Option<f64>,
    /// Sorted, duplicate-free key indices per query.
    pub sets: Vec<Vec<usize>>,
}

impl CriticalIndexSet {
    pub fn new(keys: usize, theta: Option<f64>, sets: Vec<Vec<usize>>) -> Result<Self> {
        let set = CriticalIndexSet { keys, theta, sets };
        set.validate()?;
        Ok(set)
    }

    /// Every query selects every key.
    pub fn complete(queries: usize, keys: usize) -> Self {
        CriticalIndexSet { keys, theta: Some(1.0), sets: vec![(0..keys).collect(); queries] }
    }

    pub fn validate(&self) -> Result<()> {
        for (q, set) in self.sets.iter().enumerate() {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CoreError::invalid("CriticalIndexSet", format!("query {q}: indices not sorted and unique")));
            }
            if set.last().is_some_and(|&i| i >= self.keys) {
                return Err(CoreError::invalid(
                    "CriticalIndexSet",
                    format!("query {q}: index out of range for {} keys", self.keys),
                ));
            }
        }
        Ok(())
    }

    pub fn queries(&self) -> usize {
        self.sets.len()
    }

    pub fn set(&self, q: usize) -> &[usize] {
        &self.sets[q]
    }

    pub fn total_selected(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Multiply-add counts of an attention evaluation, reported as FLOPs (2 per MAC).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlops {
    /// `q . k` products.
    pub score: u64,
    /// Weighted accumulation of value rows.
    pub score_value: u64,
}

fn check_qkv<T: Real>(op: &'static str, q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(CoreError::shape(op, format!("query dim {} != key dim {}", q.cols(), k.cols())));
    }
    if k.rows() != v.rows() {
        return Err(CoreError::shape(op, format!("{} keys but {} values", k.rows(), v.rows())));
    }
    if k.rows() == 0 || q.cols() == 0 {
        return Err(CoreError::invalid(op, "empty key set or zero head dimension"));
    }
    q.ensure_finite(op)?;
    k.ensure_finite(op)?;
    v.ensure_finite(op)
}

fn scaled_logits<T: Real>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>> {
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    Ok(q.matmul_t(k)?.scale(scale))
}

/// `softmax(Q K^T / sqrt(d_k)) V`, row by row.
pub fn full_attention<T: Real>(q: &HeadTensor<T>, k: &HeadTensor<T>, v: &HeadTensor<T>) -> Result<HeadTensor<T>> {
    full_attention_counted(q, k, v).map(|(out, _)| out)
}

/// [`full_attention`] plus its FLOP counts.
pub fn full_attention_counted<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
) -> Result<(HeadTensor<T>, AttentionFlops)> {
    check_qkv("full_attention", q, k, v)?;
    let probs = AttentionScores::from_logits(scaled_logits(q, k)?)?;
    let out = probs.matrix().matmul(v)?;
    let (s_q, s_k) = (q.rows() as u64, k.rows() as u64);
    let flops = AttentionFlops {
        score: 2 * s_q * s_k * q.cols() as u64,
        score_value: 2 * s_q * s_k * v.cols() as u64,
    };
    Ok((out, flops))
}

/// Post-softmax scores `softmax(Q K^T / sqrt(d_k))`.
pub fn attention_scores<T: Real>(q: &HeadTensor<T>, k: &HeadTensor<T>) -> Result<AttentionScores<T>> {
    if q.cols() != k.cols() {
        return Err(CoreError::shape("attention_scores", format!("query dim {} != key dim {}", q.cols(), k.cols())));
    }
    if k.rows() == 0 || q.cols() == 0 {
        return Err(CoreError::invalid("attention_scores", "empty key set or zero head dimension"));
    }
    AttentionScores::from_logits(scaled_logits(q, k)?)
}

/// Key order for one score row: descending score, lower index first on ties.
pub fn descending_order<T: Real>(row: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()).then(a.cmp(&b)));
    order
}

// Relative slack on the cumulative-mass comparison so that sums such as
// 0.5 + 0.3 + 0.1 register as reaching 0.9.
const MASS_SLACK: f64 = 1e-12;

/// Smallest descending-score prefix of one row whose mass reaches `theta`
/// of the row total, returned sorted by index.
pub fn critical_prefix<T: Real>(row: &[T], theta: f64) -> Vec<usize> {
    if theta >= 1.0 {
        return (0..row.len()).collect();
    }
    let total: f64 = row.iter().map(|v| v.as_f64()).sum();
    let target = theta * total - MASS_SLACK * total;
    let mut cum = 0.0;
    let mut picked = Vec::new();
    for i in descending_order(row) {
        cum += row[i].as_f64();
        picked.push(i);
        if cum >= target {
            break;
        }
    }
    picked.sort_unstable();
    picked
}

fn check_theta(op: &'static str, theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(CoreError::invalid(op, format!("theta {theta} outside (0, 1]")));
    }
    Ok(())
}

/// Critical KV pairs per query: the minimal set of top-scoring keys whose
/// scores accumulate to `theta` of the row's mass.
pub fn critical_kv_oracle<T: Real>(scores: &AttentionScores<T>, theta: f64) -> Result<CriticalIndexSet> {
    check_theta("critical_kv_oracle", theta)?;
    let sets = (0..scores.queries()).map(|i| critical_prefix(scores.row(i), theta)).collect();
    Ok(CriticalIndexSet { keys: scores.keys(), theta: Some(theta), sets })
}

/// Mean fraction of non-selected keys across queries.
pub fn head_sparsity(idx: &CriticalIndexSet, keys: usize) -> Result<f64> {
    if keys == 0 || idx.queries() == 0 {
        return Err(CoreError::invalid("head_sparsity", "no keys or no queries"));
    }
    if idx.keys != keys {
        return Err(CoreError::shape("head_sparsity", format!("index set over {} keys, expected {keys}", idx.keys)));
    }
    idx.validate()?;
    let s = keys as f64;
    let total: f64 = idx.sets.iter().map(|set| (s - set.len() as f64) / s).sum();
    Ok(total / idx.queries() as f64)
}

/// Attention for one query restricted to `keys_idx`, softmax renormalized
/// over the selection only. Writes into `out` (length = value dim).
pub(crate) fn attend_selected<T: Real>(
    q_row: &[T],
    k: &Matrix<T>,
    v: &Matrix<T>,
    keys_idx: &[usize],
    scale: T,
    logits: &mut Vec<T>,
    out: &mut [T],
) {
    logits.clear();
    logits.extend(keys_idx.iter().map(|&j| dot(q_row, k.row(j)) * scale));
    softmax_in_place(logits);
    out.iter_mut().for_each(|o| *o = T::zero());
    for (&j, &p) in keys_idx.iter().zip(logits.iter()) {
        for (o, &x) in out.iter_mut().zip(v.row(j)) {
            *o = *o + p * x;
        }
    }
}

/// Attention where query `i` attends only to `idx.set(i)`.
pub fn sparse_attention<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    idx: &CriticalIndexSet,
) -> Result<HeadTensor<T>> {
    sparse_attention_counted(q, k, v, idx).map(|(out, _)| out)
}

/// [`sparse_attention`] plus its FLOP counts.
pub fn sparse_attention_counted<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    idx: &CriticalIndexSet,
) -> Result<(HeadTensor<T>, AttentionFlops)> {
    check_qkv("sparse_attention", q, k, v)?;
    if idx.queries() != q.rows() {
        return Err(CoreError::shape(
            "sparse_attention",
            format!("{} index lists for {} queries", idx.queries(), q.rows()),
        ));
    }
    if idx.keys != k.rows() {
        return Err(CoreError::shape("sparse_attention", format!("index set over {} keys, have {}", idx.keys, k.rows())));
    }
    idx.validate()?;
    if let Some(q_empty) = idx.sets.iter().position(Vec::is_empty) {
        return Err(CoreError::invalid("sparse_attention", format!("query {q_empty} has an empty index list")));
    }
    let scale = T::one() / T::lit(q.cols() as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut logits = Vec::new();
    for i in 0..q.rows() {
        attend_selected(q.row(i), k, v, idx.set(i), scale, &mut logits, out.row_mut(i));
    }
    let selected = idx.total_selected() as u64;
    let flops = AttentionFlops {
        score: 2 * selected * q.cols() as u64,
        score_value: 2 * selected * v.cols() as u64,
    };
    Ok((out, flops))
}

/// Upper bound on `|sparse - full|` for one query: with captured mass `m`,
/// the full output is `m * o_sel + (1 - m) * o_rest`, so the deviation is at
/// most `2 (1 - m) max_j |v_j|` in any norm.
pub fn mass_deviation_bound(captured_mass: f64, max_value_norm: f64) -> f64 {
    2.0 * (1.0 - captured_mass).max(0.0) * max_value_norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_qkv(s: usize, d: usize, seed: u64) -> (Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Matrix::random_normal(s, d, 1.0, &mut rng),
            Matrix::random_normal(s, d, 1.0, &mut rng),
            Matrix::random_normal(s, d, 1.0, &mut rng),
        )
    }

    // Independent double-loop oracle.
    fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let d = q.cols() as f64;
        let mut out = Matrix::zeros(q.rows(), v.cols());
        for i in 0..q.rows() {
            let mut logits = vec![0.0; k.rows()];
            for j in 0..k.rows() {
                let mut s = 0.0;
                for c in 0..q.cols() {
                    s += q.get(i, c) * k.get(j, c);
                }
                logits[j] = s / d.sqrt();
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out.set(i, c, out.get(i, c) + w[j] / z * v.get(j, c));
                }
            }
        }
        out
    }

    #[test]
    fn single_key_returns_value() {
        let q = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![5.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = full_attention(&q, &k, &v).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let (q, _, v) = rand_qkv(6, 3, 2);
        let k = Matrix::from_fn(6, 3, |_, j| j as f64 - 1.0);
        let out = full_attention(&q, &k, &v).unwrap();
        let mean: Vec<f64> = (0..3).map(|c| (0..6).map(|r| v.get(r, c)).sum::<f64>() / 6.0).collect();
        for i in 0..6 {
            for c in 0..3 {
                assert!((out.get(i, c) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let (q, k, v) = rand_qkv(16, 4, 7);
        let out = full_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&naive_attention(&q, &k, &v)).unwrap() < 1e-6);
    }

    #[test]
    fn f32_mode_agrees_loosely() {
        let (q, k, v) = rand_qkv(32, 8, 11);
        let out64 = full_attention(&q, &k, &v).unwrap();
        let out32 = full_attention(&q.cast::<f32>(), &k.cast(), &v.cast()).unwrap();
        assert!(out32.cast::<f64>().max_abs_diff(&out64).unwrap() < 1e-3);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (q, k, v) = rand_qkv(4, 3, 1);
        let k2 = Matrix::zeros(4, 2);
        assert!(matches!(full_attention(&q, &k2, &v), Err(CoreError::Shape { .. })));
        let v2 = Matrix::zeros(3, 3);
        assert!(full_attention(&q, &k, &v2).is_err());
        assert!(attention_scores(&q, &k2).is_err());
    }

    #[test]
    fn closed_form_softmax_rows() {
        // d_k = 1 so the logits are exactly q * k.
        let q = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![3f64.ln()], vec![0.0]]).unwrap();
        let a = attention_scores(&q, &k).unwrap();
        assert_eq!(a.row(0), &[0.5, 0.5]);
        assert!((a.row(1)[0] - 0.75).abs() < 1e-15);
        assert!((a.row(1)[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scores_match_naive_softmax() {
        let (q, k, _) = rand_qkv(32, 4, 3);
        let a = attention_scores(&q, &k).unwrap();
        for i in 0..32 {
            let logits: Vec<f64> = (0..32).map(|j| dot(q.row(i), k.row(j)) / 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..32 {
                assert!((a.row(i)[j] - logits[j].exp() / z).abs() < 1e-6);
            }
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    fn scores(rows: Vec<Vec<f64>>) -> AttentionScores {
        AttentionScores::new(Matrix::from_rows(&rows).unwrap()).unwrap()
    }

    #[test]
    fn oracle_picks_cumulative_prefix() {
        let a = scores(vec![vec![0.5, 0.3, 0.1, 0.06, 0.04]]);
        let idx = critical_kv_oracle(&a, 0.9).unwrap();
        assert_eq!(idx.set(0), &[0, 1, 2]);
        let all = critical_kv_oracle(&a, 1.0).unwrap();
        assert_eq!(all.set(0), &[0, 1, 2, 3, 4]);
        assert!(critical_kv_oracle(&a, 0.0).is_err());
        assert!(critical_kv_oracle(&a, 1.5).is_err());
    }

    #[test]
    fn oracle_breaks_ties_by_index() {
        let a = scores(vec![vec![0.25, 0.25, 0.25, 0.25]]);
        assert_eq!(critical_kv_oracle(&a, 0.5).unwrap().set(0), &[0, 1]);
    }

    #[test]
    fn oracle_matches_sort_and_scan() {
        let (q, k, _) = rand_qkv(64, 8, 21);
        let a = attention_scores(&q.scale(2.0), &k).unwrap();
        let idx = critical_kv_oracle(&a, 0.9).unwrap();
        for i in 0..64 {
            let row = a.row(i);
            let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
            pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
            let total: f64 = row.iter().sum();
            let mut acc = 0.0;
            let mut expect = vec![];
            for (s, j) in pairs {
                acc += s;
                expect.push(j);
                if acc >= 0.9 * total {
                    break;
                }
            }
            expect.sort();
            assert_eq!(idx.set(i), expect.as_slice());
            // minimality
            let m: f64 = idx.set(i).iter().map(|&j| row[j]).sum();
            let lowest = idx.set(i).iter().map(|&j| row[j]).fold(f64::MAX, f64::min);
            assert!(m - lowest < 0.9 * total);
        }
    }

    #[test]
    fn sparsity_values() {
        let one_of_ten = CriticalIndexSet::new(10, None, vec![vec![3]; 4]).unwrap();
        assert!((head_sparsity(&one_of_ten, 10).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(head_sparsity(&CriticalIndexSet::complete(5, 10), 10).unwrap(), 0.0);

        let (q, k, _) = rand_qkv(64, 8, 5);
        let a = attention_scores(&q.scale(2.0), &k).unwrap();
        let idx = critical_kv_oracle(&a, 0.9).unwrap();
        let hand: f64 = idx.sets.iter().map(|s| 1.0 - s.len() as f64 / 64.0).sum::<f64>() / 64.0;
        assert!((head_sparsity(&idx, 64).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn sparse_with_full_sets_is_full() {
        let (q, k, v) = rand_qkv(24, 4, 9);
        let full = full_attention(&q, &k, &v).unwrap();
        let all = sparse_attention(&q, &k, &v, &CriticalIndexSet::complete(24, 24)).unwrap();
        assert!(all.max_abs_diff(&full).unwrap() < 1e-6);
        let a = attention_scores(&q, &k).unwrap();
        let oracle = critical_kv_oracle(&a, 1.0).unwrap();
        let out = sparse_attention(&q, &k, &v, &oracle).unwrap();
        assert!(out.max_abs_diff(&full).unwrap() < 1e-6);
    }

    #[test]
    fn sparse_rejects_empty_list() {
        let (q, k, v) = rand_qkv(3, 2, 1);
        let idx = CriticalIndexSet::new(3, None, vec![vec![0], vec![], vec![1, 2]]).unwrap();
        assert!(matches!(sparse_attention(&q, &k, &v, &idx), Err(CoreError::InvalidInput { .. })));
    }

    #[test]
    fn error_shrinks_as_theta_grows() {
        let (q, k, v) = rand_qkv(128, 8, 13);
        let q = q.scale(2.5);
        let full = full_attention(&q, &k, &v).unwrap();
        let a = attention_scores(&q, &k).unwrap();
        let mut prev = f64::INFINITY;
        for theta in [0.5, 0.8, 0.9, 0.99] {
            let out = sparse_attention(&q, &k, &v, &critical_kv_oracle(&a, theta).unwrap()).unwrap();
            let err: f64 = (0..128)
                .map(|i| {
                    let d: f64 = out.row(i).iter().zip(full.row(i)).map(|(x, y)| (x - y).powi(2)).sum();
                    d.sqrt() / full.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()
                })
                .sum::<f64>()
                / 128.0;
            assert!(err <= prev, "theta {theta}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn deviation_respects_mass_bound() {
        let (q, k, v) = rand_qkv(48, 4, 17);
        let q = q.scale(3.0);
        let a = attention_scores(&q, &k).unwrap();
        let idx = critical_kv_oracle(&a, 0.8).unwrap();
        let full = full_attention(&q, &k, &v).unwrap();
        let sparse = sparse_attention(&q, &k, &v, &idx).unwrap();
        let vmax = (0..48).map(|j| v.row(j).iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max);
        for i in 0..48 {
            let m: f64 = idx.set(i).iter().map(|&j| a.row(i)[j]).sum();
            let dev: f64 = sparse.row(i).iter().zip(full.row(i)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(dev <= mass_deviation_bound(m, vmax) + 1e-12);
        }
    }
}
