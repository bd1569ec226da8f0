use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use vidsparse_core::profiler::{sample_queries, sampled_head_sparsity, SampleConfig};
use vidsparse_core::tensor::Matrix;

/// Gaussian head whose query rows carry log-normal norms, so per-row
/// sparsity varies widely and the sample has something to miss.
fn random_head(seed: u64, s: usize, d: usize) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Matrix::<f64>::random_normal(s, d, 1.0, &mut rng);
    let k = Matrix::<f64>::random_normal(s, d, 1.0, &mut rng);
    let norms = LogNormal::new(0.0, 0.5).unwrap();
    for i in 0..s {
        let g: f64 = norms.sample(&mut rng);
        q.row_mut(i).iter_mut().for_each(|x| *x *= g);
    }
    (q, k)
}

#[test]
fn factor_16_sample_tracks_full_measurement_at_s1024() {
    let (s, d, theta) = (1024, 64, 0.9);
    let all: Vec<usize> = (0..s).collect();
    let mut diffs: Vec<f64> = (0..100u64)
        .map(|seed| {
            let (q, k) = random_head(seed, s, d);
            let full = sampled_head_sparsity(&q, &k, theta, &all).unwrap();
            let rows = sample_queries(s, &SampleConfig { seed: 1000 + seed, ..SampleConfig::default() }).unwrap();
            assert_eq!(rows.len(), 64);
            (full - sampled_head_sparsity(&q, &k, theta, &rows).unwrap()).abs()
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let (median, max) = ((diffs[49] + diffs[50]) / 2.0, diffs[99]);
    eprintln!("sampling error: median {median:.4} max {max:.4}");
    assert!(max <= 0.1, "max {max}");
    assert!(median <= 0.03, "median {median}");
}
