mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidsparse_cp::{balance_heads, HeadLoadVector};

#[test]
fn exact_balance_equals_brute_force_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..1000 {
        let heads = rng.random_range(1..=10);
        let n = rng.random_range(1..=4);
        // Narrow ranges make ties, which the canonical choice must resolve.
        let top = if rng.random_bool(0.5) { 8 } else { 10_000 };
        let loads: Vec<u64> = (0..heads).map(|_| rng.random_range(0..=top)).collect();
        let plan = balance_heads(&HeadLoadVector::new(loads.clone()), n).unwrap();
        let (value, assignment) = support::brute_force_balance(&loads, n);
        assert!(plan.optimal);
        assert_eq!(plan.max_burden, value, "case {case}: {loads:?} on {n}");
        assert_eq!(plan.assignment, assignment, "case {case}: {loads:?} on {n}");
    }
}

#[test]
fn capped_search_oracle_agrees_with_full_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for _ in 0..200 {
        let loads: Vec<u64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..=20)).collect();
        let n = rng.random_range(1..=4);
        assert_eq!(support::min_max_assignment(&loads, n), support::brute_force_balance(&loads, n));
    }
}

#[test]
fn heuristic_beyond_exact_limit_respects_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..50 {
        let loads: Vec<u64> = (0..rng.random_range(17..40)).map(|_| rng.random_range(1..=1000)).collect();
        let n = rng.random_range(2..=8);
        let plan = balance_heads(&HeadLoadVector::new(loads.clone()), n).unwrap();
        let total: u64 = loads.iter().sum();
        let lower = loads.iter().copied().max().unwrap().max(total.div_ceil(n as u64));
        assert!(!plan.optimal);
        assert!(plan.max_burden >= lower);
        // LPT is within 4/3 of optimal, hence of the lower bound too.
        assert!(3 * plan.max_burden <= 4 * lower + 3 * loads.iter().copied().max().unwrap());
        assert_eq!(plan.burdens.iter().sum::<u64>(), total);
    }
}
