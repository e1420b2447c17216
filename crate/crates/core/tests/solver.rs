use mpq_core::quant::BIT_WIDTHS;
use mpq_core::solver::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cap(t: f64) -> BudgetSpec {
    BudgetSpec { target_avg_bits: t, hard_cap: true }
}

fn total_bits(choice: &[usize], counts: &[u64]) -> u64 {
    choice.iter().zip(counts).map(|(&j, &c)| BIT_WIDTHS[j] as u64 * c).sum()
}

fn exhaustive(table: &[[f64; 4]], counts: &[u64], limit: u64) -> Option<f64> {
    let k = table.len();
    let mut best: Option<f64> = None;
    for code in 0..4usize.pow(k as u32) {
        let choice: Vec<usize> = (0..k).map(|i| (code >> (2 * i)) & 3).collect();
        if total_bits(&choice, counts) <= limit {
            let o = objective(table, &choice);
            best = Some(best.map_or(o, |b: f64| b.min(o)));
        }
    }
    best
}

fn random_table(rng: &mut ChaCha8Rng, k: usize, monotone: bool) -> Vec<[f64; 4]> {
    (0..k)
        .map(|_| {
            let mut r = [0.0f64; 4];
            for v in &mut r {
                *v = rng.gen_range(0.0..10.0);
            }
            if monotone {
                r.sort_by(|a, b| b.total_cmp(a));
            }
            r
        })
        .collect()
}

#[test]
fn two_cluster_example() {
    let table = [[5.0, 3.0, 1.0, 0.5], [1.0, 0.95, 0.9, 0.85]];
    let choice = solve_table(&table, &[10, 10], &cap(2.5)).unwrap();
    assert_eq!(choice, vec![2, 0]);
    assert_eq!(objective(&table, &choice), 2.0);
    assert!(objective(&table, &choice) <= objective(&table, &[1, 1]));
}

#[test]
fn full_budget_takes_maximum_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let table = random_table(&mut rng, 6, true);
    let choice = solve_table(&table, &[3, 5, 7, 11, 13, 17], &cap(8.0)).unwrap();
    assert!(choice.iter().all(|&j| j == 3), "{choice:?}");
}

#[test]
fn matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let k = 1 + trial % 8;
        let table = random_table(&mut rng, k, trial % 2 == 0);
        let counts: Vec<u64> = (0..k).map(|_| rng.gen_range(1..50)).collect();
        let budget = cap(rng.gen_range(1.0..8.0));
        let total: u64 = counts.iter().sum();
        let limit = (budget.target_avg_bits * total as f64).floor() as u64;
        let choice = solve_table(&table, &counts, &budget).unwrap();
        assert!(total_bits(&choice, &counts) <= limit);
        let best = exhaustive(&table, &counts, limit).unwrap();
        let got = objective(&table, &choice);
        assert!((got - best).abs() <= 1e-12 * best.abs().max(1.0), "trial {trial}: {got} vs {best}");
    }
}

#[test]
fn dominates_uniform_assignments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [3, 12, 30, 60] {
        let table = random_table(&mut rng, k, false);
        let counts: Vec<u64> = (0..k).map(|_| rng.gen_range(1..500)).collect();
        for (j, &b) in BIT_WIDTHS.iter().enumerate() {
            let choice = solve_table(&table, &counts, &cap(b as f64)).unwrap();
            let total: u64 = counts.iter().sum();
            assert!(total_bits(&choice, &counts) <= b as u64 * total);
            assert!(objective(&table, &choice) <= objective(&table, &vec![j; k]));
        }
    }
}

#[test]
fn nearest_feasible_may_exceed_target() {
    // Equal counts: achievable averages are multiples of 1/2 of the width sums.
    let table = [[4.0, 2.0, 1.0, 0.0], [4.0, 2.0, 1.0, 0.0]];
    let strict = solve_table(&table, &[1, 1], &cap(2.9)).unwrap();
    assert!(total_bits(&strict, &[1, 1]) <= 5);
    let near = solve_table(&table, &[1, 1], &BudgetSpec { target_avg_bits: 2.9, hard_cap: false }).unwrap();
    assert_eq!(total_bits(&near, &[1, 1]), 6);
}

#[test]
fn ties_prefer_fewer_bits() {
    let table = [[1.0, 1.0, 1.0, 1.0]];
    assert_eq!(solve_table(&table, &[4], &cap(8.0)).unwrap(), vec![0]);
}

#[test]
fn rejects_infeasible_budgets() {
    let table = [[1.0, 1.0, 1.0, 1.0]];
    assert!(solve_table(&table, &[4], &cap(0.5)).is_err());
    assert!(solve_table(&table, &[4], &cap(9.0)).is_err());
}
