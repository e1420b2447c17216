mod common;

use common::{argmin_code_oracle, scale_oracle};
use mpq_core::model::{cluster_layout, ModelSpec};
use mpq_core::quant::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn nearest_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &bits in &BIT_WIDTHS {
        for _ in 0..1000 {
            let alpha = rng.gen_range(0.01..2.0);
            let range = alpha * (max_code(bits) as f64 + 2.0);
            let theta = rng.gen_range(-range..range);
            let table = QuantTable::new(bits, alpha).unwrap();
            assert_eq!(nearest_code(theta, &table), argmin_code_oracle(theta, bits, alpha), "{theta} {bits} {alpha}");
        }
    }
}

#[test]
fn exact_midpoints_follow_tie_rule() {
    for &bits in &BIT_WIDTHS {
        let table = QuantTable::new(bits, 0.5).unwrap();
        let m = max_code(bits) as i32;
        for k in -m..m {
            let theta = 0.5 * (k as f64 + 0.5);
            assert_eq!(nearest_code(theta, &table), argmin_code_oracle(theta, bits, 0.5));
        }
    }
}

#[test]
fn fit_scale_matches_least_squares_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let v: Vec<i8> = (0..100).map(|_| rng.gen_range(-7..=7)).collect();
    let a = fit_scale(&x, &v).unwrap();
    let o = scale_oracle(&x, &v);
    assert!((a - o).abs() <= 1e-10 * o.abs().max(1e-300), "{a} vs {o}");
}

#[test]
fn size_ratios() {
    let layout = cluster_layout(&ModelSpec::lstm(64, 32, 2));
    let total = layout.total_count();

    let full = PrecisionAssignment { entries: layout.clusters.iter().map(|c| (c.id.clone(), 32)).collect() };
    assert_eq!(model_size_bytes(&full, &layout).payload_ratio(), 1.0);

    // Half the parameters at one bit, half at eight.
    let mut acc = 0;
    let mut bits = Vec::new();
    for c in &layout.clusters {
        bits.push(if acc < total / 2 { 1 } else { 8 });
        acc += c.count();
    }
    let a = PrecisionAssignment::from_bits(&layout, &bits).unwrap();
    let ones: usize = layout.clusters.iter().zip(&bits).filter(|(_, b)| **b == 1).map(|(c, _)| c.count()).sum();
    let expected_avg = (ones as f64 + 8.0 * (total - ones) as f64) / total as f64;
    assert!((a.avg_bits(&layout) - expected_avg).abs() < 1e-12);
    // Independent byte count.
    let mut payload = 0usize;
    for (c, b) in layout.clusters.iter().zip(&bits) {
        payload += (c.count() * *b as usize).div_ceil(8);
    }
    let size = model_size_bytes(&a, &layout);
    assert_eq!(size.payload_bytes, payload);
    assert!((size.payload_ratio() - 32.0 / expected_avg).abs() / (32.0 / expected_avg) < 1e-3);
}

fn bits_strategy() -> impl Strategy<Value = u8> {
    prop::sample::select(BIT_WIDTHS.to_vec())
}

fn codes_strategy() -> impl Strategy<Value = (u8, Vec<i8>)> {
    bits_strategy().prop_flat_map(|bits| {
        let m = max_code(bits);
        let code = if bits == 1 { prop::sample::select(vec![-1i8, 1]).boxed() } else { (-m..=m).boxed() };
        (Just(bits), prop::collection::vec(code, 0..300))
    })
}

proptest! {
    #[test]
    fn pack_round_trip((bits, codes) in codes_strategy()) {
        let packed = pack_codes(&codes, bits).unwrap();
        prop_assert_eq!(packed.len(), packed_len(bits, codes.len()));
        prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
    }

    #[test]
    fn requantizing_dequantized_codes_is_identity((bits, codes) in codes_strategy(), alpha in 1e-3f64..10.0) {
        let table = QuantTable::new(bits, alpha).unwrap();
        let back = quantize_nearest(&dequantize(&codes, alpha), &table).unwrap();
        prop_assert_eq!(back, codes);
    }

    #[test]
    fn in_range_error_is_at_most_half_a_step(bits in prop::sample::select(vec![2u8, 4, 8]), alpha in 1e-3f64..10.0, u in -1.0f64..1.0) {
        let table = QuantTable::new(bits, alpha).unwrap();
        let theta = u * alpha * max_code(bits) as f64;
        let c = nearest_code(theta, &table);
        prop_assert!((theta - alpha * c as f64).abs() <= alpha / 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn more_bits_never_increase_error(values in prop::collection::vec(-5.0f64..5.0, 1..50), alpha in 1e-2f64..2.0) {
        let mut prev = f64::INFINITY;
        for &bits in &BIT_WIDTHS {
            let table = QuantTable::new(bits, alpha).unwrap();
            let codes = quantize_nearest(&values, &table).unwrap();
            let err = quant_error(&values, &codes, alpha);
            prop_assert!(err <= prev);
            prev = err;
        }
    }

    #[test]
    fn fit_scale_is_least_squares(x in prop::collection::vec(-3.0f64..3.0, 1..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<i8> = x.iter().map(|_| rng.gen_range(-3..=3)).collect();
        prop_assume!(v.iter().any(|&c| c != 0));
        let a = fit_scale(&x, &v).unwrap();
        let e = quant_error(&x, &v, a);
        for d in [1e-3, -1e-3] {
            prop_assert!(e <= quant_error(&x, &v, a + d) + 1e-12);
        }
    }
}
