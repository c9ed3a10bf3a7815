//! Metric properties checked against brute-force oracles.

use ndarray::Array2;
use proptest::prelude::*;
use synweather_core::metrics::*;

fn field(n: usize) -> impl Strategy<Value = Array2<f32>> {
    prop::collection::vec(prop_oneof![Just(0.0f32), 0.0f32..60.0], n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn oracle_counts(p: &Array2<f32>, g: &Array2<f32>, t: f32) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (a, b) in p.iter().zip(g.iter()) {
        let i = match (*a > t, *b > t) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[i] += 1;
    }
    c
}

fn oracle_max_pool(x: &Array2<f32>, k: usize) -> Array2<f32> {
    let (h, w) = (x.nrows() / k, x.ncols() / k);
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut m = f32::NEG_INFINITY;
            for i in 0..k {
                for j in 0..k {
                    m = m.max(x[[r * k + i, c * k + j]]);
                }
            }
            out[[r, c]] = m;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn counts_and_csi_match_brute_force(p in field(16), g in field(16), t in prop::sample::select(vec![2.0f32, 5.0, 15.0, 25.0, 35.0, 40.0])) {
        let c = contingency_arrays(p.view(), g.view(), t).unwrap();
        let o = oracle_counts(&p, &g, t);
        prop_assert_eq!([c.tp, c.fp, c.r#fn, c.tn], o);
        prop_assert_eq!(c.total(), 256);
        let denom = o[0] + o[1] + o[2];
        match csi(&c) {
            None => prop_assert_eq!(denom, 0),
            Some(v) => prop_assert!((v - o[0] as f64 / denom as f64).abs() < 1e-12),
        }
    }

    #[test]
    fn csi_invariant_under_exact_rescaling(p in field(12), g in field(12), t in 1.0f32..50.0, k in 0i32..4) {
        let s = 2f32.powi(k);
        let a = contingency_arrays(p.view(), g.view(), t).unwrap();
        let b = contingency_arrays(p.mapv(|x| x * s).view(), g.mapv(|x| x * s).view(), t * s).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pooling_matches_block_max_oracle(p in field(16), g in field(16), k in prop::sample::select(vec![1usize, 2, 4, 8, 16])) {
        prop_assert_eq!(max_pool(p.view(), k), oracle_max_pool(&p, k));
        let pooled = pooled_contingency(p.view(), g.view(), 25.0, k).unwrap();
        let direct = contingency_arrays(oracle_max_pool(&p, k).view(), oracle_max_pool(&g, k).view(), 25.0).unwrap();
        prop_assert_eq!(pooled, direct);
    }

    #[test]
    fn pool_one_is_bitwise_plain_csi(p in field(16), g in field(16), t in 0.0f32..60.0) {
        let a = pooled_csi_arrays(p.view(), g.view(), t, 1).unwrap();
        let b = csi(&contingency_arrays(p.view(), g.view(), t).unwrap());
        prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }

    #[test]
    fn rmse_and_psnr_match_formulas(p in field(16), g in field(16)) {
        let mse: f64 = p.iter().zip(g.iter()).map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2)).sum::<f64>() / 256.0;
        prop_assert!((rmse_arrays(p.view(), g.view()).unwrap() - mse.sqrt()).abs() < 1e-9);
        let psnr = psnr_arrays(p.view(), g.view(), 70.0).unwrap();
        if mse > 0.0 {
            prop_assert!((psnr - (20.0 * 70f64.log10() - 10.0 * mse.log10())).abs() < 1e-9);
        } else {
            prop_assert!(psnr.is_infinite());
        }
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_identity(p in field(16), g in field(16)) {
        let ab = ssim_arrays(p.view(), g.view(), 70.0).unwrap();
        let ba = ssim_arrays(g.view(), p.view(), 70.0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ssim_arrays(p.view(), p.view(), 70.0).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ssim_rejects_fields_smaller_than_window() {
    let a = Array2::<f32>::zeros((10, 10));
    assert!(ssim_arrays(a.view(), a.view(), 1.0).is_err());
}

#[test]
fn pool_zero_is_rejected() {
    let a = Array2::<f32>::zeros((4, 4));
    assert!(pooled_csi_arrays(a.view(), a.view(), 1.0, 0).is_err());
}
