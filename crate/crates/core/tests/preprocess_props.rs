//! Normalization, component filtering, patching and reassembly properties.

mod common;

use common::largest_component;
use ndarray::Array2;
use proptest::prelude::*;
use synweather_core::preprocess::*;
use synweather_core::{NormState, RegionId, VariableId, WeatherField};

fn field_from(data: Array2<f32>, v: VariableId) -> WeatherField {
    WeatherField::new(data, RegionId::Conus, v, 0).unwrap()
}

fn blobby(n: usize) -> impl Strategy<Value = Array2<f32>> {
    (prop::collection::vec(0.0f32..1.0, n * n), 0.2f32..0.8)
        .prop_map(move |(v, density)| Array2::from_shape_vec((n, n), v.into_iter().map(|u| if u < density { 20.0 * u / density } else { 0.0 }).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn component_filter_matches_union_find(x in blobby(16), gamma1 in 0.0f32..15.0, gamma2 in 1usize..60) {
        prop_assert_eq!(has_large_component(x.view(), gamma1, gamma2), largest_component(&x, gamma1) >= gamma2);
    }

    #[test]
    fn normalize_preserves_order_and_range(v in prop::collection::vec(-10.0f32..90.0, 64), log in any::<bool>()) {
        let norm = if log { NormState::new(0.0, 5.0, true).unwrap() } else { NormState::new(0.0, 70.0, false).unwrap() };
        let data = Array2::from_shape_vec((8, 8), v.iter().map(|x| x.abs()).collect()).unwrap();
        let f = field_from(data.clone(), if log { VariableId::Precipitation } else { VariableId::Cr });
        let ys: Vec<f32> = normalize(&f, &norm).unwrap().data.iter().copied().collect();
        let xs: Vec<f32> = data.iter().copied().collect();
        prop_assert!(ys.iter().all(|y| (0.0..=1.0).contains(y)));
        for i in 0..xs.len() {
            for j in 0..xs.len() {
                if xs[i] < xs[j] {
                    prop_assert!(ys[i] <= ys[j]);
                }
            }
        }
    }

    #[test]
    fn denormalize_inverts_normalize_inside_range(v in prop::collection::vec(0.0f32..70.0, 16)) {
        let norm = NormState::new(0.0, 70.0, false).unwrap();
        let f = field_from(Array2::from_shape_vec((4, 4), v).unwrap(), VariableId::Cr);
        let back = denormalize(&normalize(&f, &norm).unwrap()).unwrap();
        for (a, b) in f.data.iter().zip(back.data.iter()) {
            prop_assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn extract_then_reassemble_is_identity_on_covered_pixels(h in 16usize..70, w in 16usize..70, window in 4usize..16, stride_frac in 1usize..4, seed in any::<u64>()) {
        let stride = (window / stride_frac).max(1);
        let data = Array2::from_shape_fn((h, w), |(r, c)| ((seed as usize ^ (r * 131 + c * 7)) % 997) as f32 * 0.1);
        let f = field_from(data.clone(), VariableId::Cr);
        let patches = extract_patches(&f, window, stride).unwrap();
        prop_assert_eq!(patches.len(), ((h - window) / stride + 1) * ((w - window) / stride + 1));
        let r = reassemble(&patches, (h, w)).unwrap();
        for ((a, b), c) in data.iter().zip(r.field.data.iter()).zip(r.coverage.iter()) {
            if *c {
                prop_assert!((a - b).abs() < 1e-6);
            } else {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }
}

#[test]
fn conus_grid_yields_24_patches() {
    assert_eq!(window_origins(550, 1175, 256, 128).unwrap().len(), 24);
    assert!(matches!(window_origins(200, 300, 256, 128), Err(synweather_core::Error::GridTooSmall { .. })));
}

#[test]
fn filter_judges_normalized_patches_on_physical_values() {
    let norm = NormState::new(0.0, 70.0, false).unwrap();
    let mut data = Array2::<f32>::zeros((32, 32));
    data.slice_mut(ndarray::s![0..25, 0..25]).fill(10.0);
    let f = normalize(&field_from(data, VariableId::Cr), &norm).unwrap();
    let t = FilterThresholds::for_variable(VariableId::Cr).unwrap();
    assert_eq!(filter_patches(extract_patches(&f, 32, 32).unwrap(), &t).len(), 1);
    let mwbt = field_from(Array2::zeros((32, 32)), VariableId::Mwbt);
    assert_eq!(filter_patches(extract_patches(&mwbt, 32, 32).unwrap(), &t).len(), 1);
}
