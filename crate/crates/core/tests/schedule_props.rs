//! Noise schedule, forward process and learning-rate schedule properties.

use proptest::prelude::*;
use synweather_autograd::Tensor;
use synweather_core::diffusion::{add_noise, build_schedule, ddim_timesteps, predict_x0};
use synweather_core::training::{lr_at, OptimConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreases(t in 2usize..2000, start in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let s = build_schedule(t, start, start + span).unwrap();
        prop_assert_eq!(s.beta(1), start);
        prop_assert_eq!(s.beta(t), start + span);
        for k in 1..=t {
            prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        }
    }

    #[test]
    fn x0_estimate_inverts_forward_process(z in prop::collection::vec(-3.0f64..3.0, 16), e in prop::collection::vec(-3.0f64..3.0, 16), t in 1usize..=1000) {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = Tensor::from_vec(&[1, 1, 4, 4], z);
        let eps = Tensor::from_vec(&[1, 1, 4, 4], e);
        let zt = add_noise(&z0, t, &eps, &s).unwrap();
        let back = predict_x0(&zt, &eps, s.alpha_bar(t));
        prop_assert!(back.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn ddim_grid_descends_from_t_to_one(steps in 1usize..100) {
        let ts = ddim_timesteps(1000, steps).unwrap();
        prop_assert_eq!(ts[0], 1000);
        prop_assert_eq!(*ts.last().unwrap(), if steps == 1 { 1000 } else { 1 });
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn lr_is_continuous_at_warmup_and_then_non_increasing(total in 20usize..5000, frac in 0.0f64..0.5) {
        let cfg = OptimConfig { warmup_steps: (total as f64 * frac) as usize, ..OptimConfig::for_steps(total) };
        let w = cfg.warmup_steps;
        if w > 0 {
            let before = lr_at(w - 1, &cfg).unwrap();
            prop_assert!((lr_at(w, &cfg).unwrap() - before) <= cfg.lr_max / w as f64 + 1e-15);
        }
        let mut prev = f64::INFINITY;
        for k in w..=total {
            let lr = lr_at(k, &cfg).unwrap();
            prop_assert!(lr <= prev + 1e-18);
            prop_assert!(lr >= cfg.lr_min - 1e-15 && lr <= cfg.lr_max + 1e-15);
            prev = lr;
        }
        prop_assert!(lr_at(total + 1, &cfg).is_err());
    }
}
