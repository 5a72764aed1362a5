//! Clipping, noise, optimizer and trainer properties of the DP step.

use dpmae::accountant::{default_alpha_grid, dp_guarantee_with_order, MechanismParams};
use dpmae::data::{poisson_sample, synthetic_images, ImageSet};
use dpmae::dp::{
    clip_in_place, clip_per_sample, dp_adamw_step, dp_sgd_step, noisy_mean, standard_noise, BatchPlan, DpOptimConfig,
    LrSchedule, OptimState, OptimizerKind, Trainer, TrainerState,
};
use dpmae::mae::{init_params, MaeConfig};
use dpmae::tensor::{layout_of, PerSampleGrads};
use proptest::prelude::*;

fn grads(rows: &[Vec<f64>]) -> PerSampleGrads {
    let dim = rows[0].len();
    let shape = [dim];
    let layout = layout_of(std::iter::once(("w", &shape[..])));
    PerSampleGrads::new(rows.len(), layout, rows.concat()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 1usize..20).prop_flat_map(|(b, d)| {
        prop::collection::vec(prop::collection::vec(-1e3f64..1e3, d), b)
    })
}

proptest! {
    #[test]
    fn clipped_norms_bounded(rows in rows_strategy(), c in 1e-4f64..1e2) {
        let g = clip_per_sample(&grads(&rows), c);
        for r in g.rows() {
            prop_assert!(norm(r) <= c * (1.0 + 1e-6));
        }
    }

    #[test]
    fn clipping_is_idempotent(rows in rows_strategy(), c in 1e-4f64..1e2) {
        let once = clip_per_sample(&grads(&rows), c);
        let twice = clip_per_sample(&once, c);
        for (a, b) in once.rows().zip(twice.rows()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn clipping_saturates_under_scaling(rows in rows_strategy(), c in 1e-4f64..1e2, scale in 1f64..1e3) {
        // push every row to at least C first
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .filter(|r| norm(r) > 0.0)
            .map(|r| {
                let f = (c / norm(&r)).max(1.0);
                r.iter().map(|v| v * f).collect()
            })
            .collect();
        prop_assume!(!rows.is_empty());
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let a = clip_per_sample(&grads(&rows), c);
        let b = clip_per_sample(&grads(&scaled), c);
        for (x, y) in a.rows().zip(b.rows()) {
            for (u, v) in x.iter().zip(y) {
                prop_assert!((u - v).abs() <= 1e-12 * c);
            }
        }
    }

    #[test]
    fn clipping_matches_loop_oracle(rows in rows_strategy(), c in 1e-4f64..1e2) {
        let mut g = grads(&rows);
        let norms = clip_in_place(&mut g, c);
        for (i, row) in rows.iter().enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert_eq!(norms[i], n);
            let factor = if n > c { c / n } else { 1.0 };
            for (j, x) in row.iter().enumerate() {
                let expected = x * factor;
                prop_assert!((g.row(i)[j] - expected).abs() <= 1e-12 * expected.abs().max(1e-300));
            }
        }
    }
}

#[test]
fn clipping_saturates_large_rows_and_keeps_small_ones() {
    let rows = vec![vec![3.0, 4.0], vec![0.3, 0.4], vec![30.0, -40.0]];
    let g = clip_per_sample(&grads(&rows), 1.0);
    assert!((norm(g.row(0)) - 1.0).abs() < 1e-15);
    assert_eq!(g.row(1), &[0.3, 0.4]);
    assert!((norm(g.row(2)) - 1.0).abs() < 1e-15);
    // direction is kept
    assert!((g.row(2)[0] / g.row(2)[1] + 0.75).abs() < 1e-15);
}

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[test]
fn noise_std_is_sigma_times_clip() {
    let n = 100_000;
    let z = standard_noise(11, 3, n);
    let zero = vec![0.0; n];
    let (sigma, c) = (1.3, 0.1);
    let noisy = noisy_mean(&zero, sigma, c, 1.0, &z).unwrap();
    let s = std_dev(&noisy);
    assert!((s / (sigma * c) - 1.0).abs() < 0.02, "std {s}, want {}", sigma * c);

    let doubled = noisy_mean(&zero, sigma, 2.0 * c, 1.0, &z).unwrap();
    let s2 = std_dev(&doubled);
    assert!((s2 / s - 2.0).abs() < 1e-12, "doubling C gave ratio {}", s2 / s);
}

#[test]
fn noise_is_keyed_by_seed_and_step() {
    assert_eq!(standard_noise(1, 2, 16), standard_noise(1, 2, 16));
    assert_ne!(standard_noise(1, 2, 16), standard_noise(1, 3, 16));
    assert_ne!(standard_noise(1, 2, 16), standard_noise(2, 2, 16));
}

fn optim(kind: OptimizerKind, lr: f64, eps: f64) -> DpOptimConfig {
    DpOptimConfig {
        clip_norm: 1.0,
        noise_multiplier: 0.0,
        schedule: LrSchedule {
            base_lr: lr,
            warmup_steps: 0,
            floor_fraction: 1.0,
        },
        optimizer: kind,
        beta1: 0.9,
        beta2: 0.95,
        weight_decay: 0.005,
        eps,
        total_steps: 1,
        expected_batch_size: 1.0,
    }
}

#[test]
fn adamw_first_step() {
    // the first bias-corrected step moves by exactly lr * sign(g) when eps = 0
    let cfg = optim(OptimizerKind::Adamw, 0.1, 0.0);
    let mut p = [1.0];
    let mut st = OptimState::new(1);
    dp_adamw_step(&mut p, &mut st, &[0.5], &cfg, 0.1);
    assert!((p[0] - 0.8995).abs() < 1e-12, "{}", p[0]);

    // with the default eps the denominator picks up 1e-8
    let cfg = optim(OptimizerKind::Adamw, 0.1, 1e-8);
    let mut p = [1.0];
    let mut st = OptimState::new(1);
    dp_adamw_step(&mut p, &mut st, &[0.5], &cfg, 0.1);
    let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.005);
    assert!((p[0] - expected).abs() < 1e-15);
    assert!((p[0] - 0.8995).abs() < 1e-8);
}

#[test]
fn sgd_step_and_zero_rate() {
    let mut p = [1.0];
    dp_sgd_step(&mut p, &[0.5], 0.1);
    assert!((p[0] - 0.95).abs() < 1e-15);
    let mut q = [1.0, -2.0];
    dp_sgd_step(&mut q, &[0.5, 7.0], 0.0);
    assert_eq!(q, [1.0, -2.0]);
}

fn tiny_model() -> MaeConfig {
    MaeConfig {
        image_size: 8,
        encoder_depth: 1,
        encoder_width: 16,
        encoder_heads: 2,
        decoder_depth: 1,
        decoder_width: 8,
        decoder_heads: 2,
        ..MaeConfig::vip_micro()
    }
}

fn trainer(data: &ImageSet, cfg: DpOptimConfig, q: f64, private: bool, seed: u64) -> Trainer {
    let params = init_params(&tiny_model(), 5).unwrap();
    let dim = params.num_params();
    let state = TrainerState {
        params,
        optim: OptimState::new(dim),
    };
    Trainer::new(state, cfg, BatchPlan::Poisson { q }, private, seed, data.len(), 1e-5).unwrap()
}

fn dp_cfg(n: usize, q: f64, sigma: f64, clip: f64, kind: OptimizerKind, steps: u64) -> DpOptimConfig {
    DpOptimConfig {
        clip_norm: clip,
        noise_multiplier: sigma,
        total_steps: steps,
        expected_batch_size: n as f64 * q,
        schedule: LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 0,
            floor_fraction: 0.1,
        },
        ..optim(kind, 1e-3, 1e-8)
    }
}

#[test]
fn degenerate_private_step_equals_non_private() {
    let data = synthetic_images(12, 8, 3).unwrap();
    let (n, q) = (12, 0.5);
    let mut private = trainer(&data, dp_cfg(n, q, 0.0, 1e12, OptimizerKind::Adamw, 4), q, true, 9);
    let mut plain = trainer(&data, dp_cfg(n, q, 0.0, 1e12, OptimizerKind::Adamw, 4), q, false, 9);
    for _ in 0..4 {
        let a = private.step(&data).unwrap();
        let b = plain.step(&data).unwrap();
        assert_eq!(a.realized_batch, b.realized_batch);
        assert_eq!(a.clipped_fraction, 0.0);
        assert_eq!(a.noise_draws, 1);
        assert_eq!(b.noise_draws, 0);
    }
    assert_eq!(private.params().flatten(), plain.params().flatten());
    assert_eq!(private.state().optim, plain.state().optim);
}

#[test]
fn empty_batch_update_is_pure_noise() {
    let data = synthetic_images(2, 8, 4).unwrap();
    let (n, q, sigma, clip, seed) = (2, 1e-3, 0.7, 0.1, 21);
    assert!(poisson_sample(n, q, seed, 0).unwrap().is_empty());
    let cfg = dp_cfg(n, q, sigma, clip, OptimizerKind::Sgd, 1);
    let lr = cfg.schedule.lr_at(0, 1);
    let mut t = trainer(&data, cfg, q, true, seed);
    let before = t.params().flatten();
    let report = t.step(&data).unwrap();
    assert_eq!(report.realized_batch, 0);
    assert!(report.loss_mean.is_nan());
    let z = standard_noise(seed, 0, before.len());
    let after = t.params().flatten();
    for ((a, b), z) in after.iter().zip(&before).zip(&z) {
        let expected = b - lr * sigma * clip * z / (n as f64 * q);
        assert!((a - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}

#[test]
fn realized_budget_matches_accountant() {
    let data = synthetic_images(16, 8, 6).unwrap();
    let (n, q, sigma) = (16, 0.25, 1.1);
    let mut t = trainer(&data, dp_cfg(n, q, sigma, 0.1, OptimizerKind::Adamw, 5), q, true, 2);
    assert!(t.realized_budget().unwrap().is_none());
    let mut last = 0.0;
    for _ in 0..3 {
        let r = t.step(&data).unwrap();
        assert!(r.epsilon >= last);
        last = r.epsilon;
    }
    let (budget, alpha) = t.realized_budget().unwrap().unwrap();
    let (want, want_alpha) =
        dp_guarantee_with_order(&MechanismParams::new(q, sigma, 3).unwrap(), 1e-5, &default_alpha_grid()).unwrap();
    assert_eq!(budget, want);
    assert_eq!(alpha, want_alpha);
    assert!((last - budget.epsilon).abs() <= 1e-9 * budget.epsilon);
}

#[test]
fn steps_are_reproducible() {
    let data = synthetic_images(10, 8, 8).unwrap();
    let run = || {
        let mut t = trainer(&data, dp_cfg(10, 0.4, 1.0, 0.1, OptimizerKind::Adamw, 3), 0.4, true, 17);
        let reports: Vec<_> = (0..3).map(|_| t.step(&data).unwrap().csv_line()).collect();
        (reports, t.params().flatten())
    };
    assert_eq!(run(), run());
}
