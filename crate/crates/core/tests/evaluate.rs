//! Linear probe, K-shot selection and few-shot fine-tuning.

use dpmae::data::ImageSet;
use dpmae::evaluate::{few_shot_finetune, linear_probe, probe_features, select_k_shot, EvalError, FewShotSpec};
use dpmae::mae::{init_params, MaeConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_blobs(n: usize, dim: usize, classes: usize, spread: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let center = if j % classes == c { 4.0 } else { 0.0 };
            x.push(center + spread * (rng.gen::<f64>() - 0.5));
        }
        y.push(c);
    }
    (x, y)
}

#[test]
fn separable_features_probe_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (tx, ty) = gaussian_blobs(200, 12, 4, 1.0, &mut rng);
    let (ex, ey) = gaussian_blobs(100, 12, 4, 1.0, &mut rng);
    let r = probe_features(&tx, &ty, &ex, &ey, 12, 0).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!((r.classes, r.train_count, r.eval_count, r.feature_dim), (4, 200, 100, 12));
}

#[test]
fn permuted_labels_give_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (tx, mut ty) = gaussian_blobs(1000, 20, 10, 1.0, &mut rng);
    let (ex, mut ey) = gaussian_blobs(2000, 20, 10, 1.0, &mut rng);
    ty.shuffle(&mut rng);
    ey.shuffle(&mut rng);
    let r = probe_features(&tx, &ty, &ex, &ey, 20, 0).unwrap();
    assert!((r.accuracy - 0.1).abs() <= 0.05, "accuracy {}", r.accuracy);
}

#[test]
fn probe_input_errors() {
    let x = vec![0.0; 4];
    assert!(matches!(probe_features(&x, &[0, 1], &x, &[0, 2], 2, 0), Err(EvalError::Probe(_))));
    assert!(matches!(probe_features(&x, &[0, 1], &x, &[0], 2, 0), Err(EvalError::Probe(_))));
    assert!(probe_features(&[], &[], &x, &[0, 1], 2, 0).is_err());
}

#[test]
fn k_shot_selection() {
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let a = select_k_shot(&labels, 3, 7).unwrap();
    assert_eq!(a, select_k_shot(&labels, 3, 7).unwrap());
    assert_eq!(a.len(), 15);
    for (c, chunk) in a.chunks(3).enumerate() {
        assert!(chunk.iter().all(|&i| labels[i] == c));
        assert!(chunk.windows(2).all(|w| w[0] < w[1]));
    }
    assert_ne!(a, select_k_shot(&labels, 3, 8).unwrap());

    // every sample of every class
    let all = select_k_shot(&labels, 10, 7).unwrap();
    let mut sorted = all.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());

    let err = select_k_shot(&labels[..42], 9, 7).unwrap_err();
    assert!(err.to_string().contains("class 2 has 8 samples, fewer than the 9 shots"), "{err}");
    assert!(matches!(select_k_shot(&labels, 0, 7), Err(EvalError::Spec(_))));
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

/// Two classes: dark and bright images with pixel noise.
fn brightness_task(n: usize, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let base = if c == 0 { 40.0 } else { 200.0 };
        pixels.extend((0..3 * 64).map(|_| (base + rng.gen_range(-30.0..30.0)) as u8));
        labels.push(c);
    }
    ImageSet::new(8, 3, pixels, Some(labels)).unwrap()
}

#[test]
fn probe_leaves_encoder_untouched() {
    let params = init_params(&tiny_model(), 3).unwrap();
    let before = params.digest();
    let r = linear_probe(&params, &brightness_task(40, 1), &brightness_task(20, 2), 0).unwrap();
    assert_eq!(params.digest(), before);
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn finetune_learns_easy_task_and_is_reproducible() {
    let params = init_params(&tiny_model(), 4).unwrap();
    let before = params.digest();
    let spec = FewShotSpec {
        shots: 5,
        epochs: 5,
        batch_size: 4,
        ..FewShotSpec::default()
    };
    let (train, eval) = (brightness_task(20, 5), brightness_task(20, 6));
    let (a, tuned_a) = few_shot_finetune(&params, &spec, &train, &eval, 11).unwrap();
    let (b, tuned_b) = few_shot_finetune(&params, &spec, &train, &eval, 11).unwrap();
    assert_eq!(params.digest(), before);
    assert_eq!(a, b);
    assert_eq!(tuned_a.digest(), tuned_b.digest());
    assert_ne!(tuned_a.digest(), before);
    assert_eq!(a.accuracy, 1.0);
    assert_eq!(a.train_count, 10);
}

#[test]
fn finetune_rejects_bad_specs() {
    let params = init_params(&tiny_model(), 4).unwrap();
    let data = brightness_task(8, 1);
    for spec in [
        FewShotSpec { epochs: 0, ..FewShotSpec::default() },
        FewShotSpec { batch_size: 0, ..FewShotSpec::default() },
        FewShotSpec { shots: 5, ..FewShotSpec::default() },
    ] {
        assert!(matches!(few_shot_finetune(&params, &spec, &data, &data, 0), Err(EvalError::Spec(_))));
    }
}
