//! Per-sample gradient rows against one backward pass per sample, and row
//! sums against the full-batch gradient.

use dpmae::mae::{build_mae, init_params, patchify_batch, per_sample_mae_grads, random_mask, MaeConfig, MaskSpec};
use dpmae::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Largest elementwise difference relative to the largest magnitude.
fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn micro(depth: usize) -> MaeConfig {
    MaeConfig {
        encoder_depth: depth,
        decoder_depth: 1,
        ..MaeConfig::vip_micro()
    }
}

fn single_sample_grad(config: &MaeConfig, seed: u64, image: &Tensor, mask: &MaskSpec) -> Vec<f64> {
    let params = init_params(config, seed).unwrap();
    let batch = Tensor::stack(std::slice::from_ref(image)).unwrap();
    let patches = patchify_batch(&batch, config.patch_size).unwrap();
    let mut mg = build_mae(&params, &patches, std::slice::from_ref(mask)).unwrap();
    let loss = mg.graph.mean(mg.losses).unwrap();
    mg.graph.backward(loss).unwrap().flatten()
}

#[test]
fn mae_rows_match_single_sample_backward() {
    for (seed, batch) in [(0u64, 1usize), (1, 3), (2, 8)] {
        let config = micro(2);
        let params = init_params(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = random_tensor(&mut rng, &[batch, 3, 32, 32]);
        let masks: Vec<MaskSpec> = (0..batch)
            .map(|i| random_mask(config.num_patches(), config.mask_ratio, 100 + i as u64).unwrap())
            .collect();
        let patches = patchify_batch(&images, config.patch_size).unwrap();
        let (rows, losses) = per_sample_mae_grads(&params, &patches, &masks, 8).unwrap();
        assert_eq!((rows.batch_size(), losses.len()), (batch, batch));
        for i in 0..batch {
            let oracle = single_sample_grad(&config, seed, &images.index_outer(i), &masks[i]);
            let e = rel_diff(rows.row(i), &oracle);
            assert!(e < 1e-6, "seed {seed} batch {batch} row {i}: rel diff {e}");
        }

        let mut mg = build_mae(&params, &patches, &masks).unwrap();
        let mean = mg.graph.mean(mg.losses).unwrap();
        let total = mg.graph.scale(mean, batch as f64).unwrap();
        let full = mg.graph.backward(total).unwrap().flatten();
        let e = rel_diff(&rows.sum_rows(), &full);
        assert!(e < 1e-9, "seed {seed}: row sum vs full batch {e}");
    }
}

#[test]
fn chunked_rows_equal_unchunked() {
    let config = micro(1);
    let params = init_params(&config, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random_tensor(&mut rng, &[5, 3, 32, 32]);
    let masks: Vec<MaskSpec> = (0..5).map(|i| random_mask(64, 0.75, i).unwrap()).collect();
    let patches = patchify_batch(&images, 4).unwrap();
    let (a, _) = per_sample_mae_grads(&params, &patches, &masks, 5).unwrap();
    let (b, _) = per_sample_mae_grads(&params, &patches, &masks, 2).unwrap();
    assert_eq!(a.data(), b.data());
}

/// A small separable graph using every per-sample-safe op.
#[test]
fn generic_graph_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random_tensor(&mut rng, &[4, 4]);
    let gamma = random_tensor(&mut rng, &[4]);
    let beta = random_tensor(&mut rng, &[4]);
    let x = random_tensor(&mut rng, &[6, 3, 4]);
    let labels: Vec<usize> = (0..6).map(|i| i % 4).collect();

    let build = |g: &mut Graph, x: Tensor| {
        let wp = g.param("w", w.clone()).unwrap();
        let gp = g.param("gamma", gamma.clone()).unwrap();
        let bp = g.param("beta", beta.clone()).unwrap();
        let xi = g.input(x).unwrap();
        let h = g.matmul(xi, wp).unwrap();
        let h = g.layer_norm(h, gp, bp).unwrap();
        let h = g.gelu(h).unwrap();
        let ht = g.transpose(h, 1, 2).unwrap();
        let s = g.matmul(h, ht).unwrap();
        let a = g.softmax(s).unwrap();
        let h = g.matmul(a, h).unwrap();
        let pooled = g.transpose(h, 1, 2).unwrap();
        g.mean(pooled).unwrap()
    };

    let mut g = Graph::new();
    let pooled = build(&mut g, x.clone());
    let losses = g.cross_entropy(pooled, &labels).unwrap();
    let rows = g.per_sample_backward(losses).unwrap();
    for i in 0..6 {
        let mut gi = Graph::new();
        let one = Tensor::stack(&[x.index_outer(i)]).unwrap();
        let p = build(&mut gi, one);
        let l = gi.cross_entropy(p, &labels[i..=i]).unwrap();
        let l = gi.mean(l).unwrap();
        let oracle = gi.backward(l).unwrap().flatten();
        let e = rel_diff(rows.row(i), &oracle);
        assert!(e < 1e-6, "row {i}: {e}");
    }
}
