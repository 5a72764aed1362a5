//! Downstream evaluation: linear probing of frozen pooled features and
//! K-shot fine-tuning of the whole encoder with a linear head.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, ImageSet};
use crate::dp::{dp_adamw_step, DpOptimConfig, LrSchedule, OptimState, OptimizerKind};
use crate::mae::{build_encoder, encode_features_batch, MaeError, MaeParams};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

const FEATURE_CHUNK: usize = 16;
const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 20_000;
const PROBE_L2: f64 = 1e-3;
const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("probe error: {0}")]
    Probe(String),
    #[error("few-shot spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] MaeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classes: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSpec {
    pub shots: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            shots: 10,
            epochs: 10,
            batch_size: 20,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_steps: 5,
        }
    }
}

/// One comma-separated evaluation log record: run id, task, K (or
/// `probe`), accuracy, seed.
pub fn eval_log_line(run_id: &str, task: &str, shots: Option<usize>, accuracy: f64, seed: u64) -> String {
    let k = shots.map_or_else(|| "probe".to_string(), |k| k.to_string());
    format!("{run_id},{task},{k},{},{seed}", crate::numfmt::precise(accuracy))
}

pub const EVAL_LOG_HEADER: &str = "run_id,task,k,accuracy,seed";

fn labels_of(set: &ImageSet, what: &str) -> Result<Vec<usize>, EvalError> {
    set.labels()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| EvalError::Probe(format!("{what} set has no labels")))
}

fn check_classes(train: &[usize], eval: &[usize]) -> Result<usize, EvalError> {
    let classes = train.iter().chain(eval).max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    for &l in train {
        seen[l] = true;
    }
    if let Some(&missing) = eval.iter().find(|&&l| !seen[l]) {
        return Err(EvalError::Probe(format!(
            "class {missing} appears in the eval set but not in the train set"
        )));
    }
    Ok(classes)
}

/// Multinomial logistic regression on fixed features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub dim: usize,
    pub classes: usize,
    /// `dim x classes`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weight[i * self.classes..(i + 1) * self.classes];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

/// Mean cross-entropy plus `l2/2 * ||W||^2`, and its gradient.
fn probe_objective(head: &LinearHead, x: &[f64], y: &[usize], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (d, k) = (head.dim, head.classes);
    let n = y.len();
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut loss = 0.0;
    for (row, &label) in x.chunks(d).zip(y) {
        let mut z = head.logits(row);
        log_softmax_in_place(&mut z);
        loss -= z[label];
        let mut p: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        p[label] -= 1.0;
        for (i, &xi) in row.iter().enumerate() {
            let g = &mut gw[i * k..(i + 1) * k];
            for (gj, pj) in g.iter_mut().zip(&p) {
                *gj += xi * pj;
            }
        }
        for (gj, pj) in gb.iter_mut().zip(&p) {
            *gj += pj;
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    loss += 0.5 * l2 * head.weight.iter().map(|w| w * w).sum::<f64>();
    for (g, w) in gw.iter_mut().zip(&head.weight) {
        *g = *g * inv + l2 * w;
    }
    for g in gb.iter_mut() {
        *g *= inv;
    }
    (loss, gw, gb)
}

/// Largest eigenvalue of `[X 1]^T [X 1] / n` by power iteration.
fn gram_spectral_norm(x: &[f64], dim: usize) -> f64 {
    let n = (x.len() / dim) as f64;
    let mut v = vec![1.0; dim + 1];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let mut w = vec![0.0; dim + 1];
        for row in x.chunks(dim) {
            let dot = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[dim];
            for (wi, ri) in w.iter_mut().zip(row) {
                *wi += dot * ri;
            }
            w[dim] += dot;
        }
        w.iter_mut().for_each(|a| *a /= n);
        let next = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        v = w;
        if (next - lambda).abs() <= 1e-9 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Full-batch accelerated gradient descent with the fixed step `1 / L`,
/// where `L` bounds the objective's curvature (half the feature Gram norm
/// for the softmax part plus the L2 weight). Momentum restarts whenever the
/// objective rises. Stops when the relative decrease of the objective falls
/// below `1e-6`.
pub fn fit_logistic(x: &[f64], y: &[usize], dim: usize, classes: usize) -> LinearHead {
    let zero = LinearHead {
        dim,
        classes,
        weight: vec![0.0; dim * classes],
        bias: vec![0.0; classes],
    };
    let lr = 1.0 / (0.5 * gram_spectral_norm(x, dim) + PROBE_L2);
    let mut head = zero.clone();
    let mut prev = zero.clone();
    let mut loss = probe_objective(&head, x, y, PROBE_L2).0;
    let mut k = 0.0f64;
    for _ in 0..PROBE_MAX_ITERS {
        let beta = k / (k + 3.0);
        let mut look = head.clone();
        for (l, (h, p)) in look.weight.iter_mut().zip(head.weight.iter().zip(&prev.weight)) {
            *l = h + beta * (h - p);
        }
        for (l, (h, p)) in look.bias.iter_mut().zip(head.bias.iter().zip(&prev.bias)) {
            *l = h + beta * (h - p);
        }
        let (_, gw, gb) = probe_objective(&look, x, y, PROBE_L2);
        for (w, g) in look.weight.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in look.bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
        let next = probe_objective(&look, x, y, PROBE_L2).0;
        if next > loss {
            // restart from the current iterate without momentum
            prev = head.clone();
            k = 0.0;
            continue;
        }
        let rel = (loss - next) / loss.abs().max(f64::MIN_POSITIVE);
        prev = std::mem::replace(&mut head, look);
        loss = next;
        k += 1.0;
        if rel < PROBE_TOL {
            break;
        }
    }
    head
}

/// Per-feature mean and standard deviation of `n x d` features.
pub fn standardizer(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

fn standardize(x: &mut [f64], mean: &[f64], std: &[f64]) {
    let d = mean.len();
    for row in x.chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

/// Probes already-extracted features: standardizes with train statistics,
/// fits the logistic head and reports eval accuracy.
pub fn probe_features(
    train_x: &[f64],
    train_y: &[usize],
    eval_x: &[f64],
    eval_y: &[usize],
    dim: usize,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    if train_y.is_empty() || eval_y.is_empty() {
        return Err(EvalError::Probe("train and eval sets must be non-empty".into()));
    }
    if train_x.len() != train_y.len() * dim || eval_x.len() != eval_y.len() * dim {
        return Err(EvalError::Probe("feature and label counts disagree".into()));
    }
    let classes = check_classes(train_y, eval_y)?;
    let (mean, std) = standardizer(train_x, dim);
    let mut tx = train_x.to_vec();
    let mut ex = eval_x.to_vec();
    standardize(&mut tx, &mean, &std);
    standardize(&mut ex, &mean, &std);
    let head = fit_logistic(&tx, train_y, dim, classes);
    let correct = ex
        .chunks(dim)
        .zip(eval_y)
        .filter(|(row, &y)| head.predict(row) == y)
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / eval_y.len() as f64,
        classes,
        train_count: train_y.len(),
        eval_count: eval_y.len(),
        feature_dim: dim,
        seed,
    })
}

/// Linear probe on pooled features of a frozen encoder.
pub fn linear_probe(params: &MaeParams, train: &ImageSet, eval: &ImageSet, seed: u64) -> Result<ProbeResult, EvalError> {
    let train_y = labels_of(train, "train")?;
    let eval_y = labels_of(eval, "eval")?;
    check_classes(&train_y, &eval_y)?;
    let d = params.config().latent_dim();
    let all = |s: &ImageSet| (0..s.len()).collect::<Vec<_>>();
    let tx = encode_features_batch(params, &train.fetch(&all(train))?, FEATURE_CHUNK)?;
    let ex = encode_features_batch(params, &eval.fetch(&all(eval))?, FEATURE_CHUNK)?;
    probe_features(tx.data(), &train_y, ex.data(), &eval_y, d, seed)
}

/// `shots` indices per class, drawn without replacement from a stream keyed
/// by `(seed, class)`, in class order.
pub fn select_k_shot(labels: &[usize], shots: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if shots == 0 {
        return Err(EvalError::Spec("shots must be >= 1".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(classes * shots);
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < shots {
            return Err(EvalError::Spec(format!(
                "class {c} has {} samples, fewer than the {shots} shots requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut seed::stream(seed, seed::PURPOSE_FEWSHOT, &[c as u64]));
        idx.truncate(shots);
        idx.sort_unstable();
        out.extend(idx);
    }
    Ok(out)
}

/// Mirrors sample `b` of a `[B, C, H, W]` batch left to right.
fn flip_horizontal(images: &mut Tensor, b: usize) {
    let s = images.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    for row in images.data_mut()[b * per..(b + 1) * per].chunks_mut(s[3]) {
        row.reverse();
    }
}

/// Fine-tunes the encoder plus a zero-initialized linear head on `K` shots
/// per class with AdamW and cross-entropy, then reports eval accuracy.
/// Each training image is flipped horizontally with probability 1/2.
pub fn few_shot_finetune(
    params: &MaeParams,
    spec: &FewShotSpec,
    train: &ImageSet,
    eval: &ImageSet,
    seed: u64,
) -> Result<(ProbeResult, MaeParams), EvalError> {
    if spec.epochs == 0 || spec.batch_size == 0 {
        return Err(EvalError::Spec("epochs and batch_size must be >= 1".into()));
    }
    let train_y = labels_of(train, "train")?;
    let eval_y = labels_of(eval, "eval")?;
    let chosen = select_k_shot(&train_y, spec.shots, seed)?;
    let classes = check_classes(&train_y, &eval_y)?;
    let d = params.config().latent_dim();

    let mut model = params.clone();
    let mut head_w = Tensor::zeros(&[d, classes]);
    let mut head_b = Tensor::zeros(&[classes]);
    let opt = DpOptimConfig {
        clip_norm: 1.0,
        noise_multiplier: 0.0,
        schedule: LrSchedule {
            base_lr: spec.lr,
            warmup_steps: spec.warmup_steps,
            floor_fraction: 0.1,
        },
        optimizer: OptimizerKind::Adamw,
        beta1: 0.9,
        beta2: 0.999,
        weight_decay: spec.weight_decay,
        eps: 1e-8,
        total_steps: 1,
        expected_batch_size: 1.0,
    };
    let steps_per_epoch = chosen.len().div_ceil(spec.batch_size) as u64;
    let total = steps_per_epoch * spec.epochs as u64;
    let mut states: IndexMap<String, OptimState> = IndexMap::new();
    let mut t = 0u64;
    for epoch in 0..spec.epochs {
        let mut order = chosen.clone();
        order.shuffle(&mut seed::stream(seed, seed::PURPOSE_SHUFFLE, &[epoch as u64]));
        for batch in order.chunks(spec.batch_size) {
            let mut images = train.fetch(batch)?;
            let mut rng = seed::stream(seed, seed::PURPOSE_AUGMENT, &[epoch as u64, t]);
            for b in 0..batch.len() {
                if rng.gen::<bool>() {
                    flip_horizontal(&mut images, b);
                }
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let mut enc = build_encoder(&model, &images)?;
            let g = &mut enc.graph;
            let w = g.param("head.weight", head_w.clone())?;
            let bias = g.param("head.bias", head_b.clone())?;
            let logits = g.matmul(enc.pooled, w)?;
            let logits = g.add(logits, bias)?;
            let losses = g.cross_entropy(logits, &labels)?;
            let loss = g.mean(losses)?;
            let grads = g.backward(loss)?;
            let lr = opt.schedule.lr_at(t, total);
            for (name, grad) in grads.iter() {
                let state = states
                    .entry(name.clone())
                    .or_insert_with(|| OptimState::new(grad.numel()));
                let mut value = match name.as_str() {
                    "head.weight" => head_w.clone(),
                    "head.bias" => head_b.clone(),
                    _ => model.get(name).expect("registered from the model").clone(),
                };
                dp_adamw_step(value.data_mut(), state, grad.data(), &opt, lr);
                match name.as_str() {
                    "head.weight" => head_w = value,
                    "head.bias" => head_b = value,
                    _ => model.set(name, value)?,
                }
            }
            t += 1;
        }
    }

    let head = LinearHead {
        dim: d,
        classes,
        weight: head_w.into_data(),
        bias: head_b.into_data(),
    };
    let all: Vec<usize> = (0..eval.len()).collect();
    let feats = encode_features_batch(&model, &eval.fetch(&all)?, FEATURE_CHUNK)?;
    let correct = feats
        .data()
        .chunks(d)
        .zip(&eval_y)
        .filter(|(row, &y)| head.predict(row) == y)
        .count();
    Ok((
        ProbeResult {
            accuracy: correct as f64 / eval_y.len() as f64,
            classes,
            train_count: chosen.len(),
            eval_count: eval_y.len(),
            feature_dim: d,
            seed,
        },
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_two_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            x.push(if c == 0 { -1.0 } else { 1.0 } + 0.3 * rng.gen::<f64>());
            x.push(rng.gen::<f64>());
            y.push(c);
        }
        let r = probe_features(&x, &y, &x, &y, 2, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.classes, r.feature_dim), (2, 2));
    }

    #[test]
    fn missing_train_class_is_error() {
        let err = probe_features(&[0.0, 1.0], &[0, 0], &[0.5], &[1], 1, 0).unwrap_err();
        assert!(matches!(err, EvalError::Probe(_)));
    }

    #[test]
    fn k_shot_selection() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let a = select_k_shot(&labels, 3, 7).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a, select_k_shot(&labels, 3, 7).unwrap());
        for c in 0..5 {
            assert_eq!(a.iter().filter(|&&i| labels[i] == c).count(), 3);
        }
        let full = select_k_shot(&labels, 10, 7).unwrap();
        let mut expect: Vec<usize> = (0..50).collect();
        expect.sort_by_key(|&i| (i % 5, i));
        assert_eq!(full, expect);
        let err = select_k_shot(&labels, 11, 7).unwrap_err();
        assert!(err.to_string().contains("class 0"));
    }

    #[test]
    fn log_line() {
        assert_eq!(eval_log_line("r1", "probe", None, 0.5, 3), "r1,probe,probe,0.5,3");
        assert_eq!(eval_log_line("r1", "fewshot", Some(10), 0.25, 3), "r1,fewshot,10,0.25,3");
    }
}
