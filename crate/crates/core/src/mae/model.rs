use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::config::MLP_RATIO;
use super::patch::{patchify, MaskSpec};
use super::{MaeConfig, MaeError};
use crate::seed;
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{layout_of, Graph, ParamSlot, PerSampleGrads, Tensor, TensorError, Var};

const INIT_STD: f64 = 0.02;
const PATCH_NORM_EPS: f64 = 1e-6;

/// Trainable weights plus the fixed position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeParams {
    config: MaeConfig,
    tensors: IndexMap<String, Tensor>,
    encoder_pos: Tensor,
    decoder_pos: Tensor,
}

impl MaeParams {
    pub fn config(&self) -> &MaeConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn encoder_pos(&self) -> &Tensor {
        &self.encoder_pos
    }

    pub fn decoder_pos(&self) -> &Tensor {
        &self.decoder_pos
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn layout(&self) -> Vec<ParamSlot> {
        layout_of(self.tensors.iter().map(|(n, t)| (n.as_str(), t.shape())))
    }

    /// All trainable values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<(), MaeError> {
        if flat.len() != self.num_params() {
            return Err(MaeError::InvalidArgument(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces one named tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), MaeError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| MaeError::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            }
            .into());
        }
        *slot = value;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = toml::to_string(&self.config).expect("config serializes");
        let mut ck = Checkpoint::new(meta);
        for (n, t) in &self.tensors {
            ck.insert(n.clone(), t.clone());
        }
        ck
    }

    /// Rebuilds parameters from a checkpoint whose metadata starts with the
    /// model config. Extra tensors (e.g. optimizer state) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MaeError> {
        let config: MaeConfig =
            toml::from_str(&ck.metadata).map_err(|e| MaeError::Config(format!("checkpoint config: {e}")))?;
        let mut params = init_params(&config, 0)?;
        for (name, t) in params.tensors.iter_mut() {
            let stored = ck
                .get(name)
                .ok_or_else(|| MaeError::Config(format!("checkpoint is missing parameter {name:?}")))?;
            if stored.shape() != t.shape() {
                return Err(MaeError::Config(format!(
                    "parameter {name:?} has shape {:?} in checkpoint, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            *t = stored.clone();
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), MaeError> {
        self.to_checkpoint()
            .save(path)
            .map_err(|e| MaeError::Checkpoint(e.into()))
    }

    pub fn load(path: &Path) -> Result<Self, MaeError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// SHA-256 of the serialized weights, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint().to_bytes()))
    }
}

/// Fixed 2-D sine-cosine embedding for a `grid x grid` patch layout: the
/// first half of each row encodes the patch row, the second half the column.
pub fn sincos_position_embedding(width: usize, grid: usize) -> Tensor {
    let quarter = width / 4;
    let mut data = Vec::with_capacity(grid * grid * width);
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / libm::pow(10000.0, i as f64 / quarter as f64))
        .collect();
    for y in 0..grid {
        for x in 0..grid {
            for pos in [y as f64, x as f64] {
                data.extend(omega.iter().map(|w| libm::sin(pos * w)));
                data.extend(omega.iter().map(|w| libm::cos(pos * w)));
            }
        }
    }
    Tensor::new(vec![grid * grid, width], data).expect("width divisible by 4")
}

fn block_shapes(prefix: &str, width: usize, out: &mut Vec<(String, Vec<usize>)>) {
    let hidden = width * MLP_RATIO;
    for (name, shape) in [
        ("norm1.gamma", vec![width]),
        ("norm1.beta", vec![width]),
        ("attn.q.weight", vec![width, width]),
        ("attn.q.bias", vec![width]),
        ("attn.k.weight", vec![width, width]),
        ("attn.k.bias", vec![width]),
        ("attn.v.weight", vec![width, width]),
        ("attn.v.bias", vec![width]),
        ("attn.proj.weight", vec![width, width]),
        ("attn.proj.bias", vec![width]),
        ("norm2.gamma", vec![width]),
        ("norm2.beta", vec![width]),
        ("mlp.fc1.weight", vec![width, hidden]),
        ("mlp.fc1.bias", vec![hidden]),
        ("mlp.fc2.weight", vec![hidden, width]),
        ("mlp.fc2.bias", vec![width]),
    ] {
        out.push((format!("{prefix}.{name}"), shape));
    }
}

fn param_shapes(c: &MaeConfig) -> Vec<(String, Vec<usize>)> {
    let (p, d, dd) = (c.patch_dim(), c.encoder_width, c.decoder_width);
    let mut out = vec![
        ("encoder.patch_embed.weight".to_string(), vec![p, d]),
        ("encoder.patch_embed.bias".to_string(), vec![d]),
    ];
    for i in 0..c.encoder_depth {
        block_shapes(&format!("encoder.blocks.{i}"), d, &mut out);
    }
    out.push(("encoder.norm.gamma".into(), vec![d]));
    out.push(("encoder.norm.beta".into(), vec![d]));
    out.push(("decoder.embed.weight".into(), vec![d, dd]));
    out.push(("decoder.embed.bias".into(), vec![dd]));
    out.push(("decoder.mask_token".into(), vec![dd]));
    for i in 0..c.decoder_depth {
        block_shapes(&format!("decoder.blocks.{i}"), dd, &mut out);
    }
    out.push(("decoder.norm.gamma".into(), vec![dd]));
    out.push(("decoder.norm.beta".into(), vec![dd]));
    out.push(("decoder.pred.weight".into(), vec![dd, p]));
    out.push(("decoder.pred.bias".into(), vec![p]));
    out
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Truncated-normal weights (std 0.02, cut at two standard deviations),
/// zero biases, unit layer-norm gains. Each tensor draws from its own
/// stream keyed by its position, so the result depends only on `seed`.
pub fn init_params(config: &MaeConfig, seed: u64) -> Result<MaeParams, MaeError> {
    config.validate()?;
    let mut tensors = IndexMap::new();
    for (i, (name, shape)) in param_shapes(config).into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            vec![0.0; n]
        } else {
            let mut rng = seed::stream(seed, seed::PURPOSE_INIT, &[i as u64]);
            (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let g = config.grid_size();
    Ok(MaeParams {
        config: config.clone(),
        tensors,
        encoder_pos: sincos_position_embedding(config.encoder_width, g),
        decoder_pos: sincos_position_embedding(config.decoder_width, g),
    })
}

/// `[B, C, H, W]` images to `[B, L, p*p*C]` patch rows.
pub fn patchify_batch(images: &Tensor, p: usize) -> Result<Tensor, MaeError> {
    if images.rank() != 4 {
        return Err(MaeError::InvalidArgument(format!(
            "expected a B x C x H x W batch, got {:?}",
            images.shape()
        )));
    }
    let rows = (0..images.shape()[0])
        .map(|b| patchify(&images.index_outer(b), p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::stack(&rows)?)
}

struct Builder<'a> {
    g: Graph,
    p: &'a MaeParams,
}

impl Builder<'_> {
    fn w(&mut self, name: &str) -> Result<Var, MaeError> {
        if let Some(v) = self.g.param_var(name) {
            return Ok(v);
        }
        let t = self
            .p
            .get(name)
            .ok_or_else(|| MaeError::InvalidArgument(format!("unknown parameter {name:?}")))?;
        Ok(self.g.param(name, t.clone())?)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, MaeError> {
        let w = self.w(&format!("{prefix}.weight"))?;
        let b = self.w(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, MaeError> {
        let gamma = self.w(&format!("{prefix}.gamma"))?;
        let beta = self.w(&format!("{prefix}.beta"))?;
        Ok(self.g.layer_norm(x, gamma, beta)?)
    }

    fn attention(&mut self, x: Var, prefix: &str, heads: usize) -> Result<Var, MaeError> {
        let &[b, n, d] = self.g.value(x).shape() else {
            unreachable!("attention input is [B, N, D]")
        };
        let dh = d / heads;
        let split = |this: &mut Self, name: &str| -> Result<Var, MaeError> {
            let t = this.linear(x, &format!("{prefix}.attn.{name}"))?;
            let t = this.g.reshape(t, &[b, n, heads, dh])?;
            Ok(this.g.transpose(t, 1, 2)?)
        };
        let q = split(self, "q")?;
        let k = split(self, "k")?;
        let v = split(self, "v")?;
        let kt = self.g.transpose(k, 2, 3)?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = self.g.softmax(scores)?;
        let o = self.g.matmul(att, v)?;
        let o = self.g.transpose(o, 1, 2)?;
        let o = self.g.reshape(o, &[b, n, d])?;
        self.linear(o, &format!("{prefix}.attn.proj"))
    }

    /// Pre-norm transformer block.
    fn block(&mut self, x: Var, prefix: &str, heads: usize) -> Result<Var, MaeError> {
        let h = self.norm(x, &format!("{prefix}.norm1"))?;
        let h = self.attention(h, prefix, heads)?;
        let x = self.g.add(x, h)?;
        let h = self.norm(x, &format!("{prefix}.norm2"))?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"))?;
        let h = self.g.gelu(h)?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"))?;
        Ok(self.g.add(x, h)?)
    }

    /// Embeds all patches, keeps `kept` rows per sample (all when `None`),
    /// and runs the encoder stack including the final norm.
    fn encoder(&mut self, patches: Tensor, kept: Option<(&[usize], usize)>) -> Result<Var, MaeError> {
        let c = self.p.config.clone();
        let x = self.g.input(patches)?;
        let x = self.linear(x, "encoder.patch_embed")?;
        let pos = self.g.constant(self.p.encoder_pos.clone())?;
        let mut x = self.g.add(x, pos)?;
        if let Some((idx, k)) = kept {
            x = self.g.gather_rows(x, idx, k)?;
        }
        for i in 0..c.encoder_depth {
            x = self.block(x, &format!("encoder.blocks.{i}"), c.encoder_heads)?;
        }
        self.norm(x, "encoder.norm")
    }
}

fn check_patches(config: &MaeConfig, patches: &Tensor) -> Result<usize, MaeError> {
    let want = [config.num_patches(), config.patch_dim()];
    if patches.rank() != 3 || patches.shape()[1..] != want || patches.shape()[0] == 0 {
        return Err(TensorError::Shape {
            op: "mae_input",
            lhs: patches.shape().to_vec(),
            rhs: vec![0, want[0], want[1]],
        }
        .into());
    }
    Ok(patches.shape()[0])
}

fn normalized_patch(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + PATCH_NORM_EPS).sqrt();
    row.iter().map(|v| (v - mean) * inv).collect()
}

/// A built forward graph with its per-sample loss vector.
pub struct MaeGraph {
    pub graph: Graph,
    /// `[B]` per-sample losses.
    pub losses: Var,
    /// `[B, L, p*p*C]` predicted patches in original order.
    pub pred: Var,
}

/// Builds the full autoencoder forward for `[B, L, p*p*C]` patches with one
/// mask per sample. Every trainable tensor is registered up front in
/// parameter order, so gradient layouts match [`MaeParams::layout`].
pub fn build_mae(params: &MaeParams, patches: &Tensor, masks: &[MaskSpec]) -> Result<MaeGraph, MaeError> {
    let c = params.config.clone();
    let batch = check_patches(&c, patches)?;
    let (l, pd) = (c.num_patches(), c.patch_dim());
    if masks.len() != batch {
        return Err(MaeError::InvalidArgument(format!("{} masks for a batch of {batch}", masks.len())));
    }
    let kept_n = masks[0].kept.len();
    for m in masks {
        if m.num_patches() != l || m.kept.len() != kept_n || m.kept.is_empty() {
            return Err(MaeError::InvalidArgument(format!(
                "mask with {} kept of {} patches does not fit {l} patches with {kept_n} kept",
                m.kept.len(),
                m.num_patches()
            )));
        }
    }
    let masked_n = l - kept_n;

    let mut b = Builder { g: Graph::new(), p: params };
    for (name, t) in &params.tensors {
        b.g.param(name, t.clone())?;
    }

    let kept_idx: Vec<usize> = masks.iter().flat_map(|m| m.kept.iter().copied()).collect();
    let latent = b.encoder(patches.clone(), Some((&kept_idx, kept_n)))?;

    let mut y = b.linear(latent, "decoder.embed")?;
    if masked_n > 0 {
        let zeros = b.g.input(Tensor::zeros(&[batch, masked_n, c.decoder_width]))?;
        let token = b.w("decoder.mask_token")?;
        let tokens = b.g.add(zeros, token)?;
        y = b.g.concat_rows(y, tokens)?;
        let restore: Vec<usize> = masks.iter().flat_map(|m| m.restore_order()).collect();
        y = b.g.gather_rows(y, &restore, l)?;
    }
    let pos = b.g.constant(params.decoder_pos.clone())?;
    y = b.g.add(y, pos)?;
    for i in 0..c.decoder_depth {
        y = b.block(y, &format!("decoder.blocks.{i}"), c.decoder_heads)?;
    }
    y = b.norm(y, "decoder.norm")?;
    let pred = b.linear(y, "decoder.pred")?;

    // With nothing hidden the masked-only loss would be empty; fall back to
    // every patch.
    let eval: Vec<Vec<usize>> = masks
        .iter()
        .map(|m| {
            if c.loss_on_masked_only && !m.masked.is_empty() {
                m.masked.clone()
            } else {
                (0..l).collect()
            }
        })
        .collect();
    let e = eval[0].len();
    let eval_idx: Vec<usize> = eval.iter().flatten().copied().collect();
    let mut neg_target = Vec::with_capacity(batch * e * pd);
    for (s, rows) in eval.iter().enumerate() {
        for &r in rows {
            let off = (s * l + r) * pd;
            let row = &patches.data()[off..off + pd];
            if c.normalize_patch_targets {
                neg_target.extend(normalized_patch(row).into_iter().map(|v| -v));
            } else {
                neg_target.extend(row.iter().map(|v| -v));
            }
        }
    }
    let chosen = b.g.gather_rows(pred, &eval_idx, e)?;
    let target = b.g.input(Tensor::new(vec![batch, e, pd], neg_target)?)?;
    let diff = b.g.add(chosen, target)?;
    let sq = b.g.sum_sq(diff)?;
    let per_patch = b.g.scale(sq, 1.0 / pd as f64)?;
    let losses = b.g.mean(per_patch)?;
    Ok(MaeGraph {
        graph: b.g,
        losses,
        pred,
    })
}

/// Reconstructions `[B, C, H, W]` and per-sample losses.
pub fn mae_forward(params: &MaeParams, images: &Tensor, masks: &[MaskSpec]) -> Result<(Tensor, Vec<f64>), MaeError> {
    let c = &params.config;
    let patches = patchify_batch(images, c.patch_size)?;
    let out = build_mae(params, &patches, masks)?;
    let pred = out.graph.value(out.pred);
    let recon = (0..pred.shape()[0])
        .map(|i| super::unpatchify(&pred.index_outer(i), c.patch_size, c.channels))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((Tensor::stack(&recon)?, out.graph.value(out.losses).data().to_vec()))
}

/// Per-sample gradients and losses for a batch of patches, evaluated in
/// fixed-size chunks of samples to bound memory. Rows do not depend on how
/// the batch is chunked beyond floating-point summation order, and a fixed
/// `chunk` makes the result deterministic.
pub fn per_sample_mae_grads(
    params: &MaeParams,
    patches: &Tensor,
    masks: &[MaskSpec],
    chunk: usize,
) -> Result<(PerSampleGrads, Vec<f64>), MaeError> {
    let batch = check_patches(&params.config, patches)?;
    let chunk = chunk.max(1);
    let layout = params.layout();
    let dim = params.num_params();
    let mut data = Vec::with_capacity(batch * dim);
    let mut losses = Vec::with_capacity(batch);
    let per = patches.numel() / batch;
    let mut start = 0;
    while start < batch {
        let end = (start + chunk).min(batch);
        let mut shape = patches.shape().to_vec();
        shape[0] = end - start;
        let part = Tensor::new(shape, patches.data()[start * per..end * per].to_vec())?;
        let out = build_mae(params, &part, &masks[start..end])?;
        let g = out.graph.per_sample_backward(out.losses)?;
        data.extend_from_slice(g.data());
        losses.extend_from_slice(out.graph.value(out.losses).data());
        start = end;
    }
    Ok((PerSampleGrads::new(batch, layout, data)?, losses))
}

/// An encoder-only graph over unmasked images.
pub struct EncoderGraph {
    pub graph: Graph,
    /// `[B, L, D]` final token states.
    pub tokens: Var,
    /// `[B, D]` mean over tokens.
    pub pooled: Var,
}

/// Registers only encoder parameters, so callers may append a head.
pub fn build_encoder(params: &MaeParams, images: &Tensor) -> Result<EncoderGraph, MaeError> {
    let patches = patchify_batch(images, params.config.patch_size)?;
    check_patches(&params.config, &patches)?;
    let mut b = Builder { g: Graph::new(), p: params };
    let tokens = b.encoder(patches, None)?;
    let t = b.g.transpose(tokens, 1, 2)?;
    let pooled = b.g.mean(t)?;
    Ok(EncoderGraph {
        graph: b.g,
        tokens,
        pooled,
    })
}

/// Global average of the final encoder tokens for one `C x H x W` image.
pub fn encode_features(params: &MaeParams, image: &Tensor) -> Result<Vec<f64>, MaeError> {
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    Ok(encode_features_batch(params, &batch, 1)?.into_data())
}

/// `[B, D]` pooled features, computed `chunk` images at a time.
pub fn encode_features_batch(params: &MaeParams, images: &Tensor, chunk: usize) -> Result<Tensor, MaeError> {
    if images.rank() != 4 || images.shape()[0] == 0 {
        return Err(MaeError::InvalidArgument(format!(
            "expected a non-empty B x C x H x W batch, got {:?}",
            images.shape()
        )));
    }
    let n = images.shape()[0];
    let per = images.numel() / n;
    let d = params.config.latent_dim();
    let mut out = Vec::with_capacity(n * d);
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let part = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        let enc = build_encoder(params, &part)?;
        out.extend_from_slice(enc.graph.value(enc.pooled).data());
        start = end;
    }
    Ok(Tensor::new(vec![n, d], out)?)
}
