use rand::seq::index;

use super::{config::masked_count, MaeError};
use crate::seed;
use crate::tensor::Tensor;

/// Splits a `C x H x W` image into `L = (H/p)^2` rows of `p*p*C` values.
/// Patches are in row-major grid order; inside a patch the layout is
/// `(row, column, channel)`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor, MaeError> {
    let &[c, h, w] = image.shape() else {
        return Err(MaeError::Config(format!("expected a C x H x W image, got {:?}", image.shape())));
    };
    if p == 0 || h != w || h % p != 0 {
        return Err(MaeError::Config(format!(
            "image {h}x{w} cannot be split into {p}x{p} patches"
        )));
    }
    let g = h / p;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, p * p * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, p: usize, channels: usize) -> Result<Tensor, MaeError> {
    let &[l, d] = patches.shape() else {
        return Err(MaeError::Config(format!("expected L x D patches, got {:?}", patches.shape())));
    };
    let g = (l as f64).sqrt().round() as usize;
    if g * g != l || d != p * p * channels {
        return Err(MaeError::Config(format!(
            "{l} patches of dimension {d} do not form a square image with patch {p} and {channels} channels"
        )));
    }
    let h = g * p;
    let src = patches.data();
    let mut out = vec![0.0; src.len()];
    let mut i = 0;
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (gy * p + py, gx * p + px);
                    for ch in 0..channels {
                        out[(ch * h + y) * h + x] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![channels, h, h], out)?)
}

/// Which patches the encoder sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    /// Visible patch indices, ascending.
    pub kept: Vec<usize>,
    /// Hidden patch indices, ascending.
    pub masked: Vec<usize>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn num_patches(&self) -> usize {
        self.kept.len() + self.masked.len()
    }

    /// Everything visible.
    pub fn none(num_patches: usize) -> Self {
        Self {
            kept: (0..num_patches).collect(),
            masked: Vec::new(),
            seed: 0,
        }
    }

    /// For every patch, its position in `kept ++ masked`.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut restore = vec![0; self.num_patches()];
        for (pos, &p) in self.kept.iter().chain(&self.masked).enumerate() {
            restore[p] = pos;
        }
        restore
    }
}

/// Uniformly random subset of `round(ratio * L)` patches to hide.
pub fn random_mask(num_patches: usize, ratio: f64, seed: u64) -> Result<MaskSpec, MaeError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MaeError::InvalidArgument(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let m = masked_count(num_patches, ratio);
    if m >= num_patches {
        return Err(MaeError::InvalidArgument(format!(
            "mask ratio {ratio} hides all {num_patches} patches"
        )));
    }
    let mut rng = seed::stream(seed, seed::PURPOSE_MASK, &[]);
    let mut hidden = vec![false; num_patches];
    for i in index::sample(&mut rng, num_patches, m) {
        hidden[i] = true;
    }
    let (masked, kept): (Vec<usize>, Vec<usize>) = (0..num_patches).partition(|&i| hidden[i]);
    Ok(MaskSpec { kept, masked, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, s: usize) -> Tensor {
        Tensor::new(vec![c, s, s], (0..c * s * s).map(|i| i as f64 * 0.01).collect()).unwrap()
    }

    #[test]
    fn patch_arithmetic() {
        let p = patchify(&image(3, 32), 4).unwrap();
        assert_eq!(p.shape(), &[64, 48]);
    }

    #[test]
    fn unpatchify_inverts() {
        let x = image(3, 32);
        assert_eq!(unpatchify(&patchify(&x, 4).unwrap(), 4, 3).unwrap(), x);
        let x = image(1, 12);
        assert_eq!(unpatchify(&patchify(&x, 3).unwrap(), 3, 1).unwrap(), x);
    }

    #[test]
    fn constant_image_gives_identical_rows() {
        let x = Tensor::full(&[3, 8, 8], 0.3);
        let p = patchify(&x, 2).unwrap();
        let first = p.index_outer(0);
        for i in 1..16 {
            assert_eq!(p.index_outer(i), first);
        }
    }

    #[test]
    fn indivisible_is_config_error() {
        assert!(matches!(patchify(&image(3, 10), 4), Err(MaeError::Config(_))));
    }

    #[test]
    fn mask_counts() {
        let m = random_mask(196, 0.75, 3).unwrap();
        assert_eq!((m.masked.len(), m.kept.len()), (147, 49));
        let m = random_mask(4, 0.0, 3).unwrap();
        assert!(m.masked.is_empty());
        assert_eq!(random_mask(64, 0.75, 9).unwrap(), random_mask(64, 0.75, 9).unwrap());
        assert_ne!(random_mask(64, 0.75, 9).unwrap().masked, random_mask(64, 0.75, 10).unwrap().masked);
        assert!(random_mask(4, 0.9, 1).is_err());
    }

    #[test]
    fn restore_order_inverts_concat() {
        let m = random_mask(16, 0.5, 1).unwrap();
        let order: Vec<usize> = m.kept.iter().chain(&m.masked).copied().collect();
        let r = m.restore_order();
        for p in 0..16 {
            assert_eq!(order[r[p]], p);
        }
    }
}
