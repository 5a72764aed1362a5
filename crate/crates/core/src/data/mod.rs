//! Image datasets: procedural generation, on-disk layout and the Poisson
//! subsampler.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest        TOML: n, resolution, channels, role, digest
//! 000000.ppm ...  one binary portable pixmap per image (P6 RGB or P5 gray, maxval 255)
//! labels          optional, one class id per line
//! ```
//!
//! The digest is the SHA-256 of all image files concatenated in index order.

mod synth;

pub use synth::{Palette, Primitive, SynthProgram, LABELED_CLASSES};

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest";
pub const LABELS_FILE: &str = "labels";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    SyntheticPretrain,
    PrivateTrain,
    Eval,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::SyntheticPretrain => "synthetic-pretrain",
            Role::PrivateTrain => "private-train",
            Role::Eval => "eval",
        })
    }
}

impl FromStr for Role {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "synthetic-pretrain" => Ok(Role::SyntheticPretrain),
            "private-train" => Ok(Role::PrivateTrain),
            "eval" => Ok(Role::Eval),
            _ => Err(DataError::InvalidArgument(format!(
                "unknown role {s:?} (expected synthetic-pretrain, private-train or eval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    n: usize,
    resolution: usize,
    channels: usize,
    role: Role,
    digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub n: usize,
    pub resolution: usize,
    pub channels: usize,
    pub role: Role,
    pub labels: Option<Vec<usize>>,
    pub digest: String,
}

/// Images held as 8-bit channel-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    resolution: usize,
    channels: usize,
    pixels: Vec<u8>,
    labels: Option<Vec<usize>>,
}

impl ImageSet {
    pub fn new(resolution: usize, channels: usize, pixels: Vec<u8>, labels: Option<Vec<usize>>) -> Result<Self, DataError> {
        let per = resolution * resolution * channels;
        if per == 0 || pixels.is_empty() || pixels.len() % per != 0 {
            return Err(DataError::InvalidArgument(format!(
                "{} pixel bytes do not form {resolution}x{resolution}x{channels} images",
                pixels.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.len() / per {
                return Err(DataError::InvalidArgument(format!(
                    "{} labels for {} images",
                    l.len(),
                    pixels.len() / per
                )));
            }
        }
        Ok(Self {
            resolution,
            channels,
            pixels,
            labels,
        })
    }

    fn per_image(&self) -> usize {
        self.resolution * self.resolution * self.channels
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.per_image()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = self.per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// `[B, C, H, W]` batch with values in `[0, 1]`.
    pub fn fetch(&self, indices: &[usize]) -> Result<Tensor, DataError> {
        let per = self.per_image();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::InvalidArgument(format!(
                    "image index {i} out of range for {} images",
                    self.len()
                )));
            }
            data.extend(self.image_bytes(i).iter().map(|&b| b as f64 / 255.0));
        }
        let shape = vec![indices.len(), self.channels, self.resolution, self.resolution];
        Ok(Tensor::new(shape, data).expect("sizes checked"))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let mut pixels = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::InvalidArgument(format!("image index {i} out of range")));
            }
            pixels.extend_from_slice(self.image_bytes(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(self.resolution, self.channels, pixels, labels)
    }

    /// Encodes image `i` as a binary portable pixmap.
    pub fn to_pnm(&self, i: usize) -> Vec<u8> {
        let r = self.resolution;
        let img = self.image_bytes(i);
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{r} {r}\n255\n").into_bytes();
        for p in 0..r * r {
            for c in 0..self.channels {
                out.push(img[c * r * r + p]);
            }
        }
        out
    }

    /// SHA-256 over every encoded image in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for i in 0..self.len() {
            h.update(self.to_pnm(i));
        }
        hex::encode(h.finalize())
    }

    /// Writes the dataset directory and returns its manifest.
    pub fn write(&self, root: &Path, role: Role) -> Result<DatasetManifest, DataError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        for i in 0..self.len() {
            let path = root.join(image_file_name(i));
            fs::write(&path, self.to_pnm(i)).map_err(io_err(&path))?;
        }
        if let Some(labels) = &self.labels {
            let path = root.join(LABELS_FILE);
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        let manifest = DatasetManifest {
            root: root.to_path_buf(),
            n: self.len(),
            resolution: self.resolution,
            channels: self.channels,
            role,
            labels: self.labels.clone(),
            digest: self.digest(),
        };
        let file = ManifestFile {
            n: manifest.n,
            resolution: manifest.resolution,
            channels: manifest.channels,
            role,
            digest: manifest.digest.clone(),
        };
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, toml::to_string(&file).expect("manifest serializes")).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

pub fn image_file_name(i: usize) -> String {
    format!("{i:06}.ppm")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `count` unlabeled procedural images.
pub fn synthetic_images(count: usize, resolution: usize, master_seed: u64) -> Result<ImageSet, DataError> {
    check_generation(count, resolution)?;
    let mut pixels = Vec::with_capacity(count * 3 * resolution * resolution);
    for i in 0..count {
        let img = SynthProgram::sample(master_seed, i as u64).render(resolution);
        pixels.extend(img.into_iter().map(quantize));
    }
    ImageSet::new(resolution, 3, pixels, None)
}

/// `count` labeled images drawn from the first `classes` families of
/// [`SynthProgram::sample_labeled`], classes assigned round-robin.
pub fn labeled_images(count: usize, resolution: usize, master_seed: u64, classes: usize) -> Result<ImageSet, DataError> {
    check_generation(count, resolution)?;
    if !(2..=LABELED_CLASSES).contains(&classes) {
        return Err(DataError::InvalidArgument(format!(
            "classes must lie in 2..={LABELED_CLASSES}, got {classes}"
        )));
    }
    let mut pixels = Vec::with_capacity(count * 3 * resolution * resolution);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let img = SynthProgram::sample_labeled(master_seed, i as u64, class).render(resolution);
        pixels.extend(img.into_iter().map(quantize));
        labels.push(class);
    }
    ImageSet::new(resolution, 3, pixels, Some(labels))
}

fn check_generation(count: usize, resolution: usize) -> Result<(), DataError> {
    if count == 0 {
        return Err(DataError::InvalidArgument("count must be >= 1".into()));
    }
    if resolution == 0 {
        return Err(DataError::InvalidArgument("resolution must be >= 1".into()));
    }
    Ok(())
}

/// Renders and writes `count` procedural images under `root`.
pub fn generate_synthetic(root: &Path, count: usize, resolution: usize, master_seed: u64, role: Role) -> Result<DatasetManifest, DataError> {
    synthetic_images(count, resolution, master_seed)?.write(root, role)
}

fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let corrupt = |m: &str| DataError::Corrupt {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("bad header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "P6" => 3,
        "P5" => 1,
        other => return Err(corrupt(&format!("unsupported format {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt(&format!("bad header field {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(corrupt(&format!("maxval {max} is not 255")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * channels {
        return Err(corrupt(&format!("expected {} pixel bytes, found {}", w * h * channels, body.len())));
    }
    let mut planar = vec![0; body.len()];
    for p in 0..w * h {
        for c in 0..channels {
            planar[c * w * h + p] = body[p * channels + c];
        }
    }
    Ok((w, h, channels, planar))
}

/// Reads and verifies a dataset directory.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, ImageSet), DataError> {
    let mpath = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let file: ManifestFile = toml::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", mpath.display())))?;
    if file.n == 0 {
        return Err(DataError::Manifest(format!("{}: n must be >= 1", mpath.display())));
    }
    let mut pixels = Vec::with_capacity(file.n * file.channels * file.resolution * file.resolution);
    let mut hasher = Sha256::new();
    for i in 0..file.n {
        let path = root.join(image_file_name(i));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let (w, h, c, planar) = parse_pnm(&path, &bytes)?;
        if w != file.resolution || h != file.resolution || c != file.channels {
            return Err(DataError::Manifest(format!(
                "{} is {w}x{h}x{c}, manifest says {r}x{r}x{}",
                path.display(),
                file.channels,
                r = file.resolution
            )));
        }
        hasher.update(&bytes);
        pixels.extend(planar);
    }
    let extra = root.join(image_file_name(file.n));
    if extra.exists() {
        return Err(DataError::Manifest(format!(
            "{} exists beyond the manifest count {}",
            extra.display(),
            file.n
        )));
    }
    let digest = hex::encode(hasher.finalize());
    if digest != file.digest {
        return Err(DataError::Manifest(format!(
            "content digest {digest} does not match manifest digest {}",
            file.digest
        )));
    }
    let lpath = root.join(LABELS_FILE);
    let labels = if lpath.exists() {
        let text = fs::read_to_string(&lpath).map_err(io_err(&lpath))?;
        let labels = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim().parse::<usize>().map_err(|_| DataError::Corrupt {
                    path: lpath.clone(),
                    message: format!("bad label {l:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if labels.len() != file.n {
            return Err(DataError::Manifest(format!("{} labels for {} images", labels.len(), file.n)));
        }
        Some(labels)
    } else {
        None
    };
    let set = ImageSet::new(file.resolution, file.channels, pixels, labels.clone())?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        n: file.n,
        resolution: file.resolution,
        channels: file.channels,
        role: file.role,
        labels,
        digest,
    };
    Ok((manifest, set))
}

/// Indices included in the batch of `step`: each of `0..n` independently
/// with probability `q`, from a stream keyed by `(master_seed, step)`.
pub fn poisson_sample(n: usize, q: f64, master_seed: u64, step: u64) -> Result<Vec<usize>, DataError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(DataError::InvalidArgument(format!("sampling ratio must lie in [0, 1], got {q}")));
    }
    let mut rng = seed::stream(master_seed, seed::PURPOSE_SAMPLING, &[step]);
    Ok((0..n).filter(|_| rng.gen::<f64>() < q).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_extremes() {
        assert!(poisson_sample(100, 0.0, 1, 0).unwrap().is_empty());
        assert_eq!(poisson_sample(100, 1.0, 1, 0).unwrap(), (0..100).collect::<Vec<_>>());
        assert_eq!(poisson_sample(100, 0.3, 1, 4).unwrap(), poisson_sample(100, 0.3, 1, 4).unwrap());
        assert!(poisson_sample(10, 1.5, 1, 0).is_err());
    }

    #[test]
    fn fetch_duplicates() {
        let set = synthetic_images(3, 8, 2).unwrap();
        let b = set.fetch(&[1, 1]).unwrap();
        assert_eq!(b.index_outer(0), b.index_outer(1));
        assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pnm_round_trip() {
        let set = synthetic_images(2, 4, 9).unwrap();
        let bytes = set.to_pnm(1);
        let (w, h, c, planar) = parse_pnm(Path::new("x"), &bytes).unwrap();
        assert_eq!((w, h, c), (4, 4, 3));
        assert_eq!(planar, set.image_bytes(1));
    }

    #[test]
    fn labeled_is_balanced() {
        let set = labeled_images(20, 8, 1, 10).unwrap();
        let labels = set.labels().unwrap();
        for k in 0..10 {
            assert_eq!(labels.iter().filter(|&&l| l == k).count(), 2);
        }
        assert_eq!(set.num_classes(), 10);
    }
}
