//! Data pipeline: [`Source`] owns a dataset, [`Joker`] augments training
//! batches, and [`FeedSensor`] turns the source into a stream of batches.
//!
//! A source is either a cached IDX dataset (downloaded once into `work_dir`,
//! then served offline) or the built-in synthetic generator, which needs no
//! files at all. Preprocessing is applied once at setup: optional scaling of
//! byte pixels into `[0, 1]`, then optional centering by the training-split
//! mean image. Validation examples are centered with the *training* mean so
//! the two splits see the same transform.

mod feed;
mod idx;
mod joker;

pub use feed::FeedSensor;
pub use idx::{
    idx_image_bytes, idx_label_bytes, load_idx, load_idx_images, load_idx_labels,
    write_idx_images, write_idx_labels, IdxFile, IdxImages,
};
pub use joker::{apply_jokers, Joker, JokerConfig};

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{streams, Pcg32, Tensor};

/// Environment variable naming the default dataset cache root.
pub const DATA_PATH_ENV: &str = "AKID_DATA_PATH";

const DEFAULT_IMAGE_FILE: &str = "train-images-idx3-ubyte.gz";
const DEFAULT_LABEL_FILE: &str = "train-labels-idx1-ubyte.gz";

/// Where a source's examples come from.
#[derive(Clone, Debug)]
pub enum Backing {
    /// IDX image/label files cached under `work_dir`, optionally downloaded
    /// from `url` on first use.
    Idx {
        work_dir: PathBuf,
        url: Option<String>,
        image_file: String,
        label_file: String,
        /// Optional sha256 hex digests keyed by file name, verified on every
        /// load.
        checksums: BTreeMap<String, String>,
    },
    /// Built-in generator: 8×8 single-channel images of two Gaussian bumps,
    /// ten classes laid out on a circle. Deterministic in `seed`.
    Synthetic { seed: u64 },
}

/// Serde form of a source. `type` selects the backing:
///
/// ```json
/// {"type": "mnist", "num_train": 5000, "num_val": 1000,
///  "center": true, "scale": true, "work_dir": "data/mnist"}
/// {"type": "synthetic", "num_train": 512, "num_val": 128, "seed": 7}
/// ```
///
/// When `work_dir` is omitted for a file-backed source it defaults to
/// `$AKID_DATA_PATH/<name>`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default = "default_source_name")]
    pub name: String,
    #[serde(default)]
    pub work_dir: Option<String>,
    #[serde(default)]
    pub url: Option<String>,
    pub num_train: usize,
    pub num_val: usize,
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub scale: bool,
    #[serde(default)]
    pub image_file: Option<String>,
    #[serde(default)]
    pub label_file: Option<String>,
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_source_name() -> String {
    "source".into()
}

impl SourceConfig {
    fn work_dir(&self) -> Result<PathBuf> {
        if let Some(dir) = &self.work_dir {
            return Ok(PathBuf::from(dir));
        }
        match std::env::var(DATA_PATH_ENV) {
            Ok(root) if !root.is_empty() => Ok(Path::new(&root).join(&self.name)),
            _ => Err(Error::Config(format!(
                "source {:?} needs a work_dir (or set {DATA_PATH_ENV})",
                self.name
            ))),
        }
    }

    fn reject(&self, field: Option<&str>, name: &'static str) -> Result<()> {
        match field {
            Some(_) => Err(Error::Config(format!(
                "source type {:?} does not take {name}",
                self.kind
            ))),
            None => Ok(()),
        }
    }

    pub fn backing(&self) -> Result<Backing> {
        match self.kind.as_str() {
            "mnist" | "idx" => {
                if self.seed.is_some() {
                    return Err(Error::Config(format!(
                        "source type {:?} does not take a seed",
                        self.kind
                    )));
                }
                Ok(Backing::Idx {
                    work_dir: self.work_dir()?,
                    url: self.url.clone(),
                    image_file: self
                        .image_file
                        .clone()
                        .unwrap_or_else(|| DEFAULT_IMAGE_FILE.into()),
                    label_file: self
                        .label_file
                        .clone()
                        .unwrap_or_else(|| DEFAULT_LABEL_FILE.into()),
                    checksums: self.checksums.clone(),
                })
            }
            "synthetic" => {
                self.reject(self.work_dir.as_deref(), "a work_dir")?;
                self.reject(self.url.as_deref(), "a url")?;
                self.reject(self.image_file.as_deref(), "an image_file")?;
                self.reject(self.label_file.as_deref(), "a label_file")?;
                if !self.checksums.is_empty() {
                    return Err(Error::Config(
                        "source type \"synthetic\" does not take checksums".into(),
                    ));
                }
                Ok(Backing::Synthetic {
                    seed: self.seed.unwrap_or(0),
                })
            }
            other => Err(Error::Config(format!(
                "unknown source type {other:?} (mnist, idx, or synthetic)"
            ))),
        }
    }
}

/// A dataset split into a training prefix and a validation suffix.
///
/// Examples are addressed by global index: `0..num_train` is the training
/// split, `num_train..num_train + num_val` the validation split.
#[derive(Clone, Debug)]
pub struct Source<S: Scalar> {
    name: String,
    backing: Backing,
    num_train: usize,
    num_val: usize,
    center: bool,
    scale: bool,
    images: Option<Tensor<S>>,
    labels: Vec<u8>,
}

impl<S: Scalar> Source<S> {
    pub fn from_config(config: &SourceConfig) -> Result<Self> {
        if config.num_train == 0 {
            return Err(Error::Config("num_train must be at least 1".into()));
        }
        Ok(Source {
            name: config.name.clone(),
            backing: config.backing()?,
            num_train: config.num_train,
            num_val: config.num_val,
            center: config.center,
            scale: config.scale,
            images: None,
            labels: Vec::new(),
        })
    }

    /// Convenience constructor for the built-in generator.
    pub fn synthetic(name: &str, seed: u64, num_train: usize, num_val: usize) -> Result<Self> {
        if num_train == 0 {
            return Err(Error::Config("num_train must be at least 1".into()));
        }
        Ok(Source {
            name: name.into(),
            backing: Backing::Synthetic { seed },
            num_train,
            num_val,
            center: true,
            scale: false,
            images: None,
            labels: Vec::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_train(&self) -> usize {
        self.num_train
    }

    pub fn num_val(&self) -> usize {
        self.num_val
    }

    pub fn is_ready(&self) -> bool {
        self.images.is_some()
    }

    /// Shape of one example, `[H, W, C]`.
    pub fn image_shape(&self) -> Result<Vec<usize>> {
        match &self.images {
            Some(images) => Ok(images.shape()[1..].to_vec()),
            None => Err(Error::NotSetup(format!("source {}", self.name))),
        }
    }

    /// Loads (downloading into the cache if allowed) and preprocesses the
    /// dataset. With `offline` set, a missing cache is an error instead of a
    /// download.
    pub fn setup(&mut self, offline: bool) -> Result<()> {
        if self.is_ready() {
            return Err(Error::AlreadySetup(format!("source {}", self.name)));
        }
        let wanted = self.num_train + self.num_val;
        let (images, labels) = match &self.backing {
            Backing::Idx {
                work_dir,
                url,
                image_file,
                label_file,
                checksums,
            } => {
                let image_path = work_dir.join(image_file);
                let label_path = work_dir.join(label_file);
                ensure_cached(&image_path, url.as_deref(), image_file, offline)?;
                ensure_cached(&label_path, url.as_deref(), label_file, offline)?;
                verify_checksum(&image_path, checksums.get(image_file))?;
                verify_checksum(&label_path, checksums.get(label_file))?;
                let images = load_idx_images(&image_path)?;
                let labels = load_idx_labels(&label_path)?;
                if labels.len() != images.count {
                    return Err(Error::Integrity(format!(
                        "{} images but {} labels",
                        images.count,
                        labels.len()
                    )));
                }
                if wanted > images.count {
                    return Err(Error::Config(format!(
                        "num_train + num_val = {wanted} but the dataset has only {} examples",
                        images.count
                    )));
                }
                let (h, w) = (images.height, images.width);
                let tensor: Tensor<S> = images.to_tensor();
                let kept = tensor.data()[..wanted * h * w].to_vec();
                (Tensor::new(vec![wanted, h, w, 1], kept)?, labels[..wanted].to_vec())
            }
            Backing::Synthetic { seed } => synthetic_examples(*seed, wanted)?,
        };
        let images = preprocess(images, self.num_train, self.center, self.scale)?;
        self.images = Some(images);
        self.labels = labels;
        Ok(())
    }

    /// Gathers the given global indices into a `[B, H, W, C]` batch and a
    /// rank-1 label tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<S>, Tensor<S>)> {
        let images = self
            .images
            .as_ref()
            .ok_or_else(|| Error::NotSetup(format!("source {}", self.name)))?;
        let total = self.num_train + self.num_val;
        let example = images.len() / images.shape()[0];
        let mut data = Vec::with_capacity(indices.len() * example);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= total {
                return Err(Error::shape(
                    "source.batch",
                    format!("example index {i} out of range for {total} examples"),
                ));
            }
            data.extend_from_slice(&images.data()[i * example..(i + 1) * example]);
            labels.push(S::from_f64_lossy(self.labels[i] as f64));
        }
        let mut shape = images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, Tensor::new(vec![indices.len()], labels)?))
    }

    /// Raw label of one example (handy for alignment checks).
    pub fn label(&self, index: usize) -> Result<u8> {
        if !self.is_ready() {
            return Err(Error::NotSetup(format!("source {}", self.name)));
        }
        self.labels
            .get(index)
            .copied()
            .ok_or_else(|| Error::shape("source.label", format!("index {index} out of range")))
    }
}

/// Scale into `[0, 1]` first, then subtract the training-split mean image
/// from every example. The order matters for the recorded statistics, so it
/// is fixed here rather than configurable.
fn preprocess<S: Scalar>(
    images: Tensor<S>,
    num_train: usize,
    center: bool,
    scale: bool,
) -> Result<Tensor<S>> {
    let mut images = images;
    if scale {
        let inv = S::from_f64_lossy(1.0 / 255.0);
        for v in images.data_mut() {
            *v = *v * inv;
        }
    }
    if center {
        let example = images.len() / images.shape()[0];
        let mut mean = vec![S::zero(); example];
        for i in 0..num_train {
            let row = &images.data()[i * example..(i + 1) * example];
            for (m, v) in mean.iter_mut().zip(row) {
                *m = *m + *v;
            }
        }
        let inv_n = S::from_f64_lossy(1.0 / num_train as f64);
        for m in &mut mean {
            *m = *m * inv_n;
        }
        let n = images.shape()[0];
        let buf = images.data_mut();
        for i in 0..n {
            for (p, m) in buf[i * example..(i + 1) * example].iter_mut().zip(&mean) {
                *p = *p - *m;
            }
        }
    }
    Ok(images)
}

fn ensure_cached(path: &Path, url: Option<&str>, file: &str, offline: bool) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    if offline {
        return Err(Error::DatasetMissing(format!(
            "{} not cached and offline mode is on",
            path.display()
        )));
    }
    let base = url.ok_or_else(|| {
        Error::DatasetMissing(format!("{} not cached and no url configured", path.display()))
    })?;
    let remote = format!("{}/{}", base.trim_end_matches('/'), file);
    let response = ureq::get(&remote)
        .call()
        .map_err(|e| Error::Download(format!("GET {remote}: {e}")))?;
    let mut body = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::Download(format!("reading {remote}: {e}")))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // Write-then-rename so a partial download never looks like a cache hit.
    let tmp = path.with_extension("part");
    std::fs::write(&tmp, &body)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn verify_checksum(path: &Path, expected: Option<&String>) -> Result<()> {
    let Some(expected) = expected else {
        return Ok(());
    };
    let bytes = std::fs::read(path)?;
    let actual = hex(&Sha256::digest(&bytes));
    if !actual.eq_ignore_ascii_case(expected) {
        return Err(Error::Integrity(format!(
            "checksum mismatch for {}: expected {expected}, got {actual}",
            path.display()
        )));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Generates `n` examples of the built-in dataset: class `c = i mod 10` puts
/// a bright Gaussian bump on a circle at angle `2πc/10` (with sub-pixel
/// jitter) and a dimmer mirrored bump opposite it, plus faint pixel noise.
fn synthetic_examples<S: Scalar>(seed: u64, n: usize) -> Result<(Tensor<S>, Vec<u8>)> {
    const SIDE: usize = 8;
    const SIGMA: f64 = 0.8;
    let mut rng = Pcg32::for_stream(seed, streams::SYNTHETIC, 0);
    let mut pixels = vec![S::zero(); n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        let angle = std::f64::consts::TAU * class as f64 / 10.0;
        let jx = rng.uniform(-0.5, 0.5);
        let jy = rng.uniform(-0.5, 0.5);
        let cx = 3.5 + 2.5 * angle.cos() + jx;
        let cy = 3.5 + 2.5 * angle.sin() + jy;
        let (mx, my) = (7.0 - cx, 7.0 - cy);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let bump = |bx: f64, by: f64, amp: f64| {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    amp * (-d2 / (2.0 * SIGMA * SIGMA)).exp()
                };
                let value = bump(cx, cy, 1.0) + bump(mx, my, 0.7) + rng.normal(0.0, 0.05);
                pixels[(i * SIDE + y) * SIDE + x] = S::from_f64_lossy(value);
            }
        }
    }
    Ok((Tensor::new(vec![n, SIDE, SIDE, 1], pixels)?, labels))
}
