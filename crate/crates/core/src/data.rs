//! Dataset loaders (IDX, CIFAR-10 binary), normalization, batching and the
//! synthetic shapes set.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Images `[N,C,H,W]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C,H,W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n: usize = self.sample_shape().iter().product();
        &self.images.data()[i * n..][..n]
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(
            self.name.clone(),
            Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            self.num_classes,
        )
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated header: missing {what}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0, "magic number")?;
    if magic != expected {
        let hint = match magic {
            IDX_IMAGES_MAGIC => " (this is an image file)",
            IDX_LABELS_MAGIC => " (this is a label file)",
            _ => "",
        };
        return Err(Error::format(
            0,
            format!("bad IDX magic {magic:#010x}, expected {expected:#010x}{hint}"),
        ));
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if bytes.len() < start + len {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {len} bytes from offset {start}, file ends early"),
        ));
    }
    if bytes.len() > start + len {
        return Err(Error::format(
            (start + len) as u64,
            format!("{} trailing bytes after payload", bytes.len() - start - len),
        ));
    }
    Ok(&bytes[start..start + len])
}

/// Parses an IDX image file into `[N,1,H,W]` scaled to [0,1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4, "image count")? as usize;
    let h = read_u32(bytes, 8, "row count")? as usize;
    let w = read_u32(bytes, 12, "column count")? as usize;
    let pixels = payload(bytes, 16, n * h * w)?;
    Tensor::new(&[n, 1, h, w], pixels.iter().map(|&p| p as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4, "label count")? as usize;
    Ok(payload(bytes, 8, n)?.iter().map(|&b| b as usize).collect())
}

pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::format(0, format!("cannot read {}: {e}", path.display())))
}

/// Loads an IDX image/label pair; the class count is `max(label) + 1`, at
/// least 10.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read(images_path)?)
        .map_err(|e| with_path(e, images_path))?;
    let labels = parse_idx_labels(&read(labels_path)?).map_err(|e| with_path(e, labels_path))?;
    let k = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, images, labels, k)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Standard MNIST/Fashion-MNIST file names under `dir`.
pub fn idx_paths(dir: &Path, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let (i, l) = idx_paths(dir, train);
    load_idx(&i, &l)
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            format!(
                "CIFAR-10 batch of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::new();
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format(
                (r * CIFAR_RECORD) as u64,
                format!("label byte {} out of range", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Concatenates CIFAR-10 binary batches into `[N,3,32,32]` in [0,1].
pub fn load_cifar10_bin(paths: &[PathBuf]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::config("no CIFAR-10 batch files given"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = parse_cifar10(&read(p)?).map_err(|e| with_path(e, p))?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    Dataset::new("cifar10", Tensor::new(&[n, 3, 32, 32], pixels)?, labels, 10)
}

/// Standard batch file names under `dir`.
pub fn cifar10_paths(dir: &Path, train: bool) -> Vec<PathBuf> {
    if train {
        (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![dir.join("test_batch.bin")]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(ds: &Dataset) -> Result<ChannelStats> {
        if ds.is_empty() {
            return Err(Error::contract("cannot compute statistics of an empty dataset"));
        }
        let [c, h, w] = ds.sample_shape();
        let hw = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..ds.len() {
            for (ch, plane) in ds.sample(i).chunks_exact(hw).enumerate() {
                for &x in plane {
                    sum[ch] += x as f64;
                    sq[ch] += x as f64 * x as f64;
                }
            }
        }
        let n = (ds.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    /// Statistics cached as `stats.json` in `dir`, computed from `train`
    /// when the cache is absent.
    pub fn cached(dir: &Path, train: &Dataset) -> Result<ChannelStats> {
        let path = dir.join("stats.json");
        if let Ok(text) = fs::read_to_string(&path) {
            return Ok(serde_json::from_str(&text)?);
        }
        let stats = Self::compute(train)?;
        fs::write(&path, serde_json::to_string_pretty(&stats)?)?;
        Ok(stats)
    }

    fn apply(&self, images: &mut Tensor<f32>, f: impl Fn(f32, f64, f64) -> f32) -> Result<()> {
        let s = images.shape().to_vec();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(Error::dim(format!(
                "{} channel statistics for images of shape {s:?}",
                self.mean.len()
            )));
        }
        let (c, hw) = (s[1], s[2] * s[3]);
        for (i, x) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *x = f(*x, self.mean[ch], self.std[ch]);
        }
        Ok(())
    }

    /// `(x - mean) / std` per channel of `[N,C,H,W]` images.
    pub fn normalize_images(&self, images: &mut Tensor<f32>) -> Result<()> {
        self.apply(images, |x, m, s| ((x as f64 - m) / s) as f32)
    }

    pub fn denormalize_images(&self, images: &mut Tensor<f32>) -> Result<()> {
        self.apply(images, |x, m, s| (x as f64 * s + m) as f32)
    }

    pub fn normalize(&self, ds: &mut Dataset) -> Result<()> {
        self.normalize_images(&mut ds.images)
    }

    pub fn denormalize(&self, ds: &mut Dataset) -> Result<()> {
        self.denormalize_images(&mut ds.images)
    }
}

pub const SYNTH_SIDE: usize = 16;
pub const SYNTH_CLASSES: usize = 4;
pub const SYNTH_CLASS_NAMES: [&str; SYNTH_CLASSES] = ["filled-square", "hollow-square", "cross", "diagonal-stripe"];

fn draw_shape(class: usize, r: &mut impl Rng, img: &mut [f32]) {
    let n = SYNTH_SIDE;
    let ink: f32 = r.random_range(0.7..1.0);
    let mut set = |y: usize, x: usize| img[y * n + x] = ink;
    match class {
        0 | 1 => {
            let side = r.random_range(5..=8);
            let y0 = r.random_range(0..=n - side);
            let x0 = r.random_range(0..=n - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let edge = y == y0 || x == x0 || y == y0 + side - 1 || x == x0 + side - 1;
                    if class == 0 || edge {
                        set(y, x);
                    }
                }
            }
        }
        2 => {
            let arm = r.random_range(3..=5);
            let cy = r.random_range(arm..n - arm);
            let cx = r.random_range(arm..n - arm);
            for d in 0..=2 * arm {
                set(cy - arm + d, cx);
                set(cy, cx - arm + d);
            }
        }
        _ => {
            let offset: i64 = r.random_range(-4..=4);
            for y in 0..n {
                for x in 0..n {
                    if (x as i64 - y as i64 - offset).abs() <= 1 {
                        set(y, x);
                    }
                }
            }
        }
    }
}

/// `n` 16x16 single-channel images of four shape classes with random
/// placement, size and intensity; classes are balanced (`n/4` each when
/// `n` is a multiple of 4) and shuffled.
pub fn synth_shapes(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, "synth_shapes");
    let order = rng::permutation(&mut r, n);
    let px = SYNTH_SIDE * SYNTH_SIDE;
    let mut data = vec![0.0f32; n * px];
    let mut labels = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        let class = i % SYNTH_CLASSES;
        labels[slot] = class;
        draw_shape(class, &mut r, &mut data[slot * px..][..px]);
    }
    Dataset::new(
        "synth_shapes",
        Tensor::new(&[n, 1, SYNTH_SIDE, SYNTH_SIDE], data).expect("synth shape"),
        labels,
        SYNTH_CLASSES,
    )
    .expect("synth labels")
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// `[B,K]` one-hot targets.
    pub one_hot: Tensor<f32>,
}

/// Iterator over mini-batches covering every sample exactly once.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

/// Mini-batches of `ds`, shuffled by `shuffle_seed` or in dataset order.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
    if batch_size < 1 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let order = match shuffle_seed {
        Some(seed) => rng::permutation(&mut rng::stream(seed, "shuffle"), ds.len()),
        None => (0..ds.len()).collect(),
    };
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let sub = self.ds.select(&indices).ok()?;
        let k = self.ds.num_classes;
        let mut one_hot = Tensor::zeros(&[indices.len(), k]);
        for (i, &l) in sub.labels.iter().enumerate() {
            one_hot.data_mut()[i * k + l] = 1.0;
        }
        Some(Batch {
            indices,
            images: sub.images,
            labels: sub.labels,
            one_hot,
        })
    }
}
