//! Dataset ingestion (MNIST IDX files), mini-batching and a synthetic
//! classification set for runs without downloaded data.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Shape;
use crate::rng::{self, Domain};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Images scaled to `[0, 1]` (NHWC) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub shape: Shape,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.size();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Gathers the given example indices into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.shape.size());
        for &i in indices {
            inputs.extend_from_slice(self.image(i));
        }
        Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub labels: Vec<u32>,
    pub shape: Shape,
    pub split: Split,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Format(format!("image payload has {} bytes, header promises {need}", payload.len())));
    }
    Ok((n, rows, cols, &payload[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Format(format!("label payload has {} bytes, header promises {n}", payload.len())));
    }
    Ok(&payload[..n])
}

/// Loads an IDX image/label pair (plain or gzip-compressed). Pixels are
/// scaled by 1/255; the split tag defaults to `Train`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path.as_ref())?;
    let lbl_bytes = read_maybe_gz(labels_path.as_ref())?;
    from_idx_bytes(&img_bytes, &lbl_bytes)
}

pub fn from_idx_bytes(img_bytes: &[u8], lbl_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(img_bytes)?;
    let labels = parse_idx_labels(lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
    }
    Ok(Dataset {
        images: pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        labels: labels.iter().map(|&l| l as u32).collect(),
        shape: Shape::new(rows, cols, 1),
        split: Split::Train,
    })
}

/// Serializes a single-channel dataset back to IDX byte streams.
pub fn to_idx_bytes(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if ds.shape.c != 1 {
        return Err(Error::Shape("IDX export supports single-channel images only".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, ds.shape.h as u32, ds.shape.w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        let byte = u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte")))?;
        lbl.push(byte);
    }
    Ok((img, lbl))
}

/// Writes IDX files; a `.gz` extension selects gzip compression.
pub fn write_idx(ds: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (img, lbl) = to_idx_bytes(ds)?;
    write_maybe_gz(images_path.as_ref(), &img)?;
    write_maybe_gz(labels_path.as_ref(), &lbl)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let data = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, data).map_err(|e| Error::io(path, e))
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Loads the conventional four MNIST files from `dir`: the training pair and
/// the `t10k` pair, which serves as the validation split.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(
        find_file(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
        find_file(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
    )?;
    let val = load_idx(
        find_file(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
        find_file(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
    )?;
    Ok((train, val.with_split(Split::Validation)))
}

/// A seeded permutation of `0..n`.
pub fn epoch_order(n: usize, epoch_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(Domain::Data, epoch_seed, n as u64, 0));
    order
}

/// One epoch of batches in seeded order. The final short batch is kept.
pub fn make_batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    Ok(epoch_order(ds.len(), epoch_seed).chunks(batch_size).map(|idx| ds.batch(idx)).collect())
}

/// Endless stream of batches; epoch `e` uses the permutation keyed by
/// `(seed, e)`.
#[derive(Debug)]
pub struct BatchStream<'a> {
    ds: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(ds: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        Ok(BatchStream { ds, batch_size, seed, epoch: 0, order: epoch_order(ds.len(), rng::mix(seed, 0)), pos: 0 })
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.ds.len(), rng::mix(self.seed, self.epoch));
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.ds.batch(&self.order[self.pos..end]);
        self.pos = end;
        batch
    }
}

/// Appends every translation of the images by up to `radius` pixels in each
/// direction (zero fill), original first, then offsets in row-major order.
/// Radius 1 gives nine copies of the set.
pub fn expand_shifts(ds: &Dataset, radius: usize) -> Dataset {
    let Shape { h, w, c } = ds.shape;
    let size = ds.shape.size();
    let r = radius as isize;
    let copies = (2 * radius + 1).pow(2);
    let mut images = Vec::with_capacity(ds.images.len() * copies);
    let mut labels = Vec::with_capacity(ds.labels.len() * copies);
    images.extend_from_slice(&ds.images);
    labels.extend_from_slice(&ds.labels);
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            for (i, &label) in ds.labels.iter().enumerate() {
                let src = &ds.images[i * size..(i + 1) * size];
                let start = images.len();
                images.resize(start + size, 0.0);
                let dst = &mut images[start..];
                for y in 0..h as isize {
                    let sy = y - dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w as isize {
                        let sx = x - dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = (y as usize * w + x as usize) * c;
                        let s = (sy as usize * w + sx as usize) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
                labels.push(label);
            }
        }
    }
    Dataset { images, labels, shape: ds.shape, split: ds.split }
}

pub const SYNTH_SHAPE: Shape = Shape::new(8, 8, 1);

/// Gaussian blobs in pixel space, one per class, on an 8x8 single-channel
/// grid.
pub fn synth_dataset(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_shaped(n, classes, SYNTH_SHAPE, seed)
}

/// Class centres are uniform in `[0.2, 0.8]` per pixel; examples add
/// N(0, 0.1²) noise clamped to `[0, 1]`. Labels cycle so classes are balanced.
pub fn synth_dataset_shaped(n: usize, classes: usize, shape: Shape, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Range(format!("synthetic dataset needs n >= classes >= 2 (n={n}, classes={classes})")));
    }
    let dim = shape.size();
    let mut rng = rng::keyed(Domain::Synthetic, seed, 0, 0);
    let centre = Uniform::new(0.2f32, 0.8);
    let centres: Vec<f32> = (0..classes * dim).map(|_| centre.sample(&mut rng)).collect();
    let noise = Normal::new(0.0f32, 0.1).expect("valid normal");
    let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    let mut images = Vec::with_capacity(n * dim);
    for &l in &labels {
        let c = &centres[l as usize * dim..(l as usize + 1) * dim];
        images.extend(c.iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Ok(Dataset { images, labels, shape, split: Split::Train })
}
