//! MNIST in IDX format: parsing, normalisation, one-hot labels and
//! shuffled mini-batches.
//!
//! An IDX file is a big-endian `u32` magic number whose low byte is the
//! number of dimensions (third byte `0x08` marks unsigned bytes), followed by
//! one big-endian `u32` per dimension and then the raw payload. Files may
//! also be gzip-compressed; that is detected from the first two bytes.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

const GZIP_SIGNATURE: [u8; 2] = [0x1f, 0x8b];

/// Decoded IDX container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdx {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl RawIdx {
    /// Encodes back to the on-disk (uncompressed) layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn is_images(&self) -> bool {
        self.magic == IMAGES_MAGIC
    }

    pub fn is_labels(&self) -> bool {
        self.magic == LABELS_MAGIC
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset, "file ends inside the header"))
}

/// Parses an uncompressed IDX byte stream holding MNIST images or labels.
pub fn parse_idx(bytes: &[u8]) -> Result<RawIdx> {
    if bytes.len() < 8 {
        return Err(Error::format(
            bytes.len(),
            format!("IDX stream needs at least 8 bytes, got {}", bytes.len()),
        ));
    }
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        other => {
            return Err(Error::format(
                0,
                format!("bad IDX magic 0x{other:08X} (expected 0x00000803 or 0x00000801)"),
            ))
        }
    };
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::format(4, "IDX dimensions overflow"))?;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::format(
            header,
            format!("IDX payload length {actual} does not match dimensions {dims:?} (expected {expected})"),
        ));
    }
    Ok(RawIdx {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Reads a file, transparently inflating it when it carries the gzip signature.
pub fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_SIGNATURE) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx(path: &Path) -> Result<RawIdx> {
    let bytes = read_maybe_gzip(path)?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Format { offset, detail } => {
            Error::format(offset, format!("{}: {detail}", path.display()))
        }
        other => other,
    })
}

/// Maps a raw byte pixel to `[0, 1]`.
pub fn normalize(pixel: u8) -> f64 {
    f64::from(pixel) / 255.0
}

pub fn one_hot(label: u8) -> Result<Tensor> {
    let label = usize::from(label);
    if label >= CLASSES {
        return Err(Error::domain(format!("label {label} outside 0..=9")));
    }
    let mut t = Tensor::zeros(&[CLASSES]);
    t.data_mut()[label] = 1.0;
    Ok(t)
}

/// Images scaled to `[0, 1]` with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, 28, 28, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    /// `[N, 10]`.
    pub onehot: Tensor,
}

impl Dataset {
    pub fn from_idx(images: &RawIdx, labels: &RawIdx) -> Result<Self> {
        if !images.is_images() {
            return Err(Error::format(0, "first file is not an IDX image file"));
        }
        if !labels.is_labels() {
            return Err(Error::format(0, "second file is not an IDX label file"));
        }
        let n = images.dims[0] as usize;
        let (rows, cols) = (images.dims[1] as usize, images.dims[2] as usize);
        if (rows, cols) != (SIDE, SIDE) {
            return Err(Error::format(
                8,
                format!("images are {rows}x{cols}, expected 28x28"),
            ));
        }
        if labels.dims[0] as usize != n {
            return Err(Error::format(
                4,
                format!("{n} images but {} labels", labels.dims[0]),
            ));
        }
        let pixels = images.payload.iter().copied().map(normalize).collect();
        Dataset::new(
            Tensor::new(vec![n, SIDE, SIDE, 1], pixels)?,
            labels.payload.clone(),
        )
    }

    pub fn new(images: Tensor, labels: Vec<u8>) -> Result<Self> {
        if images.shape().first() != Some(&labels.len()) {
            return Err(Error::shape(format!(
                "{:?} images for {} labels",
                images.shape(),
                labels.len()
            )));
        }
        let mut onehot = vec![0.0; labels.len() * CLASSES];
        for (i, &l) in labels.iter().enumerate() {
            if usize::from(l) >= CLASSES {
                return Err(Error::format(
                    8 + i,
                    format!("label {l} at index {i} outside 0..=9"),
                ));
            }
            onehot[i * CLASSES + usize::from(l)] = 1.0;
        }
        Ok(Dataset {
            images,
            onehot: Tensor::new(vec![labels.len(), CLASSES], onehot)?,
            labels,
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        Dataset::from_idx(&read_idx(images)?, &read_idx(labels)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            onehot: self.onehot.gather_rows(indices),
        }
    }

    /// The first `limit` samples (or all of them).
    pub fn take(&self, limit: usize) -> Dataset {
        if limit >= self.len() {
            return self.clone();
        }
        let indices: Vec<usize> = (0..limit).collect();
        self.select(&indices)
    }

    /// Image `index` as `[1, 28, 28, 1]`.
    pub fn image(&self, index: usize) -> Tensor {
        self.select(&[index]).images
    }

    /// Count of each digit.
    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }
}

/// Paths of the four standard MNIST files.
#[derive(Debug, Clone)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// Looks for the files in `dir` under their usual names, with or without
    /// a `.gz` suffix and with either `-idx` or `.idx` separators.
    pub fn locate(dir: &Path) -> Result<Self> {
        let find = |stem: &str, kind: &str| -> Result<PathBuf> {
            let candidates = [
                format!("{stem}-{kind}-ubyte"),
                format!("{stem}.{kind}-ubyte"),
                format!("{stem}-{kind}-ubyte.gz"),
                format!("{stem}.{kind}-ubyte.gz"),
            ];
            candidates
                .iter()
                .map(|name| dir.join(name))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Error::User(format!("no {stem}-{kind}-ubyte[.gz] in {}", dir.display()))
                })
        };
        Ok(MnistFiles {
            train_images: find("train-images", "idx3")?,
            train_labels: find("train-labels", "idx1")?,
            test_images: find("t10k-images", "idx3")?,
            test_labels: find("t10k-labels", "idx1")?,
        })
    }

    pub fn load_train(&self) -> Result<Dataset> {
        Dataset::load(&self.train_images, &self.train_labels)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        Dataset::load(&self.test_images, &self.test_labels)
    }
}

/// Visiting order for one epoch of mini-batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub order: Vec<usize>,
    pub drop_last: bool,
}

impl BatchPlan {
    /// A shuffled plan over `n` samples.
    pub fn shuffled(n: usize, batch_size: usize, rng: &mut SeededRng) -> Result<Self> {
        check_batch_size(batch_size)?;
        Ok(BatchPlan {
            batch_size,
            order: rng.permutation(n),
            drop_last: false,
        })
    }

    /// Samples in storage order.
    pub fn sequential(n: usize, batch_size: usize) -> Result<Self> {
        check_batch_size(batch_size)?;
        Ok(BatchPlan {
            batch_size,
            order: (0..n).collect(),
            drop_last: false,
        })
    }

    pub fn with_drop_last(mut self, drop_last: bool) -> Self {
        self.drop_last = drop_last;
        self
    }

    /// Sample indices of each batch.
    pub fn chunks(&self) -> impl Iterator<Item = &[usize]> + '_ {
        let size = self.batch_size;
        let drop_last = self.drop_last;
        self.order
            .chunks(size)
            .filter(move |c| !drop_last || c.len() == size)
    }
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        Err(Error::config("batch size must be at least 1"))
    } else {
        Ok(())
    }
}

/// One mini-batch gathered from a [`Dataset`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor,
    pub onehot: Tensor,
    pub labels: Vec<u8>,
}

/// Materialises the batches of `plan` over `dataset`.
pub fn batches<'a>(dataset: &'a Dataset, plan: &'a BatchPlan) -> impl Iterator<Item = Batch> + 'a {
    plan.chunks().map(move |idx| {
        let part = dataset.select(idx);
        Batch {
            indices: idx.to_vec(),
            images: part.images,
            onehot: part.onehot,
            labels: part.labels,
        }
    })
}
