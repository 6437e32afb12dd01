//! Versioned binary snapshots of a network and its optimizer.
//!
//! Layout (all integers little-endian, reals are IEEE-754 `f64`):
//!
//! ```text
//! magic        8 bytes  "DIGITNET"
//! version      u32      currently 1
//! epoch        u64      completed epochs
//! seed         u64
//! rng_state    4 x u64  dropout generator words
//! batch_size   u64
//! iteration    u64      optimizer updates applied
//! lr, decay, momentum   3 x f64
//! nesterov     u8       0 or 1
//! input rank   u32, then rank x u32 dims
//! layer count  u32, then per layer a u8 tag and its fields:
//!              0 conv2d  (u32 kernel, u32 filters)
//!              1 maxpool (u32 size)
//!              2 flatten
//!              3 dense   (u32 units)
//!              4 relu
//!              5 dropout (f64 rate)
//!              6 softmax
//! params       u32 count, then tensors
//! velocity     u32 count (0 before the first update), then tensors
//! tensor       u32 rank, rank x u32 dims, product(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Network};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIGITNET";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub seed: u64,
    pub rng_state: [u64; 4],
    pub batch_size: u64,
    pub iteration: u64,
    pub sgd: SgdConfig,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Tensor>,
    pub velocity: Vec<Tensor>,
}

impl Checkpoint {
    /// Rebuilds the network described by the checkpoint.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::with_zero_params(&self.input_shape, self.layers.clone())?;
        net.set_params(self.params.clone())?;
        Ok(net)
    }

    pub fn optimizer(&self) -> Result<Sgd> {
        Sgd::from_state(self.sgd, self.velocity.clone(), self.iteration)
    }

    pub fn rng(&self) -> SeededRng {
        SeededRng::from_state(self.seed, self.rng_state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(self.epoch);
        w.u64(self.seed);
        for s in self.rng_state {
            w.u64(s);
        }
        w.u64(self.batch_size);
        w.u64(self.iteration);
        w.f64(self.sgd.lr);
        w.f64(self.sgd.decay);
        w.f64(self.sgd.momentum);
        w.bytes(&[u8::from(self.sgd.nesterov)]);
        w.dims(&self.input_shape);
        w.u32(self.layers.len() as u32);
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv2d { kernel, filters } => {
                    w.bytes(&[0]);
                    w.u32(kernel as u32);
                    w.u32(filters as u32);
                }
                LayerSpec::MaxPool2d { size } => {
                    w.bytes(&[1]);
                    w.u32(size as u32);
                }
                LayerSpec::Flatten => w.bytes(&[2]),
                LayerSpec::Dense { units } => {
                    w.bytes(&[3]);
                    w.u32(units as u32);
                }
                LayerSpec::Relu => w.bytes(&[4]),
                LayerSpec::Dropout { rate } => {
                    w.bytes(&[5]);
                    w.f64(rate);
                }
                LayerSpec::Softmax => w.bytes(&[6]),
            }
        }
        w.tensors(&self.params);
        w.tensors(&self.velocity);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        let batch_size = r.u64()?;
        let iteration = r.u64()?;
        let sgd = SgdConfig {
            lr: r.f64()?,
            decay: r.f64()?,
            momentum: r.f64()?,
            nesterov: match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(r.error(1, format!("bad nesterov flag {other}"))),
            },
        };
        let input_shape = r.dims()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let layer = match r.u8()? {
                0 => LayerSpec::Conv2d {
                    kernel: r.u32()? as usize,
                    filters: r.u32()? as usize,
                },
                1 => LayerSpec::MaxPool2d {
                    size: r.u32()? as usize,
                },
                2 => LayerSpec::Flatten,
                3 => LayerSpec::Dense {
                    units: r.u32()? as usize,
                },
                4 => LayerSpec::Relu,
                5 => LayerSpec::Dropout { rate: r.f64()? },
                6 => LayerSpec::Softmax,
                tag => return Err(r.error(1, format!("unknown layer tag {tag}"))),
            };
            layers.push(layer);
        }
        let params = r.tensors()?;
        let velocity = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(r.error(0, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            epoch,
            seed,
            rng_state,
            batch_size,
            iteration,
            sgd,
            input_shape,
            layers,
            params,
            velocity,
        };
        // Structural consistency: the parameters must fit the architecture.
        ckpt.network()
            .map_err(|e| Error::format(bytes.len(), format!("inconsistent checkpoint: {e}")))?;
        if !ckpt.velocity.is_empty()
            && (ckpt.velocity.len() != ckpt.params.len()
                || ckpt
                    .velocity
                    .iter()
                    .zip(&ckpt.params)
                    .any(|(v, p)| v.shape() != p.shape()))
        {
            return Err(Error::format(
                bytes.len(),
                "optimizer state does not match parameters",
            ));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { offset, detail } => {
                Error::format(offset, format!("{}: {detail}", path.display()))
            }
            other => other,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
    }

    fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.dims(t.shape());
            self.buf.reserve(8 * t.len());
            for &v in t.data() {
                self.f64(v);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, back: usize, detail: String) -> Error {
        Error::format(self.pos.saturating_sub(back), detail)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!(
                        "truncated: need {n} bytes, {} remain",
                        self.bytes.len() - self.pos
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.error(4, format!("implausible tensor rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let start = self.pos;
            let shape = self.dims()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::format(start, "tensor size overflows"))?;
            let raw = self.take(8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push(Tensor::new(shape, data).map_err(|e| Error::format(start, e.to_string()))?);
        }
        Ok(out)
    }
}
