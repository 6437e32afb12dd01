//! Dense autoencoder and variational autoencoder on flattened MNIST digits.
//!
//! Both models train with the same [`Sgd`] optimizer as the classifier.
//! Inputs are `[N, 784]` batches with values in `[0, 1]`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{to_gray, GrayImage};
use crate::layers::{dense_backward, dense_forward, relu, relu_backward};
use crate::loss::{mse, EPS};
use crate::mnist::{BatchPlan, Dataset, PIXELS, SIDE};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::trainer::format_sig9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `[N, 28, 28, 1]` images as `[N, 784]` rows.
pub fn flatten_images(images: &Tensor) -> Result<Tensor> {
    let n = images.shape().first().copied().unwrap_or(0);
    images.clone().reshape(&[n, images.len() / n.max(1)])
}

fn check_rows(x: &Tensor, width: usize, what: &str) -> Result<usize> {
    match *x.shape() {
        [n, w] if w == width => Ok(n),
        _ => Err(Error::shape(format!(
            "{what} expects [N, {width}], got {:?}",
            x.shape()
        ))),
    }
}

/// He-normal weights `[out, inp]` and zero bias.
fn dense_init(out: usize, inp: usize, gain: f64, rng: &mut SeededRng) -> [Tensor; 2] {
    let std = (gain / inp as f64).sqrt();
    let w = (0..out * inp).map(|_| std * rng.normal()).collect();
    [
        Tensor::new(vec![out, inp], w).expect("nonzero dims"),
        Tensor::zeros(&[out]),
    ]
}

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

/// 784 → latent (ReLU) → 784 (sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    /// Encoder weight and bias, decoder weight and bias.
    pub params: Vec<Tensor>,
}

impl Autoencoder {
    pub fn new(latent: usize, rng: &mut SeededRng) -> Result<Self> {
        if latent == 0 {
            return Err(Error::config("latent width must be at least 1"));
        }
        let [w1, b1] = dense_init(latent, PIXELS, 2.0, rng);
        let [w2, b2] = dense_init(PIXELS, latent, 1.0, rng);
        Ok(Autoencoder {
            params: vec![w1, b1, w2, b2],
        })
    }

    pub fn latent(&self) -> usize {
        self.params[1].len()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        check_rows(x, PIXELS, "autoencoder")?;
        Ok(relu(&dense_forward(x, &self.params[0], &self.params[1])?))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(dense_forward(z, &self.params[2], &self.params[3])?.map(sigmoid))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Mean squared error over all elements of the batch and the gradient of
    /// it with respect to every parameter.
    pub fn loss_and_grads(&self, x: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        check_rows(x, PIXELS, "autoencoder")?;
        let pre = dense_forward(x, &self.params[0], &self.params[1])?;
        let h = relu(&pre);
        let r = self.decode(&h)?;
        let loss = mse(&r, x)?;
        let scale = 2.0 / r.len() as f64;
        let g: Vec<f64> = r
            .data()
            .iter()
            .zip(x.data())
            .map(|(&r, &t)| scale * (r - t) * r * (1.0 - r))
            .collect();
        let g = Tensor::new(r.shape().to_vec(), g)?;
        let dec = dense_backward(&h, &self.params[2], &g)?;
        let dpre = relu_backward(&pre, &dec.input)?;
        let enc = dense_backward(x, &self.params[0], &dpre)?;
        Ok((loss, vec![enc.weights, enc.bias, dec.weights, dec.bias]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeConfig {
    pub latent: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub limit_train: Option<usize>,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            latent: 32,
            epochs: 5,
            batch_size: 128,
            seed: 0,
            sgd: SgdConfig {
                lr: 5.0,
                decay: 0.0,
                ..SgdConfig::default()
            },
            limit_train: Some(10_000),
        }
    }
}

fn check_run(epochs: usize, batch_size: usize, limit: Option<usize>) -> Result<()> {
    if epochs == 0 || batch_size == 0 || limit == Some(0) {
        return Err(Error::config(
            "epochs, batch size and sample cap must be at least 1",
        ));
    }
    Ok(())
}

fn training_rows(data: &Dataset, limit: Option<usize>) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::domain("cannot train on an empty dataset"));
    }
    let data = match limit {
        Some(n) if n > data.len() => {
            return Err(Error::config(format!(
                "sample cap {n} exceeds the {} available samples",
                data.len()
            )))
        }
        Some(n) => data.take(n),
        None => data.clone(),
    };
    flatten_images(&data.images)
}

/// Trains an autoencoder and returns it with the epoch-mean loss of every
/// epoch (mean over batches weighted by batch size).
pub fn train_autoencoder(config: &AeConfig, data: &Dataset) -> Result<(Autoencoder, Vec<f64>)> {
    check_run(config.epochs, config.batch_size, config.limit_train)?;
    let x = training_rows(data, config.limit_train)?;
    let n = x.shape()[0];
    let mut model = Autoencoder::new(
        config.latent,
        &mut SeededRng::derived(config.seed, "ae-init", 0),
    )?;
    let mut sgd = Sgd::new(config.sgd)?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut shuffle = SeededRng::derived(config.seed, "ae-shuffle", epoch as u64);
        let plan = BatchPlan::shuffled(n, config.batch_size, &mut shuffle)?;
        let mut total = 0.0;
        for idx in plan.chunks() {
            let batch = x.gather_rows(idx);
            let (loss, grads) = model.loss_and_grads(&batch)?;
            finite(loss, "autoencoder")?;
            total += loss * idx.len() as f64;
            sgd.step(&mut model.params, &grads)?;
        }
        let mean = total / n as f64;
        log::info!("ae epoch {epoch}: mse {mean:.6}");
        curve.push(mean);
    }
    Ok((model, curve))
}

fn finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Internal(format!("non-finite {what} loss")))
    }
}

pub fn ae_loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,mse\n");
    for (i, v) in curve.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, format_sig9(*v));
    }
    out
}

// ---------------------------------------------------------------------------
// Variational autoencoder
// ---------------------------------------------------------------------------

/// Reconstruction term of the VAE objective, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconLoss {
    /// Binary cross-entropy summed over pixels.
    Bce,
    /// Squared error summed over pixels.
    Mse,
}

/// 784 → hidden (ReLU) → (μ, logvar) of width `latent`; latent → hidden
/// (ReLU) → 784 (sigmoid).
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    /// Encoder hidden, μ head, logvar head, decoder hidden, decoder output;
    /// each a weight followed by a bias.
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeLossParts {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Gradients of the batch-mean objective.
#[derive(Debug, Clone)]
pub struct VaeGrads {
    /// Same layout as [`Vae::params`].
    pub params: Vec<Tensor>,
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Result of [`Vae::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub z: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// `−½ Σ (1 + logvar − μ² − exp(logvar))`, summed over the latent width and
/// averaged over the rows of a batch.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape(format!(
            "kl: mu {:?} vs logvar {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    let total: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum();
    let rows = if mu.rank() >= 2 { mu.shape()[0] } else { 1 };
    Ok(total / rows as f64)
}

/// Reconstruction term plus KL, each averaged over the batch.
pub fn vae_loss(
    recon: &Tensor,
    target: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    kind: ReconLoss,
) -> Result<VaeLossParts> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs target {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let rows = if recon.rank() >= 2 {
        recon.shape()[0]
    } else {
        1
    };
    let sum: f64 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&r, &t)| match kind {
            ReconLoss::Bce => {
                let r = r.clamp(EPS, 1.0 - EPS);
                -(t * r.ln() + (1.0 - t) * (1.0 - r).ln())
            }
            ReconLoss::Mse => (r - t) * (r - t),
        })
        .sum();
    let recon = sum / rows as f64;
    let kl = kl_divergence(mu, logvar)?;
    Ok(VaeLossParts {
        recon,
        kl,
        total: recon + kl,
    })
}

/// `μ + exp(½·logvar) ⊙ ε`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "reparameterize: {:?}, {:?}, {:?}",
            mu.shape(),
            logvar.shape(),
            eps.shape()
        )));
    }
    let data = mu
        .data()
        .iter()
        .zip(logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

/// Standard-normal tensor of the given shape.
pub fn standard_normal(shape: &[usize], rng: &mut SeededRng) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

impl Vae {
    pub fn new(latent: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if latent == 0 || hidden == 0 {
            return Err(Error::config("latent and hidden widths must be at least 1"));
        }
        let mut params = Vec::with_capacity(10);
        params.extend(dense_init(hidden, PIXELS, 2.0, rng));
        params.extend(dense_init(latent, hidden, 1.0, rng));
        params.extend(dense_init(latent, hidden, 1.0, rng));
        params.extend(dense_init(hidden, latent, 2.0, rng));
        params.extend(dense_init(PIXELS, hidden, 1.0, rng));
        Ok(Vae { params })
    }

    pub fn latent(&self) -> usize {
        self.params[3].len()
    }

    pub fn hidden(&self) -> usize {
        self.params[1].len()
    }

    /// μ and logvar for a `[N, 784]` batch.
    pub fn encode_moments(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_rows(x, PIXELS, "vae")?;
        let h = relu(&dense_forward(x, &self.params[0], &self.params[1])?);
        let mu = dense_forward(&h, &self.params[2], &self.params[3])?;
        let logvar = dense_forward(&h, &self.params[4], &self.params[5])?;
        Ok((mu, logvar))
    }

    /// Samples `z` by reparameterization with noise drawn from `rng`.
    pub fn encode(&self, x: &Tensor, rng: &mut SeededRng) -> Result<Encoded> {
        let (mu, logvar) = self.encode_moments(x)?;
        let eps = standard_normal(mu.shape(), rng)?;
        self.encode_with_noise(mu, logvar, &eps)
    }

    /// Like [`Vae::encode`] with explicit noise; `ε = 0` gives `z = μ`.
    pub fn encode_with_noise(&self, mu: Tensor, logvar: Tensor, eps: &Tensor) -> Result<Encoded> {
        let z = reparameterize(&mu, &logvar, eps)?;
        Ok(Encoded { z, mu, logvar })
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        check_rows(z, self.latent(), "vae decoder")?;
        let h = relu(&dense_forward(z, &self.params[6], &self.params[7])?);
        Ok(dense_forward(&h, &self.params[8], &self.params[9])?.map(sigmoid))
    }

    /// Decodes `count` draws from the standard-normal prior.
    pub fn sample(&self, count: usize, rng: &mut SeededRng) -> Result<Tensor> {
        let z = standard_normal(&[count, self.latent()], rng)?;
        self.decode(&z)
    }

    /// Objective for given latent moments and noise, with gradients with
    /// respect to μ, logvar and the decoder parameters (indices 6..10 of
    /// `params`; encoder entries are zero).
    pub fn loss_from_latent(
        &self,
        target: &Tensor,
        mu: &Tensor,
        logvar: &Tensor,
        eps: &Tensor,
        kind: ReconLoss,
    ) -> Result<(VaeLossParts, VaeGrads)> {
        let n = check_rows(target, PIXELS, "vae")?;
        let z = reparameterize(mu, logvar, eps)?;
        check_rows(&z, self.latent(), "vae latent")?;
        let pre = dense_forward(&z, &self.params[6], &self.params[7])?;
        let h = relu(&pre);
        let r = dense_forward(&h, &self.params[8], &self.params[9])?.map(sigmoid);
        let parts = vae_loss(&r, target, mu, logvar, kind)?;

        let inv = 1.0 / n as f64;
        let g: Vec<f64> = r
            .data()
            .iter()
            .zip(target.data())
            .map(|(&r, &t)| match kind {
                ReconLoss::Bce => inv * (r - t),
                ReconLoss::Mse => inv * 2.0 * (r - t) * r * (1.0 - r),
            })
            .collect();
        let out = dense_backward(&h, &self.params[8], &Tensor::new(r.shape().to_vec(), g)?)?;
        let dpre = relu_backward(&pre, &out.input)?;
        let hid = dense_backward(&z, &self.params[6], &dpre)?;
        let dz = hid.input.data();

        let mut dmu = Vec::with_capacity(mu.len());
        let mut dlv = Vec::with_capacity(mu.len());
        for (k, ((&m, &lv), &e)) in mu
            .data()
            .iter()
            .zip(logvar.data())
            .zip(eps.data())
            .enumerate()
        {
            let sigma = (0.5 * lv).exp();
            dmu.push(dz[k] + inv * m);
            dlv.push(dz[k] * e * 0.5 * sigma + inv * 0.5 * (lv.exp() - 1.0));
        }
        let mut params: Vec<Tensor> = self.params[..6]
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        params.extend([hid.weights, hid.bias, out.weights, out.bias]);
        Ok((
            parts,
            VaeGrads {
                params,
                mu: Tensor::new(mu.shape().to_vec(), dmu)?,
                logvar: Tensor::new(mu.shape().to_vec(), dlv)?,
            },
        ))
    }

    /// Batch-mean objective and gradients of every parameter for fixed noise.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        eps: &Tensor,
        kind: ReconLoss,
    ) -> Result<(VaeLossParts, VaeGrads)> {
        check_rows(x, PIXELS, "vae")?;
        let pre = dense_forward(x, &self.params[0], &self.params[1])?;
        let h = relu(&pre);
        let mu = dense_forward(&h, &self.params[2], &self.params[3])?;
        let logvar = dense_forward(&h, &self.params[4], &self.params[5])?;
        let (parts, mut grads) = self.loss_from_latent(x, &mu, &logvar, eps, kind)?;
        let gm = dense_backward(&h, &self.params[2], &grads.mu)?;
        let gv = dense_backward(&h, &self.params[4], &grads.logvar)?;
        let dh = gm.input.add(&gv.input)?;
        let enc = dense_backward(x, &self.params[0], &relu_backward(&pre, &dh)?)?;
        grads.params[..6].clone_from_slice(&[
            enc.weights,
            enc.bias,
            gm.weights,
            gm.bias,
            gv.weights,
            gv.bias,
        ]);
        Ok((parts, grads))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub recon: ReconLoss,
    pub limit_train: Option<usize>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent: 20,
            hidden: 400,
            epochs: 5,
            batch_size: 128,
            seed: 0,
            sgd: SgdConfig {
                lr: 2e-3,
                decay: 0.0,
                ..SgdConfig::default()
            },
            recon: ReconLoss::Bce,
            limit_train: Some(10_000),
        }
    }
}

/// Trains a VAE; returns it with the epoch-mean loss parts of every epoch.
pub fn train_vae(config: &VaeConfig, data: &Dataset) -> Result<(Vae, Vec<VaeLossParts>)> {
    check_run(config.epochs, config.batch_size, config.limit_train)?;
    let x = training_rows(data, config.limit_train)?;
    let n = x.shape()[0];
    let mut model = Vae::new(
        config.latent,
        config.hidden,
        &mut SeededRng::derived(config.seed, "vae-init", 0),
    )?;
    let mut noise = SeededRng::derived(config.seed, "vae-noise", 0);
    let mut sgd = Sgd::new(config.sgd)?;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut shuffle = SeededRng::derived(config.seed, "vae-shuffle", epoch as u64);
        let plan = BatchPlan::shuffled(n, config.batch_size, &mut shuffle)?;
        let (mut recon, mut kl) = (0.0, 0.0);
        for idx in plan.chunks() {
            let batch = x.gather_rows(idx);
            let eps = standard_normal(&[idx.len(), config.latent], &mut noise)?;
            let (parts, grads) = model.loss_and_grads(&batch, &eps, config.recon)?;
            finite(parts.total, "vae")?;
            recon += parts.recon * idx.len() as f64;
            kl += parts.kl * idx.len() as f64;
            sgd.step(&mut model.params, &grads.params)?;
        }
        let (recon, kl) = (recon / n as f64, kl / n as f64);
        let parts = VaeLossParts {
            recon,
            kl,
            total: recon + kl,
        };
        log::info!(
            "vae epoch {epoch}: recon {:.4} kl {:.4} total {:.4}",
            parts.recon,
            parts.kl,
            parts.total
        );
        curve.push(parts);
    }
    Ok((model, curve))
}

pub fn vae_loss_csv(curve: &[VaeLossParts]) -> String {
    let mut out = String::from("epoch,recon,kl,total\n");
    for (i, p) in curve.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            format_sig9(p.recon),
            format_sig9(p.kl),
            format_sig9(p.total)
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Image grids
// ---------------------------------------------------------------------------

/// Gap in pixels between grid tiles.
pub const GRID_GAP: usize = 1;
const GRID_BACKGROUND: u8 = 255;

fn digit_tiles(rows: &Tensor) -> Result<Vec<GrayImage>> {
    let n = check_rows(rows, PIXELS, "digit grid")?;
    (0..n)
        .map(|i| to_gray(&rows.row(i).reshape(&[SIDE, SIDE])?))
        .collect()
}

/// Originals in the top row, reconstructions underneath, one column per
/// image. Each tile is min-max scaled.
pub fn reconstruction_grid(originals: &Tensor, reconstructions: &Tensor) -> Result<GrayImage> {
    if originals.shape() != reconstructions.shape() {
        return Err(Error::shape(format!(
            "{:?} originals vs {:?} reconstructions",
            originals.shape(),
            reconstructions.shape()
        )));
    }
    let mut tiles = digit_tiles(originals)?;
    let columns = tiles.len();
    tiles.extend(digit_tiles(reconstructions)?);
    GrayImage::grid(&tiles, columns, GRID_GAP, GRID_BACKGROUND)
}

/// Digits laid out `columns` per row.
pub fn sample_grid(samples: &Tensor, columns: usize) -> Result<GrayImage> {
    GrayImage::grid(&digit_tiles(samples)?, columns, GRID_GAP, GRID_BACKGROUND)
}

/// Writes [`reconstruction_grid`] of an autoencoder's output for `images`.
pub fn export_reconstructions(
    model: &Autoencoder,
    images: &Tensor,
    path: &Path,
) -> Result<GrayImage> {
    let grid = reconstruction_grid(images, &model.forward(images)?)?;
    grid.save_pgm(path)?;
    Ok(grid)
}
