//! Redundant-filter detection for convolution layers.
//!
//! Filters are compared by cosine similarity of their flattened kernels
//! (all input channels, bias excluded). Layers in reports and file names are
//! numbered by convolution ordinal starting at 1, so layer 1 is the first
//! convolution of the network.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{to_gray, GrayImage};
use crate::layers::{relu, CnnOptions, LayerSpec, Network};
use crate::mnist::Dataset;
use crate::plot::draw_text;
use crate::tensor::Tensor;
use crate::trainer::{format_sig9, Trainer, TrainingConfig};

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Header of the similar-pair summary CSV.
pub const REPORT_HEADER: &str = "layer,kernel,filters,threshold,pair_count,total_pairs,ratio";

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine similarity of {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(Error::domain(
            "cosine similarity is undefined for a zero vector",
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `a·b / (‖a‖‖b‖)` over the flattened elements of both tensors.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    cosine_slices(a.data(), b.data())
}

/// Splits a `[k, k, C, F]` weight tensor into `F` flattened filters of
/// length `k·k·C`.
pub fn filter_vectors(weights: &Tensor) -> Result<Vec<Vec<f64>>> {
    let &[kh, kw, c, f] = weights.shape() else {
        return Err(Error::shape(format!(
            "expected [k, k, C, F] conv weights, got {:?}",
            weights.shape()
        )));
    };
    let len = kh * kw * c;
    let mut out = vec![Vec::with_capacity(len); f];
    for row in weights.data().chunks_exact(f.max(1)).take(len) {
        for (filter, &w) in out.iter_mut().zip(row) {
            filter.push(w);
        }
    }
    Ok(out)
}

/// Pairwise cosine similarities of one layer's filters. Entries involving
/// a zero-norm filter are NaN and counted in `undefined_pairs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub layer_index: usize,
    pub kernel_size: usize,
    pub n: usize,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
    pub undefined_pairs: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn with_layer(mut self, layer_index: usize) -> Self {
        self.layer_index = layer_index;
        self
    }
}

/// Similarity matrix of a `[k, k, C, F]` filter bank (`layer_index` 0).
pub fn similarity_matrix(weights: &Tensor) -> Result<SimilarityMatrix> {
    let filters = filter_vectors(weights)?;
    let n = filters.len();
    if n < 2 {
        return Err(Error::domain(format!(
            "similarity needs at least 2 filters, got {n}"
        )));
    }
    let mut values = vec![f64::NAN; n * n];
    let mut undefined_pairs = 0;
    for i in 0..n {
        for j in i..n {
            match cosine_slices(&filters[i], &filters[j]) {
                Ok(s) => {
                    values[i * n + j] = s;
                    values[j * n + i] = s;
                }
                Err(_) if i != j => undefined_pairs += 1,
                Err(_) => {}
            }
        }
    }
    if undefined_pairs > 0 {
        log::warn!("{undefined_pairs} filter pairs skipped: zero-norm filter");
    }
    Ok(SimilarityMatrix {
        layer_index: 0,
        kernel_size: weights.shape()[0],
        n,
        values,
        undefined_pairs,
    })
}

/// Similarity matrix of the `ordinal`-th convolution layer (1-based).
pub fn layer_similarity(network: &Network, ordinal: usize) -> Result<SimilarityMatrix> {
    let index = conv_layer_index(network, ordinal)?;
    let (weights, _) = network
        .layer_params(index)
        .ok_or_else(|| Error::Internal("conv layer without parameters".into()))?;
    Ok(similarity_matrix(weights)?.with_layer(ordinal))
}

/// Network layer index of the `ordinal`-th convolution (1-based).
pub fn conv_layer_index(network: &Network, ordinal: usize) -> Result<usize> {
    let convs = network.conv_layers();
    ordinal
        .checked_sub(1)
        .and_then(|k| convs.get(k).copied())
        .ok_or_else(|| {
            Error::domain(format!(
                "conv layer {ordinal} requested, network has {}",
                convs.len()
            ))
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarPair {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarPairReport {
    pub layer_index: usize,
    pub kernel_size: usize,
    pub n: usize,
    pub threshold: f64,
    /// Whether `|similarity|` was compared against the threshold.
    pub absolute: bool,
    /// `i < j`, sorted by descending (compared) similarity, then by index.
    pub pairs: Vec<SimilarPair>,
    pub total_pairs: usize,
    pub ratio: f64,
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if threshold > -1.0 && threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "threshold {threshold} outside (-1, 1]"
        )))
    }
}

/// Pairs whose similarity reaches `threshold`. By default the signed value
/// is compared, so anti-correlated filters do not count; `absolute`
/// compares `|similarity|` instead. Undefined entries never qualify.
pub fn similar_pairs(
    matrix: &SimilarityMatrix,
    threshold: f64,
    absolute: bool,
) -> Result<SimilarPairReport> {
    validate_threshold(threshold)?;
    let score = |s: f64| if absolute { s.abs() } else { s };
    let n = matrix.n;
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = matrix.get(i, j);
            if !s.is_nan() && score(s) >= threshold {
                pairs.push(SimilarPair {
                    i,
                    j,
                    similarity: s,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        score(b.similarity)
            .total_cmp(&score(a.similarity))
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    let total_pairs = n * n.saturating_sub(1) / 2;
    let ratio = if total_pairs == 0 {
        0.0
    } else {
        pairs.len() as f64 / total_pairs as f64
    };
    Ok(SimilarPairReport {
        layer_index: matrix.layer_index,
        kernel_size: matrix.kernel_size,
        n,
        threshold,
        absolute,
        pairs,
        total_pairs,
        ratio,
    })
}

/// One report per (conv layer, threshold) for a single network.
pub fn analyze_network(
    network: &Network,
    thresholds: &[f64],
    absolute: bool,
) -> Result<Vec<SimilarPairReport>> {
    let mut reports = Vec::new();
    for ordinal in 1..=network.conv_layers().len() {
        let matrix = layer_similarity(network, ordinal)?;
        for &t in thresholds {
            reports.push(similar_pairs(&matrix, t, absolute)?);
        }
    }
    Ok(reports)
}

/// Summary CSV with one row per report.
pub fn report_csv(reports: &[SimilarPairReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.layer_index,
            r.kernel_size,
            r.n,
            format_sig9(r.threshold),
            r.pairs.len(),
            r.total_pairs,
            format_sig9(r.ratio)
        );
    }
    out
}

/// Pair listing (`i,j,similarity`) of one report.
pub fn pairs_csv(report: &SimilarPairReport) -> String {
    let mut out = String::from("i,j,similarity\n");
    for p in &report.pairs {
        let _ = writeln!(out, "{},{},{}", p.i, p.j, format_sig9(p.similarity));
    }
    out
}

/// File name used for a report's pair listing, e.g. `similarity_layer1_t0.5.csv`.
pub fn pairs_file_name(report: &SimilarPairReport) -> String {
    format!(
        "similarity_layer{}_t{}.csv",
        report.layer_index,
        format_sig9(report.threshold)
    )
}

/// Response of one filter to one input image, after ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub layer_index: usize,
    pub filter_index: usize,
    /// `[h, w]`.
    pub map: Tensor,
}

/// Post-ReLU activation maps of the convolution at network layer
/// `layer_index` for a single image (`[H, W, C]` or `[1, H, W, C]`).
pub fn activation_maps(
    network: &Network,
    image: &Tensor,
    layer_index: usize,
) -> Result<Vec<ActivationMap>> {
    match network.spec(layer_index) {
        Some(LayerSpec::Conv2d { .. }) => {}
        Some(spec) => {
            return Err(Error::domain(format!(
                "layer {layer_index} is {}, not a convolution",
                spec.kind()
            )))
        }
        None => return Err(Error::domain(format!("layer {layer_index} does not exist"))),
    }
    let batch = if image.shape() == network.input_shape() {
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        image.clone().reshape(&shape)?
    } else {
        image.clone()
    };
    if batch.shape().first() != Some(&1) {
        return Err(Error::shape(format!(
            "activation maps take one image, got {:?}",
            image.shape()
        )));
    }
    let out = relu(&network.forward_to(&batch, layer_index + 1)?);
    let &[_, h, w, f] = out.shape() else {
        return Err(Error::Internal("conv output is not [1, H, W, F]".into()));
    };
    let data = out.data();
    (0..f)
        .map(|k| {
            let values = (0..h * w).map(|p| data[p * f + k]).collect();
            Ok(ActivationMap {
                layer_index,
                filter_index: k,
                map: Tensor::new(vec![h, w], values)?,
            })
        })
        .collect()
}

/// Kernel of filter `k` averaged over input channels, as `[k, k]`.
pub fn filter_kernel(weights: &Tensor, k: usize) -> Result<Tensor> {
    let &[kh, kw, c, f] = weights.shape() else {
        return Err(Error::shape(format!(
            "expected [k, k, C, F] conv weights, got {:?}",
            weights.shape()
        )));
    };
    if k >= f {
        return Err(Error::domain(format!("filter {k} of {f}")));
    }
    let w = weights.data();
    let values = (0..kh * kw)
        .map(|p| (0..c).map(|ch| w[(p * c + ch) * f + k]).sum::<f64>() / c as f64)
        .collect();
    Tensor::new(vec![kh, kw], values)
}

const TILE: usize = 56;
const GAP: usize = 2;
const BACKGROUND: u8 = 255;

/// All filters of a layer as a grid of min-max scaled tiles (channel mean
/// for multi-channel kernels).
pub fn filter_grid(weights: &Tensor) -> Result<GrayImage> {
    let f = *weights
        .shape()
        .last()
        .ok_or_else(|| Error::shape("empty weight shape"))?;
    let size = weights.shape()[0] * 4;
    let tiles = (0..f)
        .map(|k| Ok(to_gray(&filter_kernel(weights, k)?)?.fit_square(size, BACKGROUND)))
        .collect::<Result<Vec<_>>>()?;
    let columns = (f as f64).sqrt().ceil() as usize;
    GrayImage::grid(&tiles, columns, 1, BACKGROUND)
}

/// One similar pair side by side: both kernels, the input image and both
/// activation maps, with the similarity printed underneath.
pub fn pair_figure(
    network: &Network,
    ordinal: usize,
    pair: SimilarPair,
    image: &Tensor,
) -> Result<GrayImage> {
    let index = conv_layer_index(network, ordinal)?;
    let (weights, _) = network
        .layer_params(index)
        .ok_or_else(|| Error::Internal("conv layer without parameters".into()))?;
    let maps = activation_maps(network, image, index)?;
    let (h, w) = (network.input_shape()[0], network.input_shape()[1]);
    let input = Tensor::new(
        vec![h, w],
        image
            .data()
            .iter()
            .step_by(network.input_shape()[2])
            .copied()
            .collect(),
    )?;
    let tiles = [
        to_gray(&filter_kernel(weights, pair.i)?)?,
        to_gray(&filter_kernel(weights, pair.j)?)?,
        to_gray(&input)?,
        to_gray(&maps[pair.i].map)?,
        to_gray(&maps[pair.j].map)?,
    ]
    .map(|t| t.fit_square(TILE, BACKGROUND));
    let row = GrayImage::grid(&tiles, tiles.len(), GAP, BACKGROUND)?;
    let mut out = GrayImage::filled(row.width, row.height + 9, BACKGROUND);
    out.blit(&row, 0, 0);
    let label = format!("{:.4}", pair.similarity);
    draw_text(&mut out, &label, 2, row.height as i64 + 2);
    Ok(out)
}

/// Filter-count sweep: for each count both convolutions get that many
/// filters, a network is trained (or loaded) and analysed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub filter_counts: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub absolute: bool,
    /// Template for training; its architecture is replaced per count.
    pub training: TrainingConfig,
    pub options: CnnOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            filter_counts: vec![32, 64, 128, 256],
            thresholds: vec![0.5, 0.6],
            absolute: false,
            training: TrainingConfig::default(),
            options: CnnOptions::default(),
        }
    }
}

impl SweepConfig {
    pub fn architecture(&self, filters: usize) -> Vec<LayerSpec> {
        CnnOptions {
            conv1_filters: filters,
            conv2_filters: filters,
            ..self.options.clone()
        }
        .layers()
    }
}

pub fn sweep_checkpoint_path(dir: &Path, filters: usize) -> PathBuf {
    dir.join(format!("sweep_f{filters}.bin"))
}

/// Runs the sweep, reusing `sweep_f{F}.bin` checkpoints in `dir` when they
/// exist and training missing ones when `data` is given.
pub fn sweep(
    config: &SweepConfig,
    dir: &Path,
    data: Option<(&Dataset, &Dataset)>,
) -> Result<Vec<SimilarPairReport>> {
    for &t in &config.thresholds {
        validate_threshold(t)?;
    }
    let mut reports = Vec::new();
    for &filters in &config.filter_counts {
        let layers = config.architecture(filters);
        let path = sweep_checkpoint_path(dir, filters);
        let network = if path.exists() {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.layers != layers {
                return Err(Error::User(format!(
                    "{} does not hold a {filters}-filter network",
                    path.display()
                )));
            }
            ckpt.network()?
        } else {
            let Some((train, eval)) = data else {
                return Err(Error::User(format!(
                    "missing checkpoint {} and training is disabled",
                    path.display()
                )));
            };
            log::info!("sweep: training {filters}-filter network");
            let mut trainer = Trainer::new(TrainingConfig {
                layers,
                ..config.training.clone()
            })?;
            trainer.fit(train, eval, |_, _| Ok(()))?;
            trainer.checkpoint().save(&path)?;
            trainer.into_network()
        };
        reports.extend(analyze_network(
            &network,
            &config.thresholds,
            config.absolute,
        )?);
    }
    Ok(reports)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
