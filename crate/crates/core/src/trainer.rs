//! Epoch loop for the classifier, evaluation and metric export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::layers::{CnnOptions, LayerSpec, Mode, Network, MNIST_INPUT};
use crate::loss::categorical_crossentropy;
use crate::mnist::{batches, BatchPlan, Dataset, CLASSES};
use crate::optim::{Sgd, SgdConfig};
use crate::plot::LineChart;
use crate::rng::SeededRng;
use crate::tensor::{argmax, Tensor};

/// Evaluation runs in fixed-size chunks so results do not depend on the
/// training batch size.
const EVAL_BATCH: usize = 250;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub layers: Vec<LayerSpec>,
    /// Train on the first `n` training samples only.
    pub limit_train: Option<usize>,
    /// Evaluate on the first `n` evaluation samples only.
    pub limit_eval: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 128,
            seed: 0,
            sgd: SgdConfig::default(),
            layers: CnnOptions::default().layers(),
            limit_train: None,
            limit_eval: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.limit_train == Some(0) || self.limit_eval == Some(0) {
            return Err(Error::config("sample caps must be at least 1"));
        }
        self.sgd.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

/// Final-epoch and best-epoch accuracies of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub best_train_acc: f64,
    pub best_val_acc: f64,
}

pub fn summarize(metrics: &[EpochMetrics]) -> Option<RunSummary> {
    let last = metrics.last()?;
    Some(RunSummary {
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        best_train_acc: metrics.iter().map(|m| m.train_acc).fold(0.0, f64::max),
        best_val_acc: metrics.iter().map(|m| m.val_acc).fold(0.0, f64::max),
    })
}

fn apply_cap(data: &Dataset, cap: Option<usize>, what: &str) -> Result<Dataset> {
    match cap {
        Some(n) if n > data.len() => Err(Error::config(format!(
            "{what} cap {n} exceeds the {} available samples",
            data.len()
        ))),
        Some(n) => Ok(data.take(n)),
        None => Ok(data.clone()),
    }
}

fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    let image_shape = &data.images.shape()[1..];
    if net.input_shape() != image_shape {
        return Err(Error::config(format!(
            "network input {:?} does not match data {:?}",
            net.input_shape(),
            image_shape
        )));
    }
    if net.output_shape() != [CLASSES] {
        return Err(Error::config(format!(
            "network output {:?} is not a {CLASSES}-way classifier",
            net.output_shape()
        )));
    }
    Ok(())
}

/// Owns the state of one training run so it can be advanced epoch by epoch
/// and checkpointed in between.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainingConfig,
    network: Network,
    optimizer: Sgd,
    dropout_rng: SeededRng,
    completed_epochs: usize,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut init = SeededRng::derived(config.seed, "init", 0);
        let network = Network::new(&MNIST_INPUT, config.layers.clone(), &mut init)?;
        Ok(Trainer {
            optimizer: Sgd::new(config.sgd)?,
            dropout_rng: SeededRng::derived(config.seed, "dropout", 0),
            network,
            config,
            completed_epochs: 0,
        })
    }

    /// Continues a run from a checkpoint. Architecture, seed, optimizer
    /// settings and batch size come from the checkpoint; `epochs` and the
    /// sample caps come from `config`.
    pub fn resume(checkpoint: &Checkpoint, config: TrainingConfig) -> Result<Self> {
        let config = TrainingConfig {
            seed: checkpoint.seed,
            batch_size: checkpoint.batch_size as usize,
            sgd: checkpoint.sgd,
            layers: checkpoint.layers.clone(),
            ..config
        };
        config.validate()?;
        Ok(Trainer {
            network: checkpoint.network()?,
            optimizer: checkpoint.optimizer()?,
            dropout_rng: checkpoint.rng(),
            completed_epochs: checkpoint.epoch as usize,
            config,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.completed_epochs as u64,
            seed: self.config.seed,
            rng_state: self.dropout_rng.state(),
            batch_size: self.config.batch_size as u64,
            iteration: self.optimizer.iteration(),
            sgd: *self.optimizer.config(),
            input_shape: self.network.input_shape().to_vec(),
            layers: self.network.specs().cloned().collect(),
            params: self.network.params().to_vec(),
            velocity: self.optimizer.velocity().to_vec(),
        }
    }

    /// One pass over `train` followed by evaluation on `eval`. Both datasets
    /// are used as given; caps are applied by [`Trainer::fit`].
    pub fn run_epoch(&mut self, train: &Dataset, eval: &Dataset) -> Result<EpochMetrics> {
        check_compatible(&self.network, train)?;
        let started = Instant::now();
        let epoch = self.completed_epochs + 1;
        let mut shuffle = SeededRng::derived(self.config.seed, "shuffle", epoch as u64);
        let plan = BatchPlan::shuffled(train.len(), self.config.batch_size, &mut shuffle)?;

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in batches(train, &plan) {
            let n = batch.labels.len();
            let (probs, cache) =
                self.network
                    .forward(&batch.images, Mode::Train, Some(&mut self.dropout_rng))?;
            let loss = categorical_crossentropy(&probs, &batch.onehot)?;
            if !loss.is_finite() {
                return Err(Error::Internal(format!("non-finite loss in epoch {epoch}")));
            }
            loss_sum += loss * n as f64;
            correct += count_correct(&probs, &batch.labels)?;
            let grad = probs.sub(&batch.onehot)?.scale(1.0 / n as f64);
            self.network.backward_from_logits(cache, &grad)?;
            let (params, grads) = self.network.params_and_grads();
            self.optimizer.step(params, grads)?;
        }
        let (val_loss, val_acc) = evaluate(&self.network, eval)?;
        self.completed_epochs = epoch;
        Ok(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs up to `config.epochs`, calling `on_epoch`
    /// after each one.
    pub fn fit(
        &mut self,
        train: &Dataset,
        eval: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let train = apply_cap(train, self.config.limit_train, "training")?;
        let eval = apply_cap(eval, self.config.limit_eval, "evaluation")?;
        check_compatible(&self.network, &train)?;
        check_compatible(&self.network, &eval)?;
        let mut out = Vec::new();
        while self.completed_epochs < self.config.epochs {
            let m = self.run_epoch(&train, &eval)?;
            log::info!(
                "epoch {:>3}: loss {:.4} acc {:.4} | val loss {:.4} acc {:.4} ({:.1}s)",
                m.epoch,
                m.train_loss,
                m.train_acc,
                m.val_loss,
                m.val_acc,
                m.wall_seconds
            );
            on_epoch(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Trains a fresh network as described by `config`.
pub fn train(
    config: &TrainingConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<(Network, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(config.clone())?;
    let metrics = trainer.fit(train_set, eval_set, |_, _| Ok(()))?;
    Ok((trainer.into_network(), metrics))
}

fn count_correct(probs: &Tensor, labels: &[u8]) -> Result<usize> {
    let width = probs.len() / labels.len().max(1);
    let mut correct = 0;
    for (row, &label) in probs.data().chunks_exact(width).zip(labels) {
        if argmax(row)? == usize::from(label) {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Mean cross-entropy and accuracy of `network` in eval mode.
pub fn evaluate(network: &Network, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    if network.output_shape() != [CLASSES] {
        return Err(Error::shape(format!(
            "evaluation needs a {CLASSES}-wide output, network gives {:?}",
            network.output_shape()
        )));
    }
    let plan = BatchPlan::sequential(dataset.len(), EVAL_BATCH)?;
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for batch in batches(dataset, &plan) {
        let probs = network.predict(&batch.images)?;
        loss_sum += categorical_crossentropy(&probs, &batch.onehot)? * batch.labels.len() as f64;
        correct += count_correct(&probs, &batch.labels)?;
    }
    let n = dataset.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

/// Formats a real with 9 significant digits, without trailing zeros.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() {
            "0".into()
        } else {
            v.to_string()
        };
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&magnitude) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Renders metrics as CSV. With `include_timing` off the wall-clock column
/// is written as 0 so that repeated runs produce identical files.
pub fn metrics_csv(metrics: &[EpochMetrics], include_timing: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let wall = if include_timing { m.wall_seconds } else { 0.0 };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch,
            format_sig9(m.train_loss),
            format_sig9(m.train_acc),
            format_sig9(m.val_loss),
            format_sig9(m.val_acc),
            format_sig9(wall)
        );
    }
    out
}

pub fn export_metrics(metrics: &[EpochMetrics], path: &Path, include_timing: bool) -> Result<()> {
    if metrics.is_empty() {
        return Err(Error::domain("no metrics to export"));
    }
    fs::write(path, metrics_csv(metrics, include_timing)).map_err(|e| Error::io(path, e))
}

/// Parses a metrics CSV written by [`export_metrics`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::format(0, "missing metrics header")),
    }
    lines
        .map(|(i, line)| {
            let bad = || Error::format(i, format!("bad metrics row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                train_acc: num(f[2])?,
                val_loss: num(f[3])?,
                val_acc: num(f[4])?,
                wall_seconds: num(f[5])?,
            })
        })
        .collect()
}

/// Loss and accuracy charts, training solid and validation dashed.
pub fn metric_charts(metrics: &[EpochMetrics]) -> (LineChart, LineChart) {
    let col = |f: fn(&EpochMetrics) -> f64| metrics.iter().map(f).collect::<Vec<_>>();
    let loss = LineChart::new(480, 300)
        .with_series("train_loss", col(|m| m.train_loss), 0, false)
        .with_series("val_loss", col(|m| m.val_loss), 96, true);
    let acc = LineChart::new(480, 300)
        .with_series("train_acc", col(|m| m.train_acc), 0, false)
        .with_series("val_acc", col(|m| m.val_acc), 96, true);
    (loss, acc)
}

/// Writes `loss.pgm` and `accuracy.pgm` into `dir`.
pub fn plot_metrics(metrics: &[EpochMetrics], dir: &Path) -> Result<Vec<PathBuf>> {
    if metrics.is_empty() {
        return Err(Error::domain("no metrics to plot"));
    }
    let (loss, acc) = metric_charts(metrics);
    let mut written = Vec::new();
    for (name, chart) in [("loss.pgm", loss), ("accuracy.pgm", acc)] {
        let path = dir.join(name);
        let img: GrayImage = chart.render();
        img.save_pgm(&path)?;
        written.push(path);
    }
    Ok(written)
}
