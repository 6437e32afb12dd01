use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use digitnet::analysis::{
    analyze_network, conv_layer_index, filter_grid, pair_figure, pairs_csv, pairs_file_name,
    report_csv, sweep, validate_threshold, SimilarPairReport, SweepConfig,
};
use digitnet::autoencoders::{
    ae_loss_csv, export_reconstructions, flatten_images, reconstruction_grid, sample_grid,
    train_autoencoder, train_vae, vae_loss_csv, AeConfig, ReconLoss, VaeConfig,
};
use digitnet::checkpoint::Checkpoint;
use digitnet::layers::{CnnOptions, Network};
use digitnet::mnist::{Dataset, MnistFiles};
use digitnet::optim::SgdConfig;
use digitnet::rng::SeededRng;
use digitnet::trainer::{
    evaluate, export_metrics, format_sig9, parse_metrics_csv, plot_metrics, summarize,
    EpochMetrics, Trainer, TrainingConfig,
};
use digitnet::{Error, Result};

use crate::args::*;

/// Digits shown in reconstruction grids.
const GRID_COLUMNS: usize = 8;

fn prepare_out(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(&common.out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(common: &Common) -> Result<(Dataset, Dataset)> {
    let files = MnistFiles::locate(&common.data_dir)?;
    log::info!("loading MNIST from {}", common.data_dir.display());
    Ok((files.load_train()?, files.load_test()?))
}

fn load_test(common: &Common) -> Result<Dataset> {
    MnistFiles::locate(&common.data_dir)?.load_test()
}

fn sgd_config(args: &Sgd, default_lr: f64) -> SgdConfig {
    SgdConfig {
        lr: args.lr.unwrap_or(default_lr),
        decay: args.decay,
        momentum: args.momentum,
        nesterov: args.nesterov,
    }
}

fn checkpoint_path(explicit: &Option<PathBuf>, common: &Common) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| common.out.join("checkpoint.bin"))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Ae(a) => ae(a),
        Command::Vae(a) => vae(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let options = CnnOptions {
        conv1_filters: args.net.conv1_filters,
        conv1_kernel: args.net.conv1_kernel,
        conv2_filters: args.net.conv2_filters,
        conv2_kernel: args.net.conv2_kernel,
        ..CnnOptions::default()
    };
    let config = TrainingConfig {
        epochs: args.epochs,
        batch_size: args.net.batch_size,
        seed: args.common.seed,
        sgd: sgd_config(&args.sgd, SgdConfig::default().lr),
        layers: options.layers(),
        limit_train: args.net.limit_train,
        limit_eval: args.net.limit_eval,
    };
    config.validate()?;
    let (train_set, test_set) = load_data(&args.common)?;
    let metrics_path = out.join("metrics.csv");
    let checkpoint = out.join("checkpoint.bin");

    let (mut trainer, mut history) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let history: Vec<EpochMetrics> = match fs::read_to_string(&metrics_path) {
                Ok(text) => parse_metrics_csv(&text)?
                    .into_iter()
                    .filter(|m| m.epoch as u64 <= ckpt.epoch)
                    .collect(),
                Err(_) => Vec::new(),
            };
            log::info!("resuming from {} at epoch {}", path.display(), ckpt.epoch);
            (Trainer::resume(&ckpt, config)?, history)
        }
        None => (Trainer::new(config)?, Vec::new()),
    };
    let timing = !args.common.deterministic;
    let mut done = history.clone();
    trainer.fit(&train_set, &test_set, |t, m| {
        done.push(*m);
        t.checkpoint().save(&checkpoint)?;
        export_metrics(&done, &metrics_path, timing)
    })?;
    history = done;
    if history.is_empty() {
        log::warn!(
            "nothing to train: checkpoint already at {} epochs",
            trainer.completed_epochs()
        );
        return Ok(());
    }
    export_metrics(&history, &metrics_path, timing)?;
    plot_metrics(&history, out)?;
    if let Some(s) = summarize(&history) {
        println!(
            "final train_acc {:.6} val_acc {:.6} (best train_acc {:.6} val_acc {:.6})",
            s.final_train_acc, s.final_val_acc, s.best_train_acc, s.best_val_acc
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let network = Checkpoint::load(&checkpoint_path(&args.checkpoint, &args.common))?.network()?;
    let mut test = load_test(&args.common)?;
    if let Some(n) = args.limit_eval {
        if n == 0 || n > test.len() {
            return Err(Error::config(format!(
                "--limit-eval must be in 1..={}",
                test.len()
            )));
        }
        test = test.take(n);
    }
    let (loss, acc) = evaluate(&network, &test)?;
    write(
        &out.join("eval.csv"),
        &format!(
            "samples,loss,accuracy\n{},{},{}\n",
            test.len(),
            format_sig9(loss),
            format_sig9(acc)
        ),
    )?;
    println!("samples {} loss {loss:.6} accuracy {acc:.6}", test.len());
    Ok(())
}

/// `similarity.csv` plus one pair listing per report, file names prefixed
/// with `prefix(report)`.
fn write_reports(
    out: &Path,
    reports: &[SimilarPairReport],
    prefix: impl Fn(&SimilarPairReport) -> String,
) -> Result<()> {
    write(&out.join("similarity.csv"), &report_csv(reports))?;
    for r in reports {
        write(
            &out.join(format!("{}{}", prefix(r), pairs_file_name(r))),
            &pairs_csv(r),
        )?;
    }
    Ok(())
}

fn print_reports(reports: &[SimilarPairReport]) {
    for r in reports {
        println!(
            "layer {} ({}x{}, {} filters) threshold {}: {} of {} pairs, ratio {:.6}",
            r.layer_index,
            r.kernel_size,
            r.kernel_size,
            r.n,
            format_sig9(r.threshold),
            r.pairs.len(),
            r.total_pairs,
            r.ratio
        );
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    for &t in &args.thresholds {
        validate_threshold(t)?;
    }
    let out = prepare_out(&args.common)?;
    if args.sweep {
        return analyze_sweep(&args, out);
    }
    let path = checkpoint_path(&args.checkpoint, &args.common);
    let network = Checkpoint::load(&path)?.network()?;
    let reports = analyze_network(&network, &args.thresholds, args.abs_similarity)?;
    write_reports(out, &reports, |_| String::new())?;
    for ordinal in 1..=network.conv_layers().len() {
        let index = conv_layer_index(&network, ordinal)?;
        let (weights, _) = network
            .layer_params(index)
            .ok_or_else(|| Error::Internal("conv layer without parameters".into()))?;
        filter_grid(weights)?.save_pgm(&out.join(format!("filters_layer{ordinal}.pgm")))?;
    }
    pair_figures(&args, &network, &reports, out)?;
    print_reports(&reports);
    Ok(())
}

/// Most similar pair of each report next to its activation maps; skipped
/// when no test image is available.
fn pair_figures(
    args: &AnalyzeArgs,
    network: &Network,
    reports: &[SimilarPairReport],
    out: &Path,
) -> Result<()> {
    let test = match load_test(&args.common) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("no test image for pair figures: {e}");
            return Ok(());
        }
    };
    if args.image_index >= test.len() {
        return Err(Error::config(format!(
            "--image-index {} outside the {} test images",
            args.image_index,
            test.len()
        )));
    }
    let image = test.image(args.image_index);
    for r in reports {
        let Some(&top) = r.pairs.first() else {
            continue;
        };
        let fig = pair_figure(network, r.layer_index, top, &image)?;
        let name = format!(
            "pair_layer{}_t{}.pgm",
            r.layer_index,
            format_sig9(r.threshold)
        );
        fig.save_pgm(&out.join(name))?;
    }
    Ok(())
}

fn analyze_sweep(args: &AnalyzeArgs, out: &Path) -> Result<()> {
    if args.filter_counts.iter().any(|&f| f < 2) {
        return Err(Error::config("every filter count must be at least 2"));
    }
    let config = SweepConfig {
        filter_counts: args.filter_counts.clone(),
        thresholds: args.thresholds.clone(),
        absolute: args.abs_similarity,
        training: TrainingConfig {
            epochs: args.epochs,
            batch_size: args.batch_size,
            seed: args.common.seed,
            sgd: sgd_config(&args.sgd, 0.01),
            limit_train: Some(args.limit_train),
            limit_eval: Some(args.limit_eval),
            ..TrainingConfig::default()
        },
        options: CnnOptions::default(),
    };
    config.training.validate()?;
    let data = if args.no_train {
        None
    } else {
        Some(load_data(&args.common)?)
    };
    let reports = sweep(&config, out, data.as_ref().map(|(a, b)| (a, b)))?;
    write_reports(out, &reports, |r| format!("sweep_f{}_", r.n))?;
    print_reports(&reports);
    Ok(())
}

fn ae(args: AeArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    let config = AeConfig {
        latent: args.latent,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.common.seed,
        sgd: sgd_config(&args.sgd, AeConfig::default().sgd.lr),
        limit_train: Some(args.limit_train),
    };
    let (train_set, test_set) = load_data(&args.common)?;
    let (model, curve) = train_autoencoder(&config, &train_set)?;
    write(&out.join("ae_loss.csv"), &ae_loss_csv(&curve))?;
    let originals = flatten_images(&test_set.take(GRID_COLUMNS).images)?;
    export_reconstructions(&model, &originals, &out.join("ae_grid.pgm"))?;
    for (i, v) in curve.iter().enumerate() {
        println!("epoch {} mse {v:.6}", i + 1);
    }
    Ok(())
}

fn vae(args: VaeArgs) -> Result<()> {
    let out = prepare_out(&args.common)?;
    if args.samples == 0 {
        return Err(Error::config("--samples must be at least 1"));
    }
    let config = VaeConfig {
        latent: args.latent,
        hidden: args.hidden,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.common.seed,
        sgd: sgd_config(&args.sgd, VaeConfig::default().sgd.lr),
        recon: if args.mse_recon {
            ReconLoss::Mse
        } else {
            ReconLoss::Bce
        },
        limit_train: Some(args.limit_train),
    };
    let (train_set, test_set) = load_data(&args.common)?;
    let (model, curve) = train_vae(&config, &train_set)?;
    write(&out.join("vae_loss.csv"), &vae_loss_csv(&curve))?;

    let mut rng = SeededRng::derived(args.common.seed, "vae-sample", 0);
    let samples = model.sample(args.samples, &mut rng)?;
    sample_grid(&samples, GRID_COLUMNS)?.save_pgm(&out.join("vae_grid.pgm"))?;
    let originals = flatten_images(&test_set.take(GRID_COLUMNS).images)?;
    let (mu, _) = model.encode_moments(&originals)?;
    reconstruction_grid(&originals, &model.decode(&mu)?)?.save_pgm(&out.join("vae_recon.pgm"))?;
    for (i, p) in curve.iter().enumerate() {
        println!(
            "epoch {} recon {:.4} kl {:.4} total {:.4}",
            i + 1,
            p.recon,
            p.kl,
            p.total
        );
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let path = checkpoint_path(&args.checkpoint, &args.common);
    let ckpt = Checkpoint::load(&path)?;
    let net = ckpt.network()?;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint {}", path.display());
    let _ = writeln!(s, "input {:?}", net.input_shape());
    let _ = writeln!(
        s,
        "{:>3}  {:<28} {:<14} {:>10}",
        "#", "layer", "output", "params"
    );
    for (i, spec) in net.specs().enumerate() {
        let shape = net.layer_output_shape(i).unwrap_or(&[]);
        let shape = shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        let _ = writeln!(
            s,
            "{i:>3}  {:<28} {:<14} {:>10}",
            spec.to_string(),
            shape,
            net.layer_param_count(i)
        );
    }
    let _ = writeln!(s, "total parameters {}", net.param_count());
    let _ = writeln!(s, "epoch {}", ckpt.epoch);
    let _ = writeln!(s, "seed {}", ckpt.seed);
    let _ = writeln!(s, "batch size {}", ckpt.batch_size);
    let _ = writeln!(s, "updates {}", ckpt.iteration);
    let _ = writeln!(
        s,
        "sgd lr {} decay {} momentum {} nesterov {}",
        ckpt.sgd.lr, ckpt.sgd.decay, ckpt.sgd.momentum, ckpt.sgd.nesterov
    );
    print!("{s}");
    Ok(())
}
