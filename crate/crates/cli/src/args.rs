//! Command-line grammar and `--config` file merging.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use digitnet::Error;

#[derive(Debug, Parser)]
#[command(
    name = "digitnet",
    version,
    about = "Train an MNIST CNN, analyse filter redundancy, run AE/VAE experiments",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the classifier; writes metrics.csv, checkpoint.bin, loss.pgm, accuracy.pgm.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test set; writes eval.csv.
    Eval(EvalArgs),
    /// Cosine-similarity analysis of conv filters; writes similarity CSVs and filter images.
    Analyze(AnalyzeArgs),
    /// Train the dense autoencoder; writes ae_loss.csv and ae_grid.pgm.
    Ae(AeArgs),
    /// Train the variational autoencoder; writes vae_loss.csv, vae_grid.pgm and vae_recon.pgm.
    Vae(VaeArgs),
    /// Print the architecture and training state stored in a checkpoint.
    Inspect(InspectArgs),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Analyze(a) => &a.common,
            Command::Ae(a) => &a.common,
            Command::Vae(a) => &a.common,
            Command::Inspect(a) => &a.common,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Flat key=value file of option defaults; command-line flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write 0 for wall-clock columns so repeated runs give identical files.
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Sgd {
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Inverse-time learning-rate decay per update.
    #[arg(long, default_value_t = 1e-6)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub nesterov: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Classifier {
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub conv1_filters: usize,
    #[arg(long, default_value_t = 3)]
    pub conv1_kernel: usize,
    #[arg(long, default_value_t = 16)]
    pub conv2_filters: usize,
    #[arg(long, default_value_t = 5)]
    pub conv2_kernel: usize,
    /// Train on the first N training samples only.
    #[arg(long)]
    pub limit_train: Option<usize>,
    /// Evaluate on the first N test samples only.
    #[arg(long)]
    pub limit_eval: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[command(flatten)]
    pub net: Classifier,
    #[command(flatten)]
    pub sgd: Sgd,
    /// Continue from a checkpoint up to --epochs in total.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to evaluate [default: <out>/checkpoint.bin].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub limit_eval: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to analyse [default: <out>/checkpoint.bin]; ignored with --sweep.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Similarity thresholds, each in (-1, 1].
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.5,0.6",
        allow_hyphen_values = true
    )]
    pub thresholds: Vec<f64>,
    /// Compare |cosine| instead of the signed value.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub abs_similarity: bool,
    /// Train (or reuse) one network per filter count and analyse each.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub sweep: bool,
    /// Filter counts for --sweep; both conv layers get the same count.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    pub filter_counts: Vec<usize>,
    /// Fail instead of training when a sweep checkpoint is missing.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub no_train: bool,
    /// Test-set image used for activation-map figures.
    #[arg(long, default_value_t = 0)]
    pub image_index: usize,
    /// Training epochs per sweep network.
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Training samples per sweep network.
    #[arg(long, default_value_t = 1000)]
    pub limit_train: usize,
    /// Evaluation samples per sweep network.
    #[arg(long, default_value_t = 1000)]
    pub limit_eval: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[command(flatten)]
    pub sgd: Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct AeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub latent: usize,
    #[arg(long, default_value_t = 10_000)]
    pub limit_train: usize,
    #[command(flatten)]
    pub sgd: Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct VaeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub latent: usize,
    #[arg(long, default_value_t = 400)]
    pub hidden: usize,
    #[arg(long, default_value_t = 10_000)]
    pub limit_train: usize,
    /// Summed squared error instead of binary cross-entropy for reconstruction.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub mse_recon: bool,
    /// Number of prior samples in vae_grid.pgm.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    #[command(flatten)]
    pub sgd: Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to describe [default: <out>/checkpoint.bin].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Value of `--config` if present anywhere in `args`.
fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut iter = args.iter();
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return iter.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Turns `key = value` lines into `--key=value` arguments. Blank lines and
/// lines starting with `#` are ignored.
pub fn parse_config(text: &str) -> Result<Vec<OsString>, Error> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::User(format!("config line {}: expected key=value", n + 1)))?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(Error::User(format!("config line {}: invalid key", n + 1)));
        }
        out.push(OsString::from(format!("--{key}={}", value.trim())));
    }
    Ok(out)
}

/// Inserts the options from `--config` right after the subcommand so that
/// explicit flags, which come later, override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, Error> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let extra = parse_config(&text)?;
    let split = args.len().min(2);
    let mut out = args[..split].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[split..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_lines() {
        let args = parse_config("# c\nepochs = 3\n\nlimit_train=10\n").unwrap();
        assert_eq!(
            args,
            vec![
                OsString::from("--epochs=3"),
                OsString::from("--limit-train=10")
            ]
        );
        assert!(parse_config("nonsense").is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = std::env::temp_dir().join(format!("digitnet-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("c.cfg");
        fs::write(&cfg, "epochs=7\nseed=3\n").unwrap();
        let argv: Vec<OsString> = [
            "digitnet",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--epochs",
            "2",
        ]
        .iter()
        .map(OsString::from)
        .collect();
        let cli = Cli::try_parse_from(expand_config(argv).unwrap()).unwrap();
        let Command::Train(t) = cli.command else {
            panic!()
        };
        assert_eq!((t.epochs, t.common.seed), (2, 3));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn boolean_options() {
        let cli = Cli::try_parse_from([
            "digitnet",
            "analyze",
            "--abs-similarity",
            "--deterministic=false",
        ])
        .unwrap();
        let Command::Analyze(a) = cli.command else {
            panic!()
        };
        assert!(a.abs_similarity && !a.common.deterministic);
        assert_eq!(a.thresholds, vec![0.5, 0.6]);
    }
}
