//! `arcot`: feature extraction, k-means, pre-training and evaluation of
//! co-trained discrete speech codes.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Exit status for a run aborted by a non-finite loss (a diagnostic
/// checkpoint is written).
pub const EXIT_DIVERGED: u8 = 3;
/// Exit status for a gradient check above tolerance.
pub const EXIT_CHECK_FAILED: u8 = 4;

/// An error carrying its own exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

#[derive(Parser, Debug)]
#[command(name = "arcot", version, about, args_override_self = true)]
pub struct Cli {
    /// Worker threads; 1 gives bit-exact reproducible runs
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// File of key=value lines using the long flag names; flags on the
    /// command line take precedence
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compute log-Mel features for a WAV manifest
    Featurize(FeaturizeArgs),
    /// Cluster frames with k-means++ and Lloyd iterations
    Kmeans(KmeansArgs),
    /// Pre-train a model with one of the five objectives
    Pretrain(PretrainArgs),
    /// Train a linear phone probe on one frozen hidden layer
    Probe(ProbeArgs),
    /// Extract codes and the code-phone co-occurrence matrix
    Codes(CodesArgs),
    /// Compare analytic gradients with finite differences on a tiny model
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus with known states
    Synth(SynthArgs),
    /// Evaluate the objective and marginal likelihood of a checkpoint
    EvalLoss(EvalLossArgs),
}

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    /// TSV of utterance id and WAV path (relative to the manifest)
    #[arg(long)]
    pub wav_manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Apply saved normalization statistics
    #[arg(long, conflicts_with = "fit_stats")]
    pub stats: Option<PathBuf>,
    /// Compute normalization statistics on this set, apply and save them here
    #[arg(long)]
    pub fit_stats: Option<PathBuf>,
    /// Mel bands [recipe default: 40]
    #[arg(long, default_value_t = 40)]
    pub n_mels: usize,
    /// Analysis window in ms
    #[arg(long, default_value_t = 25.0)]
    pub window_ms: f64,
    /// Frame hop in ms
    #[arg(long, default_value_t = 10.0)]
    pub hop_ms: f64,
    /// Pre-emphasis coefficient (off unless given)
    #[arg(long)]
    pub pre_emphasis: Option<f64>,
}

#[derive(Args, Debug)]
pub struct KmeansArgs {
    /// Feature manifest
    #[arg(long)]
    pub features: PathBuf,
    /// Number of clusters N [recipe default: 256]
    #[arg(long, default_value_t = 256)]
    pub clusters: usize,
    /// Lloyd iterations [recipe default: 10]
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Utterances sampled for clustering [recipe default: 3000]
    #[arg(long, default_value_t = 3000)]
    pub init_utterances: usize,
    /// Run the Lloyd iterations on every frame instead of the sample
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub lloyd_on_full_data: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// cotrain-exact, cotrain-gumbel, hubert-like, vq-apc or apc
    #[arg(long)]
    pub variant: String,
    /// Feature manifest
    #[arg(long)]
    pub features: PathBuf,
    /// Codebook size N [recipe default: 256]
    #[arg(long, default_value_t = 256)]
    pub codebook_size: usize,
    /// Time shift k [recipe default: 5]
    #[arg(long, default_value_t = 5)]
    pub shift: usize,
    /// LSTM width [recipe default: 512]
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    /// LSTM layers [recipe default: 3]
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Codeword width; 512 for vq-apc unless given, the frame dimension otherwise
    #[arg(long)]
    pub codeword_dim: Option<usize>,
    /// Adam learning rate [recipe default: 1e-3]
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Utterances per update [recipe default: 16]
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Epochs [recipe default: 30]
    #[arg(long, default_value_t = 30)]
    pub epochs: u64,
    #[arg(long)]
    pub seed: u64,
    /// Initial Gumbel temperature [recipe default: 2.0]
    #[arg(long, default_value_t = 2.0)]
    pub tau_start: f64,
    /// Final Gumbel temperature [recipe default: 0.5]
    #[arg(long, default_value_t = 0.5)]
    pub tau_end: f64,
    /// Temperature decay per update [recipe default: 0.99995]
    #[arg(long, default_value_t = 0.99995)]
    pub tau_decay: f64,
    /// Straight-through Gumbel samples
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub straight_through: bool,
    /// Clip the global gradient norm (off unless given)
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Frame targets (TSV), required for hubert-like
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// k-means centroids (FTR1), required for hubert-like
    #[arg(long)]
    pub centroids: Option<PathBuf>,
    /// Continue from this checkpoint; its settings replace the model and
    /// optimizer flags
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Hidden layer, 1-based (h1, h2, h3)
    #[arg(long, default_value_t = 2)]
    pub layer: usize,
    #[arg(long)]
    pub train_features: PathBuf,
    #[arg(long)]
    pub train_alignments: PathBuf,
    #[arg(long)]
    pub eval_features: PathBuf,
    #[arg(long)]
    pub eval_alignments: PathBuf,
    /// Phone inventory, one name per id
    #[arg(long)]
    pub phones: PathBuf,
    /// Probe learning rate [recipe default: 1e-3]
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Probe epochs [recipe default: 10]
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Utterances per probe update
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct CodesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// predictor (mode of the prediction network) or confirmer (nearest codeword)
    #[arg(long, default_value = "confirmer")]
    pub source: String,
    /// Frame labels; with --phones, also writes the code-phone matrix
    #[arg(long, requires = "phones")]
    pub alignments: Option<PathBuf>,
    #[arg(long, requires = "alignments")]
    pub phones: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// One variant, or all of them
    #[arg(long, default_value = "all")]
    pub variant: String,
    #[arg(long)]
    pub seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Gumbel temperature for the check
    #[arg(long, default_value_t = 0.8)]
    pub temperature: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Hidden states M
    #[arg(long, default_value_t = 8)]
    pub states: usize,
    /// Frame dimension
    #[arg(long, default_value_t = 40)]
    pub dim: usize,
    /// Self-transition probability
    #[arg(long, default_value_t = 0.7)]
    pub self_prob: f64,
    /// Emission noise sigma
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Minimum centroid distance
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 80)]
    pub min_len: usize,
    #[arg(long, default_value_t = 160)]
    pub max_len: usize,
    #[arg(long, default_value_t = 200)]
    pub utterances: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalLossArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Utterances per evaluation batch
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Write the CSV here as well as to stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Splices `--config` settings in front of the subcommand's own flags so
/// that explicit flags (which come later) override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut out = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().context("--config needs a path")?));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            out.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(out);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut injected = vec![];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), n + 1);
        };
        injected.push(OsString::from(format!(
            "--{}={}",
            k.trim().replace('_', "-"),
            v.trim()
        )));
    }
    let names: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let at = out
        .iter()
        .position(|a| names.iter().any(|n| a == n.as_str()))
        .context("--config needs a subcommand")?;
    out.splice(at + 1..at + 1, injected);
    Ok(out)
}

/// Every argument of the chosen subcommand with its final value, defaults
/// included.
fn resolved_settings(matches: &ArgMatches) -> Vec<(String, String)> {
    let root = Cli::command();
    let Some((name, sub)) = matches.subcommand() else {
        return vec![];
    };
    let cmd = root
        .find_subcommand(name)
        .expect("parsed subcommand exists");
    let mut out = vec![];
    for arg in cmd.get_arguments().chain(root.get_arguments()) {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if matches!(long, "help" | "version" | "config") || out.iter().any(|(k, _)| k == long) {
            continue;
        }
        if let Ok(Some(vals)) = sub.try_get_raw(id) {
            let v: Vec<String> = vals.map(|v| v.to_string_lossy().into_owned()).collect();
            out.push((long.to_string(), v.join(",")));
        }
    }
    out
}

fn run() -> Result<()> {
    let args = expand_config(std::env::args_os().collect())?;
    let matches = Cli::command().get_matches_from(args);
    let cli = Cli::from_arg_matches(&matches)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("building the thread pool")?;
    let settings = resolved_settings(&matches);
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Featurize(a) => commands::featurize(a, settings),
        Command::Kmeans(a) => commands::kmeans(a, settings),
        Command::Pretrain(a) => commands::pretrain(a, threads, settings),
        Command::Probe(a) => commands::probe(a, settings),
        Command::Codes(a) => commands::codes(a, settings),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a, settings),
        Command::EvalLoss(a) => commands::eval_loss(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Failure>() {
                Some(f) => ExitCode::from(f.code),
                None => ExitCode::FAILURE,
            }
        }
    }
}
