mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train, evaluate and inspect networks built from analytic convolutional layers.
#[derive(Parser, Debug)]
#[command(name = "anaconv", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a LeNet-style network on MNIST IDX files.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the MNIST test (or train) split.
    Eval(EvalArgs),
    /// Fit analytic kernels to the matrices in a target file.
    Fit(FitArgs),
    /// Render the kernels of one ACL in a checkpoint as PGM/PPM.
    Render(RenderArgs),
    /// Print the compact factor of an arrangement.
    Compact(CompactArgs),
    /// Compare analytic AKP gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetKind {
    Lenet,
    AnannLenet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub net: NetKind,
    /// Pattern for both ACLs of anann-lenet; defaults to the exp3 ratios.
    #[arg(long)]
    pub arrangement: Option<String>,
    /// Directory with the four standard MNIST IDX files.
    #[arg(long)]
    pub data_dir: std::path::PathBuf,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// JSON-lines metrics log; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data_dir: std::path::PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// JSON file `{"kernels": [[[...], ...], ...]}`.
    #[arg(long)]
    pub targets: std::path::PathBuf,
    /// Family code: G, Lg, Lt, Tf or Ts.
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 16)]
    pub restarts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    /// Zero-based index among the checkpoint's ACLs.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Grayscale grid rows (with --cols); default is one row per output
    /// channel, or RGB tiles for 3-channel layers.
    #[arg(long, requires = "cols")]
    pub rows: Option<usize>,
    #[arg(long, requires = "rows")]
    pub cols: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CompactArgs {
    #[arg(long)]
    pub arrangement: String,
    /// Kernel size, `N` or `HxW`.
    #[arg(long, default_value = "7")]
    pub kernel: String,
    /// Channels `CIxCO`, needed for ratio patterns without a prefix.
    #[arg(long)]
    pub channels: Option<String>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub arrangement: Option<String>,
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long, default_value = "5")]
    pub kernel: String,
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negate analytic gradients to confirm the harness detects errors.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Failure of a checked invariant; exits with status 2.
#[derive(Debug)]
pub struct InvariantViolation(pub String);

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantViolation {}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ANALYTIC_CONV_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("ANALYTIC_CONV_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InvariantViolation>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
