use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "protomem",
    version,
    about = "Build and query prototype memories of body configurations"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Body model JSON file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic toy body model.
    GenToy {
        #[arg(long, default_value_t = 10)]
        verts_per_joint: usize,
    },
    /// Write a clustered synthetic dataset and a sidecar of generator labels.
    GenSamples(GenSamplesArgs),
    /// Cluster a dataset.
    Cluster(ClusterArgs),
    /// Turn a clustering result into a prototype memory.
    BuildMemory {
        #[arg(long)]
        result: PathBuf,
    },
    /// One-hot nearest-prototype labels for a dataset.
    Label {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        memory: PathBuf,
    },
    /// Prototype selected by each score vector.
    Select {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Fit body parameters to observations, optionally as paired or sweep experiments.
    Fit(FitArgs),
    /// MPVPE, MPJPE and PA-MPJPE of predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Bucket samples by vertex distance to a single prototype.
    Buckets(BucketArgs),
}

#[derive(Args, Debug)]
pub struct GenSamplesArgs {
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Clusters that differ only in limb pose, with large extremity and shape variation.
    #[arg(long)]
    pub limb_dominant: bool,
    /// Labels file; defaults to the output path with `.labels.jsonl` appended.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 5.0)]
    pub limb_weight: f64,
    #[arg(long, default_value_t = 0.3)]
    pub head_weight: f64,
    #[arg(long, default_value_t = 0.3)]
    pub hand_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    pub foot_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub torso_weight: f64,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// p3dh, 3dh, random_center or naive_params.
    #[arg(long, default_value = "p3dh")]
    pub variant: String,
    #[arg(long, default_value_t = 0.0)]
    pub gamma_hat: f64,
    #[arg(long, default_value_t = 100)]
    pub lambda_hat: usize,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Ground-truth records; records without joints are observed through their own pose.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Score vectors choosing the initial prototype; nearest prototype when absent.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    /// Also fit from the single global prototype and compare.
    #[arg(long)]
    pub paired: bool,
    /// Memory with one row, the global prototype.
    #[arg(long)]
    pub global: Option<PathBuf>,
    /// Tail percentage reported by paired runs.
    #[arg(long, default_value_t = 10.0)]
    pub tail: f64,
    /// Comma-separated prototype counts to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_k: Vec<usize>,
    /// Comma-separated limb weights to sweep.
    #[arg(long, value_delimiter = ',')]
    pub sweep_limb_weight: Vec<f64>,
    /// Training records clustered by the sweeps.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Prototype count used by the limb-weight sweep.
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub lambda_hat: usize,
}

#[derive(Args, Debug)]
pub struct BucketArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Memory whose first row is the singular prototype.
    #[arg(long)]
    pub singular: PathBuf,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15,0.2")]
    pub edges: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    pub tails: Vec<f64>,
    /// CSV table; defaults to the output path with `.csv` appended.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(commands::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let ctx = commands::Context {
        seed: cli.seed,
        model: cli.model,
        out: cli.out,
    };
    match cli.command {
        Command::GenToy { verts_per_joint } => commands::gen_toy(&ctx, verts_per_joint),
        Command::GenSamples(a) => commands::gen_samples(&ctx, &a),
        Command::Cluster(a) => commands::cluster(&ctx, &a),
        Command::BuildMemory { result } => commands::build_memory(&ctx, &result),
        Command::Label { data, memory } => commands::label(&ctx, &data, &memory),
        Command::Select { memory, scores } => commands::select(&ctx, &memory, &scores),
        Command::Fit(a) => commands::fit(&ctx, &a),
        Command::Eval { pred, gt } => commands::eval(&ctx, &pred, &gt),
        Command::Buckets(a) => commands::buckets(&ctx, &a),
    }
}
