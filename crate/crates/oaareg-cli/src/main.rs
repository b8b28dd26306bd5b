//! `oaareg` — registration pipeline runner and benchmark harness.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use oaareg_cli::config::{EstimatorChoice, OverlapSource, RunConfig};
use oaareg_cli::pipeline::{report_json_bytes, run_benchmark, run_register};

#[derive(Parser)]
#[command(
    name = "oaareg",
    about = "Overlap-aware coarse-to-fine point cloud registration harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register one pair (synthetic scene or point cloud files) and emit a
    /// JSON report.
    Register(CommonArgs),
    /// Sweep a parameter grid and emit one CSV row per cell.
    Benchmark(CommonArgs),
}

/// Every flag mirrors the identically named JSON config key and overrides it.
#[derive(Args)]
struct CommonArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,

    // coarse matching
    #[arg(long)]
    theta_m: Option<f64>,
    #[arg(long)]
    theta_o: Option<f64>,
    #[arg(long)]
    knn: Option<usize>,

    // estimation
    #[arg(long)]
    estimator: Option<EstimatorChoice>,
    #[arg(long)]
    seed_radius: Option<f64>,
    #[arg(long)]
    seed_fraction: Option<f64>,
    #[arg(long)]
    consensus_k: Option<usize>,
    #[arg(long)]
    sigma_s: Option<f64>,
    #[arg(long)]
    tau_a: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,

    // scene
    #[arg(long)]
    point_count: Option<usize>,
    #[arg(long)]
    overlap_fraction: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    rotation_magnitude: Option<f64>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    #[arg(long)]
    descriptor_noise: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long)]
    rng_seed: Option<u64>,

    // pipeline
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    overlap_source: Option<OverlapSource>,
    #[arg(long)]
    max_correspondences: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    timing: Option<bool>,

    // inputs and outputs
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    report_json: Option<PathBuf>,
    #[arg(long)]
    aligned_ply: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,

    // sweep axes (comma separated)
    #[arg(long, value_delimiter = ',')]
    sweep_descriptor_noise: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sweep_overlap_fraction: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sweep_estimator: Option<Vec<EstimatorChoice>>,
}

impl CommonArgs {
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! overlay {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        overlay!(
            theta_m,
            theta_o,
            knn,
            estimator,
            seed_radius,
            seed_fraction,
            consensus_k,
            sigma_s,
            tau_a,
            ransac_iters,
            point_count,
            overlap_fraction,
            noise_sigma,
            rotation_magnitude,
            descriptor_dim,
            descriptor_noise,
            outlier_fraction,
            rng_seed,
            voxel_size,
            overlap_source,
            trials,
            timing,
        );
        if let Some(v) = self.max_correspondences {
            cfg.max_correspondences = Some(v);
        }
        if let Some(v) = self.source {
            cfg.source = Some(v);
        }
        if let Some(v) = self.target {
            cfg.target = Some(v);
        }
        if let Some(v) = self.report_json {
            cfg.report_json = Some(v);
        }
        if let Some(v) = self.aligned_ply {
            cfg.aligned_ply = Some(v);
        }
        if let Some(v) = self.csv {
            cfg.csv = Some(v);
        }
        if let Some(v) = self.sweep_descriptor_noise {
            cfg.sweep_descriptor_noise = v;
        }
        if let Some(v) = self.sweep_overlap_fraction {
            cfg.sweep_overlap_fraction = v;
        }
        if let Some(v) = self.sweep_estimator {
            cfg.sweep_estimator = v;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    oaareg_cli::init_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Register(args) => run_register_command(args),
        Command::Benchmark(args) => run_benchmark_command(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_register_command(args: CommonArgs) -> Result<ExitCode> {
    let cfg = args.into_config()?;
    let outcome = run_register(&cfg)?;
    let bytes = report_json_bytes(&outcome.report)?;
    if cfg.report_json.is_none() {
        use std::io::Write;
        std::io::stdout().write_all(&bytes)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_benchmark_command(args: CommonArgs) -> Result<ExitCode> {
    let cfg = args.into_config()?;
    let (cells, csv) = run_benchmark(&cfg)?;
    if cfg.csv.is_none() {
        print!("{csv}");
    }
    // success requires every cell to have produced at least one report
    let all_ok = cells.iter().all(|c| c.ok_trials > 0);
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
