//! `dexrefine`: refinement, retargeting, codebook training and evaluation
//! from the command line.
//!
//! Every command prints one JSON summary line on stdout and writes its
//! artifacts, plus the effective configuration, under `--out-dir`.
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use crate::config::parse_literal;
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "dexrefine", version, about = "Contact-aware refinement and shared-codebook tools for dexterous-hand trajectories")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; may `include` other files.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Load and validate inputs, then stop without computing or writing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override any configuration key, e.g. `--set refine.solver.max_inner_iters=80`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Refine generated trajectories against an object point cloud.
    Refine(RefineArgs),
    /// Fit hand joints to source keypoints.
    Retarget(RetargetArgs),
    /// Codebook training and tokenization.
    #[command(subcommand)]
    Vq(VqCommand),
    /// MPJPE, FPL, FOL and, with an archive, FID and diversity.
    Metrics(MetricsArgs),
    /// Compare the contact kernel against the smoothed-|d| baseline under cloud noise.
    NoiseStudy(NoiseArgs),
    /// Estimate point-cloud normals.
    Normals(NormalsArgs),
    /// Synthetic fixture data.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    poses: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetargetArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    q_init: Option<PathBuf>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum VqCommand {
    /// Train encoder, decoder and codebook for the reference hand.
    TrainRef {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Onboard a new hand onto an existing codebook from paired data.
    TrainNew {
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        paired_new: Option<PathBuf>,
        #[arg(long)]
        paired_ref: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        reference: Option<String>,
    },
    /// Encode with one hand's encoder and decode with another's.
    Translate {
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        from: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
    /// Cold-code refresh statistics from a loss history.
    RefreshStats {
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    pred_roots: Option<PathBuf>,
    #[arg(long)]
    gt_roots: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    morphology: Option<String>,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Noise levels in meters.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Args, Debug)]
struct NormalsArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long = "k")]
    k_neighbors: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum FixturesCommand {
    /// Write the synthetic fixture tree and its manifest.
    Generate {
        /// Output directory; defaults to `--out-dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        if let Some(p) = v {
            self.0.push((key.into(), Value::String(p.display().to_string())));
        }
    }

    fn string(&mut self, key: &str, v: &Option<String>) {
        if let Some(s) = v {
            self.0.push((key.into(), Value::String(s.clone())));
        }
    }

    fn value(&mut self, key: &str, v: Option<Value>) {
        if let Some(v) = v {
            self.0.push((key.into(), v));
        }
    }
}

fn count(v: Option<usize>) -> Option<Value> {
    v.map(|n| Value::Integer(n as i64))
}

fn overrides(cli: &Cli) -> CliResult<Vec<(String, Value)>> {
    let mut o = Overrides(Vec::new());
    for item in &cli.global.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        o.0.push((k.trim().to_string(), parse_literal(v.trim())));
    }
    match &cli.command {
        Command::Refine(a) => {
            o.path("refine.model", &a.model);
            o.path("refine.trajectory", &a.trajectory);
            o.path("refine.cloud", &a.cloud);
            o.path("refine.poses", &a.poses);
        }
        Command::Retarget(a) => {
            o.path("retarget.model", &a.model);
            o.path("retarget.keypoints", &a.keypoints);
            o.path("retarget.spec", &a.spec);
            o.path("retarget.q_init", &a.q_init);
            o.value("retarget.lambda_smooth", a.lambda_smooth.map(Value::Float));
        }
        Command::Vq(VqCommand::TrainRef { dataset, name }) => {
            o.path("vq.dataset", dataset);
            o.string("vq.name", name);
        }
        Command::Vq(VqCommand::TrainNew {
            archive,
            paired_new,
            paired_ref,
            name,
            reference,
        }) => {
            o.path("vq.archive", archive);
            o.path("vq.paired_new", paired_new);
            o.path("vq.paired_ref", paired_ref);
            o.string("vq.name", name);
            o.string("vq.reference", reference);
        }
        Command::Vq(VqCommand::Translate { archive, input, from, to }) => {
            o.path("vq.archive", archive);
            o.path("vq.input", input);
            o.string("vq.from", from);
            o.string("vq.to", to);
        }
        Command::Vq(VqCommand::RefreshStats { history }) => o.path("vq.history", history),
        Command::Metrics(a) => {
            o.path("metrics.pred", &a.pred);
            o.path("metrics.gt", &a.gt);
            o.path("metrics.model", &a.model);
            o.path("metrics.pred_roots", &a.pred_roots);
            o.path("metrics.gt_roots", &a.gt_roots);
            o.path("metrics.archive", &a.archive);
            o.string("metrics.morphology", &a.morphology);
        }
        Command::NoiseStudy(a) => {
            o.path("noise_study.model", &a.model);
            o.path("noise_study.cloud", &a.cloud);
            o.path("noise_study.trajectory", &a.trajectory);
            o.path("noise_study.poses", &a.poses);
            o.value(
                "noise_study.sigma",
                a.sigma.as_ref().map(|s| Value::Array(s.iter().map(|v| Value::Float(*v)).collect())),
            );
            o.value("noise_study.seeds", count(a.seeds));
        }
        Command::Normals(a) => {
            o.path("normals.input", &a.input);
            o.value("normals.k_neighbors", count(a.k_neighbors));
        }
        Command::Fixtures(_) => {}
    }
    let g = &cli.global;
    o.value("seed", g.seed.map(|s| Value::Integer(s as i64)));
    o.path("out_dir", &g.out_dir);
    o.value("threads", count(g.threads));
    Ok(o.0)
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let config = config::load(cli.global.config.as_deref(), overrides(&cli)?)?;
    if config.threads > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global();
    }
    let dry = cli.global.dry_run;
    use commands::*;
    match &cli.command {
        Command::Refine(_) => refine::run(&config, dry),
        Command::Retarget(_) => retarget::run(&config, dry),
        Command::Vq(VqCommand::TrainRef { .. }) => vq::train_ref(&config, dry),
        Command::Vq(VqCommand::TrainNew { .. }) => vq::train_new(&config, dry),
        Command::Vq(VqCommand::Translate { .. }) => vq::translate_cmd(&config, dry),
        Command::Vq(VqCommand::RefreshStats { .. }) => vq::refresh_stats(&config, dry),
        Command::Metrics(_) => metrics::run(&config, dry),
        Command::NoiseStudy(_) => noise::run(&config, dry),
        Command::Normals(_) => normals::run(&config, dry),
        Command::Fixtures(FixturesCommand::Generate { out }) => {
            fixtures::generate(config.seed, out.as_deref().unwrap_or(&config.out_dir), dry)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
