use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvedge::dataset::{generate_synthetic, SyntheticSpec};
use mvedge::harness::{
    default_gamma_grid, emit_csv, prepare, round_inputs, round_radio, run_experiment, sort_rows, sweep_threshold,
    write_csv, DatasetSource, ExperimentConfig, SweepPoint,
};
use mvedge::network::{round_flops, round_latency, round_overhead, wire_bytes};
use mvedge::schemes::{run_round, SchemeId};

#[derive(Parser)]
#[command(name = "mvedge", version, about = "Collaborative multi-view inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to disk.
    Generate(GenerateArgs),
    /// Run an experiment and write a CSV of aggregated metrics.
    Run(ExperimentArgs),
    /// Run the selective schemes over a grid of thresholds.
    Sweep(SweepArgs),
    /// Print the message trace of a single round.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    instances_per_class: usize,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed of the class colour signatures.
    #[arg(long, default_value_t = 7)]
    palette_seed: u64,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scheme list, e.g. `CI,SCI-E` or `all`.
    #[arg(long)]
    scheme: Option<String>,
    /// Node counts, e.g. `1..6` or `2,4`.
    #[arg(long)]
    n: Option<String>,
    /// Thresholds for selective schemes.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Noise levels in dB, `clean` for none.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Manifest of a dataset on disk.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generate the dataset in memory.
    #[arg(long)]
    synthetic: bool,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Threshold grid; defaults to 0.1..1.0 in steps of 0.1.
    #[arg(long = "grid")]
    grid: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Instance index in the dataset.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    #[arg(long, default_value_t = 0)]
    repeat: usize,
}

impl ExperimentArgs {
    fn config(&self) -> mvedge::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("schemes", self.scheme.clone()),
            ("n", self.n.clone()),
            ("gamma", self.gamma.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("snr", self.snr.clone()),
            ("repeats", self.repeats.map(|r| r.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = DatasetSource::Manifest(p.clone());
        }
        if self.synthetic && !matches!(cfg.dataset, DatasetSource::Synthetic(_)) {
            cfg.dataset = DatasetSource::Synthetic(SyntheticSpec::default());
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| mvedge::Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_rows(rows: &[mvedge::harness::MetricsRow], out: &Option<PathBuf>) -> mvedge::Result<()> {
    match out {
        Some(p) => emit_csv(rows, p),
        None => write_csv(rows, std::io::stdout().lock()),
    }
}

fn generate(args: &GenerateArgs) -> mvedge::Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        instances_per_class: args.instances_per_class,
        views_per_instance: args.views,
        width: args.size,
        height: args.size,
        within_class_noise: args.noise,
        seed: args.seed,
        palette_seed: args.palette_seed,
        ..SyntheticSpec::default()
    };
    let dataset = generate_synthetic(&spec)?;
    let manifest = dataset.write(&args.out)?;
    eprintln!("wrote {} instances to {}", dataset.samples.len(), manifest.display());
    Ok(())
}

fn inspect(args: &InspectArgs) -> mvedge::Result<()> {
    let cfg = args.experiment.config()?;
    let prepared = prepare(&cfg)?;
    if args.instance >= prepared.dataset.samples.len() {
        return Err(mvedge::Error::InvalidConfig(format!(
            "instance {} out of range ({} instances)",
            args.instance,
            prepared.dataset.samples.len()
        )));
    }
    let scheme: SchemeId = cfg.schemes[0];
    let point = SweepPoint {
        scheme,
        n: *cfg.n_values.last().expect("validated"),
        gamma: cfg.gammas.first().copied().or(scheme.default_gamma()).filter(|_| scheme.is_selective()),
        snr_db: cfg.snr_db[0],
        failed: cfg.failures[0],
    };
    let (instance, context, scheme_cfg) = round_inputs(&cfg, &prepared, &point, args.repeat, args.instance)?;
    let outcome = run_round(&instance, &scheme_cfg, &prepared.pipeline(point.snr_db), &context)?;
    let radio = round_radio(&cfg, args.repeat, args.instance);
    println!(
        "{} instance {} (label {}), N={}, gamma={}",
        scheme,
        instance.instance_id,
        instance.true_label,
        point.n,
        point.gamma.map_or("-".to_string(), |g| g.to_string())
    );
    println!("step  phase                  sender  receiver  kind             payload   wire");
    for e in outcome.trace.entries() {
        let m = &e.message;
        println!(
            "{:>4}  {:<21}  {:<6}  {:<8}  {:<15}  {:>8}  {:>7}",
            e.step,
            e.phase.name(),
            m.sender.to_string(),
            m.receiver.to_string(),
            m.kind.name(),
            m.payload_bytes,
            wire_bytes(m, &cfg.transport)
        );
    }
    for r in &outcome.nodes {
        println!(
            "{}: similarity {}, selected {}, local {}",
            r.node,
            r.similarity.map_or("-".to_string(), |s| format!("{s:.4}")),
            r.selected,
            r.local_prediction.map_or("-".to_string(), |p| p.to_string())
        );
    }
    let flops = round_flops(&outcome, &cfg.cost);
    println!(
        "verdict {}, V'={}/{}, overhead {} B, latency {:.3} ms, FLOPs sources {} controller {}",
        outcome.prediction().map_or("dropped".to_string(), |p| p.to_string()),
        outcome.transmitted_views,
        outcome.available_views,
        round_overhead(&outcome.trace, &cfg.transport),
        round_latency(&outcome, &radio, &cfg.transport, &cfg.profile),
        flops.source_total(),
        flops.controller
    );
    Ok(())
}

fn dispatch(cli: Cli) -> mvedge::Result<()> {
    match cli.command {
        Command::Generate(args) => generate(&args),
        Command::Run(args) => {
            let rows = run_experiment(&args.config()?)?;
            write_rows(&rows, &args.out)
        }
        Command::Sweep(args) => {
            let cfg = args.experiment.config()?;
            let grid = match &args.grid {
                Some(g) => g
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| mvedge::Error::InvalidConfig(format!("--grid: {e}")))?,
                None => default_gamma_grid(),
            };
            let groups = sweep_threshold(&cfg, &grid)?;
            let mut rows: Vec<_> = groups.into_iter().flat_map(|(_, rows)| rows).collect();
            sort_rows(&mut rows);
            write_rows(&rows, &args.experiment.out)
        }
        Command::Inspect(args) => inspect(&args),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
