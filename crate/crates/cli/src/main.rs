use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rntn::diagnostics::export_routing_map;
use rntn::harness::{
    build_model, load_checkpoint, load_dataset, rho_sweep, run_experiment, run_seeds,
    scaling_benchmark, write_scaling_csv, write_sweep_csv, ExperimentConfig, ExperimentModel,
    ScalingArch, ScalingConfig, DEFAULT_RHOS,
};
use rntn::model::evaluate_model;
use rntn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rntn",
    version,
    about = "Routing networks for multi-task learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a configuration and write its run directory
    Train(TrainArgs),
    /// Evaluate a trained run on its test split
    Eval(RunArgs),
    /// Train one run per collaboration-reward value and merge the results
    SweepRho(SweepArgs),
    /// Per-step operation counts and epoch wall times across block counts
    BenchScaling(BenchArgs),
    /// Write the greedy per-task routing map of a trained run
    ExportMap(MapArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file of `key = value` lines
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set rho=0.3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Further overrides as `--key value` pairs after `--`
    #[arg(last = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory (overrides `output_dir`)
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Number of consecutive seeds to run
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory holding config.txt and checkpoint.bin
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write the JSON here instead of stdout
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Comma-separated collaboration-reward values
    #[arg(long, value_delimiter = ',')]
    rhos: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated block counts
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 5, 10])]
    ks: Vec<usize>,
    /// Comma-separated architectures: routing, cross_stitch
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("routing"), String::from("cross_stitch")])]
    arch: Vec<String>,
    #[arg(long, default_value_t = 784)]
    input_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Timed epochs after one warm-up epoch
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the CSV here
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut c = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    c.apply_env()?;
    for s in &args.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set expects KEY=VALUE, got {s:?}")))?;
        c.set(k.trim(), v.trim())?;
    }
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag.strip_prefix("--").ok_or_else(|| {
            Error::Validation(format!("override {flag:?} should look like --key"))
        })?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Validation(format!("override --{key} has no value")))?;
                (key.to_string(), v.clone())
            }
        };
        c.set(&key.replace('-', "_"), &value)?;
    }
    c.validate()?;
    Ok(c)
}

fn trained_model(args: &RunArgs) -> Result<(ExperimentConfig, ExperimentModel, rntn::TaskSplit)> {
    let mut cfg_args = ConfigArgs {
        config: args.cfg.config.clone(),
        sets: args.cfg.sets.clone(),
        overrides: args.cfg.overrides.clone(),
    };
    let mut checkpoint = args.checkpoint.clone();
    if let Some(run) = &args.run {
        cfg_args
            .config
            .get_or_insert_with(|| run.join("config.txt"));
        checkpoint.get_or_insert_with(|| run.join("checkpoint.bin"));
    }
    let config = load_config(&cfg_args)?;
    let checkpoint = checkpoint
        .ok_or_else(|| Error::Validation("give --run DIR or --checkpoint FILE".into()))?;
    let split = load_dataset(&config)?;
    let mut model = build_model(&config, split.input_dim(), split.max_classes())?;
    load_checkpoint(BufReader::new(File::open(&checkpoint)?), &mut model)?;
    Ok((config, model, split))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, text)?;
        }
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let mut config = load_config(&args.cfg)?;
            if let Some(out) = &args.out {
                config.output_dir = out.to_string_lossy().into_owned();
            }
            if config.output_dir.is_empty() {
                config.output_dir = format!("runs/{}-seed{}", config.architecture, config.seed);
            }
            if args.seeds > 1 {
                let (_, agg) = run_seeds(&config, args.seeds)?;
                let json = serde_json::to_string_pretty(&agg)?;
                fs::write(Path::new(&config.output_dir).join("seeds.json"), &json)?;
                println!("{json}");
            } else {
                let report = run_experiment(&config)?;
                info!("artifacts in {}", config.output_dir);
                println!("{}", serde_json::to_string_pretty(&report.final_accuracy)?);
            }
        }
        Command::Eval(args) => {
            let (config, model, split) = trained_model(&args)?;
            let acc = evaluate_model(model.as_model(), &split.test, config.num_tasks())?;
            println!("{}", serde_json::to_string_pretty(&acc)?);
        }
        Command::ExportMap(args) => {
            let (config, model, split) = trained_model(&args.run)?;
            let ExperimentModel::Routed(net) = &model else {
                return Err(Error::Validation(format!(
                    "{} has no router to export",
                    config.architecture
                )));
            };
            let map = export_routing_map(
                &net.model,
                &net.trainer.agents,
                &split.test,
                config.num_tasks(),
            )?;
            write_out(args.out.as_deref(), &(map.to_json()? + "\n"))?;
        }
        Command::SweepRho(args) => {
            let mut config = load_config(&args.cfg)?;
            if let Some(out) = &args.out {
                config.output_dir = out.to_string_lossy().into_owned();
            }
            let rhos = if args.rhos.is_empty() {
                DEFAULT_RHOS.to_vec()
            } else {
                args.rhos
            };
            let rows = rho_sweep(&config, &rhos, args.seeds)?;
            let mut buf = Vec::new();
            write_sweep_csv(&mut buf, &rows)?;
            io::stdout().write_all(&buf)?;
        }
        Command::BenchScaling(args) => {
            let archs = args
                .arch
                .iter()
                .map(|a| a.parse::<ScalingArch>())
                .collect::<Result<Vec<_>>>()?;
            let cfg = ScalingConfig {
                input_dim: args.input_dim,
                hidden_dim: args.hidden,
                hidden_layers: 2,
                samples_per_epoch: args.samples,
                timed_epochs: args.epochs,
                seed: args.seed,
            };
            let rows = scaling_benchmark(&args.ks, &archs, &cfg)?;
            let mut buf = Vec::new();
            write_scaling_csv(&mut buf, &rows)?;
            let text = String::from_utf8_lossy(&buf).into_owned();
            if let Some(out) = &args.out {
                write_out(Some(out), &text)?;
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
