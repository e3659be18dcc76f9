//! `bitstorm`: golden runs, activation caches, fault-injection campaigns and
//! toy model generation from a JSON run configuration.

mod console;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use bitstorm_core::campaign::{self, emit_report, emit_tables, load_summary, summary_table, CampaignSpec, RunOptions};
use bitstorm_core::campaign::stats::{accuracy, Reference};
use bitstorm_core::executor::{build_cache, golden_run};
use bitstorm_core::io::{self, load_config, load_dataset, load_model, save_dataset, save_model, Mode, RunConfig, TargetSelector};
use bitstorm_core::toy::generate_toy;
use bitstorm_core::{CampaignError, Dataset32, Error, ErrorClass, Model32};
use clap::{Args, Parser, Subcommand};

use console::{Console, OutDirLock};

#[derive(Debug, Parser)]
#[command(name = "bitstorm", version, about = "Fault-injection campaigns for CNN inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fault-free predictions, written to golden.json.
    Golden(Overrides),
    /// Build activation caches for the configured layers.
    Cache(Overrides),
    /// Run the configured campaign and write the report files.
    Campaign(Overrides),
    /// Print and rewrite the tables of an existing campaign report.
    Report(Overrides),
    /// Write a seeded toy CNN, a PReLU CNN, a labelled dataset and example configs.
    GenToy(ToyArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    trials: Option<u32>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    /// Accepted for symmetry with the other commands; only `seed` and
    /// `out_dir` are read from it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    samples: u32,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    classes: u32,
}

/// Failures that originate in the front end itself.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Locked(PathBuf),
    Interrupted,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Locked(path) => write!(
                f,
                "{} exists: another bitstorm run is using this output directory (remove the file if no run is active)",
                path.display()
            ),
            CliError::Interrupted => write!(f, "interrupted; partial results were written"),
        }
    }
}

impl std::error::Error for CliError {}

fn class_of(err: &anyhow::Error) -> ErrorClass {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.class();
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => ErrorClass::Input,
                CliError::Locked(_) => ErrorClass::Resource,
                CliError::Interrupted => ErrorClass::Internal,
            };
        }
    }
    ErrorClass::Internal
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("BITSTORM_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!(CliError::Usage(format!("BITSTORM_THREADS must be a non-negative integer, got {v:?}")))),
        Err(_) => Ok(0),
    }
}

fn core<T, E: Into<Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| anyhow::Error::new(e.into()))
}

fn load_run(args: &Overrides) -> Result<RunConfig> {
    let mut config = core(load_config(&args.config))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(budget) = args.budget {
        config.budget = budget;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    Ok(config)
}

fn load_inputs(config: &RunConfig) -> Result<(Model32, Dataset32)> {
    let model = core(load_model(&config.model))?;
    let dataset = core(load_dataset(&config.dataset))?;
    core(dataset.check_model(&model))?;
    Ok((model, dataset))
}

fn cmd_golden(config: &RunConfig, out: &mut Console) -> Result<()> {
    let (model, dataset) = load_inputs(config)?;
    let golden = core(golden_run(&model, &dataset))?;
    let path = config.out_dir.join("golden.json");
    let mut json = serde_json::to_vec_pretty(&golden)?;
    json.push(b'\n');
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    out.line(format!("golden run: {} predictions written to {}", golden.len(), path.display()));
    if let Some(labels) = dataset.labels() {
        let acc = core(accuracy(&golden.predictions, Reference::Labels(labels)).map_err(CampaignError::from))?;
        out.line(format!("accuracy vs labels: {acc:.4}"));
    }
    Ok(())
}

fn layer_targets(config: &RunConfig, model: &Model32) -> Result<Vec<usize>> {
    match &config.target {
        TargetSelector::AllLayers => Ok((0..model.layer_count()).collect()),
        TargetSelector::Layers(l) => {
            if let Some(&bad) = l.iter().find(|&&i| i >= model.layer_count()) {
                return Err(anyhow!(CliError::Usage(format!(
                    "layer {bad} out of range for a model with {} layers",
                    model.layer_count()
                ))));
            }
            Ok(l.clone())
        }
        _ => Err(anyhow!(CliError::Usage("cache needs a layer-wise config (mode \"layer\")".into()))),
    }
}

fn cmd_cache(config: &RunConfig, out: &mut Console) -> Result<()> {
    if config.mode != Mode::Layer {
        return Err(anyhow!(CliError::Usage("cache needs a layer-wise config (mode \"layer\")".into())));
    }
    let (model, dataset) = load_inputs(config)?;
    let mut total = 0;
    for layer in layer_targets(config, &model)? {
        let dir = config.cache_dir().join(format!("layer_{layer}"));
        let cache = core(build_cache(&model, &dataset, layer, config.budget, &dir))?;
        total += cache.payload_bytes();
        out.line(format!(
            "layer {layer} ({}): {} samples of shape {:?} in {} chunk(s), {} bytes -> {}",
            model.layers()[layer].name,
            cache.sample_count(),
            cache.shape(),
            cache.chunk_count(),
            cache.payload_bytes(),
            dir.display()
        ));
    }
    out.line(format!("cache size: {total} bytes"));
    Ok(())
}

fn cmd_campaign(config: &RunConfig, out: &mut Console, cancel: Arc<AtomicBool>) -> Result<()> {
    let (model, dataset) = load_inputs(config)?;
    let spec = CampaignSpec::from_config(config);
    let options = RunOptions {
        threads: threads_from_env()?,
        budget: config.budget,
        cache_dir: config.cache_dir(),
        cancel,
    };
    out.line(format!(
        "campaign: {:?} targets, fault {}, probabilities {:?}, {} trials, seed {}",
        config.target,
        config.fault.name(),
        config.probabilities,
        config.trials,
        config.seed
    ));
    let fixed = config.mode == Mode::Layer && config.probabilities == [1.0];
    let result = if fixed {
        campaign::run_deterministic_100(&spec, &model, &dataset, &options)
    } else {
        campaign::run_stochastic(&spec, &model, &dataset, &options)
    };
    match result {
        Ok(result) => {
            core(emit_report(&result, &config.out_dir))?;
            out.line(summary_table(&result));
            out.line(format!("report written to {}", config.out_dir.display()));
            Ok(())
        }
        Err(CampaignError::Aborted { partial }) => {
            core(emit_report(&partial, &config.out_dir))?;
            out.line(summary_table(&partial));
            out.line(format!(
                "interrupted after {} of {} cells; partial report in {}",
                partial.cells.len(),
                partial.expected_cells,
                config.out_dir.display()
            ));
            Err(anyhow!(CliError::Interrupted))
        }
        Err(e) => Err(anyhow::Error::new(Error::from(e))),
    }
}

fn cmd_report(config: &RunConfig, out: &mut Console) -> Result<()> {
    let result = core(load_summary(config.out_dir.join("summary.json")))?;
    core(emit_tables(&result, &config.out_dir))?;
    out.line(summary_table(&result));
    Ok(())
}

fn write_json(path: &Path, value: serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(&value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_toy(seed: u64, samples: usize, classes: usize, dir: &Path, out: &mut Console) -> Result<()> {
    let toy = generate_toy(seed, samples, classes);
    core(save_model(&toy.cnn, dir.join("cnn").join("model.json")))?;
    core(save_model(&toy.prelu_cnn, dir.join("prelu_cnn").join("model.json")))?;
    core(save_dataset(&toy.dataset, dir.join("dataset")))?;
    let common = |model: &str, mode: &str, target: serde_json::Value, out_dir: &str| {
        serde_json::json!({
            "model": model,
            "dataset": "dataset",
            "mode": mode,
            "target": target,
            "fault": "bit_flip_random",
            "probabilities": [0.0, 0.25, 0.5, 0.75, 1.0],
            "trials": 100,
            "metric": "golden_run",
            "seed": seed,
            "out_dir": out_dir,
        })
    };
    write_json(
        &dir.join("config_layer.json"),
        common("cnn/model.json", "layer", serde_json::json!("all"), "runs/layer"),
    )?;
    write_json(
        &dir.join("config_op.json"),
        common("prelu_cnn/model.json", "op", serde_json::json!(["Add"]), "runs/op"),
    )?;
    let golden = core(golden_run(&toy.cnn, &toy.dataset))?;
    let labels = toy.dataset.labels().expect("toy labels");
    let acc = core(accuracy(&golden.predictions, Reference::Labels(labels)).map_err(CampaignError::from))?;
    out.line(format!(
        "toy models and {samples} samples over {classes} classes written to {} (seed {seed}, golden accuracy {acc:.4})",
        dir.display()
    ));
    Ok(())
}

fn run(cli: Cli, console: &mut Console, cancel: Arc<AtomicBool>) -> Result<()> {
    match cli.command {
        Command::GenToy(args) => {
            let from_config = args.config.as_ref().map(|p| core(io::load_config(p))).transpose()?;
            let seed = args.seed.or(from_config.as_ref().map(|c| c.seed)).unwrap_or(42);
            let dir = args
                .out
                .or(from_config.map(|c| c.out_dir))
                .unwrap_or_else(|| PathBuf::from("toy"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let _lock = OutDirLock::acquire(&dir)?;
            console.attach_log(&dir)?;
            cmd_gen_toy(seed, args.samples as usize, args.classes as usize, &dir, console)
        }
        command => {
            let (args, name) = match &command {
                Command::Golden(a) => (a, "golden"),
                Command::Cache(a) => (a, "cache"),
                Command::Campaign(a) => (a, "campaign"),
                Command::Report(a) => (a, "report"),
                Command::GenToy(_) => unreachable!("handled above"),
            };
            let config = load_run(args)?;
            std::fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
            let _lock = OutDirLock::acquire(&config.out_dir)?;
            console.attach_log(&config.out_dir)?;
            console.line(format!("bitstorm {name} --config {}", args.config.display()));
            match command {
                Command::Golden(_) => cmd_golden(&config, console),
                Command::Cache(_) => cmd_cache(&config, console),
                Command::Campaign(_) => cmd_campaign(&config, console, cancel),
                Command::Report(_) => cmd_report(&config, console),
                Command::GenToy(_) => unreachable!("handled above"),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&cancel);
    // Without a handler Ctrl-C still terminates the process, just without
    // the partial report.
    let _ = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed));

    let mut console = Console::default();
    match run(cli, &mut console, cancel) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            console.error(format!("error: {err:#}"));
            ExitCode::from(class_of(&err).exit_code() as u8)
        }
    }
}
