use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use trafficgcn::config::RunConfig;
use trafficgcn::data::{self, SynthOptions, TrafficSeries};
use trafficgcn::eval::{self, Axis, MetricsReport, ModelForecaster};
use trafficgcn::graph::{AdjacencyMethod, Topology};
use trafficgcn::model::TemporalCell;
use trafficgcn::pipeline::{self, Checkpoint};
use trafficgcn::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "trafficgcn",
    version,
    about = "Graph-convolutional traffic forecasting"
)]
struct Cli {
    /// Print machine-readable JSON on stdout instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic traffic CSV over a topology.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoint, history and test metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Write per-node forecasts for one split of a dataset.
    Predict(PredictArgs),
    /// Train and test every cell of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = SynthOptions::default().coupling)]
    coupling: f64,
    #[arg(long, default_value_t = SynthOptions::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = SynthOptions::default().period)]
    period: usize,
    /// Node phases are drawn uniformly from [0, phase-spread) radians.
    #[arg(long, default_value_t = SynthOptions::default().phase_spread)]
    phase_spread: f64,
    #[arg(long, default_value_t = SynthOptions::default().cadence_secs)]
    cadence: i64,
    #[arg(long, default_value_t = SynthOptions::default().start_epoch)]
    start: i64,
    /// Switch coupling to the complement graph from this step on.
    #[arg(long)]
    rewire_at: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Repeatable `section.key=value` override.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    adjacency: Option<AdjacencyMethod>,
    #[arg(long)]
    temporal: Option<TemporalCell>,
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    out: PathBuf,
    /// Record per-epoch wall-clock seconds in the history CSV.
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    /// Comma-separated subset of adjacency, temporal, attention, gcn_layers.
    #[arg(long)]
    axes: String,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut config = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &o.set {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::Configuration(format!("--set expects SECTION.KEY=VALUE, got `{item}`"))
        })?;
        let (section, key) = key.trim().rsplit_once('.').unwrap_or(("", key.trim()));
        config
            .set(section, key, value.trim())
            .map_err(Error::Configuration)?;
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(e) = o.epochs {
        config.train.epochs = e;
    }
    if let Some(w) = o.window {
        config.data.window = w;
    }
    if let Some(h) = o.horizon {
        config.data.horizon = h;
    }
    config.validate()?;
    Ok(config)
}

fn header_comment(config: &RunConfig) -> String {
    format!(
        "seed: {}\nconfig_fingerprint: {}\nconfig: {}",
        config.seed,
        config.fingerprint(),
        config.to_json()
    )
}

fn load_series(path: &Path, topology: &Topology) -> Result<TrafficSeries> {
    data::load_traffic_csv(path, topology)
}

/// Reads a CSV for a checkpoint, naming both node counts on a mismatch.
fn load_for_checkpoint(path: &Path, ck: &Checkpoint) -> Result<TrafficSeries> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or("");
    let columns: Vec<&str> = header.split(',').skip(1).collect();
    let link_level = columns.iter().any(|c| c.contains("->") || c.contains('→'));
    if !link_level && columns.len() != ck.node_names.len() {
        return Err(Error::Schema(format!(
            "data has N={} nodes but checkpoint expects N={}",
            columns.len(),
            ck.node_names.len()
        )));
    }
    data::read_traffic_csv(text.as_bytes(), &ck.node_names)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn gen_synth(args: GenSynthArgs, json_out: bool) -> Result<()> {
    let topology = Topology::load(&args.topology)?;
    let options = SynthOptions {
        coupling: args.coupling,
        noise: args.noise,
        period: args.period,
        phase_spread: args.phase_spread,
        cadence_secs: args.cadence,
        start_epoch: args.start,
        rewire_at: args.rewire_at,
    };
    let series = data::generate_synthetic(&topology, args.steps as usize, args.seed, &options)?;
    series.write_csv(BufWriter::new(File::create(&args.out)?))?;
    if json_out {
        println!(
            "{}",
            json!({"nodes": series.n_nodes(), "steps": series.len(), "seed": args.seed, "options": options})
        );
    } else {
        println!(
            "N={} T={} seed={}",
            series.n_nodes(),
            series.len(),
            args.seed
        );
    }
    Ok(())
}

fn train(args: TrainArgs, json_out: bool) -> Result<()> {
    let mut config = resolve_config(&args.overrides)?;
    if let Some(m) = args.adjacency {
        config.graph.adjacency = m;
    }
    if let Some(t) = args.temporal {
        config.model.temporal = t;
    }
    if args.attention {
        config.model.attention = true;
    }
    config.validate()?;
    let topology = Topology::load(&args.topology)?;
    let series = load_series(&args.data, &topology)?;
    fs::create_dir_all(&args.out)?;

    let run = pipeline::train_with_progress(&config, &series, &topology, |r| {
        if !json_out {
            eprintln!(
                "epoch {:>3}  loss {:.5}  val mae {:.4}  rmse {:.4}  r2 {:.4}",
                r.epoch, r.train_loss, r.val.mae, r.val.rmse, r.val.r2
            );
        }
    })?;

    run.checkpoint(&config)
        .save(&args.out.join("checkpoint.json"))?;
    let mut history = BufWriter::new(File::create(args.out.join("history.csv"))?);
    run.history.write_csv(
        &mut history,
        Some(&header_comment(&config)),
        args.wall_clock,
    )?;
    history.flush()?;
    let best = run.history.best();
    let metrics = json!({
        "mae": run.test_report.mae,
        "rmse": run.test_report.rmse,
        "r2": run.test_report.r2,
        "config_fingerprint": run.test_report.config_fingerprint,
        "seed": run.test_report.seed,
        "n_samples": run.test_report.n_samples,
        "split": run.test_report.split,
        "units": run.test_report.units,
        "best_epoch": best.epoch,
        "epochs_run": run.history.epochs.len(),
        "persistence": run.baseline,
        "config": config,
    });
    write_json(&args.out.join("metrics.json"), &metrics)?;

    if json_out {
        println!("{metrics}");
    } else {
        println!("split   mae        rmse       r2");
        println!(
            "model   {:<10.4} {:<10.4} {:.4}",
            run.test_report.mae, run.test_report.rmse, run.test_report.r2
        );
        println!(
            "persist {:<10.4} {:<10.4} {:.4}",
            run.baseline.mae, run.baseline.rmse, run.baseline.r2
        );
        println!(
            "best epoch {} of {}; artifacts in {}",
            best.epoch,
            run.history.epochs.len(),
            args.out.display()
        );
    }
    Ok(())
}

fn checkpoint_topology(ck: &Checkpoint, path: Option<&Path>) -> Result<Topology> {
    match path {
        Some(p) => {
            let t = Topology::load(p)?;
            if t.node_names != ck.node_names {
                return Err(Error::Schema(format!(
                    "topology has N={} nodes but checkpoint expects N={}",
                    t.len(),
                    ck.node_names.len()
                )));
            }
            Ok(t)
        }
        None => ck.bare_topology(),
    }
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let topology = checkpoint_topology(&ck, args.topology.as_deref())?;
    let series = load_for_checkpoint(&args.data, &ck)?;
    let prepared = ck.prepare(&series, &topology)?;
    let split = prepared.split(&args.split)?;
    let forecaster = ModelForecaster {
        model: &ck.model,
        source: &prepared.source,
    };
    let metrics = eval::evaluate(&forecaster, split, &prepared.normalizer)?;
    let report = MetricsReport::new(metrics, &ck.run, &args.split);
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn predict(args: PredictArgs, json_out: bool) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let topology = ck.bare_topology()?;
    let series = load_for_checkpoint(&args.data, &ck)?;
    let prepared = ck.prepare(&series, &topology)?;
    let split = prepared.split(&args.split)?;
    let refs: Vec<_> = split.samples.iter().collect();
    let preds = ck.model.predict_batch(&refs, &prepared.source)?;
    let h = ck.model.config.horizon;

    let mut out = BufWriter::new(File::create(&args.out)?);
    for line in header_comment(&ck.run).lines() {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    for name in &ck.node_names {
        for k in 1..=h {
            header.push(if h == 1 {
                name.clone()
            } else {
                format!("{name}@+{k}")
            });
        }
    }
    w.write_record(&header)?;
    for (sample, pred) in refs.iter().zip(&preds) {
        let values = prepared.normalizer.inverse_node_rows(pred);
        let mut record = vec![series.timestamps[sample.target_start()].to_string()];
        for i in 0..values.rows() {
            for k in 0..h {
                record.push(values.get(i, k).to_string());
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    if json_out {
        println!(
            "{}",
            json!({"rows": preds.len(), "split": args.split, "out": args.out})
        );
    } else {
        println!("wrote {} forecasts to {}", preds.len(), args.out.display());
    }
    Ok(())
}

fn ablate(args: AblateArgs, json_out: bool) -> Result<()> {
    let axes = args
        .axes
        .split(',')
        .map(Axis::parse)
        .collect::<Result<Vec<_>>>()?;
    let config = resolve_config(&args.overrides)?;
    let topology = Topology::load(&args.topology)?;
    let series = load_series(&args.data, &topology)?;
    let grid = eval::run_ablation(&config, &axes, &series, &topology, |cell| {
        if !json_out {
            match &cell.outcome {
                Ok(r) => eprintln!(
                    "{:<48} mae {:.4}  rmse {:.4}  r2 {:.4}",
                    cell.delta, r.mae, r.rmse, r.r2
                ),
                Err(e) => eprintln!("{:<48} failed: {e}", cell.delta),
            }
        }
    })?;
    let out = BufWriter::new(File::create(&args.out)?);
    grid.write_csv(out, Some(&header_comment(&config)))?;
    let best = grid.best();
    if json_out {
        let cells: Vec<_> = grid
            .cells
            .iter()
            .map(|c| match &c.outcome {
                Ok(r) => json!({"delta": c.delta, "report": r}),
                Err(e) => json!({"delta": c.delta, "error": e}),
            })
            .collect();
        println!(
            "{}",
            json!({"best": best.map(|c| &c.delta), "cells": cells})
        );
    } else {
        match best {
            Some(c) => {
                let r = c.outcome.as_ref().expect("best cell succeeded");
                println!(
                    "best: {} (mae {:.4}, rmse {:.4}, r2 {:.4})",
                    c.delta, r.mae, r.rmse, r.r2
                );
            }
            None => println!("no cell completed"),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let json_out = cli.json;
    match cli.command {
        Command::GenSynth(a) => gen_synth(a, json_out),
        Command::Train(a) => train(a, json_out),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict(a, json_out),
        Command::Ablate(a) => ablate(a, json_out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
