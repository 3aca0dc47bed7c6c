use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use rcp_core::envs::EnvSpec;
use rcp_core::io::{
    export_heatmap, read_checkpoint, read_config, read_dataset, render_config, write_atomic,
    write_checkpoint, write_dataset, write_metrics, write_pairs, write_timing, Checkpoint,
    DatasetHeader, RunConfig,
};
use rcp_core::trainer::{
    collect_dataset, evaluate, train_offline, Actor, Conditioner, IterationMetrics, RandomActor,
    ScriptedActor, Trainer,
};

#[derive(Parser)]
#[command(name = "rcp", version, about = "Reward-conditioned policy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train online from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a recorded dataset without environment interaction.
    TrainOffline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record whole episodes to a dataset file.
    Collect {
        #[arg(long)]
        config: PathBuf,
        /// A checkpoint path, or "random", or "scripted-mediocre".
        #[arg(long)]
        checkpoint: String,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
        /// Minimum number of transitions; episodes are never split.
        #[arg(long)]
        transitions: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of episodes (defaults to the configured count).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Bin the recorded (commanded, observed) pairs of a run directory.
    ExportHeatmap {
        /// Run directory containing diagnostics.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig> {
    let (mut run, warnings) =
        read_config(path).with_context(|| format!("reading {}", path.display()))?;
    for w in warnings {
        warn!("{}: {w}", path.display());
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(o) = out {
        run.out_dir = o;
    }
    Ok(run)
}

/// Writes metrics, timing, diagnostics and the final checkpoint.
fn write_artifacts(run: &RunConfig, trainer: &Trainer, rows: &[IterationMetrics]) -> Result<()> {
    let dir = &run.out_dir;
    write_metrics(&dir.join("metrics.csv"), rows)?;
    write_timing(&dir.join("timing.csv"), rows)?;
    if let Some(eval) = &trainer.last_eval {
        if !eval.pairs.is_empty() {
            write_pairs(&dir.join("diagnostics.csv"), &eval.pairs)?;
        }
    }
    write_checkpoint(&dir.join("checkpoint.bin"), &Checkpoint::from_trainer(trainer))?;
    Ok(())
}

fn prepare_out_dir(run: &RunConfig) -> Result<()> {
    fs::create_dir_all(&run.out_dir)
        .with_context(|| format!("creating {}", run.out_dir.display()))?;
    write_atomic(&run.out_dir.join("config.toml"), render_config(run)?.as_bytes())?;
    Ok(())
}

fn cmd_train(run: RunConfig) -> Result<()> {
    prepare_out_dir(&run)?;
    let mut trainer = Trainer::new(run.train.clone())?;
    let mut rows = Vec::with_capacity(run.train.iterations);
    for i in 1..=run.train.iterations {
        rows.push(trainer.run_iteration()?);
        if i % run.log_every == 0 {
            write_metrics(&run.out_dir.join("metrics.csv"), &rows)?;
        }
        if run.checkpoint_every > 0 && i % run.checkpoint_every == 0 {
            let path = run.out_dir.join(format!("checkpoint_{i:05}.bin"));
            write_checkpoint(&path, &Checkpoint::from_trainer(&trainer))?;
        }
    }
    write_artifacts(&run, &trainer, &rows)?;
    if let Some(last) = rows.last() {
        info!("final mean evaluation return {}", last.eval_mean_return);
    }
    Ok(())
}

fn cmd_train_offline(run: RunConfig, dataset: &Path) -> Result<()> {
    let (header, trajectories) =
        read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    if header.env != run.train.env {
        bail!(
            "configuration error: dataset was recorded on '{}' but the configuration trains on '{}'",
            header.env,
            run.train.env
        );
    }
    let spec = EnvSpec::by_name(&run.train.env)?;
    if header != DatasetHeader::for_env(&spec) {
        bail!("configuration error: dataset header {header:?} does not match environment '{}'", spec.name);
    }
    if trajectories.is_empty() {
        bail!("dataset {} contains no transitions", dataset.display());
    }
    prepare_out_dir(&run)?;
    let (trainer, rows) = train_offline(trajectories, run.train.clone())?;
    write_artifacts(&run, &trainer, &rows)?;
    if let Some(last) = rows.last() {
        info!("final mean evaluation return {}", last.eval_mean_return);
    }
    Ok(())
}

fn cmd_collect(run: RunConfig, source: &str, out: &Path, n: usize) -> Result<()> {
    let spec = EnvSpec::by_name(&run.train.env)?;
    let seed = run.train.seed;
    let trajectories = match source {
        "random" => collect_dataset(&spec, &RandomActor { spec: spec.clone() }, 0.0, n, seed)?,
        "scripted-mediocre" => {
            collect_dataset(&spec, &ScriptedActor { spec: spec.clone() }, 0.0, n, seed)?
        }
        path => {
            let ck = read_checkpoint(Path::new(path), &spec)
                .with_context(|| format!("reading checkpoint {path}"))?;
            let command = ck.normalizer.normalize(ck.target.eval_target());
            collect_dataset(&spec, &ck.policy, command, n, seed)?
        }
    };
    write_dataset(out, &DatasetHeader::for_env(&spec), &trajectories)
        .with_context(|| format!("writing {}", out.display()))?;
    let steps: usize = trajectories.iter().map(|t| t.len()).sum();
    info!("wrote {} episodes ({steps} transitions) to {}", trajectories.len(), out.display());
    Ok(())
}

fn cmd_eval(run: RunConfig, checkpoint: &Path, episodes: Option<usize>) -> Result<()> {
    let spec = EnvSpec::by_name(&run.train.env)?;
    let ck = read_checkpoint(checkpoint, &spec)
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    let episodes = episodes.unwrap_or(run.train.eval_episodes);
    let cond = Conditioner {
        target: &ck.target,
        normalizer: &ck.normalizer,
        per_step: false,
        value: None,
        gamma: run.train.gamma,
        bootstrap_timeouts: run.train.bootstrap_timeouts,
    };
    let actor: &dyn Actor = &ck.policy;
    let result = evaluate(actor, &spec, &cond, episodes, 0, run.train.seed)?;
    println!("mean_return {}", result.mean_return);
    for (i, r) in result.returns.iter().enumerate() {
        println!("episode {i} return {r}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(load_config(&config, seed, out)?),
        Command::TrainOffline { config, dataset, seed, out } => {
            cmd_train_offline(load_config(&config, seed, out)?, &dataset)
        }
        Command::Collect { config, checkpoint, out, transitions, seed } => {
            cmd_collect(load_config(&config, seed, None)?, &checkpoint, &out, transitions)
        }
        Command::Eval { config, checkpoint, seed, episodes } => {
            cmd_eval(load_config(&config, seed, None)?, &checkpoint, episodes)
        }
        Command::ExportHeatmap { out, bins } => {
            let summary = export_heatmap(&out, bins).map_err(|e| anyhow!("{e}"))?;
            match summary.pearson {
                Some(r) => println!("pairs {} pearson {r}", summary.pairs),
                None => println!("pairs {} pearson undefined", summary.pairs),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
