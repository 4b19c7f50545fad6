use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use platoon_core::marl_trainer::Algo;
use platoon_harness::evaluate::{evaluate, load_checkpoint};
use platoon_harness::experiment::{run_experiment, RunStatus};
use platoon_harness::render::render_trace;
use platoon_harness::summary::write_summary;
use platoon_harness::trace::{audit_traces, find_traces};
use platoon_harness::ExperimentConfig;

#[derive(Parser)]
#[command(name = "platoon", version, about = "Train, summarize, evaluate and render platoon MARL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full grid or a single run.
    Train(TrainArgs),
    /// Build the five-bin reward table and averaged curves from run CSVs.
    Summarize {
        /// Directory containing run subdirectories.
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Where summary files go (defaults to the runs directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy, noise-free evaluation of checkpoints.
    Evaluate {
        /// One shared checkpoint, or one per agent in agent order.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        density: u8,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment config supplying environment overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the metrics JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a trace as one SVG per episode.
    Render {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "svg")]
        out: PathBuf,
    },
    /// Check that every logged collision step scores below the collision bound.
    Audit {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Density level 1-3 (repeatable).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    density: Vec<u8>,
    /// noisy-madqn or madqn (repeatable).
    #[arg(long)]
    algo: Vec<Algo>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Repeatable.
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Skip step traces.
    #[arg(long)]
    no_trace: bool,
}

impl TrainArgs {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.density.is_empty() {
            c.densities = self.density.clone();
        }
        if !self.algo.is_empty() {
            c.algos = self.algo.clone();
        }
        if !self.seed.is_empty() {
            c.seeds = self.seed.clone();
        }
        if let Some(e) = self.episodes {
            c.episodes = e;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        if self.no_trace {
            c.trace = false;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let config = args.config()?;
            let manifest = run_experiment(&config)?;
            for r in &manifest.runs {
                match r.status {
                    RunStatus::Ok => println!("ok     {}", r.spec.dir_name()),
                    RunStatus::Failed => {
                        println!("FAILED {}: {}", r.spec.dir_name(), r.error.as_deref().unwrap_or("unknown error"))
                    }
                }
            }
            println!("manifest: {}", config.out.join(platoon_harness::experiment::MANIFEST_FILE).display());
            Ok(manifest.all_ok())
        }
        Command::Summarize { runs, out } => {
            let out = out.unwrap_or_else(|| runs.clone());
            let (summary, files) = write_summary(&runs, &out)?;
            print!("{}", summary.to_text());
            println!("\nwrote {}, {}, {}", files.csv.display(), files.text.display(), files.curves.display());
            Ok(true)
        }
        Command::Evaluate { checkpoint, density, episodes, seed, config, out } => {
            let exp = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let policies = checkpoint
                .iter()
                .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let metrics = evaluate(&policies, &exp.env_config(density), episodes, seed)?;
            let json = serde_json::to_string_pretty(&metrics)?;
            println!("{json}");
            if let Some(p) = out {
                std::fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
            }
            Ok(true)
        }
        Command::Render { trace, out } => {
            for f in render_trace(&trace, &out)? {
                println!("{}", f.display());
            }
            Ok(true)
        }
        Command::Audit { runs } => {
            let traces = find_traces(&runs)?;
            if traces.is_empty() {
                bail!("no traces found under {}", runs.display());
            }
            let report = audit_traces(&traces)?;
            println!(
                "{} files, {} steps, {} collision agent-steps, {} violations",
                report.files,
                report.records,
                report.collision_agent_steps,
                report.violations.len()
            );
            for v in &report.violations {
                println!(
                    "  {}: episode {} step {} agent {} reward {}",
                    v.path.display(),
                    v.episode,
                    v.step,
                    v.agent,
                    v.raw_reward
                );
            }
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
