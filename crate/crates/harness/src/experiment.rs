//! Runs the (density × seed × algorithm) grid and records every artifact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use platoon_core::highway_env::EnvConfig;
use platoon_core::marl_trainer::{Algo, Trainer, TrainerConfig, TrainingRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::trace::{TraceRecord, TraceWriter};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_CSV: &str = "run.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub density: u8,
    pub seed: u64,
    pub algo: Algo,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("d{}_s{}_{}", self.density, self.seed, self.algo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the experiment output directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub spec: RunSpec,
    pub status: RunStatus,
    pub error: Option<String>,
    pub env: EnvConfig,
    pub trainer: TrainerConfig,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.runs.iter().all(|r| r.status == RunStatus::Ok)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        serde_json::from_str(&text).map_err(HarnessError::json(path))
    }
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, bytes.len() as u64))
}

fn artifact(root: &Path, path: &Path) -> Result<Artifact> {
    let (sha256, bytes) = sha256_file(path)?;
    let rel = path.strip_prefix(root).unwrap_or(path).to_path_buf();
    Ok(Artifact { path: rel, sha256, bytes })
}

pub fn grid(config: &ExperimentConfig) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &density in &config.densities {
        for &seed in &config.seeds {
            for &algo in &config.algos {
                specs.push(RunSpec { density, seed, algo });
            }
        }
    }
    specs
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(HarnessError::json(path))?;
    std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

/// Trains one grid cell into `root/<dir_name>`; returns the record and the files written.
pub fn run_single(
    root: &Path,
    spec: RunSpec,
    env: &EnvConfig,
    trainer: &TrainerConfig,
    trace: bool,
) -> Result<(TrainingRecord, Vec<PathBuf>)> {
    let dir = root.join(spec.dir_name());
    std::fs::create_dir_all(&dir).map_err(HarnessError::io(&dir))?;
    let mut written = Vec::new();

    let mut trainer_state = Trainer::new(env, trainer, spec.seed)?;
    let trace_path = dir.join(TRACE_FILE);
    let mut writer = if trace {
        let file = File::create(&trace_path).map_err(HarnessError::io(&trace_path))?;
        Some(TraceWriter::new(BufWriter::new(file)))
    } else {
        None
    };
    let mut io_error = None;
    let record = trainer_state.run(|ev| {
        if let (Some(w), None) = (writer.as_mut(), io_error.as_ref()) {
            if let Err(e) = w.write(&TraceRecord::from_event(ev)) {
                io_error = Some(e);
            }
        }
    })?;
    if let Some(w) = writer {
        if let Some(e) = io_error {
            return Err(HarnessError::Io { path: trace_path, source: e });
        }
        w.into_inner().flush().map_err(HarnessError::io(&trace_path))?;
        written.push(trace_path);
    }

    let csv_path = dir.join(RUN_CSV);
    std::fs::write(&csv_path, record.to_csv()).map_err(HarnessError::io(&csv_path))?;
    written.push(csv_path);

    for agent in 0..trainer_state.learners().len() {
        let name = if agent == 0 { CHECKPOINT_FILE.to_string() } else { format!("checkpoint_agent{}.json", agent + 1) };
        let path = dir.join(name);
        write_json(&path, &trainer_state.policy(agent).to_checkpoint())?;
        written.push(path);
    }
    Ok((record, written))
}

/// Runs every grid cell (in parallel up to `workers`) and writes the manifest.
/// Failed runs are recorded in the manifest; the remaining runs proceed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let root = &config.out;
    std::fs::create_dir_all(root).map_err(HarnessError::io(root))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;

    let runs: Vec<RunEntry> = pool.install(|| {
        grid(config)
            .par_iter()
            .map(|&spec| {
                let env = config.env_config(spec.density);
                let trainer = config.trainer_config(spec.algo);
                let outcome = run_single(root, spec, &env, &trainer, config.trace)
                    .and_then(|(_, files)| files.iter().map(|f| artifact(root, f)).collect::<Result<Vec<_>>>());
                let (status, error, artifacts) = match outcome {
                    Ok(a) => (RunStatus::Ok, None, a),
                    Err(e) => (RunStatus::Failed, Some(e.to_string()), Vec::new()),
                };
                RunEntry { spec, status, error, env, trainer, artifacts }
            })
            .collect()
    });

    let manifest = Manifest { code_version: code_version(), config: config.clone(), runs };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
