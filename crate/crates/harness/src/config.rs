//! Experiment configuration: a flat JSON document whose keys mirror the CLI.

use std::path::{Path, PathBuf};

use platoon_core::highway_env::{hdv_range, EnvConfig};
use platoon_core::marl_trainer::{Algo, TrainerConfig};
use platoon_core::noisy_net::NoisePlacement;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub densities: Vec<u8>,
    pub seeds: Vec<u64>,
    pub algos: Vec<Algo>,
    pub episodes: usize,
    pub out: PathBuf,
    pub workers: usize,
    /// Write per-step JSON-lines traces.
    pub trace: bool,

    // trainer overrides
    pub gamma: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub target_sync_every: Option<u64>,
    pub buffer_capacity: Option<usize>,
    pub warmup: Option<usize>,
    pub steps_per_episode: Option<usize>,
    pub reward_scale: Option<f64>,
    pub sigma0: Option<f64>,
    pub noise_placement: Option<NoisePlacement>,
    pub untied: Option<bool>,
    pub epsilon_start: Option<f64>,
    pub epsilon_end: Option<f64>,
    pub epsilon_decay_episodes: Option<usize>,

    // environment and reward overrides
    pub n_hdvs: Option<usize>,
    pub w_c: Option<f64>,
    pub w_os: Option<f64>,
    pub w_h: Option<f64>,
    pub w_f: Option<f64>,
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub t_h: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            densities: vec![1, 2, 3],
            seeds: vec![0, 1],
            algos: Algo::ALL.to_vec(),
            episodes: 200,
            out: PathBuf::from("runs"),
            workers: 1,
            trace: true,
            gamma: None,
            lr: None,
            batch_size: None,
            target_sync_every: None,
            buffer_capacity: None,
            warmup: None,
            steps_per_episode: None,
            reward_scale: None,
            sigma0: None,
            noise_placement: None,
            untied: None,
            epsilon_start: None,
            epsilon_end: None,
            epsilon_decay_episodes: None,
            n_hdvs: None,
            w_c: None,
            w_os: None,
            w_h: None,
            w_f: None,
            k1: None,
            k2: None,
            t_h: None,
            v_min: None,
            v_max: None,
        }
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        serde_json::from_str(&text).map_err(HarnessError::json(path))
    }

    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() || self.seeds.is_empty() || self.algos.is_empty() {
            return Err(HarnessError::Config("densities, seeds and algos must be non-empty".into()));
        }
        if self.episodes == 0 {
            return Err(HarnessError::Config("episodes must be positive".into()));
        }
        for &d in &self.densities {
            hdv_range(d)?;
            self.env_config(d).validate()?;
        }
        for &a in &self.algos {
            self.trainer_config(a).validate()?;
        }
        Ok(())
    }

    pub fn env_config(&self, density: u8) -> EnvConfig {
        let mut env = EnvConfig::with_density(density);
        env.n_hdvs = self.n_hdvs.or(env.n_hdvs);
        let r = &mut env.reward;
        set(&mut r.w_c, self.w_c);
        set(&mut r.w_os, self.w_os);
        set(&mut r.w_h, self.w_h);
        set(&mut r.w_f, self.w_f);
        set(&mut r.k1, self.k1);
        set(&mut r.k2, self.k2);
        set(&mut r.t_h, self.t_h);
        set(&mut r.v_min, self.v_min);
        set(&mut r.v_max, self.v_max);
        env
    }

    pub fn trainer_config(&self, algo: Algo) -> TrainerConfig {
        let mut t = TrainerConfig { algo, episodes: self.episodes, ..TrainerConfig::default() };
        set(&mut t.gamma, self.gamma);
        set(&mut t.adam.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.target_sync_every, self.target_sync_every);
        set(&mut t.buffer_capacity, self.buffer_capacity);
        set(&mut t.warmup, self.warmup);
        set(&mut t.steps_per_episode, self.steps_per_episode);
        set(&mut t.reward_scale, self.reward_scale);
        set(&mut t.sigma0, self.sigma0);
        set(&mut t.noise_placement, self.noise_placement);
        set(&mut t.untied, self.untied);
        set(&mut t.epsilon.start, self.epsilon_start);
        set(&mut t.epsilon.end, self.epsilon_end);
        set(&mut t.epsilon.decay_episodes, self.epsilon_decay_episodes);
        t
    }
}
