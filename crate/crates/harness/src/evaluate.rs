//! Greedy, noise-free evaluation of saved checkpoints.

use std::path::Path;

use platoon_core::highway_env::{self, EnvConfig, VehicleKind};
use platoon_core::marl_trainer::argmax;
use platoon_core::noisy_net::{Checkpoint, NetworkNoise, NetworkShape, QNetworkParams};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub seed: u64,
    /// Agent-mean of the per-episode shared return, averaged over episodes.
    pub mean_return: f64,
    /// Crashed AVs over all AV-episodes.
    pub collision_rate: f64,
    /// Mean AV speed over live agent-steps (m/s).
    pub mean_speed: f64,
    /// HDVs that went from ahead of the platoon leader to behind it, summed over episodes.
    pub overtakes: usize,
    pub episode_returns: Vec<f64>,
}

pub fn load_checkpoint(path: &Path) -> Result<QNetworkParams> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(HarnessError::json(path))?;
    Ok(QNetworkParams::from_checkpoint(&ckpt, Some(NetworkShape::default()))?)
}

fn greedy(net: &QNetworkParams, features: &[f64]) -> Result<usize> {
    let q = net.q_forward(&NetworkNoise::none(), features)?;
    Ok(argmax(q.as_slice().expect("contiguous")))
}

/// Runs `episodes` greedy episodes. `policies` holds one shared network or one per AV.
pub fn evaluate(policies: &[QNetworkParams], env: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalMetrics> {
    if policies.is_empty() {
        return Err(HarnessError::Config("at least one policy is required".into()));
    }
    if policies.len() != 1 && policies.len() != env.n_avs {
        return Err(HarnessError::Config(format!("{} policies for {} agents", policies.len(), env.n_avs)));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let (mut speed_sum, mut speed_n, mut crashed, mut overtakes) = (0.0, 0usize, 0usize, 0usize);
    let mut episode_returns = Vec::with_capacity(episodes);

    for _ in 0..episodes {
        let (mut state, mut obs) = highway_env::reset(env, seeds.next_u64())?;
        let n = state.n_avs();
        let mut returns = vec![0.0; n];
        // per vehicle: was it ahead of the leader, and has it been counted
        let mut ahead: Vec<bool> = state.vehicles.iter().map(|v| v.x > state.vehicles[0].x).collect();
        let mut counted = vec![false; state.vehicles.len()];

        while !state.is_finished() {
            let mut actions = Vec::with_capacity(n);
            for (i, av) in state.avs().iter().enumerate() {
                let net = &policies[i % policies.len()];
                actions.push(if av.crashed { 1 } else { greedy(net, &obs[i].features())? });
            }
            let result = state.step(&actions)?;
            for i in (0..n).filter(|&i| result.active[i]) {
                returns[i] += result.shared_rewards[i];
                speed_sum += state.vehicles[i].v;
                speed_n += 1;
            }
            // a crashed leader no longer overtakes anything
            if !state.vehicles[0].crashed || result.collided[0] {
                let lead_x = state.vehicles[0].x;
                for (k, v) in state.vehicles.iter().enumerate().filter(|(_, v)| v.kind == VehicleKind::Hdv) {
                    let now_ahead = v.x > lead_x;
                    if ahead[k] && !now_ahead && !counted[k] {
                        counted[k] = true;
                        overtakes += 1;
                    }
                    ahead[k] = now_ahead;
                }
            }
            obs = result.observations;
        }
        crashed += state.avs().iter().filter(|v| v.crashed).count();
        episode_returns.push(returns.iter().sum::<f64>() / n as f64);
    }

    let denom = (episodes * env.n_avs).max(1) as f64;
    Ok(EvalMetrics {
        episodes,
        seed,
        mean_return: if episodes > 0 { episode_returns.iter().sum::<f64>() / episodes as f64 } else { 0.0 },
        collision_rate: crashed as f64 / denom,
        mean_speed: if speed_n > 0 { speed_sum / speed_n as f64 } else { 0.0 },
        overtakes,
        episode_returns,
    })
}
