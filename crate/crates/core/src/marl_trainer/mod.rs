//! NoisyNet multi-agent DQN and its ε-greedy baseline.
//!
//! All agents act through one shared online network (optionally untied, one per
//! agent) and keep their own replay buffers. Every environment step each live
//! agent resamples the network noise and acts greedily; after the warm-up, one
//! gradient step is taken on a batch drawn from every buffer, with fresh noise
//! for the online and the target network. The target is copied from the online
//! network every `target_sync_every` gradient steps.

mod optim;
mod replay;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::highway_env::{self, EnvConfig, EnvState, Observation, StepResult, N_ACTIONS};
use crate::noisy_net::{NetworkNoise, NetworkShape, NoisePlacement, QNetworkParams};

pub use optim::{Adam, AdamConfig};
pub use replay::{ReplayBuffer, Transition};

/// Salt separating the learner's random stream from the episode seeds.
const LEARNER_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Algo {
    #[serde(alias = "noisy-madqn")]
    NoisyMadqn,
    #[serde(alias = "madqn")]
    Madqn,
}

impl Algo {
    pub const ALL: [Algo; 2] = [Algo::NoisyMadqn, Algo::Madqn];

    pub fn slug(self) -> &'static str {
        match self {
            Algo::NoisyMadqn => "noisy-madqn",
            Algo::Madqn => "madqn",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "noisy-madqn" | "noisynet-madqn" => Ok(Algo::NoisyMadqn),
            "madqn" => Ok(Algo::Madqn),
            _ => Err(Error::Config(format!("unknown algorithm `{s}`"))),
        }
    }
}

/// Linear ε annealing for the baseline, per episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_episodes: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.05, decay_episodes: 150 }
    }
}

impl EpsilonSchedule {
    /// ε for the 0-based episode index.
    pub fn at(&self, episode: usize) -> f64 {
        let frac = (episode as f64 / self.decay_episodes.max(1) as f64).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub algo: Algo,
    pub gamma: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Gradient steps between target refreshes.
    pub target_sync_every: u64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub buffer_capacity: usize,
    /// Transitions every buffer must hold before training starts.
    pub warmup: usize,
    /// Rewards are divided by this before they are stored.
    pub reward_scale: f64,
    pub sigma0: f64,
    /// Noisy layers used by `NOISY_MADQN`; the baseline is always plain.
    pub noise_placement: NoisePlacement,
    /// One network per agent instead of a single shared one.
    pub untied: bool,
    pub epsilon: EpsilonSchedule,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algo: Algo::NoisyMadqn,
            gamma: 0.99,
            adam: AdamConfig::default(),
            batch_size: 32,
            target_sync_every: 200,
            episodes: 200,
            steps_per_episode: 100,
            buffer_capacity: 10_000,
            warmup: 500,
            reward_scale: 200.0,
            sigma0: 0.5,
            noise_placement: NoisePlacement::ValueLayers,
            untied: false,
            epsilon: EpsilonSchedule::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("episodes", self.episodes),
            ("steps_per_episode", self.steps_per_episode),
            ("buffer_capacity", self.buffer_capacity),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, c)| *c == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.target_sync_every == 0 {
            return Err(Error::Config("target_sync_every must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(self.reward_scale > 0.0) {
            return Err(Error::Config("lr and reward_scale must be positive".into()));
        }
        let e = self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) {
            return Err(Error::Config("epsilon bounds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn placement(&self) -> NoisePlacement {
        match self.algo {
            Algo::NoisyMadqn => self.noise_placement,
            Algo::Madqn => NoisePlacement::None,
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy action under freshly resampled network noise.
pub fn select_action<R: Rng + ?Sized>(net: &QNetworkParams, obs: &Observation, rng: &mut R) -> usize {
    let noise = net.sample_noise(rng);
    let q = net.q_forward(&noise, &obs.features()).expect("observations are finite");
    argmax(q.as_slice().expect("contiguous"))
}

/// ε-greedy over the noise-free network.
pub fn select_action_baseline<R: Rng + ?Sized>(
    net: &QNetworkParams,
    obs: &Observation,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..N_ACTIONS);
    }
    let q = net.q_forward(&NetworkNoise::none(), &obs.features()).expect("observations are finite");
    argmax(q.as_slice().expect("contiguous"))
}

fn feature_matrix<'a>(obs: impl ExactSizeIterator<Item = &'a Observation>) -> Array2<f64> {
    let rows = obs.len();
    let mut flat = Vec::with_capacity(rows * 25);
    for o in obs {
        flat.extend_from_slice(&o.features());
    }
    let width = flat.len() / rows.max(1);
    Array2::from_shape_vec((rows, width), flat).expect("rectangular batch")
}

/// Bootstrapped targets `r + γ·max_a Q_target(s', a)`; terminal transitions keep `r`.
pub fn td_targets(target: &QNetworkParams, noise: &NetworkNoise, batch: &[&Transition], gamma: f64) -> Vec<f64> {
    let pass = target.forward_batch(noise, feature_matrix(batch.iter().map(|t| &t.s_next)));
    batch
        .iter()
        .zip(pass.q.rows())
        .map(|(t, q)| if t.done { t.r } else { t.r + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max) })
        .collect()
}

/// Online network, its target copy, and the optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub online: QNetworkParams,
    pub target: QNetworkParams,
    pub optim: Adam,
}

impl Learner {
    pub fn new(online: QNetworkParams, adam: AdamConfig) -> Self {
        let optim = Adam::new(adam, &online);
        Self { target: online.clone(), online, optim }
    }

    /// One gradient step on the mean squared TD error of `batch`, returning the
    /// loss before the update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], gamma: f64, rng: &mut R) -> f64 {
        let online_noise = self.online.sample_noise(rng);
        let target_noise = self.target.sample_noise(rng);
        let targets = td_targets(&self.target, &target_noise, batch, gamma);

        let pass = self.online.forward_batch(&online_noise, feature_matrix(batch.iter().map(|t| &t.s)));
        let n = batch.len() as f64;
        let mut dq = Array2::zeros(pass.q.raw_dim());
        let mut loss = 0.0;
        for (b, (t, y)) in batch.iter().zip(&targets).enumerate() {
            let err = pass.q[[b, t.a]] - y;
            loss += err * err;
            dq[[b, t.a]] = 2.0 * err / n;
        }
        let grads = self.online.backward_batch(&online_noise, &pass, &dq);
        self.optim.step(&mut self.online, &grads);
        loss / n
    }
}

/// Samples `batch_size` transitions from every buffer and takes one gradient
/// step per learner. Returns `None` while any buffer holds fewer than
/// `batch_size` transitions.
pub fn train_step<R: Rng + ?Sized>(
    learners: &mut [Learner],
    buffers: &[ReplayBuffer],
    config: &TrainerConfig,
    rng: &mut R,
) -> Option<f64> {
    if buffers.iter().any(|b| b.len() < config.batch_size) {
        return None;
    }
    if let [shared] = learners {
        let batch: Vec<&Transition> = buffers.iter().flat_map(|b| b.sample(config.batch_size, rng)).collect();
        Some(shared.update(&batch, config.gamma, rng))
    } else {
        assert_eq!(learners.len(), buffers.len(), "one learner per buffer");
        let total: f64 = learners
            .iter_mut()
            .zip(buffers)
            .map(|(l, b)| {
                let batch = b.sample(config.batch_size, rng);
                l.update(&batch, config.gamma, rng)
            })
            .sum();
        Some(total / learners.len() as f64)
    }
}

/// Copies the online parameters into the target every `target_sync_every` steps.
/// Returns whether a copy happened.
pub fn sync_target(learner: &mut Learner, step_count: u64, config: &TrainerConfig) -> bool {
    if step_count % config.target_sync_every == 0 {
        learner.target.clone_from(&learner.online);
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    /// Sum of unscaled shared rewards per agent.
    pub returns: Vec<f64>,
    pub mean_return: f64,
    /// Mean training loss over the episode's gradient steps.
    pub loss_mean: Option<f64>,
    /// AVs that crashed during the episode.
    pub collisions: usize,
    /// Mean AV speed over live agent-steps (m/s).
    pub avg_speed: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub density: u8,
    pub algo: Algo,
    pub episodes: Vec<EpisodeRecord>,
}

pub const CSV_HEADER: &str =
    "episode,seed,density,algo,return_agent_1,return_agent_2,return_agent_3,return_agent_4,mean_return,loss_mean,collisions,avg_speed";

impl TrainingRecord {
    /// One header row plus one row per episode; absent losses are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for e in &self.episodes {
            let mut row =
                vec![e.episode.to_string(), self.seed.to_string(), self.density.to_string(), self.algo.to_string()];
            row.extend(e.returns.iter().map(|r| format!("{r:.6}")));
            row.push(format!("{:.6}", e.mean_return));
            row.push(e.loss_mean.map(|l| format!("{l:.9}")).unwrap_or_default());
            row.push(e.collisions.to_string());
            row.push(format!("{:.6}", e.avg_speed));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// What a step observer sees after every environment step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub episode: usize,
    pub state: &'a EnvState,
    pub actions: &'a [usize],
    pub result: &'a StepResult,
}

/// A training run in progress.
pub struct Trainer {
    env_config: EnvConfig,
    config: TrainerConfig,
    seed: u64,
    learners: Vec<Learner>,
    buffers: Vec<ReplayBuffer>,
    rng: ChaCha8Rng,
    episode_seeds: ChaCha8Rng,
    grad_steps: u64,
    episodes_done: usize,
}

impl Trainer {
    pub fn new(env_config: &EnvConfig, config: &TrainerConfig, seed: u64) -> Result<Self> {
        env_config.validate()?;
        config.validate()?;
        if config.steps_per_episode > env_config.episode_steps {
            return Err(Error::Config("steps_per_episode exceeds the episode length".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LEARNER_STREAM);
        let n_nets = if config.untied { env_config.n_avs } else { 1 };
        let learners = (0..n_nets)
            .map(|_| {
                let net = QNetworkParams::init(NetworkShape::default(), config.placement(), config.sigma0, &mut rng)?;
                Ok(Learner::new(net, config.adam))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            env_config: env_config.clone(),
            config: config.clone(),
            seed,
            learners,
            buffers: (0..env_config.n_avs).map(|_| ReplayBuffer::new(config.buffer_capacity)).collect(),
            rng,
            episode_seeds: ChaCha8Rng::seed_from_u64(seed),
            grad_steps: 0,
            episodes_done: 0,
        })
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn buffers(&self) -> &[ReplayBuffer] {
        &self.buffers
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    /// Network used by `agent`.
    pub fn policy(&self, agent: usize) -> &QNetworkParams {
        &self.learners[agent % self.learners.len()].online
    }

    fn act(&mut self, agent: usize, obs: &Observation, epsilon: f64) -> usize {
        let net = &self.learners[agent % self.learners.len()].online;
        match self.config.algo {
            Algo::NoisyMadqn => select_action(net, obs, &mut self.rng),
            Algo::Madqn => select_action_baseline(net, obs, epsilon, &mut self.rng),
        }
    }

    /// Plays and learns from one episode.
    pub fn run_episode(&mut self, mut on_step: impl FnMut(&StepEvent<'_>)) -> Result<EpisodeRecord> {
        let episode = self.episodes_done + 1;
        let epsilon = self.config.epsilon.at(self.episodes_done);
        let (mut state, mut obs) = highway_env::reset(&self.env_config, self.episode_seeds.next_u64())?;
        let n = state.n_avs();
        let mut returns = vec![0.0; n];
        let (mut losses, mut speed_sum, mut speed_count, mut steps) = (Vec::new(), 0.0, 0usize, 0);

        while steps < self.config.steps_per_episode && !state.is_finished() {
            let live: Vec<bool> = state.avs().iter().map(|v| !v.crashed).collect();
            let actions: Vec<usize> = (0..n).map(|i| if live[i] { self.act(i, &obs[i], epsilon) } else { 1 }).collect();
            let result = state.step(&actions)?;
            steps += 1;

            for i in (0..n).filter(|&i| result.active[i]) {
                returns[i] += result.shared_rewards[i];
                speed_sum += result.info.vehicles[i].v;
                speed_count += 1;
                self.buffers[i].push(Transition {
                    s: obs[i].clone(),
                    a: actions[i],
                    r: result.shared_rewards[i] / self.config.reward_scale,
                    s_next: result.observations[i].clone(),
                    done: result.done[i],
                });
            }
            on_step(&StepEvent { episode, state: &state, actions: &actions, result: &result });

            let warm = self.buffers.iter().all(|b| b.len() >= self.config.warmup);
            if warm {
                if let Some(loss) = train_step(&mut self.learners, &self.buffers, &self.config, &mut self.rng) {
                    losses.push(loss);
                    self.grad_steps += 1;
                    for learner in &mut self.learners {
                        sync_target(learner, self.grad_steps, &self.config);
                    }
                }
            }
            obs = result.observations;
        }

        self.episodes_done += 1;
        let collisions = state.avs().iter().filter(|v| v.crashed).count();
        Ok(EpisodeRecord {
            episode,
            mean_return: returns.iter().sum::<f64>() / n as f64,
            returns,
            loss_mean: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            collisions,
            avg_speed: if speed_count > 0 { speed_sum / speed_count as f64 } else { 0.0 },
            steps,
        })
    }

    /// Runs all configured episodes.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepEvent<'_>)) -> Result<TrainingRecord> {
        let mut episodes = Vec::with_capacity(self.config.episodes);
        while self.episodes_done < self.config.episodes {
            episodes.push(self.run_episode(&mut on_step)?);
        }
        Ok(TrainingRecord { seed: self.seed, density: self.env_config.density_level, algo: self.config.algo, episodes })
    }
}

/// Trains from scratch and returns the per-episode metrics.
pub fn run_training(env_config: &EnvConfig, config: &TrainerConfig, seed: u64) -> Result<TrainingRecord> {
    Trainer::new(env_config, config, seed)?.run(|_| {})
}
