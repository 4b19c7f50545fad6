//! Two-lane straight highway hosting a four-AV platoon and IDM-driven traffic.
//!
//! AVs act through discrete meta-actions every decision step; low-level
//! proportional controllers track the resulting speed and lane targets over
//! `physics_substeps` integration substeps. Collisions are axis-aligned
//! rectangle overlaps checked after every substep, and crashed vehicles stay on
//! the road, frozen in place.

mod idm;
mod observation;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{local_shared_reward, RewardComponents, RewardWeights};

pub use idm::IdmParams;
pub use observation::{
    Observation, DX_SCALE, DY_SCALE, OBS_FEATURES, OBS_ROWS, POSITION_FEATURES, SPEED_SCALE, VELOCITY_FEATURES,
};

pub const LANE_WIDTH: f64 = 4.0;
pub const N_ACTIONS: usize = 5;

/// Proportional gain of the speed controller (1/s).
const SPEED_GAIN: f64 = 1.0;
/// Acceleration bound of the speed controller (m/s²).
const MAX_AV_ACCEL: f64 = 5.0;
/// Proportional gain of the lateral controller (1/s).
const LATERAL_GAIN: f64 = 3.0;
/// Lateral speed bound during a lane change (m/s).
const MAX_LATERAL_SPEED: f64 = 2.5;
/// Meta-action speed increment (m/s).
const SPEED_STEP: f64 = 5.0;
/// Longitudinal position of the platoon tail at reset.
const PLATOON_TAIL_X: f64 = 20.0;
const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_HDV_SPACING: f64 = 25.0;
/// Headway distances are floored here so the log stays finite on overlap.
const MIN_HEADWAY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VehicleKind {
    Av,
    Hdv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaAction {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl MetaAction {
    pub const ALL: [MetaAction; N_ACTIONS] = [Self::LaneLeft, Self::Idle, Self::LaneRight, Self::Faster, Self::Slower];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<usize> for MetaAction {
    type Error = Error;

    fn try_from(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::Contract(format!("action index {index} outside 0..{N_ACTIONS}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub kind: VehicleKind,
    pub x: f64,
    pub y: f64,
    pub lane: usize,
    pub v: f64,
    /// Lateral speed, nonzero only while changing lanes.
    pub vy: f64,
    pub target_speed: f64,
    pub target_lane: usize,
    /// IDM desired speed; HDVs only.
    pub desired_speed: f64,
    pub crashed: bool,
    pub length: f64,
    pub width: f64,
}

impl VehicleState {
    /// A vehicle at `(x, lane centerline)` cruising at `v` with matching targets.
    pub fn new(id: usize, kind: VehicleKind, x: f64, lane: usize, v: f64) -> Self {
        Self {
            id,
            kind,
            x,
            y: lane_center(lane),
            lane,
            v,
            vy: 0.0,
            target_speed: v,
            target_lane: lane,
            desired_speed: v,
            crashed: false,
            length: 5.0,
            width: 2.0,
        }
    }

    pub fn overlaps(&self, other: &VehicleState) -> bool {
        (self.x - other.x).abs() < 0.5 * (self.length + other.length)
            && (self.y - other.y).abs() < 0.5 * (self.width + other.width)
    }
}

pub fn lane_center(lane: usize) -> f64 {
    lane as f64 * LANE_WIDTH
}

/// Traffic density modes: HDV count range per level.
pub fn hdv_range(density_level: u8) -> Result<(usize, usize)> {
    match density_level {
        1 => Ok((1, 2)),
        2 => Ok((2, 3)),
        3 => Ok((3, 4)),
        other => Err(Error::Config(format!("density level {other} not in {{1, 2, 3}}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub density_level: u8,
    pub n_avs: usize,
    /// Fixed HDV count; `None` draws it from the density level at every reset.
    pub n_hdvs: Option<usize>,
    pub episode_steps: usize,
    pub decision_dt: f64,
    pub physics_substeps: usize,
    pub sensing_range: f64,
    pub lanes: usize,
    pub road_length: f64,
    pub seed: u64,
    /// Bounds of the AV initial speed draw (m/s).
    pub av_speed_range: (f64, f64),
    /// Bounds of the HDV initial and desired speed draw (m/s).
    pub hdv_speed_range: (f64, f64),
    pub idm: IdmParams,
    pub reward: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            density_level: 1,
            n_avs: 4,
            n_hdvs: None,
            episode_steps: 100,
            decision_dt: 1.0,
            physics_substeps: 15,
            sensing_range: 150.0,
            lanes: 2,
            road_length: 2000.0,
            seed: 0,
            av_speed_range: (20.0, 30.0),
            hdv_speed_range: (20.0, 25.0),
            idm: IdmParams::default(),
            reward: RewardWeights::default(),
        }
    }
}

impl EnvConfig {
    pub fn with_density(density_level: u8) -> Self {
        Self { density_level, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        hdv_range(self.density_level)?;
        if self.n_avs != 4 {
            return Err(Error::Config(format!("platoon must have 4 AVs, got {}", self.n_avs)));
        }
        if self.episode_steps != 100 {
            return Err(Error::Config(format!("episodes last 100 steps, got {}", self.episode_steps)));
        }
        if self.lanes != 2 {
            return Err(Error::Config(format!("road has 2 lanes, got {}", self.lanes)));
        }
        if !(self.decision_dt > 0.0) || self.physics_substeps == 0 {
            return Err(Error::Config("decision_dt and physics_substeps must be positive".into()));
        }
        if !(self.sensing_range > 0.0) || !(self.road_length > 0.0) {
            return Err(Error::Config("sensing_range and road_length must be positive".into()));
        }
        for (name, (lo, hi)) in [("av", self.av_speed_range), ("hdv", self.hdv_speed_range)] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("{name} speed range ({lo}, {hi}) invalid")));
            }
        }
        self.reward.validate()
    }
}

/// Full simulator state. AVs occupy `vehicles[0..n_avs]` with ids `1..=n_avs`
/// (id 1 leads the platoon); HDVs follow.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub vehicles: Vec<VehicleState>,
    pub step_count: usize,
    frozen_obs: Vec<Option<Observation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Pairs of vehicle ids that came into contact during this step, `a < b`.
    pub collisions: Vec<(usize, usize)>,
    pub vehicles: Vec<VehicleState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    /// AVs that were live at the start of the step and therefore acted.
    pub active: Vec<bool>,
    /// AVs that crashed during this step.
    pub collided: Vec<bool>,
    pub components: Vec<RewardComponents>,
    pub raw_rewards: Vec<f64>,
    pub shared_rewards: Vec<f64>,
    pub done: Vec<bool>,
    pub info: StepInfo,
}

/// Places the platoon and traffic for a new episode.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Vec<Observation>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let platoon_lane = rng.random_range(0..config.lanes);

    let mut vehicles = Vec::with_capacity(config.n_avs + 4);
    let gaps: Vec<f64> = (1..config.n_avs).map(|_| rng.random_range(36.0..=60.0)).collect();
    let mut x = PLATOON_TAIL_X + gaps.iter().sum::<f64>();
    let (av_lo, av_hi) = config.av_speed_range;
    for i in 0..config.n_avs {
        if i > 0 {
            x -= gaps[i - 1];
        }
        let v = rng.random_range(av_lo..=av_hi);
        vehicles.push(VehicleState::new(i + 1, VehicleKind::Av, x, platoon_lane, v));
    }
    let leader_x = vehicles[0].x;
    if leader_x + 200.0 > config.road_length {
        return Err(Error::Config(format!(
            "road of {} m too short for the platoon and traffic window",
            config.road_length
        )));
    }

    let n_hdvs = match config.n_hdvs {
        Some(n) => n,
        None => {
            let (lo, hi) = hdv_range(config.density_level)?;
            rng.random_range(lo..=hi)
        }
    };
    let (hdv_lo, hdv_hi) = config.hdv_speed_range;
    for k in 0..n_hdvs {
        let id = config.n_avs + k + 1;
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let lane = rng.random_range(0..config.lanes);
            let hx = leader_x + rng.random_range(80.0..=200.0);
            let clear = vehicles.iter().all(|o: &VehicleState| o.lane != lane || (o.x - hx).abs() >= MIN_HDV_SPACING);
            clear.then_some((lane, hx))
        });
        let Some((lane, hx)) = placed else {
            return Err(Error::Config(format!(
                "could not place HDV {id} of {n_hdvs} after {PLACEMENT_ATTEMPTS} attempts"
            )));
        };
        let v = rng.random_range(hdv_lo..=hdv_hi);
        vehicles.push(VehicleState::new(id, VehicleKind::Hdv, hx, lane, v));
    }

    let state = EnvState::from_vehicles(config.clone(), vehicles);
    let obs = (0..config.n_avs).map(|i| state.observe(i)).collect();
    Ok((state, obs))
}

impl EnvState {
    /// Wraps an explicit vehicle layout. AVs must come first, in platoon order.
    pub fn from_vehicles(config: EnvConfig, vehicles: Vec<VehicleState>) -> Self {
        let n_avs = vehicles.iter().filter(|v| v.kind == VehicleKind::Av).count();
        Self { config, vehicles, step_count: 0, frozen_obs: vec![None; n_avs] }
    }

    pub fn n_avs(&self) -> usize {
        self.frozen_obs.len()
    }

    pub fn avs(&self) -> &[VehicleState] {
        &self.vehicles[..self.n_avs()]
    }

    pub fn is_finished(&self) -> bool {
        self.step_count >= self.config.episode_steps || self.avs().iter().all(|v| v.crashed)
    }

    /// Observation of AV `agent` (0-based platoon index).
    pub fn observe(&self, agent: usize) -> Observation {
        if let Some(frozen) = &self.frozen_obs[agent] {
            return frozen.clone();
        }
        Observation::build(&self.vehicles[agent], &self.vehicles, self.config.sensing_range)
    }

    /// Nearest vehicle strictly ahead of `idx` in its lane within sensing range,
    /// as `(index, centre distance)`.
    pub fn leader_of(&self, idx: usize) -> Option<(usize, f64)> {
        let me = &self.vehicles[idx];
        self.vehicles
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != idx && o.lane == me.lane && o.x > me.x)
            .map(|(j, o)| (j, o.x - me.x))
            .filter(|(_, d)| *d <= self.config.sensing_range)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
    }

    /// IDM acceleration of HDV `idx` toward its desired speed.
    pub fn hdv_policy(&self, idx: usize) -> f64 {
        let me = &self.vehicles[idx];
        let leader = self.leader_of(idx).map(|(j, d)| {
            let o = &self.vehicles[j];
            (d - 0.5 * (me.length + o.length), o.v)
        });
        self.config.idm.acceleration(me.v, me.desired_speed, leader)
    }

    /// Id pairs `(a, b)`, `a < b`, of vehicles whose footprints overlap.
    pub fn check_collisions(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, a) in self.vehicles.iter().enumerate() {
            for b in &self.vehicles[i + 1..] {
                if a.overlaps(b) {
                    pairs.push((a.id.min(b.id), a.id.max(b.id)));
                }
            }
        }
        pairs
    }

    fn apply_action(&mut self, agent: usize, action: MetaAction) {
        let (v_min, v_max) = (self.config.reward.v_min, self.config.reward.v_max);
        let top_lane = self.config.lanes - 1;
        let av = &mut self.vehicles[agent];
        match action {
            MetaAction::LaneLeft => av.target_lane = av.target_lane.saturating_sub(1),
            MetaAction::LaneRight => av.target_lane = (av.target_lane + 1).min(top_lane),
            MetaAction::Faster => av.target_speed = (av.target_speed + SPEED_STEP).clamp(v_min, v_max),
            MetaAction::Slower => av.target_speed = (av.target_speed - SPEED_STEP).clamp(v_min, v_max),
            MetaAction::Idle => {}
        }
    }

    fn substep(&mut self, dt: f64) {
        let accels: Vec<f64> = (0..self.vehicles.len())
            .map(|i| {
                let v = &self.vehicles[i];
                match v.kind {
                    _ if v.crashed => 0.0,
                    VehicleKind::Av => (SPEED_GAIN * (v.target_speed - v.v)).clamp(-MAX_AV_ACCEL, MAX_AV_ACCEL),
                    VehicleKind::Hdv => self.hdv_policy(i),
                }
            })
            .collect();
        let top = lane_center(self.config.lanes - 1);
        for (veh, a) in self.vehicles.iter_mut().zip(accels) {
            if veh.crashed {
                continue;
            }
            let v_new = (veh.v + a * dt).max(0.0);
            veh.x += 0.5 * (veh.v + v_new) * dt;
            veh.v = v_new;
            if veh.kind == VehicleKind::Av {
                let err = lane_center(veh.target_lane) - veh.y;
                veh.vy = (LATERAL_GAIN * err).clamp(-MAX_LATERAL_SPEED, MAX_LATERAL_SPEED);
                veh.y = (veh.y + veh.vy * dt).clamp(0.0, top);
                veh.lane = ((veh.y / LANE_WIDTH).round() as usize).min(self.config.lanes - 1);
            }
        }
    }

    /// Advances one decision step. `joint_actions` holds one action index per AV;
    /// entries for crashed AVs are ignored.
    pub fn step(&mut self, joint_actions: &[usize]) -> Result<StepResult> {
        let n = self.n_avs();
        if joint_actions.len() != n {
            return Err(Error::Contract(format!("{} actions for {n} AVs", joint_actions.len())));
        }
        if self.step_count >= self.config.episode_steps {
            return Err(Error::Contract("episode already finished".into()));
        }
        let actions = joint_actions.iter().map(|&a| MetaAction::try_from(a)).collect::<Result<Vec<_>>>()?;

        let active: Vec<bool> = self.avs().iter().map(|v| !v.crashed).collect();
        for (agent, action) in actions.into_iter().enumerate() {
            if active[agent] {
                self.apply_action(agent, action);
            }
        }

        let mut collisions = Vec::new();
        let dt = self.config.decision_dt / self.config.physics_substeps as f64;
        for _ in 0..self.config.physics_substeps {
            self.substep(dt);
            for (a, b) in self.check_collisions() {
                let (ia, ib) = (self.index_of(a), self.index_of(b));
                if self.vehicles[ia].crashed && self.vehicles[ib].crashed {
                    continue;
                }
                for i in [ia, ib] {
                    self.vehicles[i].crashed = true;
                    self.vehicles[i].vy = 0.0;
                }
                if !collisions.contains(&(a, b)) {
                    collisions.push((a, b));
                }
            }
        }
        self.step_count += 1;

        let collided: Vec<bool> = (0..n).map(|i| active[i] && self.vehicles[i].crashed).collect();
        let observations: Vec<Observation> = (0..n).map(|i| self.observe(i)).collect();
        for i in 0..n {
            if collided[i] {
                self.frozen_obs[i] = Some(observations[i].clone());
            }
        }

        let components: Vec<RewardComponents> = (0..n)
            .map(|i| if active[i] { self.reward_components(i, collided[i]) } else { RewardComponents::default() })
            .collect();
        let weights = self.config.reward;
        let raw_rewards: Vec<f64> =
            components.iter().zip(&active).map(|(c, &a)| if a { weights.vehicle_reward(c) } else { 0.0 }).collect();
        let shared_rewards = self.share(&raw_rewards, &active, &observations)?;

        let done = (0..n).map(|i| self.vehicles[i].crashed || self.step_count >= self.config.episode_steps).collect();
        Ok(StepResult {
            observations,
            active,
            collided,
            components,
            raw_rewards,
            shared_rewards,
            done,
            info: StepInfo { collisions, vehicles: self.vehicles.clone() },
        })
    }

    fn index_of(&self, id: usize) -> usize {
        self.vehicles.iter().position(|v| v.id == id).expect("collision ids come from the roster")
    }

    /// Reward components of AV `agent` in the current state.
    pub fn reward_components(&self, agent: usize, collided: bool) -> RewardComponents {
        let w = &self.config.reward;
        let ego = &self.vehicles[agent];
        let headway = self
            .leader_of(agent)
            .map_or(self.config.sensing_range, |(_, d)| d)
            .clamp(MIN_HEADWAY, self.config.sensing_range);
        let following = match agent.checked_sub(1) {
            Some(pred) => {
                let p = &self.vehicles[pred];
                w.following_reward(p.x - ego.x, p.lane == ego.lane)
            }
            None => 0.0,
        };
        RewardComponents {
            collision: w.collision_penalty(collided),
            speed: w.overtake_speed_reward(ego.v),
            headway: w.headway_reward(headway, ego.v.max(0.1)),
            following,
        }
    }

    /// Neighbourhood-averaged rewards: each active AV shares with the active AVs in
    /// its observation.
    fn share(&self, raw: &[f64], active: &[bool], observations: &[Observation]) -> Result<Vec<f64>> {
        let n = raw.len();
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut set = vec![i];
                if active[i] {
                    set.extend(
                        observations[i]
                            .neighbor_ids()
                            .filter(|&id| id >= 1 && id <= n && active[id - 1])
                            .map(|id| id - 1),
                    );
                }
                set
            })
            .collect();
        let mut shared = local_shared_reward(raw, &sets)?;
        for (s, &a) in shared.iter_mut().zip(active) {
            if !a {
                *s = 0.0;
            }
        }
        Ok(shared)
    }
}
