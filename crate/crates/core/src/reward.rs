//! Per-vehicle platoon reward and neighbourhood reward sharing.
//!
//! A vehicle's reward is the weighted sum of four components:
//!
//! - `r_c`, collision: −1 on the step the vehicle crashes, 0 otherwise;
//! - `r_os`, overtake/speed: normalised speed in `[0, 1]`;
//! - `r_h`, time headway: `ln(d / (t_h·v))`, negative below the headway threshold;
//! - `r_f`, platoon following: a gap term plus a same-lane term with respect to the
//!   platoon predecessor.
//!
//! Training rewards are then averaged over each agent's close AV neighbours.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Share of the following reward assigned to gap keeping.
const GAP_SHARE: f64 = 0.3;
/// Share of the following reward assigned to lane keeping.
const LANE_SHARE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_c: f64,
    pub w_os: f64,
    pub w_h: f64,
    pub w_f: f64,
    pub k1: f64,
    pub k2: f64,
    /// Time-headway threshold in seconds.
    pub t_h: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_c: 200.0, w_os: 1.0, w_h: 4.0, w_f: 5.0, k1: 0.25, k2: 0.3, t_h: 1.2, v_min: 20.0, v_max: 30.0 }
    }
}

/// One vehicle's reward components for a single decision step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub collision: f64,
    pub speed: f64,
    pub headway: f64,
    pub following: f64,
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_c, self.w_os, self.w_h, self.w_f, self.k1, self.k2, self.t_h, self.v_min, self.v_max];
        if all.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config("reward weights must be finite and positive".into()));
        }
        if self.v_max <= self.v_min {
            return Err(Error::Config("v_max must exceed v_min".into()));
        }
        Ok(())
    }

    /// Upper end of the danger band, `t_h · v_max` (36 m with the default weights).
    pub fn danger_distance(&self) -> f64 {
        self.t_h * self.v_max
    }

    /// Largest gap that still earns the gap component, `2 · v_max`.
    pub fn max_following_gap(&self) -> f64 {
        2.0 * self.v_max
    }

    pub fn overtake_speed_reward(&self, v: f64) -> f64 {
        ((v - self.v_min) / (self.v_max - self.v_min)).clamp(0.0, 1.0)
    }

    pub fn collision_penalty(&self, collided: bool) -> f64 {
        if collided {
            -1.0
        } else {
            0.0
        }
    }

    pub fn headway_reward(&self, d_headway: f64, v: f64) -> f64 {
        (d_headway / (self.t_h * v)).ln()
    }

    /// Following reward of a platoon member relative to its predecessor.
    ///
    /// `gap` is the longitudinal distance between the two vehicles; the lane term
    /// applies when both sit in the same lane.
    pub fn following_reward(&self, gap: f64, same_lane: bool) -> f64 {
        let gap = gap.abs();
        let gap_term =
            if gap <= self.max_following_gap() { GAP_SHARE * self.k1 * gap / self.danger_distance() } else { 0.0 };
        let lane_term = if same_lane { LANE_SHARE * self.k2 } else { 0.0 };
        gap_term + lane_term
    }

    pub fn vehicle_reward(&self, c: &RewardComponents) -> f64 {
        self.w_c * c.collision + self.w_os * c.speed + self.w_h * c.headway + self.w_f * c.following
    }
}

/// Averages raw rewards over each agent's neighbour set.
///
/// `neighbor_sets[i]` lists indices into `raw` and must contain `i` itself.
pub fn local_shared_reward(raw: &[f64], neighbor_sets: &[Vec<usize>]) -> Result<Vec<f64>> {
    if raw.len() != neighbor_sets.len() {
        return Err(Error::Contract(format!("{} rewards but {} neighbour sets", raw.len(), neighbor_sets.len())));
    }
    neighbor_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            if !set.contains(&i) {
                return Err(Error::Contract(format!("neighbour set of agent {i} lacks the ego")));
            }
            if let Some(&j) = set.iter().find(|&&j| j >= raw.len()) {
                return Err(Error::Contract(format!("neighbour index {j} out of range")));
            }
            Ok(set.iter().map(|&j| raw[j]).sum::<f64>() / set.len() as f64)
        })
        .collect()
}
