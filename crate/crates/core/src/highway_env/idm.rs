//! Intelligent Driver Model used by scripted human-driven traffic.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration (m/s²).
    pub max_accel: f64,
    /// Comfortable deceleration (m/s²), positive.
    pub comfort_decel: f64,
    /// Jam distance (m).
    pub min_gap: f64,
    /// Desired time gap (s).
    pub time_gap: f64,
    pub exponent: i32,
    /// Physical braking limit applied to the IDM output (m/s², positive).
    pub max_brake: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { max_accel: 3.0, comfort_decel: 2.0, min_gap: 2.0, time_gap: 1.0, exponent: 4, max_brake: 9.0 }
    }
}

impl IdmParams {
    /// Desired dynamic gap `s*` for speed `v` closing on its leader at `closing_speed`.
    pub fn desired_gap(&self, v: f64, closing_speed: f64) -> f64 {
        let dynamic = v * closing_speed / (2.0 * (self.max_accel * self.comfort_decel).sqrt());
        self.min_gap + (v * self.time_gap + dynamic).max(0.0)
    }

    /// Acceleration for a vehicle at speed `v` aiming for `desired_speed`.
    ///
    /// `leader` is `(bumper gap, leader speed)` for the nearest vehicle ahead in the lane.
    pub fn acceleration(&self, v: f64, desired_speed: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / desired_speed).powi(self.exponent);
        let interaction = match leader {
            Some((gap, leader_v)) => {
                let gap = gap.max(1e-3);
                (self.desired_gap(v, v - leader_v) / gap).powi(2)
            }
            None => 0.0,
        };
        (self.max_accel * (free - interaction)).max(-self.max_brake)
    }
}
