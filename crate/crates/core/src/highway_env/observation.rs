use serde::{Deserialize, Serialize};

use super::VehicleState;

/// Rows per observation: the ego plus its four nearest neighbours.
pub const OBS_ROWS: usize = 5;
/// Features per row: is_present, dx, dy, dvx, dvy.
pub const OBS_FEATURES: usize = 5;
/// Length of the position block (is_present, dx, dy per row).
pub const POSITION_FEATURES: usize = OBS_ROWS * 3;
/// Length of the velocity block (dvx, dvy per row).
pub const VELOCITY_FEATURES: usize = OBS_ROWS * 2;

pub const DX_SCALE: f64 = 150.0;
pub const DY_SCALE: f64 = 8.0;
pub const SPEED_SCALE: f64 = 30.0;

/// Ego-relative view of the neighbourhood.
///
/// Row 0 is the ego: present, zero offsets, and its absolute speeds in the velocity
/// columns. Neighbour rows are ordered by `|dx|`; missing rows are all zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub rows: [[f64; OBS_FEATURES]; OBS_ROWS],
    /// Vehicle id behind each row.
    pub ids: [Option<usize>; OBS_ROWS],
}

impl Observation {
    pub fn empty() -> Self {
        Self { rows: [[0.0; OBS_FEATURES]; OBS_ROWS], ids: [None; OBS_ROWS] }
    }

    pub fn build(ego: &VehicleState, vehicles: &[VehicleState], sensing_range: f64) -> Self {
        let mut obs = Self::empty();
        obs.rows[0] = [1.0, 0.0, 0.0, ego.v / SPEED_SCALE, ego.vy / SPEED_SCALE];
        obs.ids[0] = Some(ego.id);

        let mut near: Vec<&VehicleState> =
            vehicles.iter().filter(|o| o.id != ego.id && (o.x - ego.x).abs() <= sensing_range).collect();
        near.sort_by(|a, b| {
            let (da, db) = (a.x - ego.x, b.x - ego.x);
            da.abs().total_cmp(&db.abs()).then(da.total_cmp(&db)).then(a.id.cmp(&b.id))
        });
        for (row, other) in near.into_iter().take(OBS_ROWS - 1).enumerate() {
            obs.rows[row + 1] = [
                1.0,
                (other.x - ego.x) / DX_SCALE,
                (other.y - ego.y) / DY_SCALE,
                (other.v - ego.v) / SPEED_SCALE,
                (other.vy - ego.vy) / SPEED_SCALE,
            ];
            obs.ids[row + 1] = Some(other.id);
        }
        obs
    }

    /// Ids of observed vehicles other than the ego.
    pub fn neighbor_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().skip(1).flatten().copied()
    }

    /// Network input: the position block followed by the velocity block.
    pub fn features(&self) -> [f64; POSITION_FEATURES + VELOCITY_FEATURES] {
        let mut out = [0.0; POSITION_FEATURES + VELOCITY_FEATURES];
        for (r, row) in self.rows.iter().enumerate() {
            out[3 * r..3 * r + 3].copy_from_slice(&row[..3]);
            out[POSITION_FEATURES + 2 * r..POSITION_FEATURES + 2 * r + 2].copy_from_slice(&row[3..]);
        }
        out
    }
}
