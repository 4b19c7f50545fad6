//! Step traces: one JSON object per decision step, one line each.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use platoon_core::highway_env::VehicleKind;
use platoon_core::marl_trainer::StepEvent;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Collision steps must score below this for every AV involved.
pub const COLLISION_REWARD_BOUND: f64 = -180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVehicle {
    pub id: usize,
    pub kind: VehicleKind,
    pub x: f64,
    pub y: f64,
    pub lane: usize,
    pub v: f64,
    pub crashed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAgent {
    pub id: usize,
    pub action: usize,
    pub raw_reward: f64,
    pub shared_reward: f64,
    pub collided: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: usize,
    /// 1-based decision step.
    pub step: usize,
    pub vehicles: Vec<TraceVehicle>,
    /// AVs that acted this step.
    pub agents: Vec<TraceAgent>,
    pub collisions: Vec<(usize, usize)>,
}

fn millis(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

impl TraceRecord {
    pub fn from_event(ev: &StepEvent<'_>) -> Self {
        let res = ev.result;
        let vehicles = res
            .info
            .vehicles
            .iter()
            .map(|v| TraceVehicle {
                id: v.id,
                kind: v.kind,
                x: millis(v.x),
                y: millis(v.y),
                lane: v.lane,
                v: millis(v.v),
                crashed: v.crashed,
            })
            .collect();
        let agents = (0..res.active.len())
            .filter(|&i| res.active[i])
            .map(|i| TraceAgent {
                id: i + 1,
                action: ev.actions[i],
                raw_reward: res.raw_rewards[i],
                shared_reward: res.shared_rewards[i],
                collided: res.collided[i],
            })
            .collect();
        Self {
            episode: ev.episode,
            step: ev.state.step_count,
            vehicles,
            agents,
            collisions: res.info.collisions.clone(),
        }
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &TraceRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Reads a whole trace; blank lines are skipped, malformed ones reported by number.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(HarnessError::io(path))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(HarnessError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub path: PathBuf,
    pub episode: usize,
    pub step: usize,
    pub agent: usize,
    pub raw_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub files: usize,
    pub records: usize,
    pub collision_agent_steps: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that every AV collision step carries a vehicle reward below
/// [`COLLISION_REWARD_BOUND`].
pub fn audit_traces(paths: &[PathBuf]) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    for path in paths {
        report.files += 1;
        for rec in read_trace(path)? {
            report.records += 1;
            for agent in rec.agents.iter().filter(|a| a.collided) {
                report.collision_agent_steps += 1;
                if !(agent.raw_reward < COLLISION_REWARD_BOUND) {
                    report.violations.push(Violation {
                        path: path.clone(),
                        episode: rec.episode,
                        step: rec.step,
                        agent: agent.id,
                        raw_reward: agent.raw_reward,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Every `trace.jsonl` under `dir`, sorted.
pub fn find_traces(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(HarnessError::io(&d))? {
            let path = entry.map_err(HarnessError::io(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "trace.jsonl") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}
