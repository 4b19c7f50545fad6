//! Static SVG schematics of trajectories: position against step, one panel per lane.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use platoon_core::highway_env::VehicleKind;

use crate::error::{HarnessError, Result};
use crate::trace::{read_trace, TraceRecord};

const WIDTH: f64 = 960.0;
const PANEL_H: f64 = 240.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const GAP: f64 = 50.0;
const TICKS: usize = 5;

struct Scale {
    steps: (f64, f64),
    xs: (f64, f64),
}

impl Scale {
    fn px(&self, step: f64) -> f64 {
        LEFT + (step - self.steps.0) / (self.steps.1 - self.steps.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, panel: usize, x: f64) -> f64 {
        let top = TOP + panel as f64 * (PANEL_H + GAP);
        top + PANEL_H - (x - self.xs.0) / (self.xs.1 - self.xs.0) * PANEL_H
    }
}

fn fmt_num(v: f64) -> String {
    let r = (v * 10.0).round() / 10.0;
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r:.1}")
    }
}

fn axes(svg: &mut String, scale: &Scale, lanes: usize) {
    for lane in 0..lanes {
        let top = TOP + lane as f64 * (PANEL_H + GAP);
        let bottom = top + PANEL_H;
        let _ = writeln!(
            svg,
            r##"<g class="panel" data-lane="{lane}"><rect x="{LEFT}" y="{top}" width="{w}" height="{PANEL_H}" fill="none" stroke="#444"/>"##,
            w = WIDTH - LEFT - RIGHT
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="13">lane {lane}</text>"#, LEFT + 6.0, top + 16.0);
        for t in 0..=TICKS {
            let f = t as f64 / TICKS as f64;
            let step = scale.steps.0 + f * (scale.steps.1 - scale.steps.0);
            let x = scale.xs.0 + f * (scale.xs.1 - scale.xs.0);
            let (sx, sy) = (scale.px(step), scale.py(lane, x));
            let _ = writeln!(
                svg,
                r##"<line x1="{sx:.1}" y1="{bottom}" x2="{sx:.1}" y2="{}" stroke="#444"/><text x="{sx:.1}" y="{}" font-size="11" text-anchor="middle">{}</text>"##,
                bottom + 4.0,
                bottom + 16.0,
                fmt_num(step)
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{}" y1="{sy:.1}" x2="{LEFT}" y2="{sy:.1}" stroke="#444"/><text x="{}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"##,
                LEFT - 4.0,
                LEFT - 6.0,
                sy + 4.0,
                fmt_num(x)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text class="axis-label" x="{}" y="{}" font-size="12" text-anchor="middle">step</text>"#,
            LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
            bottom + 32.0
        );
        let _ = writeln!(
            svg,
            r#"<text class="axis-label" x="16" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {y})">x (m)</text></g>"#,
            y = top + PANEL_H / 2.0
        );
    }
}

/// Renders one episode. An empty slice gives labelled axes only.
pub fn render_episode(records: &[TraceRecord]) -> String {
    let lanes = records.iter().flat_map(|r| r.vehicles.iter().map(|v| v.lane + 1)).max().unwrap_or(2).max(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in records.iter().flat_map(|r| &r.vehicles) {
        lo = lo.min(v.x);
        hi = hi.max(v.x);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 100.0);
    }
    if hi - lo < 1.0 {
        hi = lo + 1.0;
    }
    let last_step = records.iter().map(|r| r.step).max().unwrap_or(1).max(1) as f64;
    let scale = Scale { steps: (0.0, last_step), xs: (lo, hi) };
    let height = TOP + lanes as f64 * (PANEL_H + GAP);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let title = records.first().map(|r| format!("episode {}", r.episode)).unwrap_or_else(|| "empty trace".into());
    let _ =
        writeln!(svg, r#"<text x="{LEFT}" y="24" font-size="15">{title}: AV (blue) and HDV (grey) positions</text>"#);
    axes(&mut svg, &scale, lanes);

    // (kind, samples as (step, lane, x)) per vehicle id
    let mut tracks: BTreeMap<usize, (VehicleKind, Vec<(usize, usize, f64)>)> = BTreeMap::new();
    for r in records {
        for v in &r.vehicles {
            tracks.entry(v.id).or_insert((v.kind, Vec::new())).1.push((r.step, v.lane, v.x));
        }
    }
    for (id, (kind, samples)) in &tracks {
        let (class, colour) = match kind {
            VehicleKind::Av => ("av", "#1f5fbf"),
            VehicleKind::Hdv => ("hdv", "#8a8a8a"),
        };
        let _ = writeln!(svg, r#"<g class="{class}" data-vehicle="{id}" data-samples="{}">"#, samples.len());
        for run in samples.chunk_by(|a, b| a.1 == b.1) {
            let pts: Vec<String> =
                run.iter().map(|&(s, lane, x)| format!("{:.1},{:.1}", scale.px(s as f64), scale.py(lane, x))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" data-lane="{}" points="{}"/>"#,
                run[0].1,
                pts.join(" ")
            );
        }
        svg.push_str("</g>\n");
    }

    for r in records {
        for &(a, b) in &r.collisions {
            if let Some(v) = r.vehicles.iter().find(|v| v.id == a) {
                let _ = writeln!(
                    svg,
                    r##"<circle class="collision" data-step="{}" data-vehicles="{a},{b}" cx="{:.1}" cy="{:.1}" r="5" fill="none" stroke="#d62728" stroke-width="2"/>"##,
                    r.step,
                    scale.px(r.step as f64),
                    scale.py(v.lane, v.x)
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `episode_NNNN.svg` per episode of the trace into `out_dir`.
pub fn render_trace(trace: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_trace(trace)?;
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let mut episodes: BTreeMap<usize, Vec<TraceRecord>> = BTreeMap::new();
    for r in records {
        episodes.entry(r.episode).or_default().push(r);
    }
    if episodes.is_empty() {
        episodes.insert(0, Vec::new());
    }
    let mut written = Vec::new();
    for (ep, recs) in episodes {
        let path = out_dir.join(format!("episode_{ep:04}.svg"));
        std::fs::write(&path, render_episode(&recs)).map_err(HarnessError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceVehicle;

    fn record(step: usize, lane_of_av: usize, collisions: Vec<(usize, usize)>) -> TraceRecord {
        TraceRecord {
            episode: 1,
            step,
            vehicles: vec![
                TraceVehicle {
                    id: 1,
                    kind: VehicleKind::Av,
                    x: step as f64 * 25.0,
                    y: 0.0,
                    lane: lane_of_av,
                    v: 25.0,
                    crashed: false,
                },
                TraceVehicle {
                    id: 5,
                    kind: VehicleKind::Hdv,
                    x: 100.0 + step as f64 * 22.0,
                    y: 4.0,
                    lane: 1,
                    v: 22.0,
                    crashed: false,
                },
            ],
            agents: Vec::new(),
            collisions,
        }
    }

    fn points_for(svg: &str, id: usize) -> usize {
        let start = svg.find(&format!(r#"data-vehicle="{id}""#)).unwrap();
        let group = &svg[start..start + svg[start..].find("</g>").unwrap()];
        group.split("points=\"").skip(1).map(|p| p.split('"').next().unwrap().split(' ').count()).sum()
    }

    #[test]
    fn empty_trace_gives_axes() {
        let svg = render_episode(&[]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(">step</text>"));
        assert!(svg.contains(">x (m)</text>"));
        assert!(!svg.contains("polyline"));
    }

    #[test]
    fn hundred_steps_give_hundred_samples() {
        let recs: Vec<_> = (1..=100).map(|s| record(s, if s < 40 { 0 } else { 1 }, vec![])).collect();
        let svg = render_episode(&recs);
        assert_eq!(points_for(&svg, 1), 100);
        assert_eq!(points_for(&svg, 5), 100);
        assert!(svg.contains(r#"class="av" data-vehicle="1""#));
        assert!(svg.contains(r#"class="hdv" data-vehicle="5""#));
    }

    #[test]
    fn collision_marked_at_recorded_step() {
        let recs: Vec<_> = (1..=10).map(|s| record(s, 0, if s == 7 { vec![(1, 5)] } else { vec![] })).collect();
        let svg = render_episode(&recs);
        assert_eq!(svg.matches(r#"class="collision""#).count(), 1);
        assert!(svg.contains(r#"data-step="7""#));
    }

    #[test]
    fn one_file_per_episode_and_line_numbered_errors() {
        let dir = tempfile::tempdir().unwrap();
        let trace = dir.path().join("t.jsonl");
        let mut body = String::new();
        for ep in 1..=2 {
            let mut r = record(1, 0, vec![]);
            r.episode = ep;
            body.push_str(&serde_json::to_string(&r).unwrap());
            body.push('\n');
        }
        std::fs::write(&trace, &body).unwrap();
        assert_eq!(render_trace(&trace, &dir.path().join("svg")).unwrap().len(), 2);

        std::fs::write(&trace, format!("{body}{{not json\n")).unwrap();
        match render_trace(&trace, &dir.path().join("svg")) {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }

        std::fs::write(&trace, "").unwrap();
        let files = render_trace(&trace, &dir.path().join("empty")).unwrap();
        assert_eq!(files.len(), 1);
    }
}
