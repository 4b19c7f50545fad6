//! Five-bin reward tables and averaged training curves built from run CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use platoon_core::marl_trainer::{Algo, CSV_HEADER};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const N_BINS: usize = 5;

pub const AGGREGATION_NOTE: &str = "reward = mean over the 4 agents of the episode sum of shared (unscaled) rewards; \
bin value = arithmetic mean over all episodes in the bin and all seeds";

/// One parsed run CSV row; only the fields the summary needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub episode: usize,
    pub seed: u64,
    pub density: u8,
    pub algo: Algo,
    pub mean_return: f64,
    pub collisions: usize,
    pub avg_speed: f64,
}

pub fn parse_run_csv(path: &Path, text: &str) -> Result<Vec<RunRow>> {
    let err = |line: usize, message: String| HarnessError::Parse { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(err(1, "missing or unexpected header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(err(n, format!("expected 12 fields, found {}", f.len())));
        }
        let num = |idx: usize| -> Result<f64> {
            f[idx].parse::<f64>().map_err(|e| err(n, format!("field {}: {e}", idx + 1)))
        };
        let int = |idx: usize| -> Result<u64> {
            f[idx].parse::<u64>().map_err(|e| err(n, format!("field {}: {e}", idx + 1)))
        };
        rows.push(RunRow {
            episode: int(0)? as usize,
            seed: int(1)?,
            density: int(2)? as u8,
            algo: f[3].parse().map_err(|e: platoon_core::Error| err(n, e.to_string()))?,
            mean_return: num(8)?,
            collisions: int(10)? as usize,
            avg_speed: num(11)?,
        });
    }
    Ok(rows)
}

pub fn load_run_csv(path: &Path) -> Result<Vec<RunRow>> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    parse_run_csv(path, &text)
}

/// Every `run.csv` below `dir`, sorted.
pub fn find_run_csvs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(HarnessError::io(&d))? {
            let path = entry.map_err(HarnessError::io(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == crate::experiment::RUN_CSV) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Inclusive 1-based episode ranges of the five bins.
pub fn bin_ranges(episodes: usize) -> Result<[(usize, usize); N_BINS]> {
    if episodes == 0 || episodes % N_BINS != 0 {
        return Err(HarnessError::Config(format!("episode count {episodes} is not a positive multiple of {N_BINS}")));
    }
    let w = episodes / N_BINS;
    Ok(std::array::from_fn(|i| (i * w + 1, (i + 1) * w)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub density: u8,
    pub algo: Algo,
    pub seeds: Vec<u64>,
    pub bins: [f64; N_BINS],
    /// Set where this algorithm has the highest value of its density for the bin.
    pub best: [bool; N_BINS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedSummary {
    pub episodes: usize,
    pub ranges: [(usize, usize); N_BINS],
    pub rows: Vec<SummaryRow>,
}

/// Mean per-episode return over seeds for each (density, algo).
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub density: u8,
    pub algo: Algo,
    pub mean_return: Vec<f64>,
}

type Runs = BTreeMap<(u8, AlgoKey), BTreeMap<u64, Vec<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct AlgoKey(u8);

impl AlgoKey {
    fn new(a: Algo) -> Self {
        AlgoKey(Algo::ALL.iter().position(|&x| x == a).unwrap_or(0) as u8)
    }
    fn algo(self) -> Algo {
        Algo::ALL[self.0 as usize]
    }
}

/// Groups rows by (density, algo, seed) and checks each run covers 1..=E exactly once.
fn group(rows: &[RunRow]) -> Result<(usize, Runs)> {
    let mut runs: Runs = BTreeMap::new();
    let mut raw: BTreeMap<(u8, AlgoKey, u64), BTreeMap<usize, f64>> = BTreeMap::new();
    for r in rows {
        let slot = raw.entry((r.density, AlgoKey::new(r.algo), r.seed)).or_default();
        if slot.insert(r.episode, r.mean_return).is_some() {
            return Err(HarnessError::Config(format!(
                "duplicate episode {} for density {} seed {} {}",
                r.episode, r.density, r.seed, r.algo
            )));
        }
    }
    let mut episodes = None;
    for ((d, a, s), eps) in raw {
        let n = eps.len();
        if eps.keys().copied().ne(1..=n) {
            return Err(HarnessError::Config(format!("density {d} seed {s} {}: episodes are not 1..={n}", a.algo())));
        }
        match episodes {
            None => episodes = Some(n),
            Some(e) if e != n => {
                return Err(HarnessError::Config(format!("runs cover different episode counts ({e} and {n})")));
            }
            _ => {}
        }
        runs.entry((d, a)).or_default().insert(s, eps.into_values().collect());
    }
    let episodes = episodes.ok_or_else(|| HarnessError::Config("no run rows to summarize".into()))?;
    Ok((episodes, runs))
}

pub fn summarize(rows: &[RunRow]) -> Result<BinnedSummary> {
    let (episodes, runs) = group(rows)?;
    let ranges = bin_ranges(episodes)?;
    let mut out: Vec<SummaryRow> = runs
        .iter()
        .map(|(&(density, a), by_seed)| {
            let bins = ranges.map(|(lo, hi)| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for returns in by_seed.values() {
                    for r in &returns[lo - 1..hi] {
                        sum += r;
                        n += 1;
                    }
                }
                sum / n as f64
            });
            SummaryRow {
                density,
                algo: a.algo(),
                seeds: by_seed.keys().copied().collect(),
                bins,
                best: [false; N_BINS],
            }
        })
        .collect();

    let densities: Vec<u8> = out.iter().map(|r| r.density).collect();
    for d in densities {
        for b in 0..N_BINS {
            let top = out.iter().filter(|r| r.density == d).map(|r| r.bins[b]).fold(f64::NEG_INFINITY, f64::max);
            for r in out.iter_mut().filter(|r| r.density == d) {
                r.best[b] = r.bins[b] == top;
            }
        }
    }
    Ok(BinnedSummary { episodes, ranges, rows: out })
}

pub fn curves(rows: &[RunRow]) -> Result<Vec<Curve>> {
    let (episodes, runs) = group(rows)?;
    Ok(runs
        .iter()
        .map(|(&(density, a), by_seed)| {
            let n = by_seed.len() as f64;
            let mean_return = (0..episodes).map(|e| by_seed.values().map(|r| r[e]).sum::<f64>() / n).collect();
            Curve { density, algo: a.algo(), mean_return }
        })
        .collect())
}

pub fn density_name(d: u8) -> &'static str {
    match d {
        1 => "low level",
        2 => "middle level",
        3 => "high level",
        _ => "custom",
    }
}

fn range_label((lo, hi): (usize, usize)) -> String {
    format!("{lo}-{hi}")
}

impl BinnedSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("density,algo,seeds");
        for (b, r) in self.ranges.iter().enumerate() {
            let _ = write!(out, ",bin_{}_{},best_{}", b + 1, range_label(*r), b + 1);
        }
        out.push('\n');
        for row in &self.rows {
            let seeds: Vec<String> = row.seeds.iter().map(u64::to_string).collect();
            let _ = write!(out, "{},{},{}", row.density, row.algo, seeds.join(";"));
            for b in 0..N_BINS {
                let _ = write!(out, ",{:.6},{}", row.bins[b], u8::from(row.best[b]));
            }
            out.push('\n');
        }
        out
    }

    /// Plain-text table, one block per density, `*` marking the higher value per bin.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {AGGREGATION_NOTE}\n# * marks the highest value per bin within a density\n");
        let labels: Vec<String> = self.ranges.iter().map(|r| range_label(*r)).collect();
        let mut densities: Vec<u8> = self.rows.iter().map(|r| r.density).collect();
        densities.dedup();
        for d in densities {
            let _ = writeln!(out, "\nDensity {d} ({})", density_name(d));
            let _ = write!(out, "{:<16}", "episodes");
            for l in &labels {
                let _ = write!(out, "{l:>13}");
            }
            out.push('\n');
            for row in self.rows.iter().filter(|r| r.density == d) {
                let name = match row.algo {
                    Algo::NoisyMadqn => "NoisyNet-MADQN",
                    Algo::Madqn => "MADQN",
                };
                let _ = write!(out, "{name:<16}");
                for b in 0..N_BINS {
                    let cell = format!("{:.2}{}", row.bins[b], if row.best[b] { "*" } else { " " });
                    let _ = write!(out, "{cell:>13}");
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut out = String::from("episode,density,algo,mean_return\n");
    for c in curves {
        for (i, r) in c.mean_return.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{r:.6}", i + 1, c.density, c.algo);
        }
    }
    out
}

/// Paths written by [`write_summary`].
pub struct SummaryFiles {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub curves: PathBuf,
}

/// Summarizes every run CSV under `runs_dir` into `out_dir`.
pub fn write_summary(runs_dir: &Path, out_dir: &Path) -> Result<(BinnedSummary, SummaryFiles)> {
    let mut rows = Vec::new();
    for p in find_run_csvs(runs_dir)? {
        rows.extend(load_run_csv(&p)?);
    }
    let summary = summarize(&rows)?;
    let files = SummaryFiles {
        csv: out_dir.join("summary.csv"),
        text: out_dir.join("summary.txt"),
        curves: out_dir.join("curves.csv"),
    };
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    for (path, body) in
        [(&files.csv, summary.to_csv()), (&files.text, summary.to_text()), (&files.curves, curves_csv(&curves(&rows)?))]
    {
        std::fs::write(path, body).map_err(HarnessError::io(path))?;
    }
    Ok((summary, files))
}
