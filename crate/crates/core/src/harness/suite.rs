//! (method × resampler × seed) grids with resumable cells and box-plot
//! summaries recomputed from the persisted per-sequence metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Method};
use crate::harness::eval::{evaluate, BoxStats, EvalReport};
use crate::harness::io::{read_to_string, write_atomic};
use crate::harness::run::RunContext;
use crate::harness::train::train_method;
use crate::resampling::Resampler;
use crate::simulator::{load_dataset, make_dataset, read_manifest, Dataset, MANIFEST};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Resamplers crossed with `resampler_methods`; other methods use the
    /// experiment's resampler.
    #[serde(default)]
    pub resamplers: Vec<Resampler>,
    #[serde(default)]
    pub resampler_methods: Vec<Method>,
    /// Existing dataset directory; generated under the output directory if absent.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl SuiteSpec {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let s: SuiteSpec = toml::from_str(text).map_err(|e| Error::parse(path, e))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("suite needs at least one method and one seed".into()));
        }
        self.experiment.validate()
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &method in &self.methods {
            let rs = if self.resampler_methods.contains(&method) && !self.resamplers.is_empty() {
                self.resamplers.clone()
            } else {
                vec![self.experiment.train.resampler]
            };
            for &resampler in &rs {
                for &seed in &self.seeds {
                    out.push(Cell { method, resampler, seed });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub method: Method,
    pub resampler: Resampler,
    pub seed: u64,
}

impl Cell {
    pub fn group(&self) -> String {
        format!("{}/{}", self.method.name(), self.resampler.name())
    }

    pub fn dir_name(&self) -> String {
        format!("{}_{}_s{}", self.method.name(), self.resampler.name(), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub ok: bool,
    pub hash: String,
    pub error: Option<String>,
}

pub const STATUS: &str = "status.json";
pub const METRICS: &str = "metrics.csv";

/// Identity of a cell's inputs: the cell, the full config and the data hash.
pub fn cell_hash(cell: &Cell, experiment: &ExperimentConfig, data_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("{}|{}|{}|", cell.method.name(), cell.resampler.name(), cell.seed));
    h.update(experiment.to_toml());
    h.update(data_hash);
    hex::encode(h.finalize())
}

fn read_status(dir: &Path) -> Option<CellStatus> {
    let text = std::fs::read_to_string(dir.join(STATUS)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Trains and evaluates one cell into `dir`.
pub fn run_cell(cell: &Cell, experiment: &ExperimentConfig, data: &Dataset, dir: &Path) -> Result<EvalReport> {
    let mut train = experiment.train.clone();
    train.resampler = cell.resampler;
    let out = train_method(data, &train, cell.method, cell.seed, Some(dir))?;
    let ctx = RunContext {
        train: &train,
        sim: &data.config,
        particles: experiment.eval.particles,
        inference: true,
    };
    let (report, per_step) = evaluate(&out.bundle, &ctx, &data.eval, &experiment.eval, cell.seed)?;
    write_atomic(&dir.join(METRICS), report.to_csv().as_bytes())?;
    write_atomic(&dir.join("eval_timing.txt"), format!("seconds_per_step {per_step:.6e}\n").as_bytes())?;
    Ok(report)
}

/// Loads the dataset named by the spec, or generates it under `out/data`.
pub fn suite_data(spec: &SuiteSpec, out: &Path) -> Result<(Dataset, String)> {
    let dir = match &spec.data {
        Some(d) => d.clone(),
        None => {
            let d = out.join("data");
            if !d.join(MANIFEST).exists() {
                let dc = &spec.experiment.data;
                make_dataset(&dc.sim, dc.counts, dc.seed, &d)?;
            }
            d
        }
    };
    let hash = read_manifest(&dir)?.content_hash;
    Ok((load_dataset(&dir)?, hash))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub method: String,
    pub resampler: String,
    pub seed: u64,
    pub ok: bool,
    pub mean_nll: Option<f64>,
    pub median_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    /// Box statistics over runs of each run's mean sequence NLL.
    pub runs: Option<BoxStats>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub groups: Vec<GroupSummary>,
    pub runs: Vec<RunRow>,
}

impl SuiteSummary {
    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("method,resampler,seed,ok,mean_nll,median_nll\n");
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.method, r.resampler, r.seed, r.ok, f(r.mean_nll), f(r.median_nll));
        }
        s
    }

    pub fn box_csv(&self) -> String {
        let mut s = String::from("group,completed,failed,min,q1,median,q3,max,mean,se\n");
        for g in &self.groups {
            let _ = write!(s, "{},{},{}", g.group, g.completed, g.failed);
            match &g.runs {
                Some(b) => {
                    let _ = writeln!(s, ",{},{},{},{},{},{},{}", b.min, b.q1, b.median, b.q3, b.max, b.mean, b.se);
                }
                None => s.push_str(",,,,,,,\n"),
            }
        }
        s
    }
}

/// Rebuilds the summary from the cell directories alone.
pub fn summarize(spec: &SuiteSpec, out: &Path) -> Result<SuiteSummary> {
    let mut groups: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    let mut runs = Vec::new();
    for cell in spec.cells() {
        let dir = out.join("cells").join(cell.dir_name());
        let ok = read_status(&dir).is_some_and(|s| s.ok);
        let nll = if ok {
            Some(EvalReport::nll_column(&read_to_string(&dir.join(METRICS))?)?)
        } else {
            None
        };
        let stats = nll.as_deref().map(BoxStats::of).transpose()?;
        let g = cell.group();
        if !groups.contains_key(&g) {
            order.push(g.clone());
        }
        let e = groups.entry(g).or_default();
        match stats {
            Some(s) => e.0.push(s.mean),
            None => e.1 += 1,
        }
        runs.push(RunRow {
            method: cell.method.name().into(),
            resampler: cell.resampler.name().into(),
            seed: cell.seed,
            ok,
            mean_nll: stats.map(|s| s.mean),
            median_nll: stats.map(|s| s.median),
        });
    }
    let groups = order
        .into_iter()
        .map(|g| {
            let (vals, failed) = &groups[&g];
            Ok(GroupSummary {
                runs: if vals.is_empty() { None } else { Some(BoxStats::of(vals)?) },
                completed: vals.len(),
                failed: *failed,
                group: g,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SuiteSummary { groups, runs })
}

/// Runs every cell not already completed with the same inputs, then writes
/// `summary.json`, `summary.csv` and `runs.csv`.
pub fn run_suite(spec: &SuiteSpec, out: &Path) -> Result<SuiteSummary> {
    spec.validate()?;
    let (data, data_hash) = suite_data(spec, out)?;
    write_atomic(&out.join(SPEC_COPY), toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?.as_bytes())?;
    let cells = spec.cells();
    cells.par_iter().for_each(|cell| {
        let dir = out.join("cells").join(cell.dir_name());
        let hash = cell_hash(cell, &spec.experiment, &data_hash);
        if read_status(&dir).is_some_and(|s| s.ok && s.hash == hash) {
            return;
        }
        let _ = std::fs::remove_file(dir.join(STATUS));
        let status = match run_cell(cell, &spec.experiment, &data, &dir) {
            Ok(_) => CellStatus {
                ok: true,
                hash,
                error: None,
            },
            Err(e) => CellStatus {
                ok: false,
                hash,
                error: Some(format!("{}: {e}", e.kind())),
            },
        };
        let _ = write_json(&dir.join(STATUS), &status);
    });
    let summary = summarize(spec, out)?;
    write_json(&out.join("summary.json"), &summary)?;
    write_atomic(&out.join("summary.csv"), summary.box_csv().as_bytes())?;
    write_atomic(&out.join("runs.csv"), summary.runs_csv().as_bytes())?;
    Ok(summary)
}

pub const SPEC_COPY: &str = "suite.toml";

/// Writes `export/nll_box.csv` and `export/recall.csv` (mean recall per group
/// pooled over sequences and completed runs) from the raw cell files.
pub fn export_stats(out: &Path) -> Result<Vec<PathBuf>> {
    let spec = SuiteSpec::load(&out.join(SPEC_COPY))?;
    let summary = summarize(&spec, out)?;
    let dir = out.join("export");
    let box_path = dir.join("nll_box.csv");
    write_atomic(&box_path, summary.box_csv().as_bytes())?;

    let mut header: Option<Vec<String>> = None;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for cell in spec.cells() {
        let cdir = out.join("cells").join(cell.dir_name());
        if !read_status(&cdir).is_some_and(|s| s.ok) {
            continue;
        }
        let text = read_to_string(&cdir.join(METRICS))?;
        let mut lines = text.lines();
        let cols: Vec<String> = lines.next().unwrap_or_default().split(',').map(String::from).collect();
        let recall: Vec<usize> = (0..cols.len()).filter(|&i| cols[i].contains("_recall_")).collect();
        if header.is_none() {
            header = Some(recall.iter().map(|&i| cols[i].clone()).collect());
        }
        let g = cell.group();
        if !sums.contains_key(&g) {
            order.push(g.clone());
        }
        let e = sums.entry(g).or_insert_with(|| (vec![0.0; recall.len()], 0));
        for l in lines {
            let v: Vec<&str> = l.split(',').collect();
            for (k, &i) in recall.iter().enumerate() {
                e.0[k] += v.get(i).and_then(|x| x.parse::<f64>().ok()).unwrap_or(f64::NAN);
            }
            e.1 += 1;
        }
    }
    let mut s = format!("group,sequences,{}\n", header.unwrap_or_default().join(","));
    for g in order {
        let (v, n) = &sums[&g];
        let _ = write!(s, "{g},{n}");
        for x in v {
            let _ = write!(s, ",{}", x / *n as f64);
        }
        s.push('\n');
    }
    let recall_path = dir.join("recall.csv");
    write_atomic(&recall_path, s.as_bytes())?;
    Ok(vec![box_path, recall_path])
}
