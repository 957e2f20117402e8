//! Bearings-only tracking world: waypoint-following vehicles observed by a
//! radar that reports noisy bearings with uniform outliers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filters::Bounds;
use crate::harness::io::{read_to_string, write_atomic};
use crate::kernels::vm_sample;
use crate::models::BearingLikelihood;
pub use crate::models::true_bearing;
use crate::rng::{Purpose, RngStream};
use crate::state::{Angle, State3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub arena: Bounds,
    pub radar: [f64; 2],
    pub alpha: f64,
    pub kappa_obs: f64,
    /// Equally likely per-step speeds (dt = 1).
    pub speeds: Vec<f64>,
    #[serde(rename = "T")]
    pub t: usize,
    pub waypoint_tolerance: f64,
    /// Radians per step.
    pub max_turn: f64,
    /// Waypoints are drawn this far inside the arena edge so a full step
    /// toward one never leaves the arena.
    pub waypoint_margin: f64,
    /// A new waypoint is drawn after this many steps without arrival.
    pub max_steps_per_waypoint: usize,
    /// Stride of the training loss mask.
    pub train_mask_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            arena: Bounds::square(10.0),
            radar: [0.0, 0.0],
            alpha: 0.15,
            kappa_obs: 50.0,
            speeds: vec![1.0, 2.0],
            t: 50,
            waypoint_tolerance: 0.5,
            max_turn: PI / 4.0,
            waypoint_margin: 2.0,
            max_steps_per_waypoint: 25,
            train_mask_stride: 4,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.kappa_obs > 0.0 && self.kappa_obs.is_finite()) {
            return bad("kappa_obs must be positive");
        }
        if self.speeds.is_empty() || self.speeds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("speeds must be a non-empty list of positive values");
        }
        if self.t == 0 {
            return bad("T must be at least 1");
        }
        if !(self.waypoint_tolerance >= 0.0) || !(self.max_turn > 0.0) {
            return bad("waypoint_tolerance must be non-negative and max_turn positive");
        }
        let max_speed = self.speeds.iter().cloned().fold(0.0, f64::max);
        if !(self.waypoint_margin >= max_speed) {
            return bad("waypoint_margin must be at least the largest speed");
        }
        self.waypoint_region()?;
        if self.max_steps_per_waypoint == 0 || self.train_mask_stride == 0 {
            return bad("max_steps_per_waypoint and train_mask_stride must be positive");
        }
        Ok(())
    }

    fn waypoint_region(&self) -> Result<Bounds> {
        let m = self.waypoint_margin;
        let b = Bounds {
            x: (self.arena.x.0 + m, self.arena.x.1 - m),
            y: (self.arena.y.0 + m, self.arena.y.1 - m),
        };
        b.validate().map_err(|_| Error::Config("arena too small for the waypoint margin".into()))?;
        Ok(b)
    }

    pub fn likelihood(&self) -> BearingLikelihood {
        BearingLikelihood {
            radar: self.radar,
            alpha: self.alpha,
            kappa: self.kappa_obs,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State3>,
    pub observations: Vec<Angle>,
    pub loss_mask: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn observation_values(&self) -> Vec<f64> {
        self.observations.iter().map(|a| a.radians()).collect()
    }

    pub fn dense_mask(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    states: Vec<[f64; 3]>,
    observations: Vec<f64>,
    loss_mask: Vec<usize>,
}

impl From<&Trajectory> for Record {
    fn from(t: &Trajectory) -> Self {
        Record {
            states: t.states.iter().map(|s| s.to_array()).collect(),
            observations: t.observation_values(),
            loss_mask: t.loss_mask.clone(),
        }
    }
}

impl TryFrom<Record> for Trajectory {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        if r.states.len() != r.observations.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} states but {} observations",
                r.states.len(),
                r.observations.len()
            )));
        }
        if let Some(&i) = r.loss_mask.iter().find(|&&i| i >= r.states.len()) {
            return Err(Error::LossIndexOutOfRange {
                index: i,
                len: r.states.len(),
            });
        }
        Ok(Trajectory {
            states: r.states.into_iter().map(State3::from_array).collect::<Result<_>>()?,
            observations: r.observations.into_iter().map(Angle::new).collect::<Result<_>>()?,
            loss_mask: r.loss_mask,
        })
    }
}

/// One noisy bearing: uniform with probability α, else von Mises around the
/// true bearing.
pub fn observe<R: Rng + ?Sized>(state: &State3, config: &SimConfig, rng: &mut R) -> Result<Angle> {
    let psi = true_bearing(state, config.radar)?;
    if rng.random::<f64>() < config.alpha {
        let u: f64 = rng.random();
        Ok(Angle::wrap_finite(PI - 2.0 * PI * u))
    } else {
        Ok(vm_sample(psi, config.kappa_obs, rng))
    }
}

fn uniform_in<R: Rng + ?Sized>(b: &Bounds, rng: &mut R) -> (f64, f64) {
    (rng.random_range(b.x.0..=b.x.1), rng.random_range(b.y.0..=b.y.1))
}

fn pick_speed<R: Rng + ?Sized>(speeds: &[f64], rng: &mut R) -> f64 {
    speeds[rng.random_range(0..speeds.len())]
}

/// Distance from `w` to the segment `a`–`b`.
fn segment_distance(a: (f64, f64), b: (f64, f64), w: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((w.0 - a.0) * dx + (w.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a.0 + s * dx - w.0).hypot(a.1 + s * dy - w.1)
}

/// Generates states and observations for one sequence. Motion and
/// observation noise come from separate streams of `rng`.
pub fn generate_trajectory(config: &SimConfig, rng: &RngStream, loss_mask: Vec<usize>) -> Result<Trajectory> {
    config.validate()?;
    let mut motion = rng.stream(0, 0, 0, Purpose::Trajectory);
    let mut noise = rng.stream(0, 0, 0, Purpose::Observation);
    let region = config.waypoint_region()?;

    let mut pos = uniform_in(&config.arena, &mut motion);
    let mut heading: f64 = motion.random_range(-PI..PI);
    let mut waypoint = uniform_in(&region, &mut motion);
    let mut speed = pick_speed(&config.speeds, &mut motion);
    let mut since = 0usize;

    let mut states = Vec::with_capacity(config.t);
    states.push(State3 {
        x: pos.0,
        y: pos.1,
        theta: Angle::wrap_finite(heading),
    });
    while states.len() < config.t {
        let target = (waypoint.1 - pos.1).atan2(waypoint.0 - pos.0);
        let turn = Angle::wrap_finite(target - heading).radians();
        let mut h = heading + turn.clamp(-config.max_turn, config.max_turn);
        let mut next = (pos.0 + speed * h.cos(), pos.1 + speed * h.sin());
        if !config.arena.contains(next.0, next.1) {
            h = target;
            next = (pos.0 + speed * h.cos(), pos.1 + speed * h.sin());
        }
        since += 1;
        let arrived = segment_distance(pos, next, waypoint) <= config.waypoint_tolerance;
        pos = next;
        heading = Angle::wrap_finite(h).radians();
        states.push(State3 {
            x: pos.0,
            y: pos.1,
            theta: Angle::wrap_finite(heading),
        });
        if arrived || since >= config.max_steps_per_waypoint {
            waypoint = uniform_in(&region, &mut motion);
            speed = pick_speed(&config.speeds, &mut motion);
            since = 0;
        }
    }
    let observations = states
        .iter()
        .map(|s| observe(s, config, &mut noise))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        states,
        observations,
        loss_mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub eval: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            train: 5000,
            val: 1000,
            eval: 5000,
        }
    }
}

impl Counts {
    pub fn desk() -> Self {
        Counts {
            train: 500,
            val: 100,
            eval: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }

    fn label(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub eval: Vec<Trajectory>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Trajectory] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Eval => &self.eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub path: String,
    pub sequences: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub counts: Counts,
    pub config: SimConfig,
    pub splits: Vec<SplitFile>,
    /// Hash over the split hashes in order.
    pub content_hash: String,
}

pub const MANIFEST: &str = "manifest.json";

/// Training sequences get the strided loss mask, the others are dense.
pub fn generate_split(config: &SimConfig, split: Split, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let root = RngStream::new(seed).derive(split.label());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mask = match split {
                Split::Train => (0..config.t).step_by(config.train_mask_stride).collect(),
                _ => (0..config.t).collect(),
            };
            generate_trajectory(config, &root.derive(i as u64), mask)
        })
        .collect()
}

fn encode_split(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in trajs {
        serde_json::to_writer(&mut out, &Record::from(t)).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Generates all splits and writes `{split}.jsonl` plus the manifest to `dir`.
pub fn make_dataset(config: &SimConfig, counts: Counts, seed: u64, dir: &Path) -> Result<Dataset> {
    config.validate()?;
    if counts.train == 0 || counts.val == 0 || counts.eval == 0 {
        return Err(Error::Config("every split needs at least one sequence".into()));
    }
    let mut splits = Vec::new();
    let mut data = Vec::new();
    for s in Split::ALL {
        let n = match s {
            Split::Train => counts.train,
            Split::Val => counts.val,
            Split::Eval => counts.eval,
        };
        let trajs = generate_split(config, s, n, seed)?;
        let bytes = encode_split(&trajs)?;
        let name = format!("{}.jsonl", s.name());
        write_atomic(&dir.join(&name), &bytes)?;
        splits.push(SplitFile {
            path: name,
            sequences: n,
            sha256: sha_hex(&bytes),
        });
        data.push(trajs);
    }
    let joined: String = splits.iter().map(|s| s.sha256.as_str()).collect();
    let manifest = Manifest {
        version: 1,
        seed,
        counts,
        config: config.clone(),
        content_hash: sha_hex(joined.as_bytes()),
        splits,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    let mut it = data.into_iter();
    Ok(Dataset {
        config: config.clone(),
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        eval: it.next().unwrap_or_default(),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    serde_json::from_str(&read_to_string(&path)?).map_err(|e| Error::parse(&path, e))
}

/// Loads a dataset written by [`make_dataset`], verifying the split hashes.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::new();
    for sf in &manifest.splits {
        let path: PathBuf = dir.join(&sf.path);
        let text = read_to_string(&path)?;
        if sha_hex(text.as_bytes()) != sf.sha256 {
            return Err(Error::parse(&path, "content hash does not match the manifest"));
        }
        let trajs = text
            .lines()
            .map(|l| {
                let r: Record = serde_json::from_str(l).map_err(|e| Error::parse(&path, e))?;
                Trajectory::try_from(r)
            })
            .collect::<Result<Vec<_>>>()?;
        if trajs.len() != sf.sequences {
            return Err(Error::parse(&path, format!("expected {} sequences, found {}", sf.sequences, trajs.len())));
        }
        out.push(trajs);
    }
    if out.len() != 3 {
        return Err(Error::parse(dir.join(MANIFEST), "manifest must list train, val and eval"));
    }
    let mut it = out.into_iter();
    Ok(Dataset {
        config: manifest.config,
        train: it.next().unwrap_or_default(),
        val: it.next().unwrap_or_default(),
        eval: it.next().unwrap_or_default(),
    })
}
