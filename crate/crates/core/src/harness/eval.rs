//! Dense NLL and mode recall over an evaluation split.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::bundle::Bundle;
use crate::harness::config::EvalConfig;
use crate::harness::run::{posterior, RunContext};
use crate::mixture::MixtureDensity;
use crate::rng::RngStream;
use crate::simulator::Trajectory;
use crate::smoothers::{extract_modes, NMS_RADIUS_DEG, NMS_RADIUS_M};
use crate::state::{ParticleSet, State3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub index: usize,
    /// `−(1/T) Σ_t log m(x*_t)`.
    pub nll: f64,
    /// Mean position error of the top mode, and of the best of the top-k.
    pub top1_error: f64,
    pub topk_error: f64,
    /// Fraction of steps with position error within each recall distance.
    pub top1_recall: Vec<f64>,
    pub topk_recall: Vec<f64>,
    /// Mean absolute heading error of whichever top-k mode is nearest in position, degrees.
    pub topk_angle_error_deg: f64,
}

/// Order statistics over a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("no values to summarize".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Ok(BoxStats {
            n,
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[n - 1],
            mean,
            se: (var / n as f64).sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub particles: usize,
    pub recall_distances: Vec<f64>,
    pub sequences: Vec<SequenceMetrics>,
    pub nll: BoxStats,
}

/// `−(1/T) Σ log m(truth_t)` with each set's kernel mixture.
pub fn nll_of(sets: &[ParticleSet], log_bw: [f64; 3], truth: &[State3]) -> Result<f64> {
    if sets.len() != truth.len() || sets.is_empty() {
        return Err(Error::Misaligned(format!("{} posteriors for {} true states", sets.len(), truth.len())));
    }
    let mut total = 0.0;
    for (s, x) in sets.iter().zip(truth) {
        total += MixtureDensity::from_log_bandwidth(s.clone(), log_bw)?.logpdf(x);
    }
    Ok(-total / truth.len() as f64)
}

pub fn sequence_metrics(index: usize, sets: &[ParticleSet], log_bw: [f64; 3], traj: &Trajectory, eval: &EvalConfig) -> Result<SequenceMetrics> {
    let nll = nll_of(sets, log_bw, &traj.states)?;
    let nd = eval.recall_distances.len();
    let (mut e1, mut ek, mut ea) = (0.0, 0.0, 0.0);
    let (mut r1, mut rk) = (vec![0.0; nd], vec![0.0; nd]);
    for (set, truth) in sets.iter().zip(&traj.states) {
        let modes = extract_modes(set, eval.modes, (NMS_RADIUS_M, NMS_RADIUS_DEG))?;
        let d1 = modes[0].state.distance(truth);
        let (dk, best) = modes
            .iter()
            .map(|m| (m.state.distance(truth), m))
            .fold((f64::INFINITY, &modes[0]), |a, b| if b.0 < a.0 { b } else { a });
        e1 += d1;
        ek += dk;
        ea += best.state.theta.diff(truth.theta).degrees().abs();
        for (j, &d) in eval.recall_distances.iter().enumerate() {
            r1[j] += f64::from(u8::from(d1 <= d));
            rk[j] += f64::from(u8::from(dk <= d));
        }
    }
    let t = sets.len() as f64;
    Ok(SequenceMetrics {
        index,
        nll,
        top1_error: e1 / t,
        topk_error: ek / t,
        top1_recall: r1.into_iter().map(|c| c / t).collect(),
        topk_recall: rk.into_iter().map(|c| c / t).collect(),
        topk_angle_error_deg: ea / t,
    })
}

/// Evaluates every sequence with its own RNG stream (so results do not depend
/// on thread scheduling).
pub fn evaluate_sequences(bundle: &Bundle, ctx: &RunContext<'_>, data: &[Trajectory], eval: &EvalConfig, seed: u64) -> Result<Vec<SequenceMetrics>> {
    let root = RngStream::new(seed).derive(crate::harness::label("eval"));
    data.par_iter()
        .enumerate()
        .map(|(i, traj)| {
            let post = posterior(bundle, ctx, traj, &root.derive(i as u64))?;
            sequence_metrics(i, &post.sets, post.log_bw, traj, eval)
        })
        .collect()
}

/// Returns the report and the wall time per sequence step.
pub fn evaluate(bundle: &Bundle, ctx: &RunContext<'_>, data: &[Trajectory], eval: &EvalConfig, seed: u64) -> Result<(EvalReport, f64)> {
    let data = &data[..eval.limit.unwrap_or(data.len()).min(data.len())];
    if data.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let t0 = Instant::now();
    let sequences = evaluate_sequences(bundle, ctx, data, eval, seed)?;
    let steps: usize = data.iter().map(|t| t.len()).sum();
    let per_step = t0.elapsed().as_secs_f64() / steps as f64;
    let nlls: Vec<f64> = sequences.iter().map(|s| s.nll).collect();
    Ok((
        EvalReport {
            method: bundle.method.name().to_string(),
            particles: ctx.particles,
            recall_distances: eval.recall_distances.clone(),
            nll: BoxStats::of(&nlls)?,
            sequences,
        },
        per_step,
    ))
}

impl EvalReport {
    /// Per-sequence metrics as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,nll,top1_error,topk_error,topk_angle_error_deg");
        for d in &self.recall_distances {
            let _ = write!(s, ",top1_recall_{d}m,topk_recall_{d}m");
        }
        s.push('\n');
        for m in &self.sequences {
            let _ = write!(s, "{},{},{},{},{}", m.index, m.nll, m.top1_error, m.topk_error, m.topk_angle_error_deg);
            for (a, b) in m.top1_recall.iter().zip(&m.topk_recall) {
                let _ = write!(s, ",{a},{b}");
            }
            s.push('\n');
        }
        s
    }

    /// Reads the `nll` column back from [`EvalReport::to_csv`] output.
    pub fn nll_column(csv: &str) -> Result<Vec<f64>> {
        csv.lines()
            .skip(1)
            .map(|l| {
                l.split(',')
                    .nth(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("malformed metrics row {l:?}")))
            })
            .collect()
    }
}
