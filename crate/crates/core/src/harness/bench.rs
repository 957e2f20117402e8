//! Resampler statistics and wall-time scaling in the particle count.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::filters::Direction;
use crate::harness::bundle::Bundle;
use crate::harness::config::{Method, TrainConfig};
use crate::harness::run::{posterior, run_direction, sequence_loss, Objective, RunContext};
use crate::resampling::Resampler;
use crate::rng::{Purpose, RngStream};
use crate::simulator::{generate_trajectory, SimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResampleRow {
    pub resampler: Resampler,
    pub n: usize,
    /// Mean over indices of the per-index count variance across trials.
    pub mean_count_variance: f64,
}

/// Count variance of each resampler on Dirichlet-like random weights.
/// Returns deterministic statistics and, separately, nanoseconds per call.
pub fn resampling_bench(ns: &[usize], trials: usize, seed: u64) -> Result<(Vec<ResampleRow>, Vec<(Resampler, usize, f64)>)> {
    let root = RngStream::new(seed).derive(crate::harness::label("bench-resampling"));
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for &n in ns {
        let mut wr = root.stream(0, n, 0, Purpose::Bench);
        let raw: Vec<f64> = (0..n).map(|_| -rand::Rng::random::<f64>(&mut wr).max(1e-300).ln()).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
        for r in [Resampler::Multinomial, Resampler::Stratified, Resampler::Residual] {
            let mut rng = root.stream(1, n, r as usize, Purpose::Bench);
            let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
            let t0 = Instant::now();
            for _ in 0..trials {
                let idx = r.resample(&w, n, &mut rng)?;
                let mut c = vec![0.0; n];
                idx.iter().for_each(|&i| c[i] += 1.0);
                for i in 0..n {
                    sum[i] += c[i];
                    sq[i] += c[i] * c[i];
                }
            }
            let ns_per = t0.elapsed().as_nanos() as f64 / trials as f64;
            let k = trials as f64;
            let var = (0..n).map(|i| sq[i] / k - (sum[i] / k).powi(2)).sum::<f64>() / n as f64;
            rows.push(ResampleRow {
                resampler: r,
                n,
                mean_count_variance: var,
            });
            times.push((r, n, ns_per));
        }
    }
    Ok((rows, times))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub n: usize,
    /// Seconds for one MDPS loss + backward pass on one sequence.
    pub train_step: f64,
    /// Seconds for MDPS inference on one sequence.
    pub mdps_inference: f64,
    /// Seconds for one forward MDPF pass in inference mode.
    pub filter_inference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub t: usize,
    pub rows: Vec<ComplexityRow>,
    pub train_exponent: f64,
    pub mdps_inference_exponent: f64,
    pub filter_inference_exponent: f64,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Config("log-log fit needs at least two positive points".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

fn best_of<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times MDPS training and inference (and filter inference) on one sequence
/// of length `t` for each particle count, taking the best of `reps` runs.
pub fn complexity(ns: &[usize], t: usize, reps: usize, seed: u64) -> Result<ComplexityReport> {
    let sim = SimConfig { t, ..SimConfig::default() };
    let traj = generate_trajectory(&sim, &RngStream::new(seed), (0..t).collect())?;
    let mut rows = Vec::new();
    for &n in ns {
        let train = TrainConfig {
            particles: n,
            ..TrainConfig::default()
        };
        let bundle = Bundle::new(Method::Mdps, &train, &sim, seed)?;
        let rng = RngStream::new(seed).derive(n as u64);
        let ctx = RunContext {
            train: &train,
            sim: &sim,
            particles: n,
            inference: false,
        };
        let train_step = best_of(reps, || {
            let tape = Tape::new();
            let loss = sequence_loss(&tape, &bundle, Objective::Smoother, &ctx, &traj, &rng)?;
            tape.backward(loss)?;
            Ok(())
        })?;
        let mdps_inference = best_of(reps, || posterior(&bundle, &ctx, &traj, &rng).map(|_| ()))?;
        let inf = RunContext { inference: true, ..ctx };
        let filter_inference = best_of(reps, || {
            let tape = Tape::new();
            run_direction(&tape, &bundle, bundle.fwd()?, Method::Mdpf, Direction::Forward, &inf, &traj, &rng).map(|_| ())
        })?;
        rows.push(ComplexityRow {
            n,
            train_step,
            mdps_inference,
            filter_inference,
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let col = |f: fn(&ComplexityRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(ComplexityReport {
        t,
        train_exponent: loglog_slope(&x, &col(|r| r.train_step))?,
        mdps_inference_exponent: loglog_slope(&x, &col(|r| r.mdps_inference))?,
        filter_inference_exponent: loglog_slope(&x, &col(|r| r.filter_inference))?,
        rows,
    })
}

impl ComplexityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,train_step_s,mdps_inference_s,filter_inference_s\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.n, r.train_step, r.mdps_inference, r.filter_inference);
        }
        s
    }
}
