//! Staged training with Adam over minibatches of sequences.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::autodiff::adam::{clip_global_norm, Adam};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::harness::bundle::Bundle;
use crate::harness::config::{Method, StageConfig, TrainConfig};
use crate::harness::eval::nll_of;
use crate::harness::io::write_atomic;
use crate::harness::run::{ffbs_filter_then_smooth, sequence_loss, Objective, RunContext};
use crate::rng::{Purpose, RngStream};
use crate::simulator::{Dataset, Trajectory};
use crate::state::State3;

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub bundle: Bundle,
    pub log: Vec<LogRow>,
    /// Wall-clock seconds per stage (not part of the deterministic outputs).
    pub seconds: Vec<(String, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Stage<'a> {
    pub name: &'a str,
    pub config: &'a StageConfig,
    pub objective: Objective,
    pub trainable: Vec<bool>,
}

fn steps_for(epochs: f64, n: usize, batch: usize) -> usize {
    ((epochs * n as f64) / batch as f64).ceil() as usize
}

/// Runs one stage in place. Every step draws a fresh random subset of the
/// training sequences; per-sequence gradients are computed in parallel and
/// averaged in index order.
pub fn run_stage(
    bundle: &mut Bundle,
    stage: &Stage<'_>,
    ctx: &RunContext<'_>,
    data: &[Trajectory],
    seed: u64,
    snapshot_dir: Option<&Path>,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    let batch = ctx.train.batch_size.min(data.len());
    let steps = steps_for(stage.config.epochs, data.len(), batch);
    let root = RngStream::new(seed).derive(crate::harness::label(stage.name));
    let mut adam = Adam::new(bundle.store.len(), stage.config.lr);
    for step in 0..steps {
        let step_rng = root.derive(step as u64);
        let mut pick = step_rng.stream(0, 0, 0, Purpose::Batch);
        let mut idx = sample(&mut pick, data.len(), batch).into_vec();
        idx.sort_unstable();
        let frozen: &Bundle = bundle;
        let results: Vec<Result<(f64, Vec<f64>)>> = idx
            .par_iter()
            .map(|&i| {
                let tape = Tape::new();
                let loss = sequence_loss(&tape, frozen, stage.objective, ctx, &data[i], &step_rng.derive(i as u64 + 1))?;
                let value = tape.item(loss);
                let grads = tape.backward(loss)?.param_grads(&frozen.store);
                Ok((value, grads))
            })
            .collect();
        let mut grads = vec![0.0; bundle.store.len()];
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / batch as f64;
        loss *= scale;
        grads.iter_mut().for_each(|g| *g *= scale);
        let bad_grad = grads.iter().any(|g| !g.is_finite());
        if !loss.is_finite() || bad_grad {
            if let Some(dir) = snapshot_dir {
                let _ = bundle.store.save(&dir.join(format!("nan_snapshot_{}_{step}.json", stage.name)));
            }
            return Err(Error::NanLoss {
                value: loss,
                stage: stage.name.to_string(),
                step,
            });
        }
        if ctx.train.grad_clip.is_finite() {
            clip_global_norm(&mut grads, ctx.train.grad_clip);
        }
        adam.step(bundle.store.values_mut(), &grads, Some(&stage.trainable))?;
        log.push(LogRow {
            stage: stage.name.to_string(),
            step,
            loss,
        });
    }
    Ok(())
}

fn filter_mask(bundle: &Bundle, freeze_posterior: bool) -> Vec<bool> {
    let mut m = bundle.store.mask(&["fwd.", "bwd."]);
    if freeze_posterior {
        let post = bundle.store.mask(&["fwd.bw_posterior", "bwd.bw_posterior"]);
        m.iter_mut().zip(post).for_each(|(a, p)| *a &= !p);
    }
    m
}

fn save(bundle: &Bundle, out: Option<&Path>, name: &str, paths: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = out {
        let p = dir.join(name);
        bundle.store.save(&p)?;
        paths.push(p);
    }
    Ok(())
}

/// Three-stage MDPS training: (1) forward and backward filters on their own
/// NLLs, exactly as [`train_filter_baseline`] trains them, (2) smoother weight
/// net and output bandwidth with the filters frozen, (3) everything on the
/// smoothed NLL.
pub fn train_mdps(data: &Dataset, config: &TrainConfig, seed: u64, out: Option<&Path>) -> Result<TrainOutput> {
    let mut bundle = Bundle::new(Method::Mdps, config, &data.config, seed)?;
    let ctx = RunContext {
        train: config,
        sim: &data.config,
        particles: config.particles,
        inference: false,
    };
    let mut log = Vec::new();
    let mut seconds = Vec::new();
    let mut checkpoints = Vec::new();
    // (name, stage settings, objective, trainable, filters in inference mode)
    let stages = [
        ("stage1", 0, Objective::Filters, filter_mask(&bundle, config.freeze_posterior_bandwidth), false),
        ("stage1_free", 1, Objective::Filters, filter_mask(&bundle, false), false),
        ("stage2", 1, Objective::Smoother, bundle.store.mask(&["smoother."]), true),
        ("stage3", 2, Objective::Smoother, vec![true; bundle.store.len()], false),
    ];
    for (name, k, objective, trainable, frozen_filters) in stages {
        let t0 = Instant::now();
        let stage = Stage {
            name,
            config: &config.stages[k],
            objective,
            trainable,
        };
        let ctx = RunContext {
            inference: frozen_filters,
            ..ctx
        };
        run_stage(&mut bundle, &stage, &ctx, &data.train, seed, out, &mut log)?;
        seconds.push((name.to_string(), t0.elapsed().as_secs_f64()));
        save(&bundle, out, &format!("{name}.json"), &mut checkpoints)?;
    }
    save(&bundle, out, "checkpoint.json", &mut checkpoints)?;
    Ok(TrainOutput {
        bundle,
        log,
        seconds,
        checkpoints,
    })
}

/// A single filter trained on its own NLL: stage 1 with the posterior
/// bandwidth held fixed, then a second pass (stage-2 settings) with it free.
pub fn train_filter_baseline(data: &Dataset, config: &TrainConfig, method: Method, seed: u64, out: Option<&Path>) -> Result<TrainOutput> {
    if !matches!(method, Method::Mdpf | Method::MdpfBackward | Method::Tgpf | Method::Srpf) {
        return Err(Error::Config(format!("{} is not a filter baseline", method.name())));
    }
    let mut bundle = Bundle::new(method, config, &data.config, seed)?;
    let ctx = RunContext {
        train: config,
        sim: &data.config,
        particles: config.particles,
        inference: false,
    };
    let mut log = Vec::new();
    let mut seconds = Vec::new();
    let mut checkpoints = Vec::new();
    let stages = [
        ("stage1", filter_mask(&bundle, config.freeze_posterior_bandwidth)),
        ("stage2", filter_mask(&bundle, false)),
    ];
    for (k, (name, trainable)) in stages.into_iter().enumerate() {
        let t0 = Instant::now();
        let stage = Stage {
            name,
            config: &config.stages[k],
            objective: Objective::Filters,
            trainable,
        };
        run_stage(&mut bundle, &stage, &ctx, &data.train, seed, out, &mut log)?;
        seconds.push((name.to_string(), t0.elapsed().as_secs_f64()));
        save(&bundle, out, &format!("{name}.json"), &mut checkpoints)?;
    }
    save(&bundle, out, "checkpoint.json", &mut checkpoints)?;
    Ok(TrainOutput {
        bundle,
        log,
        seconds,
        checkpoints,
    })
}

/// Consecutive true-state pairs of every training sequence.
pub fn transition_pairs(data: &[Trajectory]) -> Vec<(State3, State3)> {
    data.iter()
        .flat_map(|t| t.states.windows(2).map(|w| (w[0], w[1])))
        .collect()
}

/// Fits the FFBS mean network on true transitions (stds stay fixed), then picks
/// the output kernel bandwidth from the grid by validation NLL.
pub fn fit_ffbs(data: &Dataset, config: &TrainConfig, seed: u64, out: Option<&Path>) -> Result<TrainOutput> {
    let mut bundle = Bundle::new(Method::Ffbs, config, &data.config, seed)?;
    let pairs = transition_pairs(&data.train);
    if pairs.is_empty() {
        return Err(Error::Config("FFBS needs sequences with at least two steps".into()));
    }
    let t0 = Instant::now();
    let mut log = Vec::new();
    let batch = 256.min(pairs.len());
    let steps = steps_for(config.ffbs_epochs, pairs.len(), batch);
    let trainable = bundle.store.mask(&["ffbs.dyn"]);
    let mut adam = Adam::new(bundle.store.len(), config.ffbs_lr);
    let root = RngStream::new(seed).derive(crate::harness::label("ffbs"));
    for step in 0..steps {
        let mut pick = root.stream(0, step, 0, Purpose::Batch);
        let idx = sample(&mut pick, pairs.len(), batch).into_vec();
        let tape = Tape::new();
        let from = tape.constant(batch, 3, idx.iter().flat_map(|&i| pairs[i].0.to_array()).collect());
        let to = tape.constant(batch, 3, idx.iter().flat_map(|&i| pairs[i].1.to_array()).collect());
        let f = bundle.ffbs()?;
        let lp = f.dynamics.transition_logpdf_taped(&tape, &bundle.store, from, to)?;
        let loss = tape.neg(tape.mean(lp));
        let value = tape.item(loss);
        if !value.is_finite() {
            return Err(Error::NanLoss {
                value,
                stage: "ffbs".into(),
                step,
            });
        }
        let grads = tape.backward(loss)?.param_grads(&bundle.store);
        adam.step(bundle.store.values_mut(), &grads, Some(&trainable))?;
        log.push(LogRow {
            stage: "ffbs".into(),
            step,
            loss: value,
        });
    }
    let ctx = RunContext {
        train: config,
        sim: &data.config,
        particles: config.particles,
        inference: true,
    };
    let best = select_ffbs_bandwidth(&mut bundle, &ctx, &data.val, seed)?;
    log.push(LogRow {
        stage: "ffbs_bandwidth".into(),
        step: best,
        loss: f64::NAN,
    });
    let mut checkpoints = Vec::new();
    save(&bundle, out, "checkpoint.json", &mut checkpoints)?;
    Ok(TrainOutput {
        bundle,
        log,
        seconds: vec![("ffbs".into(), t0.elapsed().as_secs_f64())],
        checkpoints,
    })
}

/// Sets `ffbs.bw` to the grid entry with the lowest mean validation NLL and
/// returns its index.
pub fn select_ffbs_bandwidth(bundle: &mut Bundle, ctx: &RunContext<'_>, val: &[Trajectory], seed: u64) -> Result<usize> {
    let root = RngStream::new(seed).derive(crate::harness::label("ffbs_val"));
    let frozen: &Bundle = bundle;
    let smoothed: Vec<_> = val
        .par_iter()
        .enumerate()
        .map(|(i, traj)| ffbs_filter_then_smooth(&Tape::new(), frozen, ctx, traj, &root.derive(i as u64)))
        .collect::<Result<_>>()?;
    let mut best = (0, f64::INFINITY);
    for (k, &(sigma, kappa)) in ctx.train.ffbs_bandwidth_grid.iter().enumerate() {
        let log_bw = [sigma.ln(), sigma.ln(), kappa.ln()];
        let mut total = 0.0;
        for (traj, sets) in val.iter().zip(&smoothed) {
            total += nll_of(sets, log_bw, &traj.states)?;
        }
        if total < best.1 {
            best = (k, total);
        }
    }
    let (sigma, kappa) = ctx.train.ffbs_bandwidth_grid[best.0];
    let id = bundle.ffbs()?.bw;
    bundle.store.block_values_mut(id).copy_from_slice(&[sigma.ln(), sigma.ln(), kappa.ln()]);
    Ok(best.0)
}

/// Trains whatever `method` needs.
pub fn train_method(data: &Dataset, config: &TrainConfig, method: Method, seed: u64, out: Option<&Path>) -> Result<TrainOutput> {
    let r = match method {
        Method::Mdps => train_mdps(data, config, seed, out),
        Method::Ffbs => fit_ffbs(data, config, seed, out),
        m => train_filter_baseline(data, config, m, seed, out),
    }?;
    if let Some(dir) = out {
        write_atomic(&dir.join("train_log.csv"), log_csv(&r.log).as_bytes())?;
        let mut t = String::from("stage,seconds\n");
        for (s, v) in &r.seconds {
            let _ = writeln!(t, "{s},{v:.3}");
        }
        write_atomic(&dir.join("train_timings.csv"), t.as_bytes())?;
    }
    Ok(r)
}

pub fn log_csv(log: &[LogRow]) -> String {
    let mut s = String::from("stage,step,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.stage, r.step, r.loss);
    }
    s
}
