//! One sequence through a method: taped losses for training and value-level
//! posteriors for evaluation.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::filters::{init_from_truth, init_uniform, posterior_nll, run_filter, Direction, FilterInputs, FilterTrace};
use crate::harness::bundle::{filter_config, Bundle, FilterNets};
use crate::harness::config::{Method, TrainConfig};
use crate::mixture::DrawRecorder;
use crate::rng::{Purpose, RngStream};
use crate::simulator::{SimConfig, Trajectory};
use crate::smoothers::{ffbs_smooth, mdps_combine, smoothed_nll, SmoothedPosterior};
use crate::state::ParticleSet;

/// Shared settings for running a bundle on sequences.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub train: &'a TrainConfig,
    pub sim: &'a SimConfig,
    pub particles: usize,
    /// No IWSG weights in the filters (no filter gradients needed).
    pub inference: bool,
}

/// Forward filters start at the noisy truth, backward filters uniformly over
/// the arena.
pub fn init_set(ctx: &RunContext<'_>, dir: Direction, traj: &Trajectory, rng: &RngStream) -> Result<ParticleSet> {
    let mut r = rng.stream(dir.stage(), 0, 0, Purpose::Init);
    match dir {
        Direction::Forward => init_from_truth(&traj.states[0], ctx.particles, &mut r),
        Direction::Backward => init_uniform(&ctx.sim.arena, ctx.particles, &mut r),
    }
}

pub fn run_direction(
    tape: &Tape,
    bundle: &Bundle,
    nets: &FilterNets,
    method: Method,
    dir: Direction,
    ctx: &RunContext<'_>,
    traj: &Trajectory,
    rng: &RngStream,
) -> Result<FilterTrace> {
    let mut cfg = filter_config(ctx.train, method, dir, ctx.particles);
    cfg.inference = ctx.inference;
    let init = init_set(ctx, dir, traj, rng)?;
    let obs = traj.observation_values();
    let inputs = FilterInputs {
        observations: &obs,
        actions: None,
        init: &init,
    };
    run_filter(tape, &bundle.store, nets.model(), &cfg, &inputs, rng, &mut DrawRecorder::fresh())
}

pub fn run_mdps(tape: &Tape, bundle: &Bundle, ctx: &RunContext<'_>, traj: &Trajectory, rng: &RngStream) -> Result<SmoothedPosterior> {
    let fwd = run_direction(tape, bundle, bundle.fwd()?, Method::Mdpf, Direction::Forward, ctx, traj, rng)?;
    let bwd = run_direction(tape, bundle, bundle.bwd()?, Method::Mdpf, Direction::Backward, ctx, traj, rng)?;
    let obs = traj.observation_values();
    mdps_combine(
        tape,
        &bundle.store,
        &fwd,
        &bwd,
        bundle.smoother()?.model(),
        &obs,
        ctx.particles,
        rng,
        &mut DrawRecorder::fresh(),
    )
}

/// What a training stage optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Sum of the NLLs of whichever filters the bundle has (they share no
    /// parameters, so this trains each on its own loss).
    Filters,
    Smoother,
}

pub fn sequence_loss(
    tape: &Tape,
    bundle: &Bundle,
    objective: Objective,
    ctx: &RunContext<'_>,
    traj: &Trajectory,
    rng: &RngStream,
) -> Result<Var> {
    let mask = &traj.loss_mask;
    match objective {
        Objective::Filters => {
            let filter_method = match bundle.method {
                Method::Mdps | Method::MdpfBackward => Method::Mdpf,
                m => m,
            };
            let mut total: Option<Var> = None;
            for (nets, dir) in [(&bundle.fwd, Direction::Forward), (&bundle.bwd, Direction::Backward)] {
                if let Some(nets) = nets {
                    let trace = run_direction(tape, bundle, nets, filter_method, dir, ctx, traj, rng)?;
                    let l = posterior_nll(tape, &trace, &traj.states, mask)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, l),
                        None => l,
                    });
                }
            }
            total.ok_or_else(|| crate::Error::Config("bundle has no filter to train".into()))
        }
        Objective::Smoother => {
            let post = run_mdps(tape, bundle, ctx, traj, rng)?;
            smoothed_nll(tape, &post, &traj.states, mask)
        }
    }
}

/// Per-step posterior sets and the output kernel's log-bandwidth.
pub struct Posterior {
    pub sets: Vec<ParticleSet>,
    pub log_bw: [f64; 3],
}

fn bw3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

pub fn posterior(bundle: &Bundle, ctx: &RunContext<'_>, traj: &Trajectory, rng: &RngStream) -> Result<Posterior> {
    let tape = Tape::new();
    let ctx = RunContext { inference: true, ..*ctx };
    match bundle.method {
        Method::Mdps => {
            let post = run_mdps(&tape, bundle, &ctx, traj, rng)?;
            let sets = (0..post.len()).map(|t| post.set(&tape, t)).collect::<Result<_>>()?;
            Ok(Posterior {
                sets,
                log_bw: bw3(&tape.value(post.log_bw)),
            })
        }
        Method::Mdpf | Method::Tgpf | Method::Srpf | Method::MdpfBackward => {
            let (nets, dir) = if bundle.method == Method::MdpfBackward {
                (bundle.bwd()?, Direction::Backward)
            } else {
                (bundle.fwd()?, Direction::Forward)
            };
            let trace = run_direction(&tape, bundle, nets, bundle.method, dir, &ctx, traj, rng)?;
            let sets = (0..trace.len()).map(|t| trace.post_set(&tape, t)).collect::<Result<_>>()?;
            Ok(Posterior {
                sets,
                log_bw: bw3(&tape.value(trace.log_bw_posterior)),
            })
        }
        Method::Ffbs => {
            let f = bundle.ffbs()?;
            let sets = ffbs_filter_then_smooth(&tape, bundle, &ctx, traj, rng)?;
            Ok(Posterior {
                sets,
                log_bw: bw3(bundle.store.block_values(f.bw)),
            })
        }
    }
}

/// Bootstrap filter with the FFBS dynamics and the true bearing likelihood,
/// then backward reweighting.
pub fn ffbs_filter_then_smooth(
    tape: &Tape,
    bundle: &Bundle,
    ctx: &RunContext<'_>,
    traj: &Trajectory,
    rng: &RngStream,
) -> Result<Vec<ParticleSet>> {
    let f = bundle.ffbs()?;
    let mut cfg = filter_config(ctx.train, Method::Ffbs, Direction::Forward, ctx.particles);
    cfg.inference = true;
    let init = init_set(ctx, Direction::Forward, traj, rng)?;
    let obs = traj.observation_values();
    let inputs = FilterInputs {
        observations: &obs,
        actions: None,
        init: &init,
    };
    let model = crate::filters::FilterModel {
        dynamics: &f.dynamics,
        measurement: &f.likelihood,
        bw_resample: f.bw_resample,
        bw_posterior: f.bw,
    };
    let trace = run_filter(tape, &bundle.store, model, &cfg, &inputs, rng, &mut DrawRecorder::fresh())?;
    let sets: Vec<ParticleSet> = (0..trace.len()).map(|t| trace.post_set(tape, t)).collect::<Result<_>>()?;
    ffbs_smooth(&sets, &f.dynamics, &bundle.store)
}
