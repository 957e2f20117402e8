//! Particle filter loops: MDPF (mixture resampling with IWSG), TG-PF
//! (truncated gradients) and SR-PF (soft resampling).

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BlockId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gauss_sample, vm_sample, Bandwidth};
use crate::mixture::{iwsg_log_weights_unchecked, perturb, DrawMode, DrawRecorder, DrawSite, TapedMixture};
use crate::models::{Dynamics, Measurement, WEIGHT_FLOOR};
use crate::resampling::Resampler;
use crate::rng::{Purpose, RngStream};
use crate::state::{Action, Angle, ParticleSet, State3};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const INIT_SIGMA: f64 = 0.01;
pub const INIT_KAPPA: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Iwsg,
    Truncated,
    Soft(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

impl Direction {
    /// RNG stage label, so the two directions never share noise.
    pub fn stage(self) -> u32 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub n: usize,
    pub resampler: Resampler,
    pub gradient_mode: GradientMode,
    pub direction: Direction,
    pub bandwidth_resample: Bandwidth,
    pub bandwidth_posterior: Bandwidth,
    /// Detach the carried particle set every `k` steps.
    pub truncate_every: Option<usize>,
    /// Skip IWSG weights (and the N² density evaluation they need).
    pub inference: bool,
}

impl FilterConfig {
    pub fn mdpf(n: usize) -> Self {
        FilterConfig {
            n,
            resampler: Resampler::Stratified,
            gradient_mode: GradientMode::Iwsg,
            direction: Direction::Forward,
            bandwidth_resample: Bandwidth {
                sigma_x: 0.5,
                sigma_y: 0.5,
                kappa_theta: 20.0,
            },
            bandwidth_posterior: Bandwidth {
                sigma_x: 1.0,
                sigma_y: 1.0,
                kappa_theta: 10.0,
            },
            truncate_every: None,
            inference: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("particle count must be at least 1".into()));
        }
        if let GradientMode::Soft(l) = self.gradient_mode {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("soft-resampling mix {l} outside [0, 1]")));
            }
        }
        if self.truncate_every == Some(0) {
            return Err(Error::Config("truncate_every must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned position bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    pub fn square(half: f64) -> Self {
        Bounds {
            x: (-half, half),
            y: (-half, half),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x.0 && x <= self.x.1 && y >= self.y.0 && y <= self.y.1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x.0 + self.x.1), 0.5 * (self.y.0 + self.y.1))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a < b;
        if ok(self.x) && ok(self.y) {
            Ok(())
        } else {
            Err(Error::Config(format!("empty or non-finite bounds {self:?}")))
        }
    }
}

/// Truth plus `N(0, σ²)` on positions and von Mises noise on the heading.
pub fn init_from_truth<R: Rng + ?Sized>(truth: &State3, n: usize, rng: &mut R) -> Result<ParticleSet> {
    init_from_truth_with(truth, n, INIT_SIGMA, INIT_KAPPA, rng)
}

pub fn init_from_truth_with<R: Rng + ?Sized>(
    truth: &State3,
    n: usize,
    sigma: f64,
    kappa: f64,
    rng: &mut R,
) -> Result<ParticleSet> {
    if n == 0 {
        return Err(Error::EmptyWeights);
    }
    let states = (0..n)
        .map(|_| State3 {
            x: gauss_sample(truth.x, sigma, rng),
            y: gauss_sample(truth.y, sigma, rng),
            theta: vm_sample(truth.theta, kappa, rng),
        })
        .collect();
    ParticleSet::uniform(states, 0)
}

pub fn init_uniform<R: Rng + ?Sized>(bounds: &Bounds, n: usize, rng: &mut R) -> Result<ParticleSet> {
    bounds.validate()?;
    if n == 0 {
        return Err(Error::EmptyWeights);
    }
    let states = (0..n)
        .map(|_| State3 {
            x: rng.random_range(bounds.x.0..=bounds.x.1),
            y: rng.random_range(bounds.y.0..=bounds.y.1),
            theta: Angle::wrap_finite(rng.random_range(-PI..=PI)),
        })
        .collect();
    ParticleSet::uniform(states, 0)
}

/// The networks and bandwidth blocks one filter runs with.
#[derive(Clone, Copy)]
pub struct FilterModel<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub measurement: &'a dyn Measurement,
    /// `1×3` log-bandwidth blocks.
    pub bw_resample: BlockId,
    pub bw_posterior: BlockId,
}

/// Registers `{prefix}.bw_resample` and `{prefix}.bw_posterior`.
pub fn register_bandwidths(
    store: &mut ParamStore,
    prefix: &str,
    config: &FilterConfig,
) -> Result<(BlockId, BlockId)> {
    let r = store.add(&format!("{prefix}.bw_resample"), 1, 3, config.bandwidth_resample.to_log().to_vec())?;
    let p = store.add(&format!("{prefix}.bw_posterior"), 1, 3, config.bandwidth_posterior.to_log().to_vec())?;
    Ok((r, p))
}

/// One filter step at original time index `t`.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub t: usize,
    /// `N×3`; measurement only reweights, so these are both the predictive
    /// and posterior locations.
    pub states: Var,
    /// `N×1` predictive log-weights `log w̃`.
    pub pred_log_w: Var,
    /// `N×1` normalized posterior log-weights.
    pub post_log_w: Var,
    /// Every measurement weight sat at the floor.
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct FilterTrace {
    pub direction: Direction,
    /// Indexed by original time, whatever the direction.
    pub steps: Vec<StepRecord>,
    pub log_bw_resample: Var,
    pub log_bw_posterior: Var,
}

fn set_from(tape: &Tape, states: Var, log_w: Var, t: usize) -> Result<ParticleSet> {
    let s = states_from_values(&tape.value(states));
    ParticleSet::new(s, tape.value(log_w), t)
}

pub(crate) fn states_from_values(v: &[f64]) -> Vec<State3> {
    v.chunks(3)
        .map(|c| State3 {
            x: c[0],
            y: c[1],
            theta: Angle::wrap_finite(c[2]),
        })
        .collect()
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn pred_set(&self, tape: &Tape, t: usize) -> Result<ParticleSet> {
        let s = &self.steps[t];
        set_from(tape, s.states, s.pred_log_w, t)
    }

    pub fn post_set(&self, tape: &Tape, t: usize) -> Result<ParticleSet> {
        let s = &self.steps[t];
        set_from(tape, s.states, s.post_log_w, t)
    }

    /// `m(x_t, w̃_t, β_resample)`.
    pub fn predictive_mixture(&self, t: usize) -> TapedMixture {
        let s = &self.steps[t];
        TapedMixture {
            centers: s.states,
            log_w: s.pred_log_w,
            log_bw: self.log_bw_resample,
        }
    }

    /// `m(x_t, w_t, β_posterior)`.
    pub fn posterior_mixture(&self, t: usize) -> TapedMixture {
        let s = &self.steps[t];
        TapedMixture {
            centers: s.states,
            log_w: s.post_log_w,
            log_bw: self.log_bw_posterior,
        }
    }

    pub fn degenerate_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.degenerate).count()
    }
}

/// Mean negative log posterior density of the truth at `loss_indices`.
pub fn posterior_nll(tape: &Tape, trace: &FilterTrace, truth: &[State3], loss_indices: &[usize]) -> Result<Var> {
    if loss_indices.is_empty() {
        return Err(Error::EmptyLossIndices);
    }
    let mut terms = Vec::with_capacity(loss_indices.len());
    for &t in loss_indices {
        if t >= trace.len() || t >= truth.len() {
            return Err(Error::LossIndexOutOfRange {
                index: t,
                len: trace.len().min(truth.len()),
            });
        }
        let lp = trace.posterior_mixture(t).logpdf(tape, &[truth[t].to_array()]);
        terms.push(lp);
    }
    let all = tape.concat_cols(&terms);
    Ok(tape.neg(tape.mean(all)))
}

/// Everything a step needs besides the carried set.
pub struct StepContext<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub model: FilterModel<'a>,
    pub config: &'a FilterConfig,
    pub rng: &'a RngStream,
    pub recorder: &'a mut DrawRecorder,
    pub log_bw_resample: Var,
}

fn dynamics_noise(rng: &RngStream, stage: u32, t: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let mut r = rng.stream(stage, t, i, Purpose::Dynamics);
        for _ in 0..3 {
            out.push(r.sample::<f64, _>(StandardNormal));
        }
    }
    out
}

/// Propagates resampled locations through the dynamics, applies the
/// measurement, and normalizes.
fn propagate(
    ctx: &mut StepContext<'_>,
    t: usize,
    resampled: Var,
    pred_log_w: Var,
    obs: f64,
    action: Option<Action>,
) -> Result<StepRecord> {
    let tape = ctx.tape;
    let n = resampled.rows();
    let noise = dynamics_noise(ctx.rng, ctx.config.direction.stage(), t, n);
    let states = ctx.model.dynamics.propose(tape, ctx.store, resampled, &noise, action)?;
    measure(ctx, t, states, pred_log_w, obs)
}

fn measure(ctx: &mut StepContext<'_>, t: usize, states: Var, pred_log_w: Var, obs: f64) -> Result<StepRecord> {
    let tape = ctx.tape;
    let log_l = ctx.model.measurement.log_weight(tape, ctx.store, states, obs)?;
    let floor = WEIGHT_FLOOR.ln() + 1e-9;
    let degenerate = tape.with_value(log_l, |v| v.iter().all(|l| *l <= floor));
    let post_log_w = tape.log_normalize(tape.add(pred_log_w, log_l));
    Ok(StepRecord {
        t,
        states,
        pred_log_w,
        post_log_w,
        degenerate,
    })
}

fn carried(ctx: &StepContext<'_>, prev: &StepRecord, steps_done: usize) -> (Var, Var) {
    match ctx.config.truncate_every {
        Some(k) if steps_done % k == 0 => (ctx.tape.detach(prev.states), ctx.tape.detach(prev.post_log_w)),
        _ => (prev.states, prev.post_log_w),
    }
}

/// Mixture resampling with IWSG weights, dynamics, measurement.
pub fn mdpf_step(
    ctx: &mut StepContext<'_>,
    prev: &StepRecord,
    steps_done: usize,
    t: usize,
    obs: f64,
    action: Option<Action>,
) -> Result<StepRecord> {
    let tape = ctx.tape;
    let n = ctx.config.n;
    let (centers, log_w) = carried(ctx, prev, steps_done);
    let live = TapedMixture {
        centers,
        log_w,
        log_bw: ctx.log_bw_resample,
    };
    let stage = ctx.config.direction.stage();
    let replay = ctx.recorder.mode() == DrawMode::Replay;
    let site = ctx.recorder.draw(|| {
        let weights: Vec<f64> = tape.value(log_w).iter().map(|l| l.exp()).collect();
        let mut rr = ctx.rng.stream(stage, t, 0, Purpose::Resample);
        let comps = ctx.config.resampler.resample(&weights, n, &mut rr)?;
        let states = states_from_values(&tape.value(centers));
        let lb = tape.value(ctx.log_bw_resample);
        let bw = Bandwidth::from_log([lb[0], lb[1], lb[2]]);
        let points: Vec<[f64; 3]> = comps
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut kr = ctx.rng.stream(stage, t, i, Purpose::Kernel);
                perturb(&states[c], &bw, &mut kr).to_array()
            })
            .collect();
        Ok(DrawSite {
            points,
            components: comps,
            log_denominators: Vec::new(),
        })
    })?;
    let pts = &site.points;
    let lw_const = -(n as f64).ln();
    let pred_log_w = if ctx.config.inference {
        tape.full(n, 1, lw_const)
    } else {
        let log_hat = if replay {
            iwsg_log_weights_unchecked(tape, pts, &live, &site.log_denominators)
        } else {
            let num = live.logpdf(tape, pts);
            let den = tape.value(num);
            if ctx.recorder.mode() == DrawMode::Record {
                ctx.recorder.set_last_denominators(den.clone());
            }
            tape.sub(num, tape.column(den))
        };
        tape.add_scalar(log_hat, lw_const)
    };
    let resampled = tape.constant(n, 3, pts.iter().flatten().copied().collect());
    propagate(ctx, t, resampled, pred_log_w, obs, action)
}

fn discrete_indices(
    ctx: &mut StepContext<'_>,
    weights: Vec<f64>,
    t: usize,
) -> Result<Vec<usize>> {
    let n = ctx.config.n;
    let stage = ctx.config.direction.stage();
    let resampler = ctx.config.resampler;
    let rng = ctx.rng;
    let site = ctx.recorder.draw(|| {
        let mut rr = rng.stream(stage, t, 0, Purpose::Resample);
        Ok(DrawSite {
            points: Vec::new(),
            components: resampler.resample(&weights, n, &mut rr)?,
            log_denominators: Vec::new(),
        })
    })?;
    Ok(site.components)
}

/// Discrete resampling with resampled states and weights detached.
pub fn tgpf_step(
    ctx: &mut StepContext<'_>,
    prev: &StepRecord,
    t: usize,
    obs: f64,
    action: Option<Action>,
) -> Result<StepRecord> {
    let tape = ctx.tape;
    let n = ctx.config.n;
    let weights: Vec<f64> = tape.value(prev.post_log_w).iter().map(|l| l.exp()).collect();
    let idx = discrete_indices(ctx, weights, t)?;
    let resampled = tape.gather_rows(tape.detach(prev.states), &idx);
    let pred_log_w = tape.full(n, 1, -(n as f64).ln());
    propagate(ctx, t, resampled, pred_log_w, obs, action)
}

/// Soft resampling: draw from `v = (1 − λ)w + λ/N`, carry `ŵ = w/v`.
pub fn srpf_step(
    ctx: &mut StepContext<'_>,
    prev: &StepRecord,
    steps_done: usize,
    t: usize,
    obs: f64,
    action: Option<Action>,
) -> Result<StepRecord> {
    let lambda = match ctx.config.gradient_mode {
        GradientMode::Soft(l) => l,
        _ => DEFAULT_LAMBDA,
    };
    let tape = ctx.tape;
    let (states, log_w) = carried(ctx, prev, steps_done);
    let log_v = soft_log_mix(tape, log_w, lambda);
    let v: Vec<f64> = tape.value(log_v).iter().map(|l| l.exp()).collect();
    let vsum: f64 = v.iter().sum();
    let v: Vec<f64> = v.iter().map(|x| x / vsum).collect();
    let idx = discrete_indices(ctx, v, t)?;
    let ratio = tape.sub(log_w, log_v);
    let pred_log_w = tape.log_normalize(tape.gather_rows(ratio, &idx));
    let resampled = tape.gather_rows(tape.detach(states), &idx);
    propagate(ctx, t, resampled, pred_log_w, obs, action)
}

/// `log((1 − λ)·w + λ/N)`, taped through `log w`.
pub fn soft_log_mix(tape: &Tape, log_w: Var, lambda: f64) -> Var {
    let n = log_w.rows();
    if lambda == 0.0 {
        return log_w;
    }
    let mixed = tape.affine(tape.exp(log_w), 1.0 - lambda, lambda / n as f64);
    tape.log(mixed)
}

/// Inputs for one filter run.
pub struct FilterInputs<'a> {
    pub observations: &'a [f64],
    pub actions: Option<&'a [Action]>,
    /// Set at the first processed step (t = 0 forward, t = T−1 backward).
    pub init: &'a ParticleSet,
}

/// Runs a filter over a whole sequence. The backward direction consumes the
/// observations in reverse and actions reversed and negated; its trace is
/// still indexed by original time.
pub fn run_filter(
    tape: &Tape,
    store: &ParamStore,
    model: FilterModel<'_>,
    config: &FilterConfig,
    inputs: &FilterInputs<'_>,
    rng: &RngStream,
    recorder: &mut DrawRecorder,
) -> Result<FilterTrace> {
    config.validate()?;
    let big_t = inputs.observations.len();
    if big_t == 0 {
        return Err(Error::Config("empty observation sequence".into()));
    }
    if let Some(a) = inputs.actions {
        if a.len() != big_t {
            return Err(Error::Misaligned(format!("{} actions for {big_t} observations", a.len())));
        }
    }
    if inputs.init.len() != config.n {
        return Err(Error::ShapeMismatch(format!(
            "init set has {} particles, config wants {}",
            inputs.init.len(),
            config.n
        )));
    }
    let order: Vec<usize> = match config.direction {
        Direction::Forward => (0..big_t).collect(),
        Direction::Backward => (0..big_t).rev().collect(),
    };
    let action_at = |t: usize| -> Option<Action> {
        inputs.actions.map(|a| match config.direction {
            Direction::Forward => a[t],
            // the move into step t (time-reversed) undoes a[t + 1]
            Direction::Backward => a.get(t + 1).copied().map(Action::negated).unwrap_or_default(),
        })
    };
    let log_bw_resample = tape.param(store, model.bw_resample);
    let log_bw_posterior = tape.param(store, model.bw_posterior);
    let mut ctx = StepContext {
        tape,
        store,
        model,
        config,
        rng,
        recorder,
        log_bw_resample,
    };

    let t0 = order[0];
    let init_states = tape.constant(
        config.n,
        3,
        inputs.init.states().iter().flat_map(|s| s.to_array()).collect(),
    );
    let init_w = tape.column(inputs.init.log_weights().to_vec());
    let first = measure(&mut ctx, t0, init_states, init_w, inputs.observations[t0])?;
    let mut processed = vec![first];
    for (k, &t) in order.iter().enumerate().skip(1) {
        let prev = processed[k - 1];
        let obs = inputs.observations[t];
        let step = match config.gradient_mode {
            GradientMode::Iwsg => mdpf_step(&mut ctx, &prev, k, t, obs, action_at(t))?,
            GradientMode::Truncated => tgpf_step(&mut ctx, &prev, t, obs, action_at(t))?,
            GradientMode::Soft(_) => srpf_step(&mut ctx, &prev, k, t, obs, action_at(t))?,
        };
        processed.push(step);
    }
    if config.direction == Direction::Backward {
        processed.reverse();
    }
    Ok(FilterTrace {
        direction: config.direction,
        steps: processed,
        log_bw_resample,
        log_bw_posterior,
    })
}

/// Value-level copy of a trace's posterior sets, for evaluation.
pub fn posterior_sets(tape: &Tape, trace: &FilterTrace) -> Result<Vec<ParticleSet>> {
    (0..trace.len()).map(|t| trace.post_set(tape, t)).collect()
}
