//! The MDPS two-filter smoother, FFBS reweighting, and NMS mode extraction.

use crate::autodiff::{BlockId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::filters::{states_from_values, Direction, FilterTrace};
use crate::kernels::Bandwidth;
use crate::mixture::{perturb, DrawMode, DrawRecorder, DrawSite, TapedMixture};
use crate::models::{smoother_weight_log, SmootherWeight, TransitionDensity};
use crate::resampling::resample_stratified;
use crate::rng::{Purpose, RngStream};
use crate::state::{logsumexp, ParticleSet, State3};

/// RNG stage labels for the two halves of the smoother proposal.
const STAGE_FWD: u32 = 2;
const STAGE_BWD: u32 = 3;

pub const NMS_RADIUS_M: f64 = 5.0;
pub const NMS_RADIUS_DEG: f64 = 30.0;

#[derive(Clone, Copy)]
pub struct SmootherModel<'a> {
    pub net: &'a dyn SmootherWeight,
    /// `1×3` log-bandwidth block of the smoothed posterior mixture.
    pub log_bw: BlockId,
}

#[derive(Clone, Debug)]
pub struct SmoothedStep {
    pub t: usize,
    /// `M×3` constant draw locations.
    pub states: Var,
    /// `M×1` normalized log-weights.
    pub log_w: Var,
    /// `log q` at each draw.
    pub log_q: Vec<f64>,
    /// Number of draws taken from the forward half (the first ones).
    pub from_forward: usize,
}

#[derive(Clone, Debug)]
pub struct SmoothedPosterior {
    pub steps: Vec<SmoothedStep>,
    pub log_bw: Var,
}

impl SmoothedPosterior {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mixture(&self, t: usize) -> TapedMixture {
        TapedMixture {
            centers: self.steps[t].states,
            log_w: self.steps[t].log_w,
            log_bw: self.log_bw,
        }
    }

    pub fn set(&self, tape: &Tape, t: usize) -> Result<ParticleSet> {
        let s = &self.steps[t];
        ParticleSet::new(states_from_values(&tape.value(s.states)), tape.value(s.log_w), t)
    }
}

fn check_aligned(fwd: &FilterTrace, bwd: &FilterTrace, big_t: usize) -> Result<()> {
    if fwd.direction != Direction::Forward || bwd.direction != Direction::Backward {
        return Err(Error::Misaligned("expected a forward and a backward trace".into()));
    }
    if fwd.len() != big_t || bwd.len() != big_t {
        return Err(Error::Misaligned(format!(
            "traces of length {} and {} for {big_t} observations",
            fwd.len(),
            bwd.len()
        )));
    }
    for t in 0..big_t {
        if fwd.steps[t].t != t || bwd.steps[t].t != t {
            return Err(Error::Misaligned(format!("step {t} carries time indices {} / {}", fwd.steps[t].t, bwd.steps[t].t)));
        }
    }
    Ok(())
}

fn draw_half(
    tape: &Tape,
    mix: &TapedMixture,
    count: usize,
    stage: u32,
    t: usize,
    offset: usize,
    rng: &RngStream,
) -> Result<(Vec<[f64; 3]>, Vec<usize>)> {
    let lw = tape.value(mix.log_w);
    let norm = logsumexp(&lw);
    let w: Vec<f64> = lw.iter().map(|l| (l - norm).exp()).collect();
    let comps = resample_stratified(&w, count, &mut rng.stream(stage, t, 0, Purpose::Resample))?;
    let centers = states_from_values(&tape.value(mix.centers));
    let b = tape.value(mix.log_bw);
    let bw = Bandwidth::from_log([b[0], b[1], b[2]]);
    let points = comps
        .iter()
        .enumerate()
        .map(|(i, &c)| perturb(&centers[c], &bw, &mut rng.stream(stage, t, offset + i, Purpose::Smoother)).to_array())
        .collect();
    Ok((points, comps))
}

/// Two-filter combination: per step, draw `draws_per_side` points from each
/// predictive filter mixture, weight by `l(x; y, m_f(x), m_b(x)) / q(x)` with
/// `q = ½ m_f + ½ m_b`, and normalize.
#[allow(clippy::too_many_arguments)]
pub fn mdps_combine(
    tape: &Tape,
    store: &ParamStore,
    fwd: &FilterTrace,
    bwd: &FilterTrace,
    model: SmootherModel<'_>,
    observations: &[f64],
    draws_per_side: usize,
    rng: &RngStream,
    recorder: &mut DrawRecorder,
) -> Result<SmoothedPosterior> {
    let big_t = observations.len();
    check_aligned(fwd, bwd, big_t)?;
    if draws_per_side == 0 {
        return Err(Error::Config("smoother needs at least one draw per side".into()));
    }
    let n = draws_per_side;
    let log_bw = tape.param(store, model.log_bw);
    let mut steps = Vec::with_capacity(big_t);
    for (t, &obs) in observations.iter().enumerate() {
        let f = fwd.predictive_mixture(t);
        let b = bwd.predictive_mixture(t);
        let replay = recorder.mode() == DrawMode::Replay;
        let site = recorder.draw(|| {
            let (mut points, mut comps) = draw_half(tape, &f, n, STAGE_FWD, t, 0, rng)?;
            let (pb, cb) = draw_half(tape, &b, n, STAGE_BWD, t, n, rng)?;
            points.extend(pb);
            comps.extend(cb);
            Ok(DrawSite {
                points,
                components: comps,
                log_denominators: Vec::new(),
            })
        })?;
        let lf = f.logpdf(tape, &site.points);
        let lb = b.logpdf(tape, &site.points);
        let log_q = if replay {
            site.log_denominators.clone()
        } else {
            let (vf, vb) = (tape.value(lf), tape.value(lb));
            let q: Vec<f64> = vf
                .iter()
                .zip(&vb)
                .map(|(a, b)| {
                    let m = a.max(*b);
                    m + (0.5 * (a - m).exp() + 0.5 * (b - m).exp()).ln()
                })
                .collect();
            if recorder.mode() == DrawMode::Record {
                recorder.set_last_denominators(q.clone());
            }
            q
        };
        let m = site.points.len();
        let states = tape.constant(m, 3, site.points.iter().flatten().copied().collect());
        let raw = smoother_weight_log(model.net, tape, store, states, obs, lf, lb, &log_q)?;
        steps.push(SmoothedStep {
            t,
            states,
            log_w: tape.log_normalize(raw),
            log_q,
            from_forward: n,
        });
    }
    Ok(SmoothedPosterior { steps, log_bw })
}

/// Mean over `loss_indices` of `−log m(truth_t; ↔x_t, ↔w_t, ↔β)`.
pub fn smoothed_nll(tape: &Tape, post: &SmoothedPosterior, truth: &[State3], loss_indices: &[usize]) -> Result<Var> {
    if loss_indices.is_empty() {
        return Err(Error::EmptyLossIndices);
    }
    let mut terms = Vec::with_capacity(loss_indices.len());
    for &t in loss_indices {
        if t >= post.len() || t >= truth.len() {
            return Err(Error::LossIndexOutOfRange {
                index: t,
                len: post.len().min(truth.len()),
            });
        }
        terms.push(post.mixture(t).logpdf(tape, &[truth[t].to_array()]));
    }
    Ok(tape.neg(tape.mean(tape.concat_cols(&terms))))
}

/// Backward reweighting of forward particle sets. Locations never change.
pub fn ffbs_smooth(fwd: &[ParticleSet], dynamics: &dyn TransitionDensity, store: &ParamStore) -> Result<Vec<ParticleSet>> {
    let big_t = fwd.len();
    if big_t == 0 {
        return Ok(Vec::new());
    }
    let mut out: Vec<ParticleSet> = vec![fwd[big_t - 1].clone()];
    for t in (0..big_t - 1).rev() {
        let cur = &fwd[t];
        let next = &fwd[t + 1];
        let smoothed_next = out.last().expect("seeded above").log_weights();
        let (ni, nj) = (cur.len(), next.len());
        // trans[i·nj + j] = log p(x_{t+1}^j | x_t^i)
        let trans = dynamics.transition_matrix(store, cur.states(), next.states());
        let lw = cur.log_weights();
        let denom: Vec<f64> = (0..nj)
            .map(|j| logsumexp(&(0..ni).map(|k| lw[k] + trans[k * nj + j]).collect::<Vec<_>>()))
            .collect();
        let new_lw: Vec<f64> = (0..ni)
            .map(|i| {
                let terms: Vec<f64> = (0..nj)
                    .map(|j| smoothed_next[j] + trans[i * nj + j] - denom[j])
                    .filter(|v| !v.is_nan())
                    .collect();
                lw[i] + logsumexp(&terms)
            })
            .collect();
        out.push(ParticleSet::new(cur.states().to_vec(), new_lw, cur.t)?);
    }
    out.reverse();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub state: State3,
    /// Share of the remaining weight suppressed with this mode.
    pub mass: f64,
}

/// Non-maximal suppression: repeatedly take the heaviest particle and drop
/// everything within `radii = (meters, degrees)` of it.
pub fn extract_modes(set: &ParticleSet, k: usize, radii: (f64, f64)) -> Result<Vec<Mode>> {
    if k == 0 {
        return Err(Error::Config("mode count must be at least 1".into()));
    }
    let (r_m, r_deg) = radii;
    let r_rad = r_deg.to_radians();
    let mut alive: Vec<(State3, f64)> = set.states().iter().copied().zip(set.weights()).collect();
    let mut modes = Vec::new();
    while modes.len() < k && !alive.is_empty() {
        let total: f64 = alive.iter().map(|(_, w)| w).sum();
        let (best, _) = alive
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, (_, w))| if *w > acc.1 { (i, *w) } else { acc });
        let top = alive[best].0;
        let near = |s: &State3| s.distance(&top) <= r_m && s.theta.diff(top.theta).radians().abs() <= r_rad;
        let suppressed: f64 = alive.iter().filter(|(s, _)| near(s)).map(|(_, w)| w).sum();
        modes.push(Mode {
            state: top,
            mass: if total > 0.0 { suppressed / total } else { 0.0 },
        });
        alive.retain(|(s, _)| !near(s));
    }
    Ok(modes)
}
