//! Dynamics and measurement models: the learned bearings-only networks, the
//! explicit-density FFBS dynamics, the exact bearings likelihood, and a 1D
//! linear-Gaussian model used as an analytic reference.

use std::f64::consts::PI;

use rand::Rng;

use crate::autodiff::{Mlp, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gauss_logpdf_unchecked, vm_logpdf_unchecked, LN_2PI};
use crate::state::{Action, Angle, State3};

pub const WEIGHT_FLOOR: f64 = 1e-5;
pub const POSITION_BOUND: f64 = 5.0;
pub const ANGLE_VEC_BOUND: f64 = 2.0;
pub const FFBS_STDS: [f64; 3] = [1.0, 1.0, 1.25];
pub const HIDDEN: usize = 64;
/// Range and scale applied to filter log-densities fed to the smoother net.
pub const LOG_DENSITY_CLAMP: (f64, f64) = (-50.0, 10.0);
pub const LOG_DENSITY_SCALE: f64 = 0.1;

/// Transition `x_t = f(x_{t−1}, a_t, η)`, batched over particles.
pub trait Dynamics: Sync {
    /// `states` is `N×3`, `noise` holds `N·noise_dim()` standard normals
    /// (row-major). Returns `N×3` with canonical angles.
    fn propose(&self, tape: &Tape, store: &ParamStore, states: Var, noise: &[f64], action: Option<Action>)
        -> Result<Var>;

    fn noise_dim(&self) -> usize {
        3
    }
}

/// Discriminative measurement update: `N×1` values of `log l(x; y)`.
pub trait Measurement: Sync {
    fn log_weight(&self, tape: &Tape, store: &ParamStore, states: Var, obs: f64) -> Result<Var>;
}

/// Smoother weight numerator `log l(x; y, p_fwd(x), p_bwd(x))` for `M` draws.
pub trait SmootherWeight: Sync {
    fn log_weight(
        &self,
        tape: &Tape,
        store: &ParamStore,
        states: Var,
        obs: f64,
        log_fwd: Var,
        log_bwd: Var,
    ) -> Result<Var>;
}

/// Explicit transition density, as FFBS needs.
pub trait TransitionDensity: Sync {
    fn transition_logpdf(&self, store: &ParamStore, from: &State3, to: &State3) -> f64;

    /// `log p(to_j | from_i)` for all pairs, shape `from.len() × to.len()` row-major.
    fn transition_matrix(&self, store: &ParamStore, from: &[State3], to: &[State3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(from.len() * to.len());
        for f in from {
            for t in to {
                out.push(self.transition_logpdf(store, f, t));
            }
        }
        out
    }
}

fn column_features(tape: &Tape, states: Var) -> (Var, Var, Var) {
    (tape.col(states, 0), tape.col(states, 1), tape.col(states, 2))
}

/// `[x + 5 tanh(o₀), y + 5 tanh(o₁), atan2(sin θ + 2 tanh(o₂), cos θ + 2 tanh(o₃))]`
fn apply_residual(tape: &Tape, states: Var, residual: Var) -> Var {
    let (x, y, th) = column_features(tape, states);
    let r = tape.tanh(residual);
    let nx = tape.add(x, tape.scale(tape.col(r, 0), POSITION_BOUND));
    let ny = tape.add(y, tape.scale(tape.col(r, 1), POSITION_BOUND));
    let u = tape.add(tape.sin(th), tape.scale(tape.col(r, 2), ANGLE_VEC_BOUND));
    let v = tape.add(tape.cos(th), tape.scale(tape.col(r, 3), ANGLE_VEC_BOUND));
    let nth = tape.atan2(u, v);
    tape.concat_cols(&[nx, ny, nth])
}

/// Residual dynamics network. Positions are masked (zeroed) at the input, so
/// the update is translation invariant.
#[derive(Clone, Debug)]
pub struct DynamicsNet {
    mlp: Mlp,
    use_actions: bool,
}

impl DynamicsNet {
    pub fn input_dim(use_actions: bool) -> usize {
        7 + if use_actions { 3 } else { 0 }
    }

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, use_actions: bool, rng: &mut R) -> Result<Self> {
        let sizes = [Self::input_dim(use_actions), HIDDEN, HIDDEN, HIDDEN, 4];
        Ok(DynamicsNet {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            use_actions,
        })
    }

    pub fn with_sizes<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![Self::input_dim(false)];
        sizes.extend_from_slice(hidden);
        sizes.push(4);
        Ok(DynamicsNet {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            use_actions: false,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, use_actions: bool) -> Result<Self> {
        let sizes = [Self::input_dim(use_actions), HIDDEN, HIDDEN, HIDDEN, 4];
        Ok(DynamicsNet {
            mlp: Mlp::bind(store, prefix, &sizes)?,
            use_actions,
        })
    }
}

impl Dynamics for DynamicsNet {
    fn propose(
        &self,
        tape: &Tape,
        store: &ParamStore,
        states: Var,
        noise: &[f64],
        action: Option<Action>,
    ) -> Result<Var> {
        let n = states.rows();
        if noise.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!("{} noise values for {n} particles", noise.len())));
        }
        let th = tape.col(states, 2);
        let zeros = tape.full(n, 2, 0.0);
        let mut parts = vec![zeros, tape.sin(th), tape.cos(th), tape.constant(n, 3, noise.to_vec())];
        if self.use_actions {
            let a = action.map(|a| a.to_array()).unwrap_or([0.0; 3]);
            parts.push(tape.constant(n, 3, a.repeat(n)));
        }
        let input = tape.concat_cols(&parts);
        let residual = self.mlp.forward(tape, store, input)?;
        Ok(apply_residual(tape, states, residual))
    }
}

/// `(sin ψ, cos ψ)` of the bearing from the radar to each particle.
fn bearing_features(tape: &Tape, states: Var, radar: [f64; 2]) -> (Var, Var) {
    let dx = tape.add_scalar(tape.col(states, 0), -radar[0]);
    let dy = tape.add_scalar(tape.col(states, 1), -radar[1]);
    let r2 = tape.add_scalar(tape.add(tape.mul(dx, dx), tape.mul(dy, dy)), 1e-12);
    let r = tape.sqrt(r2);
    (tape.div(dy, r), tape.div(dx, r))
}

fn measurement_features(tape: &Tape, states: Var, obs: f64, radar: [f64; 2]) -> Vec<Var> {
    let n = states.rows();
    let th = tape.col(states, 2);
    let (sp, cp) = bearing_features(tape, states, radar);
    let (so, co) = obs.sin_cos();
    vec![tape.sin(th), tape.cos(th), sp, cp, tape.full(n, 1, so), tape.full(n, 1, co)]
}

/// `log(1e-5 + (1 − 1e-5)·σ(o))`, so the weight lies in [1e-5, 1].
fn floored_log_sigmoid(tape: &Tape, out: Var) -> Var {
    tape.log(tape.affine(tape.sigmoid(out), 1.0 - WEIGHT_FLOOR, WEIGHT_FLOOR))
}

#[derive(Clone, Debug)]
pub struct MeasurementNet {
    mlp: Mlp,
    radar: [f64; 2],
}

impl MeasurementNet {
    pub const INPUT_DIM: usize = 6;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, radar: [f64; 2], rng: &mut R) -> Result<Self> {
        let sizes = [Self::INPUT_DIM, HIDDEN, HIDDEN, HIDDEN, 1];
        Ok(MeasurementNet {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            radar,
        })
    }

    pub fn with_sizes<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        radar: [f64; 2],
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![Self::INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(MeasurementNet {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            radar,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, radar: [f64; 2]) -> Result<Self> {
        let sizes = [Self::INPUT_DIM, HIDDEN, HIDDEN, HIDDEN, 1];
        Ok(MeasurementNet {
            mlp: Mlp::bind(store, prefix, &sizes)?,
            radar,
        })
    }
}

impl Measurement for MeasurementNet {
    fn log_weight(&self, tape: &Tape, store: &ParamStore, states: Var, obs: f64) -> Result<Var> {
        let input = tape.concat_cols(&measurement_features(tape, states, obs, self.radar));
        let out = self.mlp.forward(tape, store, input)?;
        Ok(floored_log_sigmoid(tape, out))
    }
}

/// Smoother weight network; sees the measurement features plus the forward
/// and backward filter log-densities at the particle.
#[derive(Clone, Debug)]
pub struct SmootherMeasurementNet {
    mlp: Mlp,
    radar: [f64; 2],
}

impl SmootherMeasurementNet {
    pub const INPUT_DIM: usize = 8;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, radar: [f64; 2], rng: &mut R) -> Result<Self> {
        let sizes = [Self::INPUT_DIM, HIDDEN, HIDDEN, HIDDEN, 1];
        Ok(SmootherMeasurementNet {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            radar,
        })
    }

    pub fn with_sizes<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        radar: [f64; 2],
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![Self::INPUT_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(SmootherMeasurementNet {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            radar,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, radar: [f64; 2]) -> Result<Self> {
        let sizes = [Self::INPUT_DIM, HIDDEN, HIDDEN, HIDDEN, 1];
        Ok(SmootherMeasurementNet {
            mlp: Mlp::bind(store, prefix, &sizes)?,
            radar,
        })
    }
}

fn density_feature(tape: &Tape, log_density: Var) -> Var {
    let (lo, hi) = LOG_DENSITY_CLAMP;
    tape.scale(tape.clamp(log_density, lo, hi), LOG_DENSITY_SCALE)
}

impl SmootherWeight for SmootherMeasurementNet {
    fn log_weight(
        &self,
        tape: &Tape,
        store: &ParamStore,
        states: Var,
        obs: f64,
        log_fwd: Var,
        log_bwd: Var,
    ) -> Result<Var> {
        let mut parts = measurement_features(tape, states, obs, self.radar);
        parts.push(density_feature(tape, log_fwd));
        parts.push(density_feature(tape, log_bwd));
        let out = self.mlp.forward(tape, store, tape.concat_cols(&parts))?;
        Ok(floored_log_sigmoid(tape, out))
    }
}

/// `log w = log l − log q`, the smoother importance weight before normalization.
pub fn smoother_weight(
    net: &dyn SmootherWeight,
    tape: &Tape,
    store: &ParamStore,
    states: Var,
    obs: f64,
    log_fwd: Var,
    log_bwd: Var,
    q_density: &[f64],
) -> Result<Var> {
    if let Some(q) = q_density.iter().find(|q| !(**q > 0.0)) {
        return Err(Error::NonPositiveProposal(*q));
    }
    let log_q: Vec<f64> = q_density.iter().map(|q| q.ln()).collect();
    smoother_weight_log(net, tape, store, states, obs, log_fwd, log_bwd, &log_q)
}

/// [`smoother_weight`] with the proposal given as log-densities, which avoids
/// underflow far out in the tails.
pub fn smoother_weight_log(
    net: &dyn SmootherWeight,
    tape: &Tape,
    store: &ParamStore,
    states: Var,
    obs: f64,
    log_fwd: Var,
    log_bwd: Var,
    log_q: &[f64],
) -> Result<Var> {
    if let Some(q) = log_q.iter().find(|q| q.is_nan() || **q == f64::NEG_INFINITY || **q == f64::INFINITY) {
        return Err(Error::NonPositiveProposal(q.exp()));
    }
    if log_q.len() != states.rows() {
        return Err(Error::ShapeMismatch(format!("{} proposal densities for {} draws", log_q.len(), states.rows())));
    }
    let l = net.log_weight(tape, store, states, obs, log_fwd, log_bwd)?;
    Ok(tape.sub(l, tape.column(log_q.to_vec())))
}

/// Mean network with fixed per-dimension standard deviations `[1, 1, 1.25]`.
#[derive(Clone, Debug)]
pub struct FfbsDynamics {
    mlp: Mlp,
    pub stds: [f64; 3],
}

impl FfbsDynamics {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let sizes = [2, HIDDEN, HIDDEN, HIDDEN, 4];
        Ok(FfbsDynamics {
            mlp: Mlp::new(store, prefix, &sizes, rng)?,
            stds: FFBS_STDS,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(FfbsDynamics {
            mlp: Mlp::bind(store, prefix, &[2, HIDDEN, HIDDEN, HIDDEN, 4])?,
            stds: FFBS_STDS,
        })
    }

    /// Predicted means, `N×3`.
    pub fn mean(&self, tape: &Tape, store: &ParamStore, states: Var) -> Result<Var> {
        let th = tape.col(states, 2);
        let input = tape.concat_cols(&[tape.sin(th), tape.cos(th)]);
        let residual = self.mlp.forward(tape, store, input)?;
        Ok(apply_residual(tape, states, residual))
    }

    pub fn mean_values(&self, store: &ParamStore, states: &[State3]) -> Result<Vec<State3>> {
        let tape = Tape::new();
        let s = tape.constant(states.len(), 3, states.iter().flat_map(|s| s.to_array()).collect());
        let m = self.mean(&tape, store, s)?;
        Ok(tape
            .value(m)
            .chunks(3)
            .map(|c| State3 {
                x: c[0],
                y: c[1],
                theta: Angle::wrap_finite(c[2]),
            })
            .collect())
    }

    /// Taped `N×1` transition log-densities between paired rows.
    pub fn transition_logpdf_taped(&self, tape: &Tape, store: &ParamStore, from: Var, to: Var) -> Result<Var> {
        let mean = self.mean(tape, store, from)?;
        let d = tape.sub(to, mean);
        let dth = tape.wrap_angle(tape.col(d, 2));
        let z = tape.concat_cols(&[
            tape.scale(tape.col(d, 0), 1.0 / self.stds[0]),
            tape.scale(tape.col(d, 1), 1.0 / self.stds[1]),
            tape.scale(dth, 1.0 / self.stds[2]),
        ]);
        let konst = -self.stds.iter().map(|s| s.ln()).sum::<f64>() - 1.5 * LN_2PI;
        Ok(tape.add_scalar(tape.scale(tape.sum_rows(tape.mul(z, z)), -0.5), konst))
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &State3, rng: &mut R) -> State3 {
        use rand_distr::StandardNormal;
        let e: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        State3 {
            x: mean.x + self.stds[0] * e[0],
            y: mean.y + self.stds[1] * e[1],
            theta: Angle::wrap_finite(mean.theta.radians() + self.stds[2] * e[2]),
        }
    }

    pub fn logpdf_given_mean(&self, mean: &State3, to: &State3) -> f64 {
        gauss_logpdf_unchecked(to.x - mean.x, self.stds[0])
            + gauss_logpdf_unchecked(to.y - mean.y, self.stds[1])
            + gauss_logpdf_unchecked(to.theta.diff(mean.theta).radians(), self.stds[2])
    }
}

impl TransitionDensity for FfbsDynamics {
    fn transition_logpdf(&self, store: &ParamStore, from: &State3, to: &State3) -> f64 {
        let mean = self.mean_values(store, std::slice::from_ref(from)).expect("fixed layout")[0];
        self.logpdf_given_mean(&mean, to)
    }

    fn transition_matrix(&self, store: &ParamStore, from: &[State3], to: &[State3]) -> Vec<f64> {
        let means = self.mean_values(store, from).expect("fixed layout");
        let mut out = Vec::with_capacity(from.len() * to.len());
        for m in &means {
            for t in to {
                out.push(self.logpdf_given_mean(m, t));
            }
        }
        out
    }
}

impl Dynamics for FfbsDynamics {
    fn propose(&self, tape: &Tape, store: &ParamStore, states: Var, noise: &[f64], _a: Option<Action>) -> Result<Var> {
        let n = states.rows();
        if noise.len() != 3 * n {
            return Err(Error::ShapeMismatch(format!("{} noise values for {n} particles", noise.len())));
        }
        let mean = self.mean(tape, store, states)?;
        let scaled: Vec<f64> = noise.iter().enumerate().map(|(k, e)| e * self.stds[k % 3]).collect();
        let moved = tape.add(mean, tape.constant(n, 3, scaled));
        let th = tape.wrap_angle(tape.col(moved, 2));
        Ok(tape.concat_cols(&[tape.slice_cols(moved, 0, 2), th]))
    }
}

/// Exact bearings likelihood `α/2π + (1 − α)·vM(y; ψ(x), κ)`.
#[derive(Clone, Copy, Debug)]
pub struct BearingLikelihood {
    pub radar: [f64; 2],
    pub alpha: f64,
    pub kappa: f64,
}

impl BearingLikelihood {
    pub fn logpdf(&self, state: &State3, obs: f64) -> f64 {
        let psi = (state.y - self.radar[1]).atan2(state.x - self.radar[0]);
        let vm = vm_logpdf_unchecked(obs - psi, self.kappa);
        let uni = -LN_2PI;
        if self.alpha <= 0.0 {
            return vm;
        }
        if self.alpha >= 1.0 {
            return uni;
        }
        let a = self.alpha.ln() + uni;
        let b = (1.0 - self.alpha).ln() + vm;
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

impl Measurement for BearingLikelihood {
    fn log_weight(&self, tape: &Tape, _store: &ParamStore, states: Var, obs: f64) -> Result<Var> {
        let v = tape.value(states);
        let lw = v
            .chunks(3)
            .map(|s| {
                let st = State3 {
                    x: s[0],
                    y: s[1],
                    theta: Angle::wrap_finite(s[2]),
                };
                self.logpdf(&st, obs)
            })
            .collect();
        Ok(tape.column(lw))
    }
}

/// `x_t = a·x_{t−1} + √q·η`, `y_t = x_t + √r·ε` on the state's x component.
/// The other two components stay at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearGaussian {
    pub a: f64,
    pub q: f64,
    pub r: f64,
}

impl LinearGaussian {
    pub fn stationary_var(&self) -> f64 {
        self.q / (1.0 - self.a * self.a)
    }

    pub fn log_prior(&self, x: f64) -> f64 {
        gauss_logpdf_unchecked(x, self.stationary_var().sqrt())
    }

    /// Simulates `(states, observations)` from the stationary start.
    pub fn simulate<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        use rand_distr::StandardNormal;
        let mut xs = Vec::with_capacity(t);
        let mut x = self.stationary_var().sqrt() * rng.sample::<f64, _>(StandardNormal);
        for k in 0..t {
            if k > 0 {
                x = self.a * x + self.q.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            xs.push(x);
        }
        let ys = xs
            .iter()
            .map(|x| x + self.r.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (xs, ys)
    }
}

impl Dynamics for LinearGaussian {
    fn propose(&self, tape: &Tape, _s: &ParamStore, states: Var, noise: &[f64], _a: Option<Action>) -> Result<Var> {
        let n = states.rows();
        let eta: Vec<f64> = noise.iter().step_by(3).map(|e| self.q.sqrt() * e).collect();
        let x = tape.add(tape.scale(tape.col(states, 0), self.a), tape.column(eta));
        Ok(tape.concat_cols(&[x, tape.full(n, 2, 0.0)]))
    }
}

impl Measurement for LinearGaussian {
    fn log_weight(&self, tape: &Tape, _s: &ParamStore, states: Var, obs: f64) -> Result<Var> {
        let d = tape.add_scalar(tape.col(states, 0), -obs);
        let z2 = tape.scale(tape.mul(d, d), -0.5 / self.r);
        Ok(tape.add_scalar(z2, -0.5 * self.r.ln() - 0.5 * LN_2PI))
    }
}

impl TransitionDensity for LinearGaussian {
    fn transition_logpdf(&self, _s: &ParamStore, from: &State3, to: &State3) -> f64 {
        gauss_logpdf_unchecked(to.x - self.a * from.x, self.q.sqrt())
    }
}

/// Exact smoother weight for [`LinearGaussian`] when the forward and backward
/// filters run the same stationary dynamics:
/// `l = p(y|x)·m_f(x)·m_b(x) / π(x)`. Both mixtures carry the same kernel
/// factor over the unused y/θ components, and one copy of it is divided
/// out so those components keep the kernel as their target.
#[derive(Clone, Copy, Debug)]
pub struct LinearGaussianSmootherWeight {
    pub model: LinearGaussian,
    /// Log-bandwidths shared by the forward and backward predictive mixtures
    /// in y and θ; the x entry is unused.
    pub nuisance_log_bw: [f64; 3],
}

impl SmootherWeight for LinearGaussianSmootherWeight {
    fn log_weight(
        &self,
        tape: &Tape,
        store: &ParamStore,
        states: Var,
        obs: f64,
        log_fwd: Var,
        log_bwd: Var,
    ) -> Result<Var> {
        let lik = self.model.log_weight(tape, store, states, obs)?;
        let lb = self.nuisance_log_bw;
        let v = tape.value(states);
        let offset: Vec<f64> = v
            .chunks(3)
            .map(|s| {
                gauss_logpdf_unchecked(s[1], lb[1].exp()) + vm_logpdf_unchecked(s[2], lb[2].exp()) + self.model.log_prior(s[0])
            })
            .collect();
        let num = tape.add(lik, tape.add(log_fwd, log_bwd));
        Ok(tape.sub(num, tape.column(offset)))
    }
}

/// True bearing `atan2(y − r_y, x − r_x)`.
pub fn true_bearing(state: &State3, radar: [f64; 2]) -> Result<Angle> {
    let dx = state.x - radar[0];
    let dy = state.y - radar[1];
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::CoincidentWithRadar);
    }
    let a = dy.atan2(dx);
    Ok(Angle::wrap_finite(if a <= -PI { PI } else { a }))
}
