//! Kernel density mixtures over particle sets and the IWSG importance weight.

use rand::Rng;

use crate::autodiff::tape::{mixture_logpdf_values, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{gauss_sample, vm_sample, Bandwidth};
use crate::resampling::{resample_multinomial, resample_stratified};
use crate::state::{Angle, ParticleSet, State3};

/// Tolerance for the snapshot consistency check in [`iwsg_attach`].
pub const SNAPSHOT_TOL: f64 = 1e-12;

/// `m(x) = Σ_i w_i K(x − x_i; β)` with a Gaussian×Gaussian×von Mises kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDensity {
    particles: ParticleSet,
    bandwidth: Bandwidth,
    log_bw: [f64; 3],
    centers: Vec<f64>,
}

/// One draw from a mixture. `iwsg_weight` is the forward value of the
/// gradient-carrying weight, which is always 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixtureDraw {
    pub point: State3,
    pub component: usize,
    pub iwsg_weight: f64,
}

impl MixtureDensity {
    pub fn new(particles: ParticleSet, bandwidth: Bandwidth) -> Result<Self> {
        let bandwidth = Bandwidth::new(bandwidth.sigma_x, bandwidth.sigma_y, bandwidth.kappa_theta)?;
        let log_bw = bandwidth.to_log();
        Ok(Self::assemble(particles, log_bw))
    }

    /// From log-bandwidths as stored in parameter blocks.
    pub fn from_log_bandwidth(particles: ParticleSet, log_bw: [f64; 3]) -> Result<Self> {
        if log_bw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBandwidth(format!("log bandwidth {log_bw:?}")));
        }
        Ok(Self::assemble(particles, log_bw))
    }

    fn assemble(particles: ParticleSet, log_bw: [f64; 3]) -> Self {
        let centers = particles.states().iter().flat_map(|s| s.to_array()).collect();
        MixtureDensity {
            bandwidth: Bandwidth::from_log(log_bw),
            particles,
            log_bw,
            centers,
        }
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    /// Effective (clamped) bandwidth.
    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    pub fn log_bandwidth(&self) -> [f64; 3] {
        self.log_bw
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn logpdf(&self, x: &State3) -> f64 {
        self.logpdf_points(&[x.to_array()])[0]
    }

    pub fn logpdf_points(&self, points: &[[f64; 3]]) -> Vec<f64> {
        mixture_logpdf_values(points, &self.centers, self.particles.log_weights(), &self.log_bw)
    }

    /// Component indices for `m` draws.
    pub fn select_components<R: Rng + ?Sized>(&self, m: usize, rng: &mut R, stratified: bool) -> Result<Vec<usize>> {
        let w = self.particles.weights();
        if stratified {
            resample_stratified(&w, m, rng)
        } else {
            resample_multinomial(&w, m, rng)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R, stratified: bool) -> Result<Vec<MixtureDraw>> {
        let components = self.select_components(m, rng, stratified)?;
        Ok(components
            .into_iter()
            .map(|c| MixtureDraw {
                point: perturb(&self.particles.states()[c], &self.bandwidth, rng),
                component: c,
                iwsg_weight: 1.0,
            })
            .collect())
    }
}

/// Kernel draw around one component: `μ + ση` for positions, von Mises for θ.
pub fn perturb<R: Rng + ?Sized>(center: &State3, bw: &Bandwidth, rng: &mut R) -> State3 {
    State3 {
        x: gauss_sample(center.x, bw.sigma_x, rng),
        y: gauss_sample(center.y, bw.sigma_y, rng),
        theta: vm_sample(center.theta, bw.kappa_theta, rng),
    }
}

pub fn mixture_logpdf(m: &MixtureDensity, x: &State3) -> f64 {
    m.logpdf(x)
}

pub fn mixture_sample<R: Rng + ?Sized>(
    m: &MixtureDensity,
    count: usize,
    rng: &mut R,
    stratified: bool,
) -> Result<Vec<MixtureDraw>> {
    m.sample(count, rng, stratified)
}

/// A mixture whose centers, log-weights and log-bandwidths live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapedMixture {
    /// `N×3`
    pub centers: Var,
    /// `N×1`, normalized
    pub log_w: Var,
    /// `1×3`: `(log σx, log σy, log κ)`
    pub log_bw: Var,
}

impl TapedMixture {
    pub fn len(&self) -> usize {
        self.centers.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `M×1` log-densities at constant points.
    pub fn logpdf(&self, tape: &Tape, points: &[[f64; 3]]) -> Var {
        tape.mixture_logpdf(points, self.centers, self.log_w, self.log_bw)
    }

    /// Value-level log-densities, computed exactly as the taped op would.
    pub fn logpdf_values(&self, tape: &Tape, points: &[[f64; 3]]) -> Vec<f64> {
        let c = tape.value(self.centers);
        let w = tape.value(self.log_w);
        let b = tape.value(self.log_bw);
        mixture_logpdf_values(points, &c, &w, &[b[0], b[1], b[2]])
    }

    /// Gradient-detached value copy (the `φ₀` snapshot).
    pub fn snapshot(&self, tape: &Tape, t: usize) -> Result<MixtureDensity> {
        let c = tape.value(self.centers);
        let states = c
            .chunks(3)
            .map(|s| State3 {
                x: s[0],
                y: s[1],
                theta: Angle::wrap_finite(s[2]),
            })
            .collect();
        let particles = ParticleSet::from_normalized(states, tape.value(self.log_w), t)?;
        let b = tape.value(self.log_bw);
        MixtureDensity::from_log_bandwidth(particles, [b[0], b[1], b[2]])
    }
}

/// `ŵ = m(z | φ) / m(z | φ₀)` for each draw point: forward value exactly 1,
/// reverse derivative `∇φ m(z|φ) / m(z|φ₀)`. Returns `M×1`.
pub fn iwsg_attach(tape: &Tape, points: &[[f64; 3]], live: &TapedMixture, snapshot: &MixtureDensity) -> Result<Var> {
    let log_w = iwsg_log_weights(tape, points, live, &snapshot.logpdf_points(points))?;
    Ok(tape.exp(log_w))
}

/// Log form of [`iwsg_attach`] with explicit denominators `log m(z | φ₀)`.
pub fn iwsg_log_weights(tape: &Tape, points: &[[f64; 3]], live: &TapedMixture, log_denominators: &[f64]) -> Result<Var> {
    if log_denominators.len() != points.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} denominators for {} points",
            log_denominators.len(),
            points.len()
        )));
    }
    let num = live.logpdf(tape, points);
    let worst = tape.with_value(num, |v| {
        v.iter()
            .zip(log_denominators)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() / a.abs().max(1.0) })
            .fold(0.0, f64::max)
    });
    if !(worst <= SNAPSHOT_TOL) {
        return Err(Error::SnapshotMismatch(worst));
    }
    let den = tape.column(log_denominators.to_vec());
    Ok(tape.sub(num, den))
}

/// Same as [`iwsg_log_weights`] but without the consistency check; used when
/// replaying recorded denominators under perturbed parameters.
pub fn iwsg_log_weights_unchecked(tape: &Tape, points: &[[f64; 3]], live: &TapedMixture, log_denominators: &[f64]) -> Var {
    let num = live.logpdf(tape, points);
    tape.sub(num, tape.column(log_denominators.to_vec()))
}

/// What happens to random draws (mixture components, kernel perturbations,
/// discrete resampling indices) during a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DrawMode {
    #[default]
    Fresh,
    /// Draw fresh and keep a copy.
    Record,
    /// Reuse recorded draws, including IWSG denominators.
    Replay,
}

/// One random draw site: the points, component indices and any proposal
/// log-densities it produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DrawSite {
    pub points: Vec<[f64; 3]>,
    pub components: Vec<usize>,
    pub log_denominators: Vec<f64>,
}

/// Records draw sites in order, or serves them back. Replaying draws under
/// perturbed parameters gives common-random-number finite differences that
/// match the IWSG gradient exactly.
#[derive(Clone, Debug, Default)]
pub struct DrawRecorder {
    mode: DrawMode,
    sites: Vec<DrawSite>,
    cursor: usize,
}

impl DrawRecorder {
    pub fn fresh() -> Self {
        DrawRecorder::default()
    }

    pub fn recording() -> Self {
        DrawRecorder {
            mode: DrawMode::Record,
            ..Default::default()
        }
    }

    /// Switches a recorder to replay its sites from the start.
    pub fn into_replay(self) -> Self {
        DrawRecorder {
            mode: DrawMode::Replay,
            sites: self.sites,
            cursor: 0,
        }
    }

    /// Rewinds a replaying recorder.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn mode(&self) -> DrawMode {
        self.mode
    }

    pub fn sites(&self) -> &[DrawSite] {
        &self.sites
    }

    /// Attaches proposal log-densities to the site recorded last.
    pub fn set_last_denominators(&mut self, log_denominators: Vec<f64>) {
        if let Some(site) = self.sites.last_mut() {
            site.log_denominators = log_denominators;
        }
    }

    /// Returns the next site: freshly drawn, or replayed.
    pub fn draw(&mut self, fresh: impl FnOnce() -> Result<DrawSite>) -> Result<DrawSite> {
        match self.mode {
            DrawMode::Fresh => fresh(),
            DrawMode::Record => {
                let site = fresh()?;
                self.sites.push(site.clone());
                Ok(site)
            }
            DrawMode::Replay => {
                let site = self
                    .sites
                    .get(self.cursor)
                    .cloned()
                    .ok_or_else(|| Error::Replay(format!("no recorded site #{}", self.cursor)))?;
                self.cursor += 1;
                Ok(site)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gauss_logpdf, vm_logpdf};
    use crate::state::logsumexp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn set(states: &[[f64; 3]], lw: &[f64]) -> ParticleSet {
        let states = states.iter().map(|s| State3::from_array(*s).unwrap()).collect();
        ParticleSet::new(states, lw.to_vec(), 0).unwrap()
    }

    /// Direct evaluation from the per-dimension kernels.
    fn oracle(m: &MixtureDensity, x: &State3) -> f64 {
        let bw = m.bandwidth();
        let terms: Vec<f64> = m
            .particles()
            .states()
            .iter()
            .zip(m.particles().log_weights())
            .map(|(s, lw)| {
                lw + gauss_logpdf(x.x - s.x, bw.sigma_x).unwrap()
                    + gauss_logpdf(x.y - s.y, bw.sigma_y).unwrap()
                    + vm_logpdf(x.theta.radians() - s.theta.radians(), bw.kappa_theta).unwrap()
            })
            .collect();
        logsumexp(&terms)
    }

    #[test]
    fn single_particle_is_product_of_peaks() {
        let bw = Bandwidth::new(0.5, 2.0, 8.0).unwrap();
        let m = MixtureDensity::new(set(&[[1.0, -2.0, 0.3]], &[0.0]), bw).unwrap();
        let x = State3::new(1.0, -2.0, 0.3).unwrap();
        let peak = gauss_logpdf(0.0, 0.5).unwrap() + gauss_logpdf(0.0, 2.0).unwrap() + vm_logpdf(0.0, 8.0).unwrap();
        assert!((m.logpdf(&x) - peak).abs() < 1e-12);
    }

    #[test]
    fn duplicate_particles_collapse() {
        let bw = Bandwidth::new(0.7, 0.9, 3.0).unwrap();
        let a = MixtureDensity::new(set(&[[0.5, 0.5, 1.0], [0.5, 0.5, 1.0]], &[0.0, 0.0]), bw).unwrap();
        let b = MixtureDensity::new(set(&[[0.5, 0.5, 1.0]], &[0.0]), bw).unwrap();
        let x = State3::new(-0.2, 1.3, -2.0).unwrap();
        assert!((a.logpdf(&x) - b.logpdf(&x)).abs() < 1e-12);
    }

    #[test]
    fn matches_kernel_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f64; 3]> = (0..7)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-PI..PI)])
            .collect();
        let bw = Bandwidth::new(0.8, 1.2, 5.0).unwrap();
        let uniform = vec![0.0; 7];
        let m = MixtureDensity::new(set(&pts, &uniform), bw).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let mr = MixtureDensity::new(set(&rev, &uniform), bw).unwrap();
        for _ in 0..20 {
            let x = State3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-PI..PI)).unwrap();
            assert!((m.logpdf(&x) - oracle(&m, &x)).abs() < 1e-12);
            assert!((m.logpdf(&x) - mr.logpdf(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_draws_perturb_it() {
        let bw = Bandwidth::new(1e-3, 1e-3, 1e4).unwrap();
        let m = MixtureDensity::new(set(&[[2.0, 3.0, 1.0]], &[0.0]), bw).unwrap();
        let draws = m.sample(50, &mut ChaCha8Rng::seed_from_u64(1), true).unwrap();
        for d in draws {
            assert_eq!(d.component, 0);
            assert_eq!(d.iwsg_weight, 1.0);
            assert!((d.point.x - 2.0).abs() < 0.01 && (d.point.y - 3.0).abs() < 0.01);
            assert!(d.point.theta.diff(Angle::new(1.0).unwrap()).radians().abs() < 0.05);
        }
    }

    #[test]
    fn iwsg_forward_value_is_one_and_detects_bad_snapshots() {
        let bw = Bandwidth::new(0.6, 0.6, 4.0).unwrap();
        let m = MixtureDensity::new(set(&[[0.0, 0.0, 0.0], [1.0, 1.0, 2.0]], &[0.2, -0.1]), bw).unwrap();
        let draws = m.sample(16, &mut ChaCha8Rng::seed_from_u64(2), true).unwrap();
        let points: Vec<[f64; 3]> = draws.iter().map(|d| d.point.to_array()).collect();
        let tape = Tape::new();
        let live = TapedMixture {
            centers: tape.constant(2, 3, m.particles().states().iter().flat_map(|s| s.to_array()).collect()),
            log_w: tape.column(m.particles().log_weights().to_vec()),
            log_bw: tape.constant(1, 3, m.log_bandwidth().to_vec()),
        };
        let snap = live.snapshot(&tape, 0).unwrap();
        let w = iwsg_attach(&tape, &points, &live, &snap).unwrap();
        assert!(tape.value(w).iter().all(|v| *v == 1.0));
        assert_eq!(tape.item(tape.sum(w)), 16.0);

        let other = MixtureDensity::new(m.particles().clone(), Bandwidth::new(0.7, 0.6, 4.0).unwrap()).unwrap();
        assert!(matches!(iwsg_attach(&tape, &points, &live, &other), Err(Error::SnapshotMismatch(_))));
    }

    #[test]
    fn recorder_replays_in_order() {
        let mut rec = DrawRecorder::recording();
        for k in 0..3 {
            rec.draw(|| {
                Ok(DrawSite {
                    components: vec![k],
                    ..Default::default()
                })
            })
            .unwrap();
        }
        let mut rep = rec.into_replay();
        for k in 0..3 {
            let site = rep.draw(|| panic!("replay must not draw")).unwrap();
            assert_eq!(site.components, vec![k]);
        }
        assert!(matches!(rep.draw(|| unreachable!()), Err(Error::Replay(_))));
    }
}
