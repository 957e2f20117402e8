//! Planar pose states, canonical angles and weighted particle sets.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angle in radians, always in the canonical range (−π, π].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    pub fn new(theta: f64) -> Result<Self> {
        wrap_angle(theta)
    }

    /// Wraps a value already known to be finite.
    pub(crate) fn wrap_finite(theta: f64) -> Self {
        debug_assert!(theta.is_finite());
        let seam = 4.0 * f64::EPSILON * PI;
        // Canonical inputs pass through bit-for-bit.
        if theta > -PI + seam && theta < PI - seam {
            return Angle(theta);
        }
        let mut r = theta.rem_euclid(TAU);
        if r > PI {
            r -= TAU;
        }
        // Values within rounding of the −π/π seam snap to the closed endpoint.
        if (r - PI).abs() <= seam || (r + PI).abs() <= seam {
            r = PI;
        }
        Angle(r)
    }

    #[inline]
    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn degrees(self) -> f64 {
        self.0.to_degrees()
    }

    /// Signed canonical difference `self − other`.
    pub fn diff(self, other: Angle) -> Angle {
        Angle::wrap_finite(self.0 - other.0)
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

pub fn wrap_angle(theta: f64) -> Result<Angle> {
    if !theta.is_finite() {
        return Err(Error::NonFiniteAngle(theta));
    }
    Ok(Angle::wrap_finite(theta))
}

/// `(sin θ, cos θ)`, the vector representation fed to the networks.
pub fn angle_to_vec(theta: Angle) -> (f64, f64) {
    theta.0.sin_cos()
}

/// Inverse of [`angle_to_vec`]: `atan2(u, v)`.
pub fn vec_to_angle(u: f64, v: f64) -> Result<Angle> {
    if !(u.is_finite() && v.is_finite()) {
        return Err(Error::NonFiniteAngle(if u.is_finite() { v } else { u }));
    }
    if u == 0.0 && v == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(Angle::wrap_finite(u.atan2(v)))
}

/// Pose `(x, y, θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct State3 {
    pub x: f64,
    pub y: f64,
    pub theta: Angle,
}

impl State3 {
    pub fn new(x: f64, y: f64, theta: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::Config(format!("non-finite position ({x}, {y})")));
        }
        Ok(State3 {
            x,
            y,
            theta: wrap_angle(theta)?,
        })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.theta.radians()]
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self> {
        State3::new(a[0], a[1], a[2])
    }

    pub fn distance(&self, other: &State3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Optional odometry `(Δx, Δy, Δθ)`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Action {
    pub fn negated(self) -> Action {
        Action {
            dx: -self.dx,
            dy: -self.dy,
            dtheta: -self.dtheta,
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }
}

/// Numerically stable `log Σ exp(v)`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Weighted particles at one time index, log-weights normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    states: Vec<State3>,
    log_weights: Vec<f64>,
    pub t: usize,
}

impl ParticleSet {
    /// Builds a set, normalizing `log_weights` by log-sum-exp.
    pub fn new(states: Vec<State3>, log_weights: Vec<f64>, t: usize) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyWeights);
        }
        if states.len() != log_weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} states but {} log-weights",
                states.len(),
                log_weights.len()
            )));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::UnnormalizedWeights { sum: f64::NAN });
        }
        let norm = logsumexp(&log_weights);
        if !norm.is_finite() {
            return Err(Error::UnnormalizedWeights { sum: 0.0 });
        }
        let log_weights = log_weights.into_iter().map(|w| w - norm).collect();
        Ok(ParticleSet {
            states,
            log_weights,
            t,
        })
    }

    /// Keeps `log_weights` as given; they must already be normalized.
    pub fn from_normalized(states: Vec<State3>, log_weights: Vec<f64>, t: usize) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyWeights);
        }
        if states.len() != log_weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} states but {} log-weights",
                states.len(),
                log_weights.len()
            )));
        }
        let norm = logsumexp(&log_weights);
        if !(norm.abs() <= 1e-9) {
            return Err(Error::UnnormalizedWeights { sum: norm.exp() });
        }
        Ok(ParticleSet {
            states,
            log_weights,
            t,
        })
    }

    pub fn uniform(states: Vec<State3>, t: usize) -> Result<Self> {
        let n = states.len();
        let lw = -(n as f64).ln();
        ParticleSet::new(states, vec![lw; n], t)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[State3] {
        &self.states
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Weighted mean of the position components and circular mean of θ.
    pub fn mean(&self) -> State3 {
        let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
        for (st, lw) in self.states.iter().zip(&self.log_weights) {
            let w = lw.exp();
            x += w * st.x;
            y += w * st.y;
            let (sn, cs) = st.theta.radians().sin_cos();
            s += w * sn;
            c += w * cs;
        }
        let theta = if s == 0.0 && c == 0.0 {
            Angle::ZERO
        } else {
            Angle::wrap_finite(s.atan2(c))
        };
        State3 { x, y, theta }
    }

    pub fn into_parts(self) -> (Vec<State3>, Vec<f64>) {
        (self.states, self.log_weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_angle(0.0).unwrap().radians(), 0.0);
        assert_eq!(wrap_angle(3.0 * PI).unwrap().radians(), PI);
        assert_eq!(wrap_angle(-PI).unwrap().radians(), PI);
        assert!(matches!(wrap_angle(f64::NAN), Err(Error::NonFiniteAngle(_))));
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn vector_round_trip_examples() {
        let (u, v) = angle_to_vec(Angle::ZERO);
        assert_eq!((u, v), (0.0, 1.0));
        let (u, v) = angle_to_vec(Angle::new(PI / 2.0).unwrap());
        assert!((u - 1.0).abs() < 1e-15 && v.abs() < 1e-15);
        let (u, v) = angle_to_vec(Angle::new(PI).unwrap());
        assert!(u.abs() < 1e-15 && (v + 1.0).abs() < 1e-15);

        assert_eq!(vec_to_angle(0.0, 1.0).unwrap().radians(), 0.0);
        assert!((vec_to_angle(1.0, 0.0).unwrap().radians() - PI / 2.0).abs() < 1e-15);
        let base = vec_to_angle(0.6, 0.8).unwrap();
        for c in [1e-6, 0.5, 3.0, 1e6] {
            assert!(vec_to_angle(0.6 * c, 0.8 * c).unwrap().diff(base).radians().abs() < 1e-15);
        }
        assert!(matches!(vec_to_angle(0.0, 0.0), Err(Error::ZeroVector)));
        // atan2(−0, −1) = −π must still be canonical.
        assert_eq!(vec_to_angle(-0.0, -1.0).unwrap().radians(), PI);
    }

    #[test]
    fn particle_set_normalizes() {
        let s = State3::default();
        let set = ParticleSet::new(vec![s, s, s], vec![0.0, 1.0, 2.0], 0).unwrap();
        assert!(logsumexp(set.log_weights()).abs() < 1e-12);
        let set = ParticleSet::new(vec![s; 3], vec![-1e4, -1e4 + 1.0, -1e4], 0).unwrap();
        assert!((set.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ParticleSet::new(vec![], vec![], 0).is_err());
        assert!(ParticleSet::new(vec![s], vec![f64::NEG_INFINITY], 0).is_err());
    }

    proptest! {
        #[test]
        fn wrap_is_canonical_and_periodic(theta in -100.0f64..100.0, k in -20i32..20) {
            let a = wrap_angle(theta).unwrap().radians();
            prop_assert!(a > -PI && a <= PI);
            let b = wrap_angle(theta + TAU * k as f64).unwrap().radians();
            let d = (a - b).abs();
            // Near the seam one side may land on π and the other just above −π.
            prop_assert!(d < 1e-11 || (d - TAU).abs() < 1e-11);
        }

        #[test]
        fn vec_angle_inverse(theta in -PI..PI) {
            let a = Angle::new(theta).unwrap();
            let (u, v) = angle_to_vec(a);
            prop_assert!((u * u + v * v - 1.0).abs() < 1e-12);
            let back = vec_to_angle(u, v).unwrap();
            prop_assert!(back.diff(a).radians().abs() < 1e-12);
        }
    }
}
