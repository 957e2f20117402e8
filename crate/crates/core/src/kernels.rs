//! Per-dimension smoothing kernels: Gaussian for positions, von Mises for
//! heading.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::Angle;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Smallest positional bandwidth in meters.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Largest angular concentration.
pub const KAPPA_CAP: f64 = 1e4;
const SERIES_CUTOFF: f64 = 15.0;

/// Per-dimension kernel bandwidth `β = (σx, σy, κθ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub kappa_theta: f64,
}

impl Bandwidth {
    pub fn new(sigma_x: f64, sigma_y: f64, kappa_theta: f64) -> Result<Self> {
        for (name, v) in [("sigma_x", sigma_x), ("sigma_y", sigma_y), ("kappa_theta", kappa_theta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidBandwidth(format!("{name} = {v}")));
            }
        }
        Ok(Bandwidth {
            sigma_x,
            sigma_y,
            kappa_theta,
        })
    }

    /// Inverse of [`Bandwidth::to_log`], with floors applied.
    pub fn from_log(log: [f64; 3]) -> Self {
        Bandwidth {
            sigma_x: clamp_sigma(log[0].exp()),
            sigma_y: clamp_sigma(log[1].exp()),
            kappa_theta: clamp_kappa(log[2].exp()),
        }
    }

    pub fn to_log(self) -> [f64; 3] {
        [self.sigma_x.ln(), self.sigma_y.ln(), self.kappa_theta.ln()]
    }

    /// Applies the σ floor and κ cap.
    pub fn clamped(self) -> Self {
        Bandwidth {
            sigma_x: clamp_sigma(self.sigma_x),
            sigma_y: clamp_sigma(self.sigma_y),
            kappa_theta: clamp_kappa(self.kappa_theta),
        }
    }
}

#[inline]
pub(crate) fn clamp_sigma(s: f64) -> f64 {
    s.max(SIGMA_FLOOR)
}

#[inline]
pub(crate) fn clamp_kappa(k: f64) -> f64 {
    k.min(KAPPA_CAP)
}

pub fn gauss_logpdf(d: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidKernel(format!("sigma = {sigma}")));
    }
    Ok(gauss_logpdf_unchecked(d, sigma))
}

#[inline]
pub(crate) fn gauss_logpdf_unchecked(d: f64, sigma: f64) -> f64 {
    let z = d / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * LN_2PI
}

/// `∂/∂σ` of [`gauss_logpdf`].
pub fn gauss_logpdf_dsigma(d: f64, sigma: f64) -> f64 {
    (d * d / (sigma * sigma) - 1.0) / sigma
}

pub fn gauss_sample<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    let eta: f64 = rng.sample(StandardNormal);
    mu + sigma * eta
}

/// Power series `Σ (κ²/4)^k / (k!)²` and its `ν = 1` companion.
fn bessel_series(kappa: f64) -> (f64, f64) {
    let q = 0.25 * kappa * kappa;
    let (mut t0, mut s0) = (1.0, 1.0);
    let (mut t1, mut s1) = (0.5 * kappa, 0.5 * kappa);
    let mut k = 1.0;
    loop {
        t0 *= q / (k * k);
        t1 *= q / (k * (k + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < 1e-17 * s0 && t1 <= 1e-17 * s1.max(f64::MIN_POSITIVE) {
            break;
        }
        k += 1.0;
    }
    (s0, s1)
}

/// Large-argument expansion `Σ_k (−1)^k a_k(ν) / κ^k`, truncated at its
/// smallest term.
fn bessel_asymptotic_sum(kappa: f64, nu: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    for k in 1..200 {
        let odd = (2 * k - 1) as f64;
        let next = term * -(mu - odd * odd) / (8.0 * k as f64 * kappa);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

/// `log I₀(κ) − κ`, finite for all κ ≥ 0.
pub(crate) fn log_bessel_i0e(kappa: f64) -> f64 {
    if kappa < SERIES_CUTOFF {
        bessel_series(kappa).0.ln() - kappa
    } else {
        -0.5 * (TAU * kappa).ln() + bessel_asymptotic_sum(kappa, 0.0).ln()
    }
}

pub fn log_bessel_i0(kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidKernel(format!("kappa = {kappa}")));
    }
    Ok(log_bessel_i0_unchecked(kappa))
}

#[inline]
pub(crate) fn log_bessel_i0_unchecked(kappa: f64) -> f64 {
    log_bessel_i0e(kappa) + kappa
}

/// `I₁(κ)/I₀(κ) = d log I₀ / dκ`.
pub fn bessel_i1_i0_ratio(kappa: f64) -> f64 {
    if kappa < SERIES_CUTOFF {
        let (s0, s1) = bessel_series(kappa);
        s1 / s0
    } else {
        bessel_asymptotic_sum(kappa, 1.0) / bessel_asymptotic_sum(kappa, 0.0)
    }
}

pub fn vm_logpdf(dtheta: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidKernel(format!("kappa = {kappa}")));
    }
    Ok(vm_logpdf_unchecked(dtheta, kappa))
}

#[inline]
pub(crate) fn vm_logpdf_unchecked(dtheta: f64, kappa: f64) -> f64 {
    kappa * (dtheta.cos() - 1.0) - LN_2PI - log_bessel_i0e(kappa)
}

/// `∂/∂κ` of [`vm_logpdf`].
pub fn vm_logpdf_dkappa(dtheta: f64, kappa: f64) -> f64 {
    dtheta.cos() - bessel_i1_i0_ratio(kappa)
}

/// Best–Fisher rejection sampler, wrapped to (−π, π].
pub fn vm_sample<R: Rng + ?Sized>(mu: Angle, kappa: f64, rng: &mut R) -> Angle {
    if !(kappa > 1e-8) {
        let u: f64 = rng.random();
        return Angle::wrap_finite(PI - TAU * u);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = 1.0 - rng.random::<f64>();
        let u3: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let offset = f.clamp(-1.0, 1.0).acos();
            let offset = if u3 > 0.5 { offset } else { -offset };
            return Angle::wrap_finite(mu.radians() + offset);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + h * i as f64)).sum();
        h * (0.5 * f(a) + inner + 0.5 * f(b))
    }

    fn log_i0_power_series(kappa: f64, terms: usize) -> f64 {
        // Independent log-space evaluation of Σ (κ/2)^{2k} / (k!)².
        let logs: Vec<f64> = (0..terms)
            .map(|k| {
                let lf: f64 = (1..=k).map(|j| (j as f64).ln()).sum();
                2.0 * k as f64 * (0.5 * kappa).ln() - 2.0 * lf
            })
            .collect();
        crate::state::logsumexp(&logs)
    }

    #[test]
    fn gauss_examples() {
        let peak = gauss_logpdf(0.0, 1.0).unwrap();
        assert!((peak - 0.398_942_280_401_432_7f64.ln()).abs() < 1e-15);
        assert!((gauss_logpdf(1.0, 1.0).unwrap() - (peak - 0.5)).abs() < 1e-15);
        assert!((gauss_logpdf(0.5, 0.5).unwrap() - (gauss_logpdf(0.0, 0.5).unwrap() - 0.5)).abs() < 1e-15);
        assert!(gauss_logpdf(0.0, 0.0).is_err());
        assert!(gauss_logpdf(0.0, -1.0).is_err());
        // Normalization of the σ = 0.5 kernel (checked at d = 2 as part of the integral).
        let mass = trapezoid(|d| gauss_logpdf(d, 0.5).unwrap().exp(), -4.0, 4.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-6);
        let mass = trapezoid(|d| gauss_logpdf(d - 2.0, 0.5).unwrap().exp(), 2.0 - 4.0, 2.0 + 4.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gauss_sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mu, sigma, n) = (1.5, 0.7, 100_000);
        let xs: Vec<f64> = (0..n).map(|_| gauss_sample(mu, sigma, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - mu).abs() < 4.0 * sigma / (n as f64).sqrt());
        assert!((sd / sigma - 1.0).abs() < 0.02);
        assert_eq!(gauss_sample(mu, 0.0, &mut rng), mu);
        let a = gauss_sample(0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let b = gauss_sample(0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn bessel_reference_values() {
        assert_eq!(log_bessel_i0(0.0).unwrap(), 0.0);
        let k1 = log_bessel_i0(1.0).unwrap();
        assert!((k1 - log_i0_power_series(1.0, 20)).abs() < 1e-10 * k1.abs());
        assert!((k1 - 1.266_065_877_752_008_4f64.ln()).abs() < 1e-14);
        // Asymptotic oracle at κ = 100 with five correction terms.
        let kappa = 100.0f64;
        let corr = 1.0 + 1.0 / (8.0 * kappa) + 9.0 / (128.0 * kappa.powi(2))
            + 225.0 / (3072.0 * kappa.powi(3))
            + 11025.0 / (98304.0 * kappa.powi(4))
            + 893025.0 / (3932160.0 * kappa.powi(5));
        let oracle = kappa - 0.5 * (TAU * kappa).ln() + corr.ln();
        let got = log_bessel_i0(kappa).unwrap();
        assert!((got - oracle).abs() < 1e-10 * oracle.abs());
        assert!(log_bessel_i0(-1.0).is_err());
    }

    #[test]
    fn bessel_matches_long_series_everywhere() {
        for kappa in [0.01, 0.5, 3.0, 9.99, 14.9, 15.0, 15.1, 22.0, 60.0, 400.0, 3000.0, 1e4] {
            let want = log_i0_power_series(kappa, 4 * kappa as usize + 60);
            let got = log_bessel_i0(kappa).unwrap();
            assert!(
                (got - want).abs() <= 1e-10 * want.abs().max(1e-300),
                "kappa {kappa}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn bessel_ratio_matches_finite_difference() {
        for kappa in [0.3f64, 2.0, 14.0, 16.0, 80.0, 5000.0] {
            let h = 1e-5 * kappa.max(1.0);
            let fd = (log_bessel_i0(kappa + h).unwrap() - log_bessel_i0(kappa - h).unwrap()) / (2.0 * h);
            let r = bessel_i1_i0_ratio(kappa);
            assert!((fd - r).abs() < 1e-6 * r.abs(), "kappa {kappa}: {fd} vs {r}");
        }
    }

    #[test]
    fn von_mises_density() {
        let tiny = vm_logpdf(0.0, 1e-12).unwrap();
        assert!((tiny + TAU.ln()).abs() < 1e-10);
        assert_eq!(vm_logpdf(PI, 3.0).unwrap(), vm_logpdf(-PI, 3.0).unwrap());
        assert!(vm_logpdf(0.0, 0.0).is_err());
        for kappa in [0.5, 50.0, 1e4] {
            let mass = trapezoid(|d| vm_logpdf(d, kappa).unwrap().exp(), -PI, PI, 100_000);
            assert!((mass - 1.0).abs() < 1e-6, "kappa {kappa}: {mass}");
        }
        for d in [-2.0, 0.3, 1.0] {
            assert!((vm_logpdf(d, 7.0).unwrap() - vm_logpdf(d + TAU, 7.0).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_parameter_derivatives() {
        for (d, s) in [(0.3, 0.5), (-2.0, 1.2), (0.0, 0.01)] {
            let h = 1e-6 * s;
            let fd = (gauss_logpdf(d, s + h).unwrap() - gauss_logpdf(d, s - h).unwrap()) / (2.0 * h);
            let an = gauss_logpdf_dsigma(d, s);
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
        }
        for (d, k) in [(0.3, 0.5), (-2.0, 20.0), (1.0, 300.0)] {
            let h = 1e-6 * k;
            let fd = (vm_logpdf(d, k + h).unwrap() - vm_logpdf(d, k - h).unwrap()) / (2.0 * h);
            let an = vm_logpdf_dkappa(d, k);
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn von_mises_sampling_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mu = Angle::new(2.9).unwrap();
        let n = 10_000;
        let (mut s, mut c) = (0.0, 0.0);
        for _ in 0..n {
            let a = vm_sample(mu, 1000.0, &mut rng).diff(mu).radians();
            s += a.sin();
            c += a.cos();
        }
        let rbar = (s * s + c * c).sqrt() / n as f64;
        let circ_std = (-2.0 * rbar.ln()).sqrt();
        assert!(circ_std < 0.05, "{circ_std}");
    }

    #[test]
    fn small_kappa_is_uniform_and_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..1000 {
            let a = vm_sample(Angle::new(1.0).unwrap(), 0.0, &mut rng).radians();
            assert!(a > -PI && a <= PI);
        }
    }
}
