//! Discrete resampling of weighted particle indices.
//!
//! All schemes share one inverse-CDF primitive over half-open intervals
//! `(cdf[j-1], cdf[j]]` with uniforms drawn on `(0, 1]`, so a zero-weight
//! particle can never be selected.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σw − 1|` accepted as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightCdf {
    cumulative: Vec<f64>,
}

impl WeightCdf {
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        check_normalized(weights)?;
        Ok(Self::build(weights))
    }

    /// Cumulative sums in fixed left-to-right order, last entry pinned to 1.
    fn build(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        WeightCdf { cumulative }
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.cumulative
    }

    /// Smallest `j` with `cdf[j] >= u`.
    #[inline]
    fn lookup_unchecked(&self, u: f64) -> usize {
        let j = self.cumulative.partition_point(|&c| c < u);
        j.min(self.cumulative.len() - 1)
    }
}

pub fn inverse_cdf_lookup(cdf: &WeightCdf, u: f64) -> Result<usize> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(Error::InvalidUniform(u));
    }
    Ok(cdf.lookup_unchecked(u))
}

/// Occupancy counts `N^{(i)}` of a resampled index list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResampleCounts(pub Vec<usize>);

impl ResampleCounts {
    pub fn from_indices(indices: &[usize], n: usize) -> Self {
        let mut counts = vec![0; n];
        for &i in indices {
            counts[i] += 1;
        }
        ResampleCounts(counts)
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

pub fn check_normalized(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::EmptyWeights);
    }
    let mut sum = 0.0;
    for &w in weights {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::UnnormalizedWeights { sum: f64::NAN });
        }
        sum += w;
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::UnnormalizedWeights { sum });
    }
    Ok(())
}

#[inline]
fn open_closed_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

fn check_count(n_out: usize) -> Result<()> {
    if n_out == 0 {
        return Err(Error::Config("resampling needs at least one output".into()));
    }
    Ok(())
}

/// i.i.d. draws from `Cat(w)`.
pub fn resample_multinomial<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_count(n_out)?;
    let cdf = WeightCdf::from_weights(weights)?;
    Ok((0..n_out)
        .map(|_| cdf.lookup_unchecked(open_closed_uniform(rng)))
        .collect())
}

/// One uniform per stratum `((k−1)/N, k/N]`. Output is non-decreasing.
pub fn resample_stratified<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_count(n_out)?;
    let cdf = WeightCdf::from_weights(weights)?;
    let n = n_out as f64;
    Ok((0..n_out)
        .map(|k| {
            let u = ((k as f64 + open_closed_uniform(rng)) / n).min(1.0);
            cdf.lookup_unchecked(u)
        })
        .collect())
}

/// `⌊N·w_i⌋` deterministic copies plus a multinomial draw of the remainder.
pub fn resample_residual<R: Rng + ?Sized>(
    weights: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_count(n_out)?;
    check_normalized(weights)?;
    let n = n_out as f64;
    let mut indices = Vec::with_capacity(n_out);
    let mut residual = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        let scaled = n * w;
        let floor = scaled.floor();
        indices.extend(std::iter::repeat_n(i, floor as usize));
        residual.push(scaled - floor);
    }
    // Rounding can push Σ⌊N·w⌋ one past N when weights sit on integer boundaries.
    indices.truncate(n_out);
    let remaining = n_out - indices.len();
    if remaining > 0 {
        let total: f64 = residual.iter().sum();
        if total <= 0.0 {
            // All mass was consumed by the floors up to rounding; fall back to w.
            residual.copy_from_slice(weights);
        } else {
            residual.iter_mut().for_each(|r| *r /= total);
        }
        let cdf = WeightCdf::build(&residual);
        indices.extend((0..remaining).map(|_| cdf.lookup_unchecked(open_closed_uniform(rng))));
    }
    Ok(indices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    #[default]
    Stratified,
    Multinomial,
    Residual,
}

impl Resampler {
    pub const ALL: [Resampler; 3] = [
        Resampler::Multinomial,
        Resampler::Stratified,
        Resampler::Residual,
    ];

    pub fn resample<R: Rng + ?Sized>(
        self,
        weights: &[f64],
        n_out: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        match self {
            Resampler::Stratified => resample_stratified(weights, n_out, rng),
            Resampler::Multinomial => resample_multinomial(weights, n_out, rng),
            Resampler::Residual => resample_residual(weights, n_out, rng),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Resampler::Stratified => "stratified",
            Resampler::Multinomial => "multinomial",
            Resampler::Residual => "residual",
        }
    }
}

impl FromStr for Resampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stratified" => Ok(Resampler::Stratified),
            "multinomial" => Ok(Resampler::Multinomial),
            "residual" => Ok(Resampler::Residual),
            other => Err(Error::Config(format!("unknown resampler {other:?}"))),
        }
    }
}

impl std::fmt::Display for Resampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
