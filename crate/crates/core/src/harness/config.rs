use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::DEFAULT_LAMBDA;
use crate::harness::io::read_to_string;
use crate::kernels::Bandwidth;
use crate::resampling::Resampler;
use crate::simulator::{Counts, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mdps,
    Mdpf,
    MdpfBackward,
    Tgpf,
    Srpf,
    Ffbs,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mdps,
        Method::Mdpf,
        Method::MdpfBackward,
        Method::Tgpf,
        Method::Srpf,
        Method::Ffbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mdps => "mdps",
            Method::Mdpf => "mdpf",
            Method::MdpfBackward => "mdpf-backward",
            Method::Tgpf => "tgpf",
            Method::Srpf => "srpf",
            Method::Ffbs => "ffbs",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

pub fn parse_resampler(s: &str) -> Result<Resampler> {
    Resampler::ALL
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown resampler {s:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    /// Passes over the training split; fractional values are allowed.
    pub epochs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stage 1 (separate filters), stage 2 (smoother only), stage 3 (joint).
    /// Single-filter baselines use stage 1 only.
    pub stages: [StageConfig; 3],
    pub batch_size: usize,
    pub particles: usize,
    pub resampler: Resampler,
    /// Hold the filters' posterior bandwidths fixed during stage 1.
    pub freeze_posterior_bandwidth: bool,
    pub truncate_every: Option<usize>,
    pub srpf_lambda: f64,
    pub hidden: usize,
    pub bandwidth_resample: Bandwidth,
    pub bandwidth_posterior: Bandwidth,
    pub bandwidth_smoother: Bandwidth,
    pub ffbs_epochs: f64,
    pub ffbs_lr: f64,
    /// Candidate (σ_xy, κ_θ) pairs for the FFBS output kernel.
    pub ffbs_bandwidth_grid: Vec<(f64, f64)>,
    /// Global gradient-norm cap; `inf` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: [
                StageConfig { lr: 1e-3, epochs: 8.0 },
                StageConfig { lr: 1e-3, epochs: 4.0 },
                StageConfig { lr: 1e-4, epochs: 2.0 },
            ],
            batch_size: 16,
            particles: 50,
            resampler: Resampler::Stratified,
            freeze_posterior_bandwidth: true,
            truncate_every: None,
            srpf_lambda: DEFAULT_LAMBDA,
            hidden: 64,
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
            bandwidth_smoother: Bandwidth {
                sigma_x: 1.0,
                sigma_y: 1.0,
                kappa_theta: 10.0,
            },
            ffbs_epochs: 5.0,
            ffbs_lr: 1e-3,
            ffbs_bandwidth_grid: vec![(0.25, 40.0), (0.5, 20.0), (1.0, 10.0), (2.0, 5.0)],
            grad_clip: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr > 0.0 && s.lr.is_finite()) || !(s.epochs >= 0.0 && s.epochs.is_finite()) {
                return Err(Error::Config(format!("stage {} needs a positive lr and non-negative epochs", i + 1)));
            }
        }
        if self.batch_size == 0 || self.particles == 0 || self.hidden == 0 {
            return Err(Error::Config("batch_size, particles and hidden must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive (inf disables it)".into()));
        }
        if !(0.0..=1.0).contains(&self.srpf_lambda) {
            return Err(Error::Config("srpf_lambda must lie in [0, 1]".into()));
        }
        if self.truncate_every == Some(0) {
            return Err(Error::Config("truncate_every must be positive".into()));
        }
        if self.ffbs_bandwidth_grid.is_empty() {
            return Err(Error::Config("ffbs_bandwidth_grid is empty".into()));
        }
        for b in [self.bandwidth_resample, self.bandwidth_posterior, self.bandwidth_smoother] {
            Bandwidth::new(b.sigma_x, b.sigma_y, b.kappa_theta)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub particles: usize,
    /// Recall thresholds on position error, metres.
    pub recall_distances: Vec<f64>,
    /// Modes kept by NMS for top-k recall.
    pub modes: usize,
    /// Evaluate only the first `limit` sequences of the split.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            particles: 50,
            recall_distances: vec![1.0, 2.0, 5.0],
            modes: 3,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sim: SimConfig,
    pub counts: Counts,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sim: SimConfig::default(),
            counts: Counts::desk(),
            seed: 0,
        }
    }
}

/// Top-level experiment configuration, read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::parse(path, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.sim.validate()?;
        self.train.validate()?;
        if self.eval.particles == 0 || self.eval.modes == 0 {
            return Err(Error::Config("eval particles and modes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }
}
