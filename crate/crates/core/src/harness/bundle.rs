//! Parameter store plus the networks a method needs, with stable block names:
//! `fwd.*` and `bwd.*` for the two filters, `smoother.*` for the MDPS weight
//! net and output bandwidth, `ffbs.*` for the FFBS dynamics and output kernel.

use crate::autodiff::{BlockId, ParamStore};
use crate::error::{Error, Result};
use crate::filters::{register_bandwidths, Direction, FilterConfig, FilterModel, GradientMode};
use crate::harness::config::{Method, TrainConfig};
use crate::models::{BearingLikelihood, DynamicsNet, FfbsDynamics, MeasurementNet, SmootherMeasurementNet};
use crate::rng::{Purpose, RngStream};
use crate::simulator::SimConfig;
use crate::smoothers::SmootherModel;

#[derive(Clone, Debug)]
pub struct FilterNets {
    pub prefix: &'static str,
    pub dynamics: DynamicsNet,
    pub measurement: MeasurementNet,
    pub bw_resample: BlockId,
    pub bw_posterior: BlockId,
}

impl FilterNets {
    pub fn model(&self) -> FilterModel<'_> {
        FilterModel {
            dynamics: &self.dynamics,
            measurement: &self.measurement,
            bw_resample: self.bw_resample,
            bw_posterior: self.bw_posterior,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmootherNets {
    pub net: SmootherMeasurementNet,
    pub bw: BlockId,
}

impl SmootherNets {
    pub fn model(&self) -> SmootherModel<'_> {
        SmootherModel {
            net: &self.net,
            log_bw: self.bw,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfbsNets {
    pub dynamics: FfbsDynamics,
    pub likelihood: BearingLikelihood,
    /// `1×3` log-bandwidth of the output kernel (chosen on validation data).
    pub bw: BlockId,
    pub bw_resample: BlockId,
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub method: Method,
    pub store: ParamStore,
    pub fwd: Option<FilterNets>,
    pub bwd: Option<FilterNets>,
    pub smoother: Option<SmootherNets>,
    pub ffbs: Option<FfbsNets>,
}

fn hidden(width: usize) -> [usize; 3] {
    [width; 3]
}

impl Bundle {
    /// Fresh parameters drawn from `seed`.
    pub fn new(method: Method, train: &TrainConfig, sim: &SimConfig, seed: u64) -> Result<Self> {
        let root = RngStream::new(seed).derive(0x5041_5241);
        let mut store = ParamStore::new();
        let h = hidden(train.hidden);
        let fc = filter_config(train, method, Direction::Forward, train.particles);
        let filter = |store: &mut ParamStore, prefix: &'static str, label: u64| -> Result<FilterNets> {
            let mut rng = root.derive(label).stream(0, 0, 0, Purpose::ParamInit);
            let dynamics = DynamicsNet::with_sizes(store, &format!("{prefix}.dyn"), &h, &mut rng)?;
            let measurement = MeasurementNet::with_sizes(store, &format!("{prefix}.meas"), sim.radar, &h, &mut rng)?;
            let (bw_resample, bw_posterior) = register_bandwidths(store, prefix, &fc)?;
            Ok(FilterNets {
                prefix,
                dynamics,
                measurement,
                bw_resample,
                bw_posterior,
            })
        };
        let (mut fwd, mut bwd, mut smoother, mut ffbs) = (None, None, None, None);
        match method {
            Method::Mdps => {
                fwd = Some(filter(&mut store, "fwd", 1)?);
                bwd = Some(filter(&mut store, "bwd", 2)?);
                let mut rng = root.derive(3).stream(0, 0, 0, Purpose::ParamInit);
                let net = SmootherMeasurementNet::with_sizes(&mut store, "smoother.net", sim.radar, &h, &mut rng)?;
                let bw = store.add("smoother.bw", 1, 3, train.bandwidth_smoother.to_log().to_vec())?;
                smoother = Some(SmootherNets { net, bw });
            }
            Method::Mdpf | Method::Tgpf | Method::Srpf => fwd = Some(filter(&mut store, "fwd", 1)?),
            Method::MdpfBackward => bwd = Some(filter(&mut store, "bwd", 2)?),
            Method::Ffbs => {
                let mut rng = root.derive(4).stream(0, 0, 0, Purpose::ParamInit);
                let dynamics = FfbsDynamics::new(&mut store, "ffbs.dyn", &mut rng)?;
                let bw = store.add("ffbs.bw", 1, 3, train.bandwidth_posterior.to_log().to_vec())?;
                let bw_resample = store.add("ffbs.bw_resample", 1, 3, train.bandwidth_resample.to_log().to_vec())?;
                ffbs = Some(FfbsNets {
                    dynamics,
                    likelihood: sim.likelihood(),
                    bw,
                    bw_resample,
                });
            }
        }
        Ok(Bundle {
            method,
            store,
            fwd,
            bwd,
            smoother,
            ffbs,
        })
    }

    /// A bundle shaped for `method` with values taken from `checkpoint`.
    pub fn from_checkpoint(method: Method, train: &TrainConfig, sim: &SimConfig, checkpoint: &ParamStore) -> Result<Self> {
        let mut b = Bundle::new(method, train, sim, 0)?;
        b.store
            .load_values_from(checkpoint)
            .map_err(|e| Error::Checkpoint(format!("checkpoint does not fit {}: {e}", method.name())))?;
        Ok(b)
    }

    pub fn fwd(&self) -> Result<&FilterNets> {
        self.fwd.as_ref().ok_or_else(|| Error::Config(format!("{} has no forward filter", self.method.name())))
    }

    pub fn bwd(&self) -> Result<&FilterNets> {
        self.bwd.as_ref().ok_or_else(|| Error::Config(format!("{} has no backward filter", self.method.name())))
    }

    pub fn smoother(&self) -> Result<&SmootherNets> {
        self.smoother.as_ref().ok_or_else(|| Error::Config(format!("{} has no smoother", self.method.name())))
    }

    pub fn ffbs(&self) -> Result<&FfbsNets> {
        self.ffbs.as_ref().ok_or_else(|| Error::Config(format!("{} has no FFBS model", self.method.name())))
    }
}

/// Filter settings for one direction of `method`.
pub fn filter_config(train: &TrainConfig, method: Method, direction: Direction, n: usize) -> FilterConfig {
    let gradient_mode = match method {
        Method::Tgpf | Method::Ffbs => GradientMode::Truncated,
        Method::Srpf => GradientMode::Soft(train.srpf_lambda),
        _ => GradientMode::Iwsg,
    };
    FilterConfig {
        n,
        resampler: train.resampler,
        gradient_mode,
        direction,
        bandwidth_resample: train.bandwidth_resample,
        bandwidth_posterior: train.bandwidth_posterior,
        truncate_every: train.truncate_every,
        inference: false,
    }
}
