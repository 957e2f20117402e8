//! Differentiable sequential Monte Carlo: mixture-density particle filters,
//! the two-filter mixture-density particle smoother, and the bearings-only
//! tracking benchmark they are evaluated on.

pub mod autodiff;
pub mod error;
pub mod filters;
pub mod harness;
pub mod kernels;
pub mod mixture;
pub mod models;
pub mod resampling;
pub mod rng;
pub mod simulator;
pub mod smoothers;
pub mod state;

pub use error::{Error, Result};
pub use kernels::Bandwidth;
pub use resampling::Resampler;
pub use rng::{Purpose, RngStream, StreamPath};
pub use state::{angle_to_vec, vec_to_angle, wrap_angle, Action, Angle, ParticleSet, State3};
