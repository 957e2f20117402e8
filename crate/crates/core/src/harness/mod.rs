//! Training, evaluation and experiment orchestration for the bearings task.

pub mod ablation;
pub mod bench;
pub mod bundle;
pub mod config;
pub mod eval;
pub mod io;
pub mod run;
pub mod suite;
pub mod train;

/// Stable 64-bit label for deriving RNG scopes from names (FNV-1a).
pub fn label(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
