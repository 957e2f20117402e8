//! Inference-time particle-count ablation of a trained checkpoint.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::bundle::Bundle;
use crate::harness::config::{EvalConfig, TrainConfig};
use crate::harness::eval::{evaluate, BoxStats};
use crate::harness::run::RunContext;
use crate::simulator::{SimConfig, Trajectory};

pub const DEFAULT_COUNTS: [usize; 4] = [25, 50, 100, 200];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub n: usize,
    pub nll: BoxStats,
    /// Normal-approximation standard error of the median, `1.2533·s/√n`.
    pub median_se: f64,
}

pub fn ablate_particles(
    bundle: &Bundle,
    train: &TrainConfig,
    sim: &SimConfig,
    data: &[Trajectory],
    eval: &EvalConfig,
    counts: &[usize],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    counts
        .iter()
        .map(|&n| {
            let ctx = RunContext {
                train,
                sim,
                particles: n,
                inference: true,
            };
            let (report, _) = evaluate(bundle, &ctx, data, eval, seed)?;
            Ok(AblationRow {
                n,
                median_se: 1.2533 * report.nll.se,
                nll: report.nll,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("n,median,median_se,q1,q3,mean,se\n");
    for r in rows {
        let b = &r.nll;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.n, b.median, r.median_se, b.q1, b.q3, b.mean, b.se);
    }
    s
}

/// Non-increasing medians within one standard error, and diminishing returns:
/// the last step improves less than the first.
pub fn plateaus(rows: &[AblationRow]) -> bool {
    if rows.len() < 3 {
        return false;
    }
    let mono = rows
        .windows(2)
        .all(|w| w[1].nll.median <= w[0].nll.median + w[0].median_se.max(w[1].median_se));
    let first = rows[0].nll.median - rows[1].nll.median;
    let k = rows.len();
    let last = rows[k - 2].nll.median - rows[k - 1].nll.median;
    mono && last < first
}
