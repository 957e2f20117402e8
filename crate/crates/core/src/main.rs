use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffsmc::autodiff::ParamStore;
use diffsmc::harness::ablation::{ablate_particles, ablation_csv, DEFAULT_COUNTS};
use diffsmc::harness::bench::{complexity, resampling_bench};
use diffsmc::harness::bundle::Bundle;
use diffsmc::harness::config::{parse_resampler, ExperimentConfig, Method};
use diffsmc::harness::eval::evaluate;
use diffsmc::harness::io::write_atomic;
use diffsmc::harness::run::RunContext;
use diffsmc::harness::suite::{export_stats, run_suite, SuiteSpec};
use diffsmc::harness::train::train_method;
use diffsmc::simulator::{load_dataset, make_dataset, Split};
use diffsmc::{Error, Result};

#[derive(Parser)]
#[command(name = "diffsmc", version, about = "Differentiable particle filters and smoothers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides training and evaluation particle counts.
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    resampler: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/eval splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one method.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Resampler count variance and timing; optionally wall-time scaling in N.
    BenchResampling {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        /// Also time MDPS training and inference for N in {50, ..., 800}.
        #[arg(long)]
        complexity: bool,
    },
    /// Evaluate a checkpoint at several particle counts.
    AblateParticles {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "mdps")]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Run a (method × resampler × seed) grid from a suite spec.
    Suite {
        #[command(flatten)]
        common: Common,
    },
    /// Recompute summary tables from a suite directory.
    ExportStats {
        #[command(flatten)]
        common: Common,
    },
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = common.particles {
        c.train.particles = n;
        c.eval.particles = n;
    }
    if let Some(r) = &common.resampler {
        c.train.resampler = parse_resampler(r)?;
    }
    c.validate()?;
    Ok(c)
}

fn seed(common: &Common, default: u64) -> u64 {
    common.seed.unwrap_or(default)
}

fn save_config(out: &Path, c: &ExperimentConfig) -> Result<()> {
    write_atomic(&out.join("config.toml"), c.to_toml().as_bytes())
}

fn split_of(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown split {name:?}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { common } => {
            let c = experiment(&common)?;
            let s = seed(&common, c.data.seed);
            let d = make_dataset(&c.data.sim, c.data.counts, s, &common.out)?;
            Ok(format!(
                "wrote {} / {} / {} sequences to {}",
                d.train.len(),
                d.val.len(),
                d.eval.len(),
                common.out.display()
            ))
        }
        Command::Train { common, method, data } => {
            let c = experiment(&common)?;
            let m = Method::parse(&method)?;
            let d = load_dataset(&data)?;
            save_config(&common.out, &c)?;
            let r = train_method(&d, &c.train, m, seed(&common, 0), Some(&common.out))?;
            let last = r.log.iter().rev().find(|l| l.loss.is_finite()).map(|l| l.loss);
            Ok(format!("trained {method}: {} steps, final loss {last:?}", r.log.len()))
        }
        Command::Evaluate {
            common,
            method,
            data,
            checkpoint,
            split,
        } => {
            let c = experiment(&common)?;
            let m = Method::parse(&method)?;
            let d = load_dataset(&data)?;
            let bundle = Bundle::from_checkpoint(m, &c.train, &d.config, &ParamStore::load(&checkpoint)?)?;
            let ctx = RunContext {
                train: &c.train,
                sim: &d.config,
                particles: c.eval.particles,
                inference: true,
            };
            let sp = split_of(&split)?;
            let (report, per_step) = evaluate(&bundle, &ctx, d.split(sp), &c.eval, seed(&common, 0))?;
            write_atomic(&common.out.join("metrics.csv"), report.to_csv().as_bytes())?;
            write_atomic(&common.out.join("summary.json"), to_json(&report.nll).as_bytes())?;
            write_atomic(&common.out.join("eval_timing.txt"), format!("seconds_per_step {per_step:.6e}\n").as_bytes())?;
            Ok(format!("{method}: median NLL {:.4} over {} sequences", report.nll.median, report.nll.n))
        }
        Command::BenchResampling {
            common,
            trials,
            complexity: with_complexity,
        } => {
            let s = seed(&common, 0);
            let ns = [16, 64, 256, 1024];
            let (rows, times) = resampling_bench(&ns, trials, s)?;
            let mut csv = String::from("resampler,n,mean_count_variance\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.resampler.name(), r.n, r.mean_count_variance));
            }
            write_atomic(&common.out.join("resampling.csv"), csv.as_bytes())?;
            let mut tcsv = String::from("resampler,n,ns_per_call\n");
            for (r, n, t) in &times {
                tcsv.push_str(&format!("{},{n},{t:.1}\n", r.name()));
            }
            write_atomic(&common.out.join("resampling_timings.csv"), tcsv.as_bytes())?;
            if with_complexity {
                let rep = complexity(&[50, 100, 200, 400, 800], 10, 3, s)?;
                write_atomic(&common.out.join("complexity_timings.csv"), rep.to_csv().as_bytes())?;
                write_atomic(&common.out.join("complexity_timings.json"), to_json(&rep).as_bytes())?;
                return Ok(format!(
                    "exponents: train {:.2}, mdps inference {:.2}, filter inference {:.2}",
                    rep.train_exponent, rep.mdps_inference_exponent, rep.filter_inference_exponent
                ));
            }
            Ok(format!("benchmarked {} resampler configurations", rows.len()))
        }
        Command::AblateParticles {
            common,
            method,
            data,
            checkpoint,
            counts,
        } => {
            let c = experiment(&common)?;
            let m = Method::parse(&method)?;
            let d = load_dataset(&data)?;
            let bundle = Bundle::from_checkpoint(m, &c.train, &d.config, &ParamStore::load(&checkpoint)?)?;
            let counts = counts.unwrap_or_else(|| DEFAULT_COUNTS.to_vec());
            let rows = ablate_particles(&bundle, &c.train, &d.config, &d.eval, &c.eval, &counts, seed(&common, 0))?;
            write_atomic(&common.out.join("ablation.csv"), ablation_csv(&rows).as_bytes())?;
            Ok(format!("evaluated {} particle counts", rows.len()))
        }
        Command::Suite { common } => {
            let path = common
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("suite needs --config <spec.toml>".into()))?;
            let mut spec = SuiteSpec::load(path)?;
            if let Some(n) = common.particles {
                spec.experiment.train.particles = n;
                spec.experiment.eval.particles = n;
            }
            if let Some(s) = common.seed {
                spec.seeds = vec![s];
            }
            let summary = run_suite(&spec, &common.out)?;
            let failed: usize = summary.groups.iter().map(|g| g.failed).sum();
            Ok(format!("{} groups, {failed} failed cells", summary.groups.len()))
        }
        Command::ExportStats { common } => {
            let files = export_stats(&common.out)?;
            Ok(format!("wrote {}", files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}
