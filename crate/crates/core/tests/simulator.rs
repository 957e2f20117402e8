mod common;

use std::f64::consts::PI;

use common::chi2_pvalue;
use diffsmc::simulator::*;
use diffsmc::{RngStream, State3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// I0 by its power series.
fn bessel_i0(k: f64) -> f64 {
    let (mut term, mut sum) = (1.0, 1.0);
    for j in 1..200 {
        term *= (k / 2.0) * (k / 2.0) / (j as f64 * j as f64);
        sum += term;
    }
    sum
}

fn mixture_density(theta: f64, mu: f64, alpha: f64, kappa: f64) -> f64 {
    alpha / (2.0 * PI) + (1.0 - alpha) * (kappa * (theta - mu).cos()).exp() / (2.0 * PI * bessel_i0(kappa))
}

/// Simpson integral of the density over each of `bins` equal bins of (−π, π].
fn bin_probs(bins: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let w = 2.0 * PI / bins as f64;
    (0..bins)
        .map(|b| {
            let a = -PI + b as f64 * w;
            let m = 400;
            let h = w / m as f64;
            let mut s = f(a) + f(a + w);
            for k in 1..m {
                s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        })
        .collect()
}

fn histogram(samples: &[f64], bins: usize) -> Vec<f64> {
    let mut c = vec![0.0; bins];
    for s in samples {
        let b = (((s + PI) / (2.0 * PI)) * bins as f64).floor() as usize;
        c[b.min(bins - 1)] += 1.0;
    }
    c
}

fn draw(config: &SimConfig, state: &State3, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| observe(state, config, &mut rng).unwrap().radians()).collect()
}

#[test]
fn observation_without_outliers_is_von_mises() {
    let config = SimConfig {
        alpha: 0.0,
        ..SimConfig::default()
    };
    let s = State3::new(-2.0, 3.0, 0.0).unwrap();
    let mu = 3.0f64.atan2(-2.0);
    let obs = draw(&config, &s, 20000, 1);
    // circular mean near the bearing, resultant length A(50)
    let (c, si) = obs.iter().fold((0.0, 0.0), |(c, s), o| (c + (o - mu).cos(), s + (o - mu).sin()));
    let n = obs.len() as f64;
    assert!((si / n).abs() < 0.005);
    assert!(((c / n) - 0.98994).abs() < 0.002);
}

#[test]
fn observation_with_all_outliers_is_uniform() {
    let config = SimConfig {
        alpha: 1.0,
        ..SimConfig::default()
    };
    let obs = draw(&config, &State3::new(4.0, 1.0, 0.0).unwrap(), 100_000, 2);
    let counts = histogram(&obs, 36);
    let p = chi2_pvalue(&counts, &vec![100_000.0 / 36.0; 36]);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn observation_matches_the_outlier_mixture() {
    let config = SimConfig::default();
    let s = State3::new(3.0, -4.0, 1.0).unwrap();
    let mu = (-4.0f64).atan2(3.0);
    let n = 100_000;
    let obs = draw(&config, &s, n, 3);
    let probs = bin_probs(36, |th| mixture_density(th, mu, 0.15, 50.0));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    // merge sparse bins so every expected count is at least 5
    let counts = histogram(&obs, 36);
    let (mut oc, mut ec, mut acc) = (Vec::new(), Vec::new(), (0.0, 0.0));
    for (o, p) in counts.iter().zip(&probs) {
        acc.0 += o;
        acc.1 += p * n as f64;
        if acc.1 >= 5.0 {
            oc.push(acc.0);
            ec.push(acc.1);
            acc = (0.0, 0.0);
        }
    }
    *oc.last_mut().unwrap() += acc.0;
    *ec.last_mut().unwrap() += acc.1;
    let p = chi2_pvalue(&oc, &ec);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn trajectories_stay_in_the_arena_at_unit_or_double_speed() {
    let config = SimConfig::default();
    for i in 0..200 {
        let tr = generate_trajectory(&config, &RngStream::new(7).derive(i), (0..50).collect()).unwrap();
        assert_eq!(tr.len(), 50);
        assert_eq!(tr.observations.len(), 50);
        for (k, s) in tr.states.iter().enumerate() {
            assert!(config.arena.contains(s.x, s.y), "{s:?}");
            assert!(s.theta.radians() > -PI && s.theta.radians() <= PI);
            assert!(tr.observations[k].radians() > -PI && tr.observations[k].radians() <= PI);
            if k > 0 {
                let p = &tr.states[k - 1];
                let d = (s.x - p.x).hypot(s.y - p.y);
                assert!((d - 1.0).abs() < 1e-9 || (d - 2.0).abs() < 1e-9, "{d}");
                // heading is the direction of motion
                let h = (s.y - p.y).atan2(s.x - p.x);
                assert!(diffsmc::wrap_angle(h - s.theta.radians()).unwrap().radians().abs() < 1e-9);
            }
        }
    }
}

#[test]
fn speeds_are_equally_likely() {
    let config = SimConfig::default();
    let (mut fast, mut total) = (0.0f64, 0.0f64);
    for i in 0..400 {
        let tr = generate_trajectory(&config, &RngStream::new(8).derive(i), vec![]).unwrap();
        // first leg only: per-step frequencies are biased toward slow legs
        let d = (tr.states[1].x - tr.states[0].x).hypot(tr.states[1].y - tr.states[0].y);
        if (d - 2.0).abs() < 1e-9 {
            fast += 1.0;
        }
        total += 1.0;
    }
    let se = (0.25 / total).sqrt();
    assert!((fast / total - 0.5).abs() < 4.0 * se, "{}", fast / total);
}

#[test]
fn dataset_files_are_reproducible() {
    let config = SimConfig {
        t: 12,
        ..SimConfig::default()
    };
    let counts = Counts {
        train: 6,
        val: 3,
        eval: 4,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = make_dataset(&config, counts, 11, a.path()).unwrap();
    make_dataset(&config, counts, 11, b.path()).unwrap();
    for f in ["train.jsonl", "val.jsonl", "eval.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded, da);
    assert_eq!(loaded.train.len(), 6);
    assert_eq!(loaded.train[0].loss_mask, vec![0, 4, 8]);
    assert_eq!(loaded.eval[0].loss_mask, (0..12).collect::<Vec<_>>());
    // splits and sequences use disjoint streams
    assert_ne!(loaded.train[0].states, loaded.val[0].states);
    assert_ne!(loaded.train[0].states, loaded.train[1].states);

    let c = tempfile::tempdir().unwrap();
    make_dataset(&config, counts, 12, c.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("train.jsonl")).unwrap(), std::fs::read(c.path().join("train.jsonl")).unwrap());

    std::fs::write(a.path().join("val.jsonl"), b"{}\n").unwrap();
    assert!(load_dataset(a.path()).is_err());
}

#[test]
fn default_counts() {
    assert_eq!(
        Counts::default(),
        Counts {
            train: 5000,
            val: 1000,
            eval: 5000
        }
    );
    assert_eq!(Counts::desk().train, 500);
    let c = SimConfig::default();
    assert_eq!((c.alpha, c.kappa_obs, c.t), (0.15, 50.0, 50));
    assert_eq!(c.speeds, vec![1.0, 2.0]);
}
