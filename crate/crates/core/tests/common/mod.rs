#![allow(dead_code)]

use diffsmc::autodiff::gradcheck::check_param_grads;
use diffsmc::autodiff::{BlockId, ParamStore, Tape, Var};
use diffsmc::filters::{
    init_from_truth, init_uniform, register_bandwidths, run_filter, Bounds, Direction, FilterConfig, FilterInputs,
    FilterModel,
};
use diffsmc::mixture::DrawRecorder;
use diffsmc::smoothers::{mdps_combine, smoothed_nll, SmootherModel};
use diffsmc::{Bandwidth, RngStream, State3};

use diffsmc::models::{DynamicsNet, LinearGaussian, MeasurementNet, SmootherMeasurementNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Exact 1D Kalman filter for `x_1 ~ N(0, q/(1−a²))`, `x_t = a x + N(0, q)`,
/// `y_t = x_t + N(0, r)`. Returns (filtered means, filtered vars, predicted
/// means, predicted vars).
pub fn kalman(model: &LinearGaussian, ys: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let (a, q, r) = (model.a, model.q, model.r);
    let (mut m, mut p) = (Vec::new(), Vec::new());
    let (mut mp, mut pp) = (Vec::new(), Vec::new());
    for (t, y) in ys.iter().enumerate() {
        let (m_pred, p_pred) = if t == 0 {
            (0.0, q / (1.0 - a * a))
        } else {
            (a * m[t - 1], a * a * p[t - 1] + q)
        };
        let k = p_pred / (p_pred + r);
        m.push(m_pred + k * (y - m_pred));
        p.push((1.0 - k) * p_pred);
        mp.push(m_pred);
        pp.push(p_pred);
    }
    (m, p, mp, pp)
}

/// Rauch–Tung–Striebel smoothed means and variances.
pub fn rts(model: &LinearGaussian, ys: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, p, mp, pp) = kalman(model, ys);
    let n = ys.len();
    let mut ms = m.clone();
    let mut ps = p.clone();
    for t in (0..n - 1).rev() {
        let g = p[t] * model.a / pp[t + 1];
        ms[t] = m[t] + g * (ms[t + 1] - mp[t + 1]);
        ps[t] = p[t] + g * g * (ps[t + 1] - pp[t + 1]);
    }
    (ms, ps)
}

/// Pearson χ² p-value of `counts` against `expected`.
pub fn chi2_pvalue(counts: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

pub struct TinyBearings {
    pub store: ParamStore,
    pub dynamics: DynamicsNet,
    pub measurement: MeasurementNet,
    pub bw: (BlockId, BlockId),
}

impl TinyBearings {
    pub fn new(seed: u64, prefix: &str, config: &FilterConfig, width: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dynamics = DynamicsNet::with_sizes(&mut store, &format!("{prefix}.dyn"), &[width, width], &mut rng).unwrap();
        let measurement =
            MeasurementNet::with_sizes(&mut store, &format!("{prefix}.meas"), [0.0, 0.0], &[width, width], &mut rng)
                .unwrap();
        let bw = register_bandwidths(&mut store, prefix, config).unwrap();
        jitter(&mut store, &mut rng, 0.1);
        TinyBearings {
            store,
            dynamics,
            measurement,
            bw,
        }
    }

    pub fn model(&self) -> FilterModel<'_> {
        FilterModel {
            dynamics: &self.dynamics,
            measurement: &self.measurement,
            bw_resample: self.bw.0,
            bw_posterior: self.bw.1,
        }
    }
}

pub fn tiny_smoother(store: &mut ParamStore, seed: u64, width: usize) -> SmootherMeasurementNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SmootherMeasurementNet::with_sizes(store, "smoother.net", [0.0, 0.0], &[width, width], &mut rng).unwrap()
}

/// Moves parameters off their exact initial values (zero biases, equal slopes).
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for v in store.values_mut() {
        *v += rng.random_range(-scale..scale);
    }
}

/// A short wandering trajectory in the arena with matching bearings.
pub fn toy_sequence(t: usize, seed: u64) -> (Vec<diffsmc::State3>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = rng.random_range(-5.0..5.0);
    let mut y = rng.random_range(-5.0..5.0);
    let mut th: f64 = rng.random_range(-3.0..3.0);
    let mut states = Vec::new();
    let mut obs = Vec::new();
    for _ in 0..t {
        th += rng.random_range(-0.3..0.3);
        x += th.cos();
        y += th.sin();
        states.push(diffsmc::State3::new(x, y, th).unwrap());
        obs.push(y.atan2(x) + rng.random_range(-0.05..0.05));
    }
    (states, obs)
}

pub struct LgErrors {
    pub filter: f64,
    pub ffbs: f64,
    pub mdps: f64,
}

/// Runs MDPF, FFBS and MDPS with the exact linear-Gaussian model plugged in
/// and returns mean-RMSE against the Kalman / RTS means, in units of the
/// stationary standard deviation.
pub fn lg_oracle_errors(n: usize, seqs: usize, t_len: usize) -> LgErrors {
    use diffsmc::autodiff::Tape;
    use diffsmc::filters::{run_filter, Direction, FilterInputs, GradientMode};
    use diffsmc::mixture::DrawRecorder;
    use diffsmc::models::LinearGaussianSmootherWeight;
    use diffsmc::smoothers::{ffbs_smooth, mdps_combine, SmootherModel};
    use diffsmc::{Bandwidth, ParticleSet, RngStream, State3};

    let model = LinearGaussian { a: 0.9, q: 1.0, r: 1.0 };
    let mut config = FilterConfig::mdpf(n);
    config.bandwidth_resample = Bandwidth::new(0.05, 0.05, 100.0).unwrap();
    config.inference = true;
    let mut bwd_config = config.clone();
    bwd_config.direction = Direction::Backward;
    let mut boot = config.clone();
    boot.gradient_mode = GradientMode::Truncated;

    let mut store = ParamStore::new();
    let bw = register_bandwidths(&mut store, "lg", &config).unwrap();
    let sbw = store.add("lg.smoother_bw", 1, 3, vec![0.0; 3]).unwrap();
    let fm = FilterModel {
        dynamics: &model,
        measurement: &model,
        bw_resample: bw.0,
        bw_posterior: bw.1,
    };
    let sw = LinearGaussianSmootherWeight {
        model,
        nuisance_log_bw: config.bandwidth_resample.to_log(),
    };
    let sd = model.stationary_var().sqrt();
    let (mut ef, mut eb, mut em, mut count) = (0.0, 0.0, 0.0, 0usize);
    for s in 0..seqs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + s as u64);
        let (_, ys) = model.simulate(t_len, &mut rng);
        let prior = |rng: &mut ChaCha8Rng| {
            let states = (0..n)
                .map(|_| State3::new(diffsmc::kernels::gauss_sample(0.0, sd, rng), 0.0, 0.0).unwrap())
                .collect();
            ParticleSet::uniform(states, 0).unwrap()
        };
        let init_f = prior(&mut rng);
        let init_b = prior(&mut rng);
        let streams = RngStream::new(s as u64);
        let tape = Tape::new();
        let run = |cfg: &FilterConfig, init: &ParticleSet, r: &RngStream| {
            let inputs = FilterInputs {
                observations: &ys,
                actions: None,
                init,
            };
            run_filter(&tape, &store, fm, cfg, &inputs, r, &mut DrawRecorder::fresh()).unwrap()
        };
        let fwd = run(&config, &init_f, &streams.derive(1));
        let bwd = run(&bwd_config, &init_b, &streams.derive(2));
        let post = mdps_combine(
            &tape,
            &store,
            &fwd,
            &bwd,
            SmootherModel { net: &sw, log_bw: sbw },
            &ys,
            n,
            &streams.derive(3),
            &mut DrawRecorder::fresh(),
        )
        .unwrap();
        let pf = run(&boot, &init_f, &streams.derive(4));
        let sets: Vec<ParticleSet> = (0..t_len).map(|t| pf.post_set(&tape, t).unwrap()).collect();
        let ffbs = ffbs_smooth(&sets, &model, &store).unwrap();

        let (km, ..) = kalman(&model, &ys);
        let (rm, _) = rts(&model, &ys);
        for t in 0..t_len {
            ef += ((fwd.post_set(&tape, t).unwrap().mean().x - km[t]) / sd).powi(2);
            eb += ((ffbs[t].mean().x - rm[t]) / sd).powi(2);
            em += ((post.set(&tape, t).unwrap().mean().x - rm[t]) / sd).powi(2);
            count += 1;
        }
    }
    let c = count as f64;
    LgErrors {
        filter: (ef / c).sqrt(),
        ffbs: (eb / c).sqrt(),
        mdps: (em / c).sqrt(),
    }
}

pub struct Setup {
    pub net_f: TinyBearings,
    pub truth: Vec<State3>,
    pub obs: Vec<f64>,
    pub config: FilterConfig,
}

pub fn setup(seed: u64, n: usize, t: usize) -> Setup {
    let config = FilterConfig::mdpf(n);
    let net_f = TinyBearings::new(seed, "f", &config, 8);
    let (truth, obs) = toy_sequence(t, seed);
    Setup {
        net_f,
        truth,
        obs,
        config,
    }
}

pub fn smoother_bw(store: &mut ParamStore) -> diffsmc::autodiff::BlockId {
    store
        .add("smoother.bw", 1, 3, Bandwidth::new(0.8, 0.8, 8.0).unwrap().to_log().to_vec())
        .unwrap()
}

pub fn mdps_loss(
    tape: &Tape,
    store: &ParamStore,
    s: &Setup,
    net_b: &TinyBearings,
    smoother: &diffsmc::models::SmootherMeasurementNet,
    recorders: &mut [DrawRecorder; 3],
) -> Var {
    let init = init_from_truth(&s.truth[0], s.config.n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let init_b = init_uniform(&Bounds::square(10.0), s.config.n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut cfg_b = s.config.clone();
    cfg_b.direction = Direction::Backward;
    let rng = RngStream::new(17);
    let [r0, r1, r2] = recorders;
    let fwd = run_filter(
        tape,
        store,
        s.net_f.model(),
        &s.config,
        &FilterInputs { observations: &s.obs, actions: None, init: &init },
        &rng.derive(0),
        r0,
    )
    .unwrap();
    let bwd = run_filter(
        tape,
        store,
        net_b.model(),
        &cfg_b,
        &FilterInputs { observations: &s.obs, actions: None, init: &init_b },
        &rng.derive(1),
        r1,
    )
    .unwrap();
    let model = SmootherModel {
        net: smoother,
        log_bw: store.id("smoother.bw").unwrap(),
    };
    let post = mdps_combine(tape, store, &fwd, &bwd, model, &s.obs, s.config.n, &rng.derive(2), r2).unwrap();
    let all: Vec<usize> = (0..s.obs.len()).collect();
    smoothed_nll(tape, &post, &s.truth, &all).unwrap()
}

/// Forward and backward nets share one store under distinct prefixes.
pub fn full_setup(seed: u64) -> (Setup, TinyBearings, diffsmc::models::SmootherMeasurementNet) {
    let mut s = setup(seed, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut store = std::mem::take(&mut s.net_f.store);
    let dynamics = diffsmc::models::DynamicsNet::with_sizes(&mut store, "b.dyn", &[4, 4], &mut rng).unwrap();
    let measurement =
        diffsmc::models::MeasurementNet::with_sizes(&mut store, "b.meas", [0.0, 0.0], &[4, 4], &mut rng).unwrap();
    let bw = register_bandwidths(&mut store, "b", &s.config).unwrap();
    smoother_bw(&mut store);
    let smoother = tiny_smoother(&mut store, seed + 200, 4);
    jitter(&mut store, &mut rng, 0.05);
    let net_b = TinyBearings {
        store: ParamStore::new(),
        dynamics,
        measurement,
        bw,
    };
    s.net_f.store = store;
    (s, net_b, smoother)
}

/// Reverse-mode vs central differences for the full MDPS loss (T=3, N=4,
/// 4 draws per side) over every parameter, with draws replayed between runs.
pub fn full_mdps_gradcheck(seed: u64) -> diffsmc::autodiff::gradcheck::GradCheck {
    let (s, net_b, smoother) = full_setup(seed);
    let store = s.net_f.store.clone();
    let mut recs = [DrawRecorder::recording(), DrawRecorder::recording(), DrawRecorder::recording()];
    mdps_loss(&Tape::new(), &store, &s, &net_b, &smoother, &mut recs);
    let replay = recs.map(|r| r.into_replay());
    // ε balances truncation against the ulp(L)/2ε resolution of tiny entries
    check_param_grads(&store, 1e-4, |tape, st| {
        let mut r = replay.clone();
        mdps_loss(tape, st, &s, &net_b, &smoother, &mut r)
    })
}
