use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::rel_err;
use super::*;
use crate::error::Error;

/// Central differences of a scalar function of one leaf.
fn leaf_fd(values: &[f64], shape: (usize, usize), f: &dyn Fn(&Tape, Var) -> Var) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let x = tape.constant(shape.0, shape.1, values.to_vec());
    let y = f(&tape, x);
    let analytic = tape.backward(y).unwrap().wrt(x);
    let eps = 1e-5;
    let numeric = (0..values.len())
        .map(|i| {
            let mut v = values.to_vec();
            let eval = |v: &[f64]| {
                let t = Tape::new();
                let x = t.constant(shape.0, shape.1, v.to_vec());
                let y = f(&t, x);
                t.item(y)
            };
            v[i] += eps;
            let up = eval(&v);
            v[i] -= 2.0 * eps;
            let down = eval(&v);
            (up - down) / (2.0 * eps)
        })
        .collect();
    (analytic, numeric)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(rel_err(*x, *y) < tol, "{what}[{i}]: analytic {x} vs numeric {y}");
    }
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[test]
fn square_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", 1, 1, vec![3.0]).unwrap();
    let tape = Tape::new();
    let v = tape.param(&store, p);
    let loss = tape.mul(v, v);
    assert_eq!(tape.backward(loss).unwrap().param_grads(&store), vec![6.0]);
}

#[test]
fn logsumexp_gradient_is_softmax() {
    let tape = Tape::new();
    let x = tape.column(vec![0.3, -1.2]);
    let y = tape.logsumexp(x);
    let g = tape.backward(y).unwrap().wrt(x);
    let z = 0.3f64.exp() + (-1.2f64).exp();
    assert!((g[0] - 0.3f64.exp() / z).abs() < 1e-15);
    assert!((g[1] - (-1.2f64).exp() / z).abs() < 1e-15);
}

#[test]
fn detach_semantics() {
    let mut store = ParamStore::new();
    let p = store.add("p", 1, 1, vec![2.0]).unwrap();
    let tape = Tape::new();
    let v = tape.param(&store, p);
    let loss = tape.mul(tape.detach(v), v);
    assert_eq!(tape.backward(loss).unwrap().param_grads(&store), vec![2.0]);

    let ratio = tape.div(v, tape.detach(v));
    assert_eq!(tape.item(ratio), 1.0);
    assert_eq!(tape.backward(ratio).unwrap().param_grads(&store), vec![0.5]);

    let d1 = tape.detach(v);
    let d2 = tape.detach(d1);
    assert_eq!(tape.value(d1), tape.value(d2));
    let only_detached = tape.mul(d2, d2);
    assert_eq!(tape.backward(only_detached).unwrap().param_grads(&store), vec![0.0]);
}

#[test]
fn backward_errors() {
    let a = Tape::new();
    let b = Tape::new();
    let x = b.scalar(1.0);
    assert!(matches!(a.backward(x), Err(Error::NotOnTape)));
    let v = a.full(2, 1, 1.0);
    assert!(matches!(a.backward(v), Err(Error::NonScalarLoss { rows: 2, cols: 1 })));
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pos = random_values(&mut rng, 6, 0.2, 3.0);
    let any = random_values(&mut rng, 6, -2.0, 2.0);
    let cases: Vec<(&str, &[f64], Box<dyn Fn(&Tape, Var) -> Var>)> = vec![
        ("exp", &any, Box::new(|t, x| t.sum(t.exp(x)))),
        ("log", &pos, Box::new(|t, x| t.sum(t.log(x)))),
        ("sqrt", &pos, Box::new(|t, x| t.sum(t.sqrt(x)))),
        ("tanh", &any, Box::new(|t, x| t.sum(t.tanh(x)))),
        ("sigmoid", &any, Box::new(|t, x| t.sum(t.sigmoid(x)))),
        ("sin", &any, Box::new(|t, x| t.sum(t.sin(x)))),
        ("cos", &any, Box::new(|t, x| t.sum(t.cos(x)))),
        ("neg", &any, Box::new(|t, x| t.sum(t.mul(t.neg(x), x)))),
        ("affine", &any, Box::new(|t, x| t.sum(t.mul(t.affine(x, -1.5, 0.25), x)))),
        ("bessel", &pos, Box::new(|t, x| t.sum(t.log_bessel_i0(t.scale(x, 10.0))))),
        ("lse_rows", &any, Box::new(|t, x| t.sum(t.mul(t.logsumexp_rows(x), t.column(vec![1.0, -2.0]))))),
        ("sum_cols", &any, Box::new(|t, x| t.sum(t.exp(t.sum_cols(x))))),
        ("sum_rows", &any, Box::new(|t, x| t.sum(t.exp(t.sum_rows(x))))),
        ("mean", &any, Box::new(|t, x| t.mean(t.mul(x, x)))),
        ("clamp", &any, Box::new(|t, x| t.sum(t.mul(t.clamp(x, -1.0, 1.0), x)))),
        ("wrap", &any, Box::new(|t, x| t.sum(t.sin(t.wrap_angle(t.scale(x, 2.0)))))),
        ("slice", &any, Box::new(|t, x| t.sum(t.exp(t.slice_cols(x, 1, 2))))),
        ("gather", &any, Box::new(|t, x| t.sum(t.exp(t.gather_rows(x, &[1, 1, 0]))))),
        ("concat", &any, Box::new(|t, x| t.sum(t.exp(t.concat_cols(&[x, t.col(x, 0), x]))))),
        ("log_normalize", &any, Box::new(|t, x| t.sum(t.mul(t.log_normalize(x), t.full(2, 3, 0.7))))),
    ];
    for (name, values, f) in cases {
        let (a, n) = leaf_fd(values, (2, 3), f.as_ref());
        assert_close(&a, &n, 1e-5, name);
    }
}

#[test]
fn binary_primitives_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_values(&mut rng, 6, 0.5, 2.0);
    for shape in [(2, 3), (1, 3), (2, 1), (1, 1)] {
        let other = random_values(&mut rng, shape.0 * shape.1, 0.5, 2.0);
        for op in 0..4 {
            let f = |t: &Tape, a: Var| {
                let b = t.constant(shape.0, shape.1, other.clone());
                let y = match op {
                    0 => t.add(a, b),
                    1 => t.sub(b, a),
                    2 => t.mul(a, b),
                    _ => t.div(b, a),
                };
                t.sum(t.mul(y, y))
            };
            let (a, n) = leaf_fd(&x, (2, 3), &f);
            assert_close(&a, &n, 1e-5, &format!("op{op} lhs {shape:?}"));
            // gradient flowing into the broadcast operand
            let g = |t: &Tape, b: Var| {
                let a = t.constant(2, 3, x.clone());
                let y = match op {
                    0 => t.add(a, b),
                    1 => t.sub(a, b),
                    2 => t.mul(a, b),
                    _ => t.div(a, b),
                };
                t.sum(t.mul(y, y))
            };
            let (a, n) = leaf_fd(&other, shape, &g);
            assert_close(&a, &n, 1e-5, &format!("op{op} rhs {shape:?}"));
        }
    }
}

#[test]
fn atan2_prelu_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let uv = random_values(&mut rng, 8, -2.0, 2.0);
    let f = |t: &Tape, x: Var| {
        let a = t.atan2(t.col(x, 0), t.col(x, 1));
        t.sum(t.mul(a, a))
    };
    let (a, n) = leaf_fd(&uv, (4, 2), &f);
    assert_close(&a, &n, 1e-5, "atan2");

    let xs = random_values(&mut rng, 12, -1.0, 1.0);
    let slope = 0.3;
    let f = |t: &Tape, x: Var| t.sum(t.exp(t.prelu(x, t.scalar(slope))));
    let (a, n) = leaf_fd(&xs, (4, 3), &f);
    assert_close(&a, &n, 1e-5, "prelu x");
    let f = |t: &Tape, s: Var| t.sum(t.exp(t.prelu(t.constant(4, 3, xs.clone()), s)));
    let (a, n) = leaf_fd(&[0.3, -0.2, 0.5], (1, 3), &f);
    assert_close(&a, &n, 1e-5, "prelu slope");

    let a_vals = random_values(&mut rng, 15, -1.0, 1.0);
    let b_vals = random_values(&mut rng, 20, -1.0, 1.0);
    let f = |t: &Tape, a: Var| {
        let y = t.matmul(a, t.constant(5, 4, b_vals.clone()));
        t.sum(t.tanh(y))
    };
    let (a, n) = leaf_fd(&a_vals, (3, 5), &f);
    assert_close(&a, &n, 1e-5, "matmul lhs");
    let f = |t: &Tape, b: Var| {
        let y = t.matmul(t.constant(3, 5, a_vals.clone()), b);
        t.sum(t.tanh(y))
    };
    let (a, n) = leaf_fd(&b_vals, (5, 4), &f);
    assert_close(&a, &n, 1e-5, "matmul rhs");
}

#[test]
fn atan2_is_canonical() {
    let t = Tape::new();
    let y = t.atan2(t.scalar(-0.0), t.scalar(-1.0));
    assert_eq!(t.item(y), std::f64::consts::PI);
}

/// The same mixture log-density composed from elementwise primitives.
fn composed_mixture(t: &Tape, points: &[[f64; 3]], c: Var, lw: Var, lbw: Var) -> Var {
    let sx = t.exp(t.col(lbw, 0));
    let sy = t.exp(t.col(lbw, 1));
    let k = t.exp(t.col(lbw, 2));
    let mut rows = Vec::new();
    for p in points {
        let dx = t.sub(t.scalar(p[0]), t.col(c, 0));
        let dy = t.sub(t.scalar(p[1]), t.col(c, 1));
        let dth = t.sub(t.scalar(p[2]), t.col(c, 2));
        let zx = t.div(dx, sx);
        let zy = t.div(dy, sy);
        let gx = t.sub(t.scale(t.mul(zx, zx), -0.5), t.add_scalar(t.log(sx), 0.5 * crate::kernels::LN_2PI));
        let gy = t.sub(t.scale(t.mul(zy, zy), -0.5), t.add_scalar(t.log(sy), 0.5 * crate::kernels::LN_2PI));
        let vm = t.sub(t.mul(k, t.cos(dth)), t.add_scalar(t.log_bessel_i0(k), crate::kernels::LN_2PI));
        let terms = t.add(t.add(lw, gx), t.add(gy, vm));
        rows.push(t.logsumexp(terms));
    }
    t.concat_cols(&rows)
}

#[test]
fn fused_mixture_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5;
    let centers: Vec<f64> = (0..n)
        .flat_map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)])
        .collect();
    let raw: Vec<f64> = random_values(&mut rng, n, -1.0, 1.0);
    let z = crate::state::logsumexp(&raw);
    let lw: Vec<f64> = raw.iter().map(|v| v - z).collect();
    let lbw = vec![0.7f64.ln(), 1.1f64.ln(), 4.0f64.ln()];
    let points: Vec<[f64; 3]> = (0..4)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)])
        .collect();
    let weights = random_values(&mut rng, 4, -1.0, 1.0);

    let run = |fused: bool| {
        let t = Tape::new();
        let c = t.constant(n, 3, centers.clone());
        let w = t.column(lw.clone());
        let b = t.constant(1, 3, lbw.clone());
        let out = if fused {
            t.mixture_logpdf(&points, c, w, b)
        } else {
            composed_mixture(&t, &points, c, w, b)
        };
        let vals = t.value(out);
        let loss = t.sum(t.mul(out, t.constant(out.rows(), out.cols(), weights.clone())));
        let adj = t.backward(loss).unwrap();
        (vals, adj.wrt(c), adj.wrt(w), adj.wrt(b))
    };
    let (v1, c1, w1, b1) = run(true);
    let (v2, c2, w2, b2) = run(false);
    for (a, b) in v1.iter().zip(&v2) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_close(&c1, &c2, 1e-10, "centers");
    assert_close(&w1, &w2, 1e-10, "log weights");
    assert_close(&b1, &b2, 1e-10, "log bandwidth");
}

#[test]
fn fused_mixture_respects_bandwidth_clamps() {
    let t = Tape::new();
    let c = t.constant(1, 3, vec![0.0, 0.0, 0.0]);
    let w = t.column(vec![0.0]);
    let b = t.constant(1, 3, vec![(1e-5f64).ln(), 0.0, (1e6f64).ln()]);
    let out = t.mixture_logpdf(&[[0.0, 0.0, 0.0]], c, w, b);
    let expected = crate::kernels::gauss_logpdf(0.0, 1e-3).unwrap()
        + crate::kernels::gauss_logpdf(0.0, 1.0).unwrap()
        + crate::kernels::vm_logpdf(0.0, 1e4).unwrap();
    assert!((t.item(out) - expected).abs() < 1e-10);
    let g = t.backward(t.sum(out)).unwrap().wrt(b);
    assert_eq!(g[0], 0.0);
    assert_eq!(g[2], 0.0);
    assert!(g[1] != 0.0);
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 8, 2], &mut rng).unwrap();
    let input = random_values(&mut rng, 30, -1.0, 1.0);
    let run = || {
        let t = Tape::new();
        let y = mlp.forward(&t, &store, t.constant(10, 3, input.clone())).unwrap();
        let l = t.logsumexp(y);
        (t.item(l), t.backward(l).unwrap().param_grads(&store))
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
