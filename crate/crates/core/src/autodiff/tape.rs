//! Array-valued reverse-mode tape.
//!
//! Each node holds a dense row-major matrix. Nodes are appended in creation
//! order, so the node list is already topologically sorted and the backward
//! pass is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::params::{BlockId, ParamStore};
use crate::error::{Error, Result};
use crate::kernels::{bessel_i1_i0_ratio, log_bessel_i0_unchecked, log_bessel_i0e, KAPPA_CAP, LN_2PI, SIGMA_FLOOR};
use crate::state::Angle;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Param { offset: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Affine { x: usize, a: f64 },
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Atan2(usize, usize),
    Wrap(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    LogBesselI0(usize),
    Prelu { x: usize, slope: usize },
    MatMul(usize, usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    LseAll(usize),
    LseRows(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, index: Vec<usize> },
    Mixture(Box<MixtureOp>),
}

#[derive(Debug)]
struct MixtureOp {
    points: Vec<[f64; 3]>,
    centers: usize,
    log_w: usize,
    log_bw: usize,
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

/// Append-only computation graph. Ops take `&self`; the node list lives in a
/// `RefCell`, so a tape is single-threaded but cheap to pass around.
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[inline]
fn bcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Visits `(out, ia, ib)` flat indices of a broadcast binary op.
#[inline]
fn for_each_bcast(
    (r, c): (usize, usize),
    (ar, ac): (usize, usize),
    (br, bc): (usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i };
        let bi = if br == 1 { 0 } else { i };
        for j in 0..c {
            let aj = if ac == 1 { 0 } else { j };
            let bj = if bc == 1 { 0 } else { j };
            f(i * c + j, ai * ac + aj, bi * bc + bj);
        }
    }
}

fn lse(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        inner.nodes.push(Node { value, rows, cols, op });
        Var {
            idx,
            tape: self.id,
            rows,
            cols,
        }
    }

    #[inline]
    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.idx < self.len()
    }

    /// Constant (gradient-free) leaf.
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(values.len(), rows * cols, "constant: {} values for a {rows}x{cols} node", values.len());
        self.push(values, rows, cols, Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(1, 1, vec![v])
    }

    pub fn column(&self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.constant(n, 1, values)
    }

    pub fn full(&self, rows: usize, cols: usize, v: f64) -> Var {
        self.constant(rows, cols, vec![v; rows * cols])
    }

    /// Leaf bound to a parameter block. Repeated calls for the same block
    /// return the same node.
    pub fn param(&self, store: &ParamStore, id: BlockId) -> Var {
        if let Some(v) = self.inner.borrow().params.get(&id.0) {
            return *v;
        }
        let block = store.block(id);
        let v = self.push(
            store.block_values(id).to_vec(),
            block.rows,
            block.cols,
            Op::Param { offset: block.offset },
        );
        self.inner.borrow_mut().params.insert(id.0, v);
        v
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.check(v);
        self.inner.borrow().nodes[v.idx].value.clone()
    }

    /// First element of a node's value.
    pub fn item(&self, v: Var) -> f64 {
        self.check(v);
        self.inner.borrow().nodes[v.idx].value[0]
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&[f64]) -> T) -> T {
        self.check(v);
        f(&self.inner.borrow().nodes[v.idx].value)
    }

    /// Same value, no gradient.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push(value, v.rows, v.cols, Op::Const)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Var {
        self.check(a);
        self.check(b);
        let (r, c) = match (bcast_dim(a.rows, b.rows), bcast_dim(a.cols, b.cols)) {
            (Some(r), Some(c)) => (r, c),
            _ => panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        };
        let value = {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.idx].value;
            let bv = &inner.nodes[b.idx].value;
            if a.shape() == b.shape() {
                av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
            } else {
                let mut out = vec![0.0; r * c];
                for_each_bcast((r, c), a.shape(), b.shape(), |k, ia, ib| out[k] = f(av[ia], bv[ib]));
                out
            }
        };
        self.push(value, r, c, op(a.idx, b.idx))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        self.check(a);
        let value = self.with_value(a, |v| v.iter().map(|x| f(*x)).collect());
        self.push(value, a.rows, a.cols, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a.idx))
    }

    /// `a·x + b` for constants `a`, `b`.
    pub fn affine(&self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, |v| a * v + b, Op::Affine { x: x.idx, a })
    }

    pub fn scale(&self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn add_scalar(&self, x: Var, b: f64) -> Var {
        self.affine(x, 1.0, b)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.idx))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.idx))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.idx))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.idx))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.idx))
    }

    pub fn sin(&self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.idx))
    }

    pub fn cos(&self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.idx))
    }

    /// Elementwise `atan2(u, v)` mapped to (−π, π].
    pub fn atan2(&self, u: Var, v: Var) -> Var {
        assert_eq!(u.shape(), v.shape(), "atan2 operands must have equal shapes");
        self.binary(u, v, canonical_atan2, Op::Atan2)
    }

    /// Wraps to (−π, π]; the derivative is taken as 1 everywhere.
    pub fn wrap_angle(&self, a: Var) -> Var {
        self.unary(a, |x| Angle::wrap_finite(x).radians(), Op::Wrap(a.idx))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a.idx, lo, hi })
    }

    pub fn log_bessel_i0(&self, a: Var) -> Var {
        self.unary(a, log_bessel_i0_unchecked, Op::LogBesselI0(a.idx))
    }

    /// PReLU with a broadcastable slope (scalar or one per column).
    pub fn prelu(&self, x: Var, slope: Var) -> Var {
        self.check(x);
        self.check(slope);
        assert!(
            slope.rows == 1 && (slope.cols == 1 || slope.cols == x.cols),
            "prelu slope must be 1x1 or 1x{}",
            x.cols
        );
        let value = {
            let inner = self.inner.borrow();
            let xv = &inner.nodes[x.idx].value;
            let av = &inner.nodes[slope.idx].value;
            let mut out = vec![0.0; xv.len()];
            for_each_bcast(x.shape(), x.shape(), slope.shape(), |k, ix, ia| {
                let v = xv[ix];
                out[k] = if v > 0.0 { v } else { av[ia] * v };
            });
            out
        };
        self.push(value, x.rows, x.cols, Op::Prelu { x: x.idx, slope: slope.idx })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        assert_eq!(a.cols, b.rows, "matmul {:?} x {:?}", a.shape(), b.shape());
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        {
            let inner = self.inner.borrow();
            let av = &inner.nodes[a.idx].value;
            let bv = &inner.nodes[b.idx].value;
            gemm(m, k, n, av, (k, 1), bv, (n, 1), &mut out, false);
        }
        self.push(out, m, n, Op::MatMul(a.idx, b.idx))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.with_value(a, |v| v.iter().sum());
        self.push(vec![s], 1, 1, Op::SumAll(a.idx))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = self.sum(a);
        self.scale(s, 1.0 / a.len() as f64)
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = self.with_value(a, |v| v.chunks(a.cols).map(|r| r.iter().sum()).collect());
        self.push(value, a.rows, 1, Op::SumRows(a.idx))
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.with_value(a, |v| {
            let mut out = vec![0.0; a.cols];
            for row in v.chunks(a.cols) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            out
        });
        self.push(value, 1, a.cols, Op::SumCols(a.idx))
    }

    pub fn logsumexp(&self, a: Var) -> Var {
        let s = self.with_value(a, lse);
        self.push(vec![s], 1, 1, Op::LseAll(a.idx))
    }

    /// Row-wise log-sum-exp, `r×c → r×1`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let value = self.with_value(a, |v| v.chunks(a.cols).map(lse).collect());
        self.push(value, a.rows, 1, Op::LseRows(a.idx))
    }

    /// `a − logsumexp(a)`: normalizes a column of log-weights.
    pub fn log_normalize(&self, a: Var) -> Var {
        let z = self.logsumexp(a);
        self.sub(a, z)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols, "slice_cols out of range");
        let value = self.with_value(a, |v| {
            v.chunks(a.cols).flat_map(|r| r[start..start + len].iter().copied()).collect()
        });
        self.push(value, a.rows, len, Op::SliceCols { x: a.idx, start })
    }

    pub fn col(&self, a: Var, j: usize) -> Var {
        self.slice_cols(a, j, 1)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].rows;
        for p in parts {
            self.check(*p);
            assert_eq!(p.rows, rows, "concat_cols row mismatch");
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        {
            let inner = self.inner.borrow();
            for i in 0..rows {
                for p in parts {
                    let v = &inner.nodes[p.idx].value;
                    out.extend_from_slice(&v[i * p.cols..(i + 1) * p.cols]);
                }
            }
        }
        self.push(out, rows, cols, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Var {
        let value = self.with_value(a, |v| {
            let mut out = Vec::with_capacity(index.len() * a.cols);
            for &i in index {
                assert!(i < a.rows, "gather index {i} out of range for {} rows", a.rows);
                out.extend_from_slice(&v[i * a.cols..(i + 1) * a.cols]);
            }
            out
        });
        self.push(
            value,
            index.len(),
            a.cols,
            Op::GatherRows {
                x: a.idx,
                index: index.to_vec(),
            },
        )
    }

    /// Log-density of a product-kernel mixture at constant points.
    ///
    /// `centers` is `N×3` (x, y, θ), `log_w` is `N×1` normalized
    /// log-weights, `log_bw` is `1×3` holding `(log σx, log σy, log κ)`.
    /// Returns `M×1`. Bandwidths are clamped to `σ ≥ 1e-3`, `κ ≤ 1e4`.
    pub fn mixture_logpdf(&self, points: &[[f64; 3]], centers: Var, log_w: Var, log_bw: Var) -> Var {
        self.check(centers);
        self.check(log_w);
        self.check(log_bw);
        assert_eq!(centers.cols, 3, "mixture centers must be Nx3");
        assert_eq!(log_w.shape(), (centers.rows, 1), "mixture log-weights must be Nx1");
        assert_eq!(log_bw.shape(), (1, 3), "mixture bandwidth must be 1x3");
        let value = {
            let inner = self.inner.borrow();
            let kern = MixKernel::new(
                &inner.nodes[centers.idx].value,
                &inner.nodes[log_w.idx].value,
                &inner.nodes[log_bw.idx].value,
            );
            let mut scratch = vec![0.0; centers.rows];
            points.iter().map(|p| kern.logpdf(p, &mut scratch)).collect()
        };
        self.push(
            value,
            points.len(),
            1,
            Op::Mixture(Box::new(MixtureOp {
                points: points.to_vec(),
                centers: centers.idx,
                log_w: log_w.idx,
                log_bw: log_bw.idx,
            })),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Adjoints> {
        self.backward_impl(loss, false)
    }

    /// Like [`Tape::backward`] but keeps the adjoint of every node, not just
    /// the leaves. Uses more memory; meant for inspecting gradient flow.
    pub fn backward_retaining(&self, loss: Var) -> Result<Adjoints> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&self, loss: Var, retain: bool) -> Result<Adjoints> {
        if !self.owns(loss) {
            return Err(Error::NotOnTape);
        }
        if loss.len() != 1 {
            return Err(Error::NonScalarLoss {
                rows: loss.rows,
                cols: loss.cols,
            });
        }
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> &'a mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()])
        }

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            let keep = retain || matches!(node.op, Op::Const | Op::Param { .. });
            let g = match if keep { grads[idx].clone() } else { grads[idx].take() } {
                Some(g) => g,
                None => continue,
            };
            let out = &node.value;
            let shape = (node.rows, node.cols);
            match &node.op {
                Op::Const | Op::Param { .. } => {}
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (sa, sb) = (nodes[*a].shape(), nodes[*b].shape());
                    {
                        let ga = acc(&mut grads, nodes, *a);
                        for_each_bcast(shape, sa, sb, |k, ia, _| ga[ia] += g[k]);
                    }
                    let gb = acc(&mut grads, nodes, *b);
                    for_each_bcast(shape, sa, sb, |k, _, ib| gb[ib] += sign * g[k]);
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let div = matches!(node.op, Op::Div(..));
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (sa, sb) = (nodes[*a].shape(), nodes[*b].shape());
                    {
                        let ga = acc(&mut grads, nodes, *a);
                        for_each_bcast(shape, sa, sb, |k, ia, ib| {
                            ga[ia] += if div { g[k] / bv[ib] } else { g[k] * bv[ib] };
                        });
                    }
                    let gb = acc(&mut grads, nodes, *b);
                    for_each_bcast(shape, sa, sb, |k, ia, ib| {
                        gb[ib] += if div {
                            -g[k] * av[ia] / (bv[ib] * bv[ib])
                        } else {
                            g[k] * av[ia]
                        };
                    });
                }
                Op::Neg(a) => {
                    let ga = acc(&mut grads, nodes, *a);
                    for (x, gk) in ga.iter_mut().zip(&g) {
                        *x -= gk;
                    }
                }
                Op::Affine { x, a } => {
                    let gx = acc(&mut grads, nodes, *x);
                    for (v, gk) in gx.iter_mut().zip(&g) {
                        *v += a * gk;
                    }
                }
                Op::Exp(a) => unary_back(&mut grads, nodes, *a, &g, |_, y| y, out),
                Op::Log(a) => unary_back(&mut grads, nodes, *a, &g, |x, _| 1.0 / x, out),
                Op::Sqrt(a) => unary_back(&mut grads, nodes, *a, &g, |_, y| 0.5 / y, out),
                Op::Tanh(a) => unary_back(&mut grads, nodes, *a, &g, |_, y| 1.0 - y * y, out),
                Op::Sigmoid(a) => unary_back(&mut grads, nodes, *a, &g, |_, y| y * (1.0 - y), out),
                Op::Sin(a) => unary_back(&mut grads, nodes, *a, &g, |x, _| x.cos(), out),
                Op::Cos(a) => unary_back(&mut grads, nodes, *a, &g, |x, _| -x.sin(), out),
                Op::Wrap(a) => unary_back(&mut grads, nodes, *a, &g, |_, _| 1.0, out),
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    unary_back(&mut grads, nodes, *x, &g, |v, _| if v >= lo && v <= hi { 1.0 } else { 0.0 }, out)
                }
                Op::LogBesselI0(a) => unary_back(&mut grads, nodes, *a, &g, |x, _| bessel_i1_i0_ratio(x), out),
                Op::Atan2(u, v) => {
                    let (uv, vv) = (&nodes[*u].value, &nodes[*v].value);
                    let r2: Vec<f64> = uv.iter().zip(vv).map(|(a, b)| (a * a + b * b).max(1e-300)).collect();
                    {
                        let gu = acc(&mut grads, nodes, *u);
                        for k in 0..g.len() {
                            gu[k] += g[k] * vv[k] / r2[k];
                        }
                    }
                    let gv = acc(&mut grads, nodes, *v);
                    for k in 0..g.len() {
                        gv[k] -= g[k] * uv[k] / r2[k];
                    }
                }
                Op::Prelu { x, slope } => {
                    let xv = &nodes[*x].value;
                    let av = &nodes[*slope].value;
                    let sa = nodes[*slope].shape();
                    {
                        let gx = acc(&mut grads, nodes, *x);
                        for_each_bcast(shape, shape, sa, |k, ix, ia| {
                            gx[ix] += if xv[ix] > 0.0 { g[k] } else { av[ia] * g[k] };
                        });
                    }
                    let gs = acc(&mut grads, nodes, *slope);
                    for_each_bcast(shape, shape, sa, |k, ix, ia| {
                        if xv[ix] <= 0.0 {
                            gs[ia] += g[k] * xv[ix];
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, n) = shape;
                    let k = nodes[*a].cols;
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    // dA = dC·Bᵀ, dB = Aᵀ·dC
                    {
                        let ga = acc(&mut grads, nodes, *a);
                        gemm(m, n, k, &g, (n, 1), bv, (1, n), ga, true);
                    }
                    let gb = acc(&mut grads, nodes, *b);
                    gemm(k, m, n, av, (1, k), &g, (n, 1), gb, true);
                }
                Op::SumAll(a) => {
                    let ga = acc(&mut grads, nodes, *a);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
                Op::SumRows(a) => {
                    let c = nodes[*a].cols;
                    let ga = acc(&mut grads, nodes, *a);
                    for (i, row) in ga.chunks_mut(c).enumerate() {
                        for x in row {
                            *x += g[i];
                        }
                    }
                }
                Op::SumCols(a) => {
                    let c = nodes[*a].cols;
                    let ga = acc(&mut grads, nodes, *a);
                    for row in ga.chunks_mut(c) {
                        for (x, gk) in row.iter_mut().zip(&g) {
                            *x += gk;
                        }
                    }
                }
                Op::LseAll(a) => {
                    let av = &nodes[*a].value;
                    let s = out[0];
                    let ga = acc(&mut grads, nodes, *a);
                    if s.is_finite() {
                        for (x, v) in ga.iter_mut().zip(av) {
                            *x += g[0] * (v - s).exp();
                        }
                    }
                }
                Op::LseRows(a) => {
                    let c = nodes[*a].cols;
                    let av = &nodes[*a].value;
                    let ga = acc(&mut grads, nodes, *a);
                    for (i, (grow, arow)) in ga.chunks_mut(c).zip(av.chunks(c)).enumerate() {
                        if out[i].is_finite() {
                            for (x, v) in grow.iter_mut().zip(arow) {
                                *x += g[i] * (v - out[i]).exp();
                            }
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[*x].cols;
                    let w = node.cols;
                    let gx = acc(&mut grads, nodes, *x);
                    for (i, grow) in g.chunks(w).enumerate() {
                        for (j, gk) in grow.iter().enumerate() {
                            gx[i * c + start + j] += gk;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let mut off = 0;
                    for &p in parts {
                        let pc = nodes[p].cols;
                        let gp = acc(&mut grads, nodes, p);
                        for i in 0..node.rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * total + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::GatherRows { x, index } => {
                    let c = node.cols;
                    let gx = acc(&mut grads, nodes, *x);
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                }
                Op::Mixture(m) => {
                    let kern = MixKernel::new(
                        &nodes[m.centers].value,
                        &nodes[m.log_w].value,
                        &nodes[m.log_bw].value,
                    );
                    let n = nodes[m.centers].rows;
                    let mut gc = vec![0.0; 3 * n];
                    let mut gw = vec![0.0; n];
                    let mut gbw = [0.0; 3];
                    let mut scratch = vec![0.0; n];
                    for (j, p) in m.points.iter().enumerate() {
                        if g[j] != 0.0 && out[j].is_finite() {
                            kern.backward(p, out[j], g[j], &mut scratch, &mut gc, &mut gw, &mut gbw);
                        }
                    }
                    add_into(acc(&mut grads, nodes, m.centers), &gc);
                    add_into(acc(&mut grads, nodes, m.log_w), &gw);
                    add_into(acc(&mut grads, nodes, m.log_bw), &gbw);
                }
            }
            if keep {
                grads[idx] = Some(g);
            }
        }
        let params = inner
            .params
            .values()
            .map(|v| match nodes[v.idx].op {
                Op::Param { offset } => (v.idx, offset),
                _ => unreachable!(),
            })
            .collect();
        Ok(Adjoints {
            tape: self.id,
            grads,
            params,
        })
    }
}

impl Node {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn unary_back(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    g: &[f64],
    d: impl Fn(f64, f64) -> f64,
    out: &[f64],
) {
    let av = &nodes[a].value;
    let ga = grads[a].get_or_insert_with(|| vec![0.0; av.len()]);
    for k in 0..g.len() {
        ga[k] += g[k] * d(av[k], out[k]);
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn canonical_atan2(u: f64, v: f64) -> f64 {
    let a = u.atan2(v);
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// `C (+)= A·B` with explicit (row, col) strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Value-only evaluation through the same arithmetic as the taped op, so a
/// detached copy reproduces the taped value bit-for-bit.
pub(crate) fn mixture_logpdf_values(points: &[[f64; 3]], centers: &[f64], log_w: &[f64], log_bw: &[f64; 3]) -> Vec<f64> {
    let kern = MixKernel::new(centers, log_w, log_bw);
    let mut scratch = vec![0.0; log_w.len()];
    points.iter().map(|p| kern.logpdf(p, &mut scratch)).collect()
}

/// Shared forward/backward kernel for [`Tape::mixture_logpdf`].
struct MixKernel<'a> {
    centers: &'a [f64],
    log_w: &'a [f64],
    inv_var: [f64; 2],
    kappa: f64,
    konst: f64,
    // chain factors d(σ or κ)/d(log ·); zero when clamped
    dlog: [f64; 3],
    trig: Vec<(f64, f64)>,
}

impl<'a> MixKernel<'a> {
    fn new(centers: &'a [f64], log_w: &'a [f64], log_bw: &[f64]) -> Self {
        let sx = log_bw[0].exp();
        let sy = log_bw[1].exp();
        let k = log_bw[2].exp();
        let (sx, cx) = if sx < SIGMA_FLOOR { (SIGMA_FLOOR, 0.0) } else { (sx, 1.0) };
        let (sy, cy) = if sy < SIGMA_FLOOR { (SIGMA_FLOOR, 0.0) } else { (sy, 1.0) };
        let (kappa, ck) = if k > KAPPA_CAP { (KAPPA_CAP, 0.0) } else { (k, 1.0) };
        let konst = -sx.ln() - sy.ln() - 2.0 * LN_2PI - log_bessel_i0e(kappa);
        let trig = centers.chunks(3).map(|c| c[2].sin_cos()).collect();
        MixKernel {
            centers,
            log_w,
            inv_var: [1.0 / (sx * sx), 1.0 / (sy * sy)],
            kappa,
            konst,
            dlog: [cx, cy, ck],
            trig,
        }
    }

    #[inline]
    fn terms(&self, p: &[f64; 3], out: &mut [f64]) {
        let (ps, pc) = p[2].sin_cos();
        for (i, o) in out.iter_mut().enumerate() {
            let c = &self.centers[3 * i..3 * i + 3];
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let (cs, cc) = self.trig[i];
            let cosd = pc * cc + ps * cs;
            *o = self.log_w[i] - 0.5 * (dx * dx * self.inv_var[0] + dy * dy * self.inv_var[1])
                + self.kappa * (cosd - 1.0)
                + self.konst;
        }
    }

    fn logpdf(&self, p: &[f64; 3], scratch: &mut [f64]) -> f64 {
        self.terms(p, scratch);
        lse(scratch)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        p: &[f64; 3],
        out: f64,
        g: f64,
        scratch: &mut [f64],
        gc: &mut [f64],
        gw: &mut [f64],
        gbw: &mut [f64; 3],
    ) {
        self.terms(p, scratch);
        let (ps, pc) = p[2].sin_cos();
        let (mut sx, mut sy, mut sk) = (0.0, 0.0, 0.0);
        for i in 0..scratch.len() {
            let r = g * (scratch[i] - out).exp();
            if r == 0.0 {
                continue;
            }
            let c = &self.centers[3 * i..3 * i + 3];
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let (cs, cc) = self.trig[i];
            let cosd = pc * cc + ps * cs;
            let sind = ps * cc - pc * cs;
            gw[i] += r;
            gc[3 * i] += r * dx * self.inv_var[0];
            gc[3 * i + 1] += r * dy * self.inv_var[1];
            gc[3 * i + 2] += r * self.kappa * sind;
            sx += r * (dx * dx * self.inv_var[0] - 1.0);
            sy += r * (dy * dy * self.inv_var[1] - 1.0);
            sk += r * cosd;
        }
        let ratio = bessel_i1_i0_ratio(self.kappa);
        gbw[0] += self.dlog[0] * sx;
        gbw[1] += self.dlog[1] * sy;
        gbw[2] += self.dlog[2] * self.kappa * (sk - ratio * g);
    }
}

/// Adjoints produced by [`Tape::backward`]. Only leaves keep their gradients
/// unless [`Tape::backward_retaining`] was used.
pub struct Adjoints {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Gradient with respect to a retained node (zeros if it did not
    /// influence the loss).
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        assert_eq!(v.tape, self.tape, "adjoints belong to another tape");
        self.grads
            .get(v.idx)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; v.len()])
    }

    /// Accumulates parameter gradients into a flat vector aligned with the store.
    pub fn accumulate_params(&self, out: &mut [f64]) {
        for &(idx, offset) in &self.params {
            if let Some(Some(g)) = self.grads.get(idx) {
                add_into(&mut out[offset..offset + g.len()], g);
            }
        }
    }

    pub fn param_grads(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = vec![0.0; store.len()];
        self.accumulate_params(&mut out);
        out
    }
}
