use rand::Rng;

use crate::autodiff::params::{BlockId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
struct Layer {
    w: BlockId,
    b: BlockId,
    slope: Option<BlockId>,
    inp: usize,
    out: usize,
}

/// Fully connected network with PReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// Registers `{prefix}.l{k}.{w,b,a}` blocks for layer sizes
    /// `sizes[0] → … → sizes[last]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("bad MLP layer sizes {sizes:?}")));
        }
        let mut layers = Vec::new();
        for k in 0..sizes.len() - 1 {
            let (inp, out) = (sizes[k], sizes[k + 1]);
            let bound = (1.0 / inp as f64).sqrt();
            let w: Vec<f64> = (0..inp * out).map(|_| rng.random_range(-bound..bound)).collect();
            let w = store.add(&format!("{prefix}.l{k}.w"), inp, out, w)?;
            let b = store.add(&format!("{prefix}.l{k}.b"), 1, out, vec![0.0; out])?;
            let slope = if k + 2 < sizes.len() {
                Some(store.add(&format!("{prefix}.l{k}.a"), 1, 1, vec![PRELU_INIT])?)
            } else {
                None
            };
            layers.push(Layer { w, b, slope, inp, out });
        }
        Ok(Mlp { layers })
    }

    /// Rebinds to an existing store that already holds this layout.
    pub fn bind(store: &ParamStore, prefix: &str, sizes: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0..sizes.len().saturating_sub(1) {
            let w = store.id(&format!("{prefix}.l{k}.w"))?;
            let blk = store.block(w);
            if (blk.rows, blk.cols) != (sizes[k], sizes[k + 1]) {
                return Err(Error::ShapeMismatch(format!(
                    "{prefix}.l{k}.w is {}x{}, expected {}x{}",
                    blk.rows,
                    blk.cols,
                    sizes[k],
                    sizes[k + 1]
                )));
            }
            let b = store.id(&format!("{prefix}.l{k}.b"))?;
            let slope = if k + 2 < sizes.len() {
                Some(store.id(&format!("{prefix}.l{k}.a"))?)
            } else {
                None
            };
            layers.push(Layer {
                w,
                b,
                slope,
                inp: sizes[k],
                out: sizes[k + 1],
            });
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inp
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out
    }

    /// Batched forward pass: `x` is `B×input_dim`, the result `B×output_dim`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "MLP expects {} input features, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            let w = tape.param(store, layer.w);
            let b = tape.param(store, layer.b);
            h = tape.add(tape.matmul(h, w), b);
            if let Some(a) = layer.slope {
                h = tape.prelu(h, tape.param(store, a));
            }
        }
        Ok(h)
    }
}
