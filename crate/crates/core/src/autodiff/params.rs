//! Named flat parameter storage and JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT: &str = "diffsmc-params";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All trainable values in one contiguous vector, addressed by block name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    blocks: Vec<Block>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointBlock {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    blocks: Vec<CheckpointBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Result<BlockId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter block {name:?}")));
        }
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "block {name:?}: {} values for {rows}x{cols}",
                values.len()
            )));
        }
        let id = self.blocks.len();
        self.blocks.push(Block {
            name: name.to_string(),
            offset: self.values.len(),
            rows,
            cols,
        });
        self.values.extend(values);
        self.index.insert(name.to_string(), id);
        Ok(BlockId(id))
    }

    pub fn id(&self, name: &str) -> Result<BlockId> {
        self.index
            .get(name)
            .map(|&i| BlockId(i))
            .ok_or_else(|| Error::UnknownBlock(name.to_string()))
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block_values(&self, id: BlockId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.values[b.offset..b.offset + b.len()]
    }

    pub fn block_values_mut(&mut self, id: BlockId) -> &mut [f64] {
        let b = &self.blocks[id.0];
        let (o, n) = (b.offset, b.len());
        &mut self.values[o..o + n]
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        Ok(self.block_values(self.id(name)?))
    }

    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let id = self.id(name)?;
        let dst = self.block_values_mut(id);
        if dst.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "block {name:?} holds {} values, got {}",
                dst.len(),
                values.len()
            )));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    /// Per-value mask, true for every block whose name starts with one of `prefixes`.
    pub fn mask(&self, prefixes: &[&str]) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for b in &self.blocks {
            if prefixes.iter().any(|p| b.name.starts_with(p)) {
                mask[b.offset..b.offset + b.len()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Values of all blocks matching `prefixes`, in block order.
    pub fn snapshot(&self, prefixes: &[&str]) -> Vec<f64> {
        let mask = self.mask(prefixes);
        self.values
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect()
    }

    /// Copies every block of `other` that exists here with the same shape.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for b in &other.blocks {
            if let Ok(id) = self.id(&b.name) {
                let mine = self.block(id);
                if mine.rows == b.rows && mine.cols == b.cols {
                    let src = &other.values[b.offset..b.offset + b.len()];
                    self.block_values_mut(id).copy_from_slice(src);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            blocks: self
                .blocks
                .iter()
                .map(|b| CheckpointBlock {
                    name: b.name.clone(),
                    rows: b.rows,
                    cols: b.cols,
                    values: self.values[b.offset..b.offset + b.len()].to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&ck).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format {:?}", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut store = ParamStore::new();
        for b in ck.blocks {
            store
                .add(&b.name, b.rows, b.cols, b.values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamStore::from_json(&text)
    }

    /// Replaces values from a checkpoint; every block here must be present there.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for b in self.blocks.clone() {
            let theirs = other.id(&b.name)?;
            let tb = other.block(theirs);
            if (tb.rows, tb.cols) != (b.rows, b.cols) {
                return Err(Error::Checkpoint(format!(
                    "block {:?} is {}x{} in the checkpoint, expected {}x{}",
                    b.name, tb.rows, tb.cols, b.rows, b.cols
                )));
            }
            self.values[b.offset..b.offset + b.len()].copy_from_slice(other.block_values(theirs));
        }
        Ok(())
    }
}
