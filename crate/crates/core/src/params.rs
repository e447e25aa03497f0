//! Named, shaped blocks of trainable values shared by both pipelines, the
//! optimizer and checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet {
    pub blocks: Vec<ParamBlock>,
}

impl ParamSet {
    pub fn new(blocks: Vec<ParamBlock>) -> Self {
        Self { blocks }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock::zeros(b.name.clone(), b.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Flat view over all blocks in order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(|b| b.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.blocks.iter_mut().flat_map(|b| b.data.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same block names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, found {}",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name {
                return Err(Error::Shape(format!(
                    "expected block `{}`, found `{}`",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape || b.data.len() != b.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "block `{}` has shape {:?} with {} values, expected {:?}",
                    b.name,
                    b.shape,
                    b.data.len(),
                    a.shape
                )));
            }
        }
        Ok(())
    }

    /// Name of the first block holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.blocks
            .iter()
            .find(|b| b.data.iter().any(|v| !v.is_finite()))
            .map(|b| b.name.as_str())
    }
}
