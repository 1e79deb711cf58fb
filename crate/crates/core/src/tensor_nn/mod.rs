//! Dense 2-D tensors, a tape-based reverse-mode autodiff graph, Adam and the
//! warmup learning-rate schedule.

mod gemm;
pub mod graph;
pub mod optim;

pub use graph::{Graph, Var};
pub use optim::{adam_step, lr_at, AdamState, LrSchedule};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    Shape {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("learning-rate schedule is undefined at step 0")]
    StepZero,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Row-major matrix of 64-bit floats with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor2D {
    pub fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Tensor2D::from_vec(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(name: &str, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows * cols");
        Tensor2D {
            name: name.to_string(),
            rows,
            cols,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }
}

/// A named list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub blocks: Vec<Tensor2D>,
}

impl ParamSet {
    pub fn push(&mut self, t: Tensor2D) -> usize {
        self.blocks.push(t);
        self.blocks.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.blocks.iter_mut().for_each(Tensor2D::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests;
