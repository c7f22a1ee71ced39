//! Dense affine layer `y = W x + b` with hand-written gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub outputs: usize,
    pub inputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Linear {
            outputs,
            inputs,
            weight: vec![0.0; outputs * inputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.inputs {
            return Err(Error::DimensionMismatch {
                expected: self.inputs,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weight[r * self.inputs..(r + 1) * self.inputs]
    }

    /// Single output `W[r] . x + b[r]`. `x` must have `inputs` entries.
    #[inline]
    pub fn output(&self, r: usize, x: &[f64]) -> f64 {
        self.row(r).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs).map(|r| self.output(r, x)).collect()
    }

    /// Appends zero-initialised output rows.
    pub fn add_rows(&mut self, n: usize) {
        self.weight.extend(std::iter::repeat_n(0.0, n * self.inputs));
        self.bias.extend(std::iter::repeat_n(0.0, n));
        self.outputs += n;
    }

    /// `self -= scale * grad`. A zero scale leaves the parameters untouched.
    pub fn descend(&mut self, grad: &Linear, scale: f64) {
        if scale == 0.0 {
            return;
        }
        for (w, g) in self.weight.iter_mut().zip(&grad.weight) {
            *w -= scale * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= scale * g;
        }
    }

    /// Accumulates `coeff * d(output r)/d(params)` into `self`, i.e. adds
    /// `coeff * x` to row `r` and `coeff` to bias `r`.
    #[inline]
    pub fn accumulate(&mut self, r: usize, coeff: f64, x: &[f64]) {
        if coeff == 0.0 {
            return;
        }
        let row = &mut self.weight[r * self.inputs..(r + 1) * self.inputs];
        for (w, v) in row.iter_mut().zip(x) {
            *w += coeff * v;
        }
        self.bias[r] += coeff;
    }

    /// Flat view over every parameter, weights first.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.iter().chain(self.bias.iter()).copied()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weight.len();
        if i < nw {
            &mut self.weight[i]
        } else {
            &mut self.bias[i - nw]
        }
    }
}
