use rand::Rng;

use crate::error::{Error, Result};

/// Dense affine map `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub outputs: usize,
    pub inputs: usize,
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

    /// Uniform in `[-1/sqrt(inputs), 1/sqrt(inputs)]` for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = (0..outputs * inputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Linear {
            outputs,
            inputs,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::Dimension(format!(
                "layer expects {} inputs, got {}",
                self.inputs,
                x.len()
            )));
        }
        Ok(self
            .weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    /// Treating `self` as a gradient buffer, adds `grad_out x^T` and `grad_out`.
    pub(crate) fn accumulate(&mut self, x: &[f64], grad_out: &[f64]) {
        for (row, &g) in self.weight.chunks_exact_mut(self.inputs).zip(grad_out) {
            if g != 0.0 {
                row.iter_mut().zip(x).for_each(|(w, v)| *w += g * v);
            }
        }
        self.bias.iter_mut().zip(grad_out).for_each(|(b, g)| *b += g);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(&self.bias)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(&mut self.bias)
    }
}
