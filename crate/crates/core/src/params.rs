//! Uniform access to trainable arrays: every parameter container exposes
//! its matrices by name, and its gradient is a value of the same type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, xavier_init, Matrix, SeededRng};

pub trait Parameters: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix));

    fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m)));
        out
    }

    /// A gradient buffer: same shapes, all zeros.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m| m.data_mut().fill(0.0));
        z
    }

    fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.visit("", &mut |_, m| out.extend_from_slice(m.data()));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, m| {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    /// `self += scale * other`, matched by position.
    fn add_scaled_from(&mut self, other: &Self, scale: f64) {
        let others: Vec<Matrix> = other.named().into_iter().map(|(_, m)| m.clone()).collect();
        let mut idx = 0;
        self.visit_mut("", &mut |_, m| {
            m.add_scaled(&others[idx], scale);
            idx += 1;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x·weight + bias` with weight in×out and bias 1×out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::shape("affine bias", weight.shape(), bias.shape()));
        }
        Ok(Affine { weight, bias })
    }

    pub fn xavier(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        Affine {
            weight: xavier_init(inputs, outputs, rng),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Affine {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Affine {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.weight)?;
        y.add_row_broadcast(&self.bias);
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix, grads: &mut Affine) -> Result<Matrix> {
        grads.weight.add_assign(&matmul_tn(x, grad_out)?);
        grads.bias.add_assign(&grad_out.col_sums());
        matmul_nt(grad_out, &self.weight)
    }
}

impl Parameters for Affine {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
