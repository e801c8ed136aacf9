//! Bidirectional attention between a speech sequence `x` (n1×d) and a
//! text sequence `y` (n2×d).
//!
//! A single score matrix `a = x·yᵀ` is shared by both directions. Its rows
//! are softmaxed into `w12` (each frame's distribution over graphemes) and
//! the rows of `aᵀ` into `w21` (each grapheme's distribution over frames).
//! The aligned outputs are `x_aligned = w21·x` (n2×d, speech resampled to
//! text length) and `y_aligned = w12·y` (n1×d, text resampled to speech
//! length). There are no key/value projections and no score scaling.

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, row_softmax, row_softmax_backward, Matrix};

#[derive(Clone, Debug)]
pub struct BiamOutput {
    /// Shared score matrix, n1×n2.
    pub a: Matrix,
    /// Row softmax of `a`, n1×n2.
    pub w12: Matrix,
    /// Row softmax of `aᵀ`, n2×n1.
    pub w21: Matrix,
    /// n2×d.
    pub x_aligned: Matrix,
    /// n1×d.
    pub y_aligned: Matrix,
    x: Matrix,
    y: Matrix,
}

impl BiamOutput {
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }
}

pub fn biam_forward(x: &Matrix, y: &Matrix) -> Result<BiamOutput> {
    if x.cols() != y.cols() {
        return Err(Error::shape("biam_forward", x.shape(), y.shape()));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::InvalidInput(format!(
            "biam_forward needs nonempty sequences, got {} speech and {} text rows",
            x.rows(),
            y.rows()
        )));
    }
    let a = matmul_nt(x, y)?;
    let w12 = row_softmax(&a);
    let w21 = row_softmax(&a.transpose());
    let x_aligned = matmul(&w21, x)?;
    let y_aligned = matmul(&w12, y)?;
    Ok(BiamOutput {
        a,
        w12,
        w21,
        x_aligned,
        y_aligned,
        x: x.clone(),
        y: y.clone(),
    })
}

/// Reverse-mode gradients of both aligned outputs with respect to both
/// inputs. `x` receives gradient as the value matrix of `x_aligned` and
/// through the shared scores; likewise for `y`.
pub fn biam_backward(
    out: &BiamOutput,
    grad_x_aligned: &Matrix,
    grad_y_aligned: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if grad_x_aligned.shape() != out.x_aligned.shape() {
        return Err(Error::shape(
            "biam_backward",
            grad_x_aligned.shape(),
            out.x_aligned.shape(),
        ));
    }
    if grad_y_aligned.shape() != out.y_aligned.shape() {
        return Err(Error::shape(
            "biam_backward",
            grad_y_aligned.shape(),
            out.y_aligned.shape(),
        ));
    }
    let (x, y) = (&out.x, &out.y);

    // Value paths.
    let mut grad_x = matmul_tn(&out.w21, grad_x_aligned)?;
    let mut grad_y = matmul_tn(&out.w12, grad_y_aligned)?;

    // Through the softmaxes back to the shared scores.
    let grad_w21 = matmul_nt(grad_x_aligned, x)?;
    let grad_w12 = matmul_nt(grad_y_aligned, y)?;
    let mut grad_a = row_softmax_backward(&out.w12, &grad_w12);
    grad_a.add_assign(&row_softmax_backward(&out.w21, &grad_w21).transpose());

    // a = x·yᵀ.
    grad_x.add_assign(&matmul(&grad_a, y)?);
    grad_y.add_assign(&matmul_tn(&grad_a, x)?);
    Ok((grad_x, grad_y))
}

/// Mean attention mass of `w12` (n1×n2) inside the diagonal band
/// `|pos(j, n2) − pos(i, n1)| ≤ band`, where `pos(k, n) = (k + ½)/n` is the
/// normalized center of cell `k`. Returns a value in `[0, 1]`.
pub fn monotonicity_score(w12: &Matrix, band: f64) -> f64 {
    let (n1, n2) = w12.shape();
    if n1 == 0 || n2 == 0 {
        return 0.0;
    }
    let center = |k: usize, n: usize| (k as f64 + 0.5) / n as f64;
    let mut mass = 0.0;
    for i in 0..n1 {
        let pi = center(i, n1);
        for j in 0..n2 {
            // Tiny slack so cells exactly on the band edge count in.
            if (center(j, n2) - pi).abs() <= band + 1e-12 {
                mass += w12[(i, j)];
            }
        }
    }
    mass / n1 as f64
}
