use rand::Rng;

use super::matrix::{gemm, View};
use super::{join_name, Matrix, Module};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x W^T + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

impl Dense {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot_uniform(output, input, input, output, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Multiply-accumulates per input row.
    pub fn macs_per_row(&self) -> usize {
        self.input_dim() * self.output_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("dense_forward", self.input_dim(), x.cols()));
        }
        self.partial_forward(x, 0, true)
    }

    /// Applies the weight columns `offset..offset + x.cols()` only, so a
    /// layer over a concatenated input can be evaluated block by block.
    pub fn partial_forward(&self, x: &Matrix, offset: usize, with_bias: bool) -> Result<Matrix> {
        let k = x.cols();
        if offset + k > self.input_dim() {
            return Err(Error::shape(
                "dense_partial_forward",
                format!("<= {} input columns", self.input_dim() - offset.min(self.input_dim())),
                k,
            ));
        }
        let out = self.output_dim();
        let mut y = Matrix::zeros(x.rows(), out);
        let w = View {
            data: self.weight.data(),
            offset,
            rs: 1,
            cs: self.input_dim(),
        };
        gemm(x.rows(), k, out, 1.0, x.view(), w, 0.0, y.data_mut(), 0, out);
        if with_bias {
            y.add_row_broadcast(self.bias.data());
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix, grads: &mut Dense) -> Result<Matrix> {
        self.partial_backward(x, 0, true, grad_out, grads, true)
            .map(|g| g.expect("input gradient requested"))
    }

    pub fn partial_backward(
        &self,
        x: &Matrix,
        offset: usize,
        with_bias: bool,
        grad_out: &Matrix,
        grads: &mut Dense,
        need_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        let out = self.output_dim();
        let inp = self.input_dim();
        let k = x.cols();
        if grad_out.cols() != out || grad_out.rows() != x.rows() || offset + k > inp {
            return Err(Error::shape(
                "dense_backward",
                format!("grad {}x{}", x.rows(), out),
                format!("{:?}", grad_out.shape()),
            ));
        }
        // dW[:, offset..] += grad_out^T x
        gemm(
            out,
            x.rows(),
            k,
            1.0,
            grad_out.view_t(),
            x.view(),
            1.0,
            grads.weight.data_mut(),
            offset,
            inp,
        );
        if with_bias {
            for (b, s) in grads.bias.data_mut().iter_mut().zip(grad_out.col_sums()) {
                *b += s;
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut gx = Matrix::zeros(x.rows(), k);
        let w = View {
            data: self.weight.data(),
            offset,
            rs: inp,
            cs: 1,
        };
        gemm(x.rows(), out, k, 1.0, grad_out.view(), w, 0.0, gx.data_mut(), 0, k);
        Ok(Some(gx))
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn state(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        vec![
            (join_name(prefix, "weight"), &self.weight),
            (join_name(prefix, "bias"), &self.bias),
        ]
    }

    fn state_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        vec![
            (join_name(prefix, "weight"), &mut self.weight),
            (join_name(prefix, "bias"), &mut self.bias),
        ]
    }
}
