use rand::Rng;

use super::activation::sigmoid_scalar;
use super::dense::glorot_uniform;
use super::{join_name, Matrix, Module};
use crate::error::{Error, Result};

/// Single-layer LSTM. Gate blocks are stacked in the order input, forget,
/// cell, output along the rows of `weight` (`4H x (I + H)`), each block
/// acting on `[x_t, h_{t-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
struct StepCache {
    xh: Matrix,
    i: Matrix,
    f: Matrix,
    g: Matrix,
    o: Matrix,
    c_prev: Matrix,
    tanh_c: Matrix,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<StepCache>,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Matrix::zeros(1, 4 * hidden);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            weight: glorot_uniform(4 * hidden, input + hidden, input + hidden, hidden, rng),
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            weight: Matrix::zeros(4 * hidden, input + hidden),
            bias: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.weight.rows() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols() - self.hidden()
    }

    /// Runs a batch of sequences; `xs[t]` is the `B x I` input at step `t`.
    /// Returns the hidden state after every step.
    pub fn forward(&self, xs: &[Matrix]) -> Result<(Vec<Matrix>, LstmCache)> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (hd, inp) = (self.hidden(), self.input_dim());
        let batch = xs[0].rows();
        let mut h = Matrix::zeros(batch, hd);
        let mut c = Matrix::zeros(batch, hd);
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            if x.cols() != inp || x.rows() != batch {
                return Err(Error::shape(
                    "lstm_forward",
                    format!("{batch}x{inp}"),
                    format!("{:?}", x.shape()),
                ));
            }
            let xh = Matrix::hstack(&[x, &h])?;
            let mut z = xh.matmul_t(&self.weight)?;
            z.add_row_broadcast(self.bias.data());
            let gate = |k: usize, f: fn(f64) -> f64| z.cols_slice(k * hd, hd).map(f);
            let (i, f, g, o) = (
                gate(0, sigmoid_scalar),
                gate(1, sigmoid_scalar),
                gate(2, f64::tanh),
                gate(3, sigmoid_scalar),
            );
            let c_next = f.zip_map(&c, |a, b| a * b).zip_map(&i.zip_map(&g, |a, b| a * b), |a, b| a + b);
            let tanh_c = c_next.map(f64::tanh);
            h = o.zip_map(&tanh_c, |a, b| a * b);
            hs.push(h.clone());
            steps.push(StepCache {
                xh,
                i,
                f,
                g,
                o,
                c_prev: std::mem::replace(&mut c, c_next),
                tanh_c,
            });
        }
        Ok((hs, LstmCache { steps }))
    }

    /// Backpropagation through time. `grad_hs[t]` is the loss gradient with
    /// respect to the hidden state at step `t`. Returns the input gradients.
    pub fn backward(&self, cache: &LstmCache, grad_hs: &[Matrix], grads: &mut Lstm) -> Result<Vec<Matrix>> {
        if grad_hs.len() != cache.steps.len() {
            return Err(Error::shape("lstm_backward", cache.steps.len(), grad_hs.len()));
        }
        let (hd, inp) = (self.hidden(), self.input_dim());
        let batch = cache.steps[0].xh.rows();
        let mut dh_next = Matrix::zeros(batch, hd);
        let mut dc_next = Matrix::zeros(batch, hd);
        let mut dxs = vec![Matrix::zeros(0, 0); grad_hs.len()];
        for (t, s) in cache.steps.iter().enumerate().rev() {
            if grad_hs[t].shape() != (batch, hd) {
                return Err(Error::shape(
                    "lstm_backward",
                    format!("{batch}x{hd}"),
                    format!("{:?}", grad_hs[t].shape()),
                ));
            }
            let dh = grad_hs[t].zip_map(&dh_next, |a, b| a + b);
            let mut dz = Matrix::zeros(batch, 4 * hd);
            let mut dc_prev = Matrix::zeros(batch, hd);
            for r in 0..batch {
                let (i, f, g, o) = (s.i.row(r), s.f.row(r), s.g.row(r), s.o.row(r));
                let (tc, cp) = (s.tanh_c.row(r), s.c_prev.row(r));
                let (dhr, dcn) = (dh.row(r), dc_next.row(r));
                let dzr = dz.row_mut(r);
                let mut dcp = vec![0.0; hd];
                for j in 0..hd {
                    let dc = dhr[j] * o[j] * (1.0 - tc[j] * tc[j]) + dcn[j];
                    dzr[j] = dc * g[j] * i[j] * (1.0 - i[j]);
                    dzr[hd + j] = dc * cp[j] * f[j] * (1.0 - f[j]);
                    dzr[2 * hd + j] = dc * i[j] * (1.0 - g[j] * g[j]);
                    dzr[3 * hd + j] = dhr[j] * tc[j] * o[j] * (1.0 - o[j]);
                    dcp[j] = dc * f[j];
                }
                dc_prev.row_mut(r).copy_from_slice(&dcp);
            }
            grads.weight.add_assign(&dz.t_matmul(&s.xh)?);
            for (b, v) in grads.bias.data_mut().iter_mut().zip(dz.col_sums()) {
                *b += v;
            }
            let dxh = dz.matmul(&self.weight)?;
            dxs[t] = dxh.cols_slice(0, inp);
            dh_next = dxh.cols_slice(inp, hd);
            dc_next = dc_prev;
        }
        Ok(dxs)
    }
}

impl Module for Lstm {
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
