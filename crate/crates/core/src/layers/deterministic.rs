//! Layers with point-estimate weights: dense, Conv1D block, LSTM.

use rand::Rng;

use super::params::{uniform, Bindings, ParamId, ParamStore};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// `y = x W + b` with `W: [inputs, outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Fan-in uniform init, `U[-1/sqrt(inputs), 1/sqrt(inputs)]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let k = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[inputs, outputs], -k, k));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[outputs], -k, k));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, AutodiffError> {
        let xw = g.matmul(x, p[self.weight])?;
        g.add(xw, p[self.bias])
    }
}

/// Conv1D ("same" padding) -> ReLU -> max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub pool: usize,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        pool: usize,
        rng: &mut R,
    ) -> Self {
        let k = 1.0 / ((in_channels * kernel_size) as f64).sqrt();
        let kernel = store.add(
            format!("{name}.kernel"),
            uniform(rng, &[out_channels, in_channels, kernel_size], -k, k),
        );
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_channels], -k, k));
        Self {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            pool,
        }
    }

    /// `x: [batch, in_channels, len]` -> `[batch, out_channels, len / pool]`.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, AutodiffError> {
        let y = g.conv1d(x, p[self.kernel], Some(p[self.bias]))?;
        let y = g.relu(y)?;
        g.maxpool1d(y, self.pool)
    }
}

/// Single LSTM layer. Gate blocks in `[input, forget, candidate, output]`
/// order along the last axis of both weight matrices and the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[batch, hidden]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmLayer {
    /// Uniform init in `[-1/sqrt(hidden), 1/sqrt(hidden)]`, forget-gate bias 1.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add(format!("{name}.w_input"), uniform(rng, &[inputs, 4 * hidden], -k, k));
        let w_hidden = store.add(format!("{name}.w_hidden"), uniform(rng, &[hidden, 4 * hidden], -k, k));
        let mut b = uniform(rng, &[4 * hidden], -k, k);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            w_input,
            w_hidden,
            bias,
            inputs,
            hidden,
        }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = g.constant(Tensor::zeros(&[batch, self.hidden]));
        LstmState { h, c }
    }

    /// One time step; `x: [batch, inputs]`.
    pub fn step(&self, g: &mut Graph, p: &Bindings, x: Var, state: LstmState) -> Result<LstmState, AutodiffError> {
        let hd = self.hidden;
        let zx = g.matmul(x, p[self.w_input])?;
        let zh = g.matmul(state.h, p[self.w_hidden])?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, p[self.bias])?;
        let gate = |g: &mut Graph, k: usize| g.slice(z, 1, k * hd, (k + 1) * hd);
        let i = gate(g, 0)?;
        let i = g.sigmoid(i)?;
        let f = gate(g, 1)?;
        let f = g.sigmoid(f)?;
        let cand = gate(g, 2)?;
        let cand = g.tanh(cand)?;
        let o = gate(g, 3)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}
