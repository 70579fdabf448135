//! Parameterized layers shared by the model blocks.
//!
//! Layers hold only [`ParamId`]s, so one set of layer handles runs against
//! any store with matching names (32-bit for training, 64-bit for gradient
//! checks).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use s2st_numerics::{Conv1dSpec, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::Result;

pub type ModelRng = ChaCha8Rng;

pub const LN_EPS: f64 = 1e-6;

/// Creates named parameters under a dotted prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut ModelRng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ModelRng) -> Self {
        ParamBuilder { store, rng, prefix: String::new() }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound) as f32).collect();
        Ok(self.store.add(self.name(leaf), Tensor::new(shape, data)?)?)
    }

    pub fn full(&mut self, leaf: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        Ok(self.store.add(self.name(leaf), Tensor::full(shape, value))?)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        Ok(self.store.set_value(id, value)?)
    }
}

/// Bias parameters are named `*.b`, `*.beta`, or `*.bias`; they are exempt
/// from weight decay.
pub fn is_bias(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "b" | "beta" | "bias")
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let bound = (6.0 / (input + output) as f64).sqrt();
        let w = s.uniform("w", &[input, output], bound)?;
        let b = if bias { Some(s.full("b", &[output], 0.0)?) } else { None };
        Ok(Linear { w, b, input, output })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = shape.iter().product::<usize>() / self.input.max(1);
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.input])? };
        let w = g.param(self.w);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.output;
        Ok(g.reshape(y, &out_shape)?)
    }
}

/// Layer normalization with learned gain and offset.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        Ok(LayerNorm { gamma: s.full("gamma", &[dim], 1.0)?, beta: s.full("beta", &[dim], 0.0)? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(n, gamma)?;
        Ok(g.add(y, beta)?)
    }
}

/// Temporal convolution with bias over `[B, T, C]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub spec: Conv1dSpec,
}

impl Conv1d {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, kernel: usize, spec: Conv1dSpec) -> Result<Self> {
        let mut s = pb.scope(name);
        let fan_in = kernel * input / spec.groups;
        let fan_out = kernel * output / spec.groups;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = s.uniform("w", &[kernel, input / spec.groups, output], bound)?;
        let b = s.full("b", &[output], 0.0)?;
        Ok(Conv1d { w, b, kernel, spec })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.conv1d(x, w, self.spec)?;
        let b = g.param(self.b);
        Ok(g.add(y, b)?)
    }
}

/// `new` where the zoneout mask is 1 with probability `1 - p`, `prev`
/// elsewhere. Identity on `new` outside training.
pub fn zoneout<T: Scalar>(g: &mut Graph<T>, new: Var, prev: Var, p: f64, rng: &mut ModelRng) -> Result<Var> {
    if !g.is_training() || p <= 0.0 {
        return Ok(new);
    }
    let n = g.value(new).len();
    let keep_prev: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < p).collect();
    let take_new: Vec<T> = keep_prev.iter().map(|&k| if k { T::zero() } else { T::one() }).collect();
    let take_prev: Vec<T> = keep_prev.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
    let a = g.mul_const(new, take_new)?;
    let b = g.mul_const(prev, take_prev)?;
    Ok(g.add(a, b)?)
}

/// One LSTM layer; gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: Linear,
    pub wh: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let mut s = pb.scope(name);
        let wx = Linear::new(&mut s, "x", input, 4 * hidden, true)?;
        let bound = (6.0 / (5 * hidden) as f64).sqrt();
        let wh = s.uniform("h", &[hidden, 4 * hidden], bound)?;
        // forget-gate bias starts at 1
        let b = wx.b.unwrap();
        let mut bias = vec![0.0f32; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        s.store.set_value(b, Tensor::new(&[4 * hidden], bias)?)?;
        Ok(Lstm { wx, wh, hidden })
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(&[batch, self.hidden]));
        let c = g.constant(Tensor::zeros(&[batch, self.hidden]));
        LstmState { h, c }
    }

    /// Input projection for a whole sequence `[B, T, in]` → `[B, T, 4H]`.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.wx.forward(g, x)
    }

    /// One step from projected input `[B, 4H]`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        xw: Var,
        state: LstmState,
        zoneout_p: f64,
        rng: &mut ModelRng,
    ) -> Result<LstmState> {
        let wh = g.param(self.wh);
        let hw = g.matmul(state.h, wh)?;
        let gates = g.add(xw, hw)?;
        let hc = g.lstm_cell(gates, state.c)?;
        let h = g.slice(hc, 1, 0, self.hidden)?;
        let c = g.slice(hc, 1, self.hidden, self.hidden)?;
        let h = zoneout(g, h, state.h, zoneout_p, rng)?;
        let c = zoneout(g, c, state.c, zoneout_p, rng)?;
        Ok(LstmState { h, c })
    }

    /// Runs over `[B, T, in]`, returning `[B, T, H]`. `mask[b * T + t]`
    /// zeroes the state at padded steps; in reverse this keeps padding from
    /// leaking into real positions.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mask: Option<&[f32]>,
        reverse: bool,
        zoneout_p: f64,
        rng: &mut ModelRng,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, t) = (shape[0], shape[1]);
        let xw = self.project(g, x)?;
        let mut state = self.zero_state(g, b);
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for &i in &order {
            let xi = g.slice(xw, 1, i, 1)?;
            let xi = g.reshape(xi, &[b, 4 * self.hidden])?;
            state = self.step(g, xi, state, zoneout_p, rng)?;
            if let Some(m) = mask {
                let f: Vec<T> = (0..b).map(|j| c(m[j * t + i] as f64)).collect();
                state.h = g.scale_rows(state.h, f.clone())?;
                state.c = g.scale_rows(state.c, f)?;
            }
            outs[i] = Some(g.reshape(state.h, &[b, 1, self.hidden])?);
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.unwrap()).collect();
        Ok(g.concat(&outs, 1)?)
    }
}

/// Stack of unidirectional or bidirectional LSTM layers.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub forward: Vec<Lstm>,
    pub backward: Vec<Lstm>,
}

impl LstmStack {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize, layers: usize, bidirectional: bool) -> Result<Self> {
        let mut s = pb.scope(name);
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        let mut dim = input;
        for l in 0..layers {
            forward.push(Lstm::new(&mut s, &format!("fw{l}"), dim, hidden)?);
            if bidirectional {
                backward.push(Lstm::new(&mut s, &format!("bw{l}"), dim, hidden)?);
            }
            dim = if bidirectional { 2 * hidden } else { hidden };
        }
        Ok(LstmStack { forward, backward })
    }

    pub fn output_dim(&self) -> usize {
        let h = self.forward.last().map_or(0, |l| l.hidden);
        if self.backward.is_empty() {
            h
        } else {
            2 * h
        }
    }

    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mask: Option<&[f32]>, zoneout_p: f64, rng: &mut ModelRng) -> Result<Var> {
        let mut h = x;
        for (l, fw) in self.forward.iter().enumerate() {
            let f = fw.run(g, h, mask, false, zoneout_p, rng)?;
            h = match self.backward.get(l) {
                Some(bw) => {
                    let r = bw.run(g, h, mask, true, zoneout_p, rng)?;
                    g.concat(&[f, r], 2)?
                }
                None => f,
            };
        }
        Ok(h)
    }
}

/// Multiplies `[B, T, C]` rows by a `[B·T]` frame mask.
pub fn apply_mask<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[f32]) -> Result<Var> {
    Ok(g.scale_rows(x, mask.iter().map(|&m| c(m as f64)).collect())?)
}

/// Constant `[dims..]` tensor from 32-bit host data.
pub fn constant<T: Scalar>(g: &mut Graph<T>, shape: &[usize], data: &[f32]) -> Result<Var> {
    Ok(g.constant(Tensor::new(shape, data.iter().map(|&v| c(v as f64)).collect())?))
}
