//! Parameterised building blocks shared by the encoders, fusion stack and
//! training heads.

use std::collections::HashSet;

use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{layer_norm, Activation, Tensor};

/// LayerNorm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;

/// Something that owns trainable tensors.
pub trait Parameterized {
    /// Push `(name, tensor)` for every trainable tensor, prefixing names.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    /// Distinct tensors in discovery order; aliases keep the first name.
    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut all = Vec::new();
        self.collect_params(prefix, &mut all);
        dedup(all)
    }

    fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn dedup(all: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    let mut seen = HashSet::new();
    all.into_iter().filter(|(_, t)| seen.insert(t.id())).collect()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter initialisation helpers drawing from one seeded stream.
pub struct Init<'a> {
    rng: &'a mut RngState,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut RngState) -> Self {
        Self { rng }
    }

    /// Glorot-uniform `fan_in × fan_out` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.uniform_range(-a, a)).collect();
        Tensor::param(name, data, &[fan_in, fan_out]).expect("positive extents")
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        Tensor::param(name, data, shape).expect("positive extents")
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.uniform_range(-bound, bound)).collect();
        Tensor::param(name, data, shape).expect("positive extents")
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(name, vec![value; n], shape).expect("positive extents")
    }
}

/// `y = x W + b`
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: init.xavier(&join(name, "weight"), fan_in, fan_out),
            bias: init.constant(&join(name, "bias"), &[1, fan_out], 0.0),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn size(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

impl Parameterized for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&join(name, "gamma"), &[dim], 1.0),
            beta: init.constant(&join(name, "beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }

    pub fn size(dim: usize) -> usize {
        2 * dim
    }
}

impl Parameterized for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// Two-layer perceptron `in → hidden → out`, optionally normalising the
/// hidden layer before the activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub norm: Option<LayerNorm>,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        normalize_hidden: bool,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            first: Linear::new(init, &join(name, "fc1"), i, h),
            norm: normalize_hidden.then(|| LayerNorm::new(init, &join(name, "norm"), h)),
            second: Linear::new(init, &join(name, "fc2"), h, o),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.first.forward(x)?;
        if let Some(norm) = &self.norm {
            h = norm.forward(&h)?;
        }
        self.second.forward(&self.activation.apply(&h))
    }
}

impl Parameterized for Mlp {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.first.collect_params(&join(prefix, "fc1"), out);
        if let Some(norm) = &self.norm {
            norm.collect_params(&join(prefix, "norm"), out);
        }
        self.second.collect_params(&join(prefix, "fc2"), out);
    }
}

/// Single-layer LSTM with gate order (input, forget, candidate, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: init.xavier(&join(name, "w_ih"), input, 4 * hidden),
            w_hh: init.xavier(&join(name, "w_hh"), hidden, 4 * hidden),
            // nonzero so an all-zero input sequence still yields a nonzero state
            bias: init.uniform(&join(name, "bias"), &[1, 4 * hidden], 1.0 / (hidden as f64).sqrt()),
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn size(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden + 1)
    }
}

impl Parameterized for Lstm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "w_ih"), self.w_ih.clone()));
        out.push((join(prefix, "w_hh"), self.w_hh.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Fixed sinusoidal position table `T × d`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(data, &[len, dim]).expect("positive extents")
}
