//! Multi-head attention, the position-wise feed-forward block and the
//! mutual promotion unit (MPU) that lets two sequences refine each other.
//!
//! One MPU holds two directed sub-units. The sub-unit `n → m` updates the
//! target sequence `H_m` with pre-norm blocks:
//!
//! ```text
//! H'  = MHCA(LN(H_m), LN(H_n)) + H_m
//! H'' = MHSA(LN(H'))           + H'
//! out = FFN(LN(H''))           + H''
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, LayerNorm, Linear, Parameterized};
use crate::rng::RngState;
use crate::tensor::{concat_cols, Activation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dropouts {
    pub embedding: f64,
    pub attention: f64,
    pub ffn: f64,
}

impl Default for Dropouts {
    fn default() -> Self {
        Self {
            embedding: 0.0,
            attention: 0.3,
            ffn: 0.1,
        }
    }
}

impl Dropouts {
    pub fn none() -> Self {
        Self {
            embedding: 0.0,
            attention: 0.0,
            ffn: 0.0,
        }
    }
}

/// Per-forward state: randomness, train/eval mode and attention recording.
pub struct ForwardCtx<'a> {
    pub rng: &'a mut RngState,
    pub training: bool,
    pub dropout: Dropouts,
    pub record_attention: bool,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval(rng: &'a mut RngState) -> Self {
        Self {
            rng,
            training: false,
            dropout: Dropouts::none(),
            record_attention: false,
        }
    }

    pub fn train(rng: &'a mut RngState, dropout: Dropouts) -> Self {
        Self {
            rng,
            training: true,
            dropout,
            record_attention: false,
        }
    }
}

/// Widths of one MPU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MpuDims {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub expansion: usize,
    pub output_projection: bool,
    pub activation: Activation,
}

impl MpuDims {
    pub fn square(d: usize, heads: usize, expansion: usize) -> Self {
        Self {
            d,
            d_k: d,
            d_v: d,
            heads,
            expansion,
            output_projection: true,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.expansion == 0 {
            return Err(Error::config("d/heads/expansion", "must be positive"));
        }
        if self.d_k % self.heads != 0 || self.d_v % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d_k={} and d_v={} must be divisible by heads={}", self.d_k, self.d_v, self.heads),
            ));
        }
        if !self.output_projection && self.d_v != self.d {
            return Err(Error::config(
                "output_projection",
                "without an output projection d_v must equal d",
            ));
        }
        Ok(())
    }

    fn attention_size(&self) -> usize {
        let proj = if self.output_projection {
            Linear::size(self.d_v, self.d)
        } else {
            0
        };
        2 * Linear::size(self.d, self.d_k) + Linear::size(self.d, self.d_v) + proj
    }

    /// Trainable scalars in one directed sub-unit.
    pub fn direction_size(&self) -> usize {
        let hidden = self.expansion * self.d;
        2 * self.attention_size()
            + 3 * LayerNorm::size(self.d)
            + Linear::size(self.d, hidden)
            + Linear::size(hidden, self.d)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &MpuDims) -> Self {
        Self {
            query: Linear::new(init, &join(name, "q"), dims.d, dims.d_k),
            key: Linear::new(init, &join(name, "k"), dims.d, dims.d_k),
            value: Linear::new(init, &join(name, "v"), dims.d, dims.d_v),
            output: dims
                .output_projection
                .then(|| Linear::new(init, &join(name, "o"), dims.d_v, dims.d)),
            heads: dims.heads,
        }
    }
}

impl Parameterized for AttentionParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.query.collect_params(&join(prefix, "q"), out);
        self.key.collect_params(&join(prefix, "k"), out);
        self.value.collect_params(&join(prefix, "v"), out);
        if let Some(o) = &self.output {
            o.collect_params(&join(prefix, "o"), out);
        }
    }
}

/// Row-stochastic attention weights, `heads × rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttnWeights {
    pub fn get(&self, head: usize, row: usize, col: usize) -> f64 {
        self.data[(head * self.rows + row) * self.cols + col]
    }
}

/// Scaled dot-product attention of `target` over `source` with
/// `params.heads` heads. Self-attention is `source == target`.
pub fn multi_head_attention(
    target: &Tensor,
    source: &Tensor,
    params: &AttentionParams,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Tensor, AttnWeights)> {
    if source.numel() == 0 || source.rows() == 0 {
        return Err(Error::EmptySource);
    }
    if target.cols() != source.cols() || target.cols() != params.query.in_dim() {
        return Err(Error::shape(
            "attention",
            format!("target {:?}, source {:?}", target.shape(), source.shape()),
        ));
    }
    let q = params.query.forward(target)?;
    let k = params.key.forward(source)?;
    let v = params.value.forward(source)?;
    let heads = params.heads;
    let dk = q.cols() / heads;
    let dv = v.cols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (rows, cols) = (target.rows(), source.rows());

    let mut weights = Vec::with_capacity(heads * rows * cols);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                q.slice_cols(h * dk, dk)?,
                k.slice_cols(h * dk, dk)?,
                v.slice_cols(h * dv, dv)?,
            )
        };
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
        let attn = scores.softmax_lastdim()?;
        weights.extend_from_slice(&attn.data());
        let attn = attn.dropout(ctx.dropout.attention, ctx.rng, ctx.training);
        outs.push(attn.matmul(&vh)?);
    }
    let merged = if heads == 1 {
        outs.pop().expect("one head")
    } else {
        concat_cols(&outs)?
    };
    let out = match &params.output {
        Some(o) => o.forward(&merged)?,
        None => merged,
    };
    Ok((
        out,
        AttnWeights {
            heads,
            rows,
            cols,
            data: weights,
        },
    ))
}

/// Position-wise feed-forward block `d → expansion·d → d`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &MpuDims) -> Self {
        let hidden = dims.expansion * dims.d;
        Self {
            inner: Linear::new(init, &join(name, "fc1"), dims.d, hidden),
            outer: Linear::new(init, &join(name, "fc2"), hidden, dims.d),
            activation: dims.activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.inner.forward(x)?);
        self.outer.forward(&h)
    }
}

impl Parameterized for FeedForward {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.inner.collect_params(&join(prefix, "fc1"), out);
        self.outer.collect_params(&join(prefix, "fc2"), out);
    }
}

/// One directed sub-unit of an MPU.
#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub norm_cross: LayerNorm,
    pub cross: AttentionParams,
    pub norm_self: LayerNorm,
    pub self_attn: AttentionParams,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DirectionParams {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &MpuDims) -> Self {
        Self {
            norm_cross: LayerNorm::new(init, &join(name, "ln_cross"), dims.d),
            cross: AttentionParams::new(init, &join(name, "cross"), dims),
            norm_self: LayerNorm::new(init, &join(name, "ln_self"), dims.d),
            self_attn: AttentionParams::new(init, &join(name, "self"), dims),
            norm_ffn: LayerNorm::new(init, &join(name, "ln_ffn"), dims.d),
            ffn: FeedForward::new(init, &join(name, "ffn"), dims),
        }
    }

    /// Updates `target` with information from `source`.
    pub fn forward(
        &self,
        target: &Tensor,
        source: &Tensor,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor, AttnWeights, AttnWeights)> {
        let q = self.norm_cross.forward(target)?;
        let kv = self.norm_cross.forward(source)?;
        let (cross, cross_w) = multi_head_attention(&q, &kv, &self.cross, ctx)?;
        let h1 = cross.add(target)?;
        let n1 = self.norm_self.forward(&h1)?;
        let (attn, self_w) = multi_head_attention(&n1, &n1, &self.self_attn, ctx)?;
        let h2 = attn.add(&h1)?;
        let f = self.ffn.forward(&self.norm_ffn.forward(&h2)?)?;
        let out = f.dropout(ctx.dropout.ffn, ctx.rng, ctx.training).add(&h2)?;
        Ok((out, cross_w, self_w))
    }
}

impl Parameterized for DirectionParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm_cross.collect_params(&join(prefix, "ln_cross"), out);
        self.cross.collect_params(&join(prefix, "cross"), out);
        self.norm_self.collect_params(&join(prefix, "ln_self"), out);
        self.self_attn.collect_params(&join(prefix, "self"), out);
        self.norm_ffn.collect_params(&join(prefix, "ln_ffn"), out);
        self.ffn.collect_params(&join(prefix, "ffn"), out);
    }
}

/// Two directed sub-units. With MPU-level sharing both fields alias the
/// same tensors.
#[derive(Clone, Debug)]
pub struct MpuParams {
    /// Updates the first argument (`H_m`) from the second.
    pub n_to_m: DirectionParams,
    /// Updates the second argument (`H_n`) from the first.
    pub m_to_n: DirectionParams,
}

impl MpuParams {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &MpuDims, shared: bool) -> Self {
        let n_to_m = DirectionParams::new(init, &join(name, "n_to_m"), dims);
        let m_to_n = if shared {
            n_to_m.clone()
        } else {
            DirectionParams::new(init, &join(name, "m_to_n"), dims)
        };
        Self { n_to_m, m_to_n }
    }

    pub fn is_shared(&self) -> bool {
        self.n_to_m.cross.query.weight.id() == self.m_to_n.cross.query.weight.id()
    }
}

impl Parameterized for MpuParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.n_to_m.collect_params(&join(prefix, "n_to_m"), out);
        self.m_to_n.collect_params(&join(prefix, "m_to_n"), out);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// Target is the first MPU argument.
    NToM,
    /// Target is the second MPU argument.
    MToN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Block {
    Cross,
    SelfAttn,
}

#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub direction: Direction,
    pub block: Block,
    pub weights: AttnWeights,
}

#[derive(Clone, Debug)]
pub struct MpuOutput {
    /// `H_{n→m}`, shaped like the first input.
    pub n_to_m: Tensor,
    /// `H_{m→n}`, shaped like the second input.
    pub m_to_n: Tensor,
    pub attention: Vec<AttnRecord>,
}

/// Runs both directions. In the serial variant the `m → n` sub-unit reads
/// the already promoted `H_{n→m}` instead of the original `H_m`.
pub fn mpu_forward(
    h_m: &Tensor,
    h_n: &Tensor,
    params: &MpuParams,
    serial: bool,
    ctx: &mut ForwardCtx<'_>,
) -> Result<MpuOutput> {
    let (n_to_m, c1, s1) = params.n_to_m.forward(h_m, h_n, ctx)?;
    let source = if serial { &n_to_m } else { h_m };
    let (m_to_n, c2, s2) = params.m_to_n.forward(h_n, source, ctx)?;
    let attention = if ctx.record_attention {
        vec![
            AttnRecord {
                direction: Direction::NToM,
                block: Block::Cross,
                weights: c1,
            },
            AttnRecord {
                direction: Direction::NToM,
                block: Block::SelfAttn,
                weights: s1,
            },
            AttnRecord {
                direction: Direction::MToN,
                block: Block::Cross,
                weights: c2,
            },
            AttnRecord {
                direction: Direction::MToN,
                block: Block::SelfAttn,
                weights: s2,
            },
        ]
    } else {
        Vec::new()
    };
    Ok(MpuOutput {
        n_to_m,
        m_to_n,
        attention,
    })
}

fn attention_macs(t_target: u64, t_source: u64, dims: &MpuDims) -> u64 {
    let (d, dk, dv) = (dims.d as u64, dims.d_k as u64, dims.d_v as u64);
    let projections = t_target * d * dk + t_source * d * dk + t_source * d * dv;
    let scores = t_target * t_source * dk;
    let weighting = t_target * t_source * dv;
    let output = if dims.output_projection {
        t_target * dv * d
    } else {
        0
    };
    projections + scores + weighting + output
}

/// MACs of one directed sub-unit with the given target/source lengths.
pub fn direction_mac_count(t_target: usize, t_source: usize, dims: &MpuDims) -> u64 {
    let (tt, ts) = (t_target as u64, t_source as u64);
    let d = dims.d as u64;
    let ffn = 2 * tt * d * (dims.expansion as u64 * d);
    attention_macs(tt, ts, dims) + attention_macs(tt, tt, dims) + ffn
}

/// Exact multiply–accumulate count of one [`mpu_forward`].
pub fn mpu_mac_count(t_m: usize, t_n: usize, dims: &MpuDims) -> u64 {
    direction_mac_count(t_m, t_n, dims) + direction_mac_count(t_n, t_m, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, layer_norm, macs};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_tensor(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn dims(d: usize, heads: usize) -> MpuDims {
        MpuDims::square(d, heads, 4)
    }

    fn zero_all(p: &impl Parameterized) {
        for (_, t) in p.named_params("") {
            t.set_data(&vec![0.0; t.numel()]).unwrap();
        }
    }

    // softmax(Q Kᵀ / √d_k) V for a single head, written out element by element
    fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], tq: usize, ts: usize, dk: usize, dv: usize) -> Vec<f64> {
        let mut out = vec![0.0; tq * dv];
        for i in 0..tq {
            let s: Vec<f64> = (0..ts)
                .map(|j| (0..dk).map(|c| q[i * dk + c] * k[j * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..ts {
                for c in 0..dv {
                    out[i * dv + c] += e[j] / z * v[j * dv + c];
                }
            }
        }
        out
    }

    fn affine(x: &[f64], rows: usize, lin: &Linear) -> Vec<f64> {
        let (i, o) = (lin.in_dim(), lin.out_dim());
        let (w, b) = (lin.weight.to_vec(), lin.bias.to_vec());
        let mut y = vec![0.0; rows * o];
        for r in 0..rows {
            for c in 0..o {
                y[r * o + c] = b[c] + (0..i).map(|p| x[r * i + p] * w[p * o + c]).sum::<f64>();
            }
        }
        y
    }

    #[test]
    fn singleton_self_attention_weight_is_one() {
        let mut rng = RngState::new(0);
        let dm = dims(4, 2);
        let p = AttentionParams::new(&mut Init::new(&mut rng), "a", &dm);
        let x = rand_tensor(&mut rng, 1, 4);
        let mut r = RngState::new(1);
        let (_, w) = multi_head_attention(&x, &x, &p, &mut ForwardCtx::eval(&mut r)).unwrap();
        assert_eq!(w.data, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = RngState::new(0);
        let dm = dims(4, 2);
        let p = AttentionParams::new(&mut Init::new(&mut rng), "a", &dm);
        zero_all(&p.value);
        zero_all(p.output.as_ref().unwrap());
        let t = rand_tensor(&mut rng, 3, 4);
        let s = rand_tensor(&mut rng, 5, 4);
        let mut r = RngState::new(1);
        let (out, _) = multi_head_attention(&t, &s, &p, &mut ForwardCtx::eval(&mut r)).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_matches_direct_formula() {
        let mut rng = RngState::new(5);
        let mut dm = dims(4, 1);
        dm.output_projection = false;
        let p = AttentionParams::new(&mut Init::new(&mut rng), "a", &dm);
        let t = rand_tensor(&mut rng, 2, 4);
        let s = rand_tensor(&mut rng, 3, 4);
        let mut r = RngState::new(1);
        let (out, w) = multi_head_attention(&t, &s, &p, &mut ForwardCtx::eval(&mut r)).unwrap();
        let q = affine(&t.to_vec(), 2, &p.query);
        let k = affine(&s.to_vec(), 3, &p.key);
        let v = affine(&s.to_vec(), 3, &p.value);
        let want = attention_oracle(&q, &k, &v, 2, 3, 4, 4);
        for (a, b) in out.to_vec().iter().zip(&want) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        for row in w.data.chunks(3) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_source_is_unrepresentable() {
        assert!(Tensor::new(vec![], &[0, 4]).is_err());
    }

    #[test]
    fn ffn_examples() {
        let mut rng = RngState::new(3);
        let mut dm = dims(3, 1);
        let f = FeedForward::new(&mut Init::new(&mut rng), "f", &dm);
        let x = rand_tensor(&mut rng, 4, 3);
        zero_all(&f);
        assert!(f.forward(&x).unwrap().to_vec().iter().all(|&v| v == 0.0));

        dm.expansion = 1;
        dm.activation = Activation::Identity;
        let f = FeedForward::new(&mut Init::new(&mut rng), "f", &dm);
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        f.inner.weight.set_data(&eye).unwrap();
        f.outer.weight.set_data(&eye).unwrap();
        f.inner.bias.set_data(&[0.0; 3]).unwrap();
        f.outer.bias.set_data(&[0.0; 3]).unwrap();
        assert_eq!(f.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn ffn_matches_two_matmul_oracle_and_is_positionwise() {
        let mut rng = RngState::new(4);
        let dm = dims(3, 1);
        let f = FeedForward::new(&mut Init::new(&mut rng), "f", &dm);
        for b in [&f.inner.bias, &f.outer.bias] {
            let n = b.numel();
            b.set_data(&(0..n).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
        }
        let x = rand_tensor(&mut rng, 4, 3);
        let h: Vec<f64> = affine(&x.to_vec(), 4, &f.inner)
            .into_iter()
            .map(|v| Activation::Gelu.eval(v))
            .collect();
        let want = affine(&h, 4, &f.outer);
        let got = f.forward(&x).unwrap().to_vec();
        for (a, b) in got.iter().zip(&want) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        let perm = [2, 0, 3, 1];
        let xp = x.select_rows(&perm).unwrap();
        let yp = f.forward(&xp).unwrap().to_vec();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(&yp[i * 3..i * 3 + 3], &got[src * 3..src * 3 + 3]);
        }
    }

    #[test]
    fn residual_identity_with_zero_weights() {
        let mut rng = RngState::new(8);
        let dm = dims(4, 2);
        let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, false);
        for (name, t) in p.named_params("") {
            if !name.contains("gamma") && !name.contains("beta") {
                t.set_data(&vec![0.0; t.numel()]).unwrap();
            }
        }
        let hm = rand_tensor(&mut rng, 3, 4);
        let hn = rand_tensor(&mut rng, 5, 4);
        let mut r = RngState::new(0);
        let out = mpu_forward(&hm, &hn, &p, false, &mut ForwardCtx::eval(&mut r)).unwrap();
        assert_eq!(out.n_to_m.to_vec(), hm.to_vec());
        assert_eq!(out.m_to_n.to_vec(), hn.to_vec());
    }

    // Hand-composed pre-norm block for T_m = T_n = 1: with one source row
    // attention weights are exactly 1, so attention reduces to the value
    // and output projections.
    fn direction_oracle(p: &DirectionParams, target: &[f64], source: &[f64]) -> Vec<f64> {
        let d = target.len();
        let ln = |x: &[f64], n: &LayerNorm| -> Vec<f64> {
            let t = Tensor::matrix(1, d, x.to_vec()).unwrap();
            layer_norm(&t, &n.gamma, &n.beta, crate::nn::LN_EPS).unwrap().to_vec()
        };
        let vo = |x: &[f64], a: &AttentionParams| affine(&affine(x, 1, &a.value), 1, a.output.as_ref().unwrap());
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let h1 = add(&vo(&ln(source, &p.norm_cross), &p.cross), target);
        let h2 = add(&vo(&ln(&h1, &p.norm_self), &p.self_attn), &h1);
        let hidden: Vec<f64> = affine(&ln(&h2, &p.norm_ffn), 1, &p.ffn.inner)
            .into_iter()
            .map(|v| Activation::Gelu.eval(v))
            .collect();
        add(&affine(&hidden, 1, &p.ffn.outer), &h2)
    }

    #[test]
    fn one_step_mpu_matches_composed_oracle() {
        let mut rng = RngState::new(21);
        let dm = dims(4, 2);
        let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, false);
        for (_, t) in p.named_params("") {
            let n = t.numel();
            t.set_data(&(0..n).map(|_| 0.5 * rng.normal()).collect::<Vec<_>>()).unwrap();
        }
        let hm = rand_tensor(&mut rng, 1, 4);
        let hn = rand_tensor(&mut rng, 1, 4);
        let mut r = RngState::new(0);
        let out = mpu_forward(&hm, &hn, &p, false, &mut ForwardCtx::eval(&mut r)).unwrap();
        let want_m = direction_oracle(&p.n_to_m, &hm.to_vec(), &hn.to_vec());
        let want_n = direction_oracle(&p.m_to_n, &hn.to_vec(), &hm.to_vec());
        for (a, b) in out.n_to_m.to_vec().iter().zip(&want_m) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        for (a, b) in out.m_to_n.to_vec().iter().zip(&want_n) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn shared_mpu_swaps_outputs_when_inputs_swap() {
        let mut rng = RngState::new(2);
        let dm = dims(4, 2);
        let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, true);
        assert!(p.is_shared());
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 2, 4);
        let mut r = RngState::new(0);
        let o1 = mpu_forward(&a, &b, &p, false, &mut ForwardCtx::eval(&mut r)).unwrap();
        let o2 = mpu_forward(&b, &a, &p, false, &mut ForwardCtx::eval(&mut r)).unwrap();
        assert_eq!(o1.n_to_m.to_vec(), o2.m_to_n.to_vec());
        assert_eq!(o1.m_to_n.to_vec(), o2.n_to_m.to_vec());
    }

    #[test]
    fn serial_variant_reads_promoted_sequence() {
        let mut rng = RngState::new(2);
        let dm = dims(4, 1);
        let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, false);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 2, 4);
        let mut r = RngState::new(0);
        let par = mpu_forward(&a, &b, &p, false, &mut ForwardCtx::eval(&mut r)).unwrap();
        let ser = mpu_forward(&a, &b, &p, true, &mut ForwardCtx::eval(&mut r)).unwrap();
        assert_eq!(par.n_to_m.to_vec(), ser.n_to_m.to_vec());
        let (manual, _, _) = p.m_to_n.forward(&b, &par.n_to_m, &mut ForwardCtx::eval(&mut r)).unwrap();
        assert_eq!(ser.m_to_n.to_vec(), manual.to_vec());
        assert_ne!(par.m_to_n.to_vec(), ser.m_to_n.to_vec());
    }

    #[test]
    fn mpu_gradients_match_finite_differences() {
        let mut rng = RngState::new(12);
        let dm = dims(4, 2);
        let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, false);
        let head = Linear::new(&mut Init::new(&mut rng), "head", 4, 1);
        let hm = Tensor::param("h_m", (0..12).map(|_| rng.normal()).collect(), &[3, 4]).unwrap();
        let hn = Tensor::param("h_n", (0..8).map(|_| rng.normal()).collect(), &[2, 4]).unwrap();
        let mut params: Vec<Tensor> = p.named_params("").into_iter().map(|(_, t)| t).collect();
        params.extend([hm.clone(), hn.clone(), head.weight.clone(), head.bias.clone()]);
        let report = finite_diff_check(
            || {
                let mut r = RngState::new(0);
                let out = mpu_forward(&hm, &hn, &p, false, &mut ForwardCtx::eval(&mut r))?;
                let pooled = out.n_to_m.mean_rows()?.add(&out.m_to_n.mean_rows()?)?;
                Ok(head.forward(&pooled)?.abs().sum())
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst());
    }

    #[test]
    fn mac_count_examples() {
        let dm = dims(8, 2);
        // hand expansion for T_m = T_n = 1: each direction has two attention
        // blocks of (3 d·d projections + d + d score/weighting + d·d output)
        // and an FFN of 2·d·4d.
        let d = 8u64;
        let per_attention = 3 * d * d + d + d + d * d;
        let per_direction = 2 * per_attention + 2 * d * 4 * d;
        assert_eq!(mpu_mac_count(1, 1, &dm), 2 * per_direction);
        assert_eq!(mpu_mac_count(7, 3, &dm), mpu_mac_count(3, 7, &dm));
        // quadratic part: score + weighting terms scale by 4 when lengths double
        let quad = |a: u64, b: u64| 2 * d * (a * b) * 2 + 2 * d * (a * a + b * b);
        let lin = |a: u64, b: u64| mpu_mac_count(a as usize, b as usize, &dm) - quad(a, b);
        assert_eq!(lin(200, 100) * 2, lin(400, 200));
        assert_eq!(quad(200, 100) * 4, quad(400, 200));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn mpu_shapes_and_row_sums(t_m in 1usize..64, t_n in 1usize..64, seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let dm = dims(8, 4);
            let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, false);
            let hm = rand_tensor(&mut rng, t_m, 8);
            let hn = rand_tensor(&mut rng, t_n, 8);
            let mut r = RngState::new(seed);
            let mut ctx = ForwardCtx::eval(&mut r);
            ctx.record_attention = true;
            let (out, counted) = macs::measure(|| mpu_forward(&hm, &hn, &p, false, &mut ctx).unwrap());
            prop_assert_eq!(out.n_to_m.shape(), hm.shape());
            prop_assert_eq!(out.m_to_n.shape(), hn.shape());
            prop_assert_eq!(counted, mpu_mac_count(t_m, t_n, &dm));
            for rec in &out.attention {
                for row in rec.weights.data.chunks(rec.weights.cols) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn instrumented_macs_match_formula_over_random_configs() {
        let mut rng = RngState::new(77);
        for _ in 0..50 {
            let heads = 1 + rng.below(4);
            let d = heads * (1 + rng.below(4));
            let mut dm = MpuDims::square(d, heads, 1 + rng.below(4));
            dm.output_projection = rng.bernoulli(0.7);
            let t_m = 1 + rng.below(12);
            let t_n = 1 + rng.below(12);
            let shared = rng.bernoulli(0.5);
            let p = MpuParams::new(&mut Init::new(&mut rng), "mpu", &dm, shared);
            let hm = rand_tensor(&mut rng, t_m, d);
            let hn = rand_tensor(&mut rng, t_n, d);
            let mut r = RngState::new(0);
            let (_, counted) =
                macs::measure(|| mpu_forward(&hm, &hn, &p, false, &mut ForwardCtx::eval(&mut r)).unwrap());
            assert_eq!(counted, mpu_mac_count(t_m, t_n, &dm));
        }
    }
}
