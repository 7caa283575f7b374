use serde::{Deserialize, Serialize};

use super::{macs, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngState;

// c[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

// c[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn unary(
    x: &Tensor,
    op: &'static str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let out = data.clone();
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, p| {
            let xs = p[0].data();
            vec![Some(
                g.iter()
                    .zip(xs.iter().zip(&out))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect(),
            )]
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pointwise nonlinearity selectable from configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation of GELU
    #[default]
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x.clone(),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

impl Tensor {
    /// `[m×k] · [k×n]`. Counts `m·k·n` MACs.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = require_2d("matmul", self)?;
        let (k2, n) = require_2d("matmul", rhs)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data(), &rhs.data(), &mut out, m, k, n);
        macs::add((m * k * n) as u64);
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, &p[1].data(), &mut ga, m, n, k);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&p[0].data(), g, &mut gb, m, k, n);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = require_2d("transpose", self)?;
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(d);
        Ok(Tensor::from_op(
            "transpose",
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = self.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, p| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.iter().zip(p[1].data().iter()).map(|(g, b)| g * b).collect());
                let gb = p[1]
                    .requires_grad()
                    .then(|| g.iter().zip(p[0].data().iter()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if row.numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(), row.shape()),
            ));
        }
        let r = row.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r.iter()).map(|(a, b)| a + b))
            .collect();
        drop(r);
        Ok(Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g, _| {
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gr)]
            }),
        ))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` row.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let n = self.cols();
        if row.numel() != n {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * row {:?}", self.shape(), row.shape()),
            ));
        }
        let r = row.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(r.iter()).map(|(a, b)| a * b))
            .collect();
        drop(r);
        Ok(Tensor::from_op(
            "mul_row",
            self.shape().to_vec(),
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g, p| {
                let x = p[0].data();
                let r = p[1].data();
                let gx = g
                    .chunks(n)
                    .flat_map(|c| c.iter().zip(r.iter()).map(|(a, b)| a * b))
                    .collect();
                let mut gr = vec![0.0; n];
                for (gc, xc) in g.chunks(n).zip(x.chunks(n)) {
                    for j in 0..n {
                        gr[j] += gc[j] * xc[j];
                    }
                }
                vec![Some(gx), Some(gr)]
            }),
        ))
    }

    /// Multiplies every row `i` by the scalar `col[i]` (an `m×1` tensor).
    pub fn mul_col(&self, col: &Tensor) -> Result<Tensor> {
        let (m, n) = require_2d("mul_col", self)?;
        if col.numel() != m {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * column {:?}", self.shape(), col.shape()),
            ));
        }
        let c = col.data();
        let data = self
            .data()
            .chunks(n)
            .zip(c.iter())
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        drop(c);
        Ok(Tensor::from_op(
            "mul_col",
            vec![m, n],
            data,
            vec![self.clone(), col.clone()],
            Box::new(move |g, p| {
                let x = p[0].data();
                let c = p[1].data();
                let gx = g
                    .chunks(n)
                    .zip(c.iter())
                    .flat_map(|(row, s)| row.iter().map(move |v| v * s))
                    .collect();
                let gc = g
                    .chunks(n)
                    .zip(x.chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                vec![Some(gx), Some(gc)]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, "ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, "relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&self) -> Tensor {
        unary(self, "gelu", gelu, |x, _| gelu_grad(x))
    }

    /// Subgradient zero at the origin.
    pub fn abs(&self) -> Tensor {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Elementwise `0.5x²` for `|x| < 1`, else `|x| − 0.5`.
    pub fn smooth_l1(&self) -> Tensor {
        unary(
            self,
            "smooth_l1",
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            |x, _| {
                if x.abs() < 1.0 {
                    x
                } else {
                    x.signum()
                }
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let s = self.data().iter().sum();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Column means of an `m×n` matrix, as `1×n`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = require_2d("mean_rows", self)?;
        let mut out = vec![0.0; n];
        for row in self.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Tensor::from_op(
            "mean_rows",
            vec![1, n],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some((0..m).flat_map(|_| g.iter().map(|v| v * inv)).collect())]
            }),
        ))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = self.cols();
        let d = self.data();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut total = 0.0;
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        drop(d);
        let y = out.clone();
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = require_2d("slice_rows", self)?;
        if len == 0 || start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let data = self.data()[start * n..(start + len) * n].to_vec();
        Ok(Tensor::from_op(
            "slice_rows",
            vec![len, n],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    pub fn row(&self, i: usize) -> Result<Tensor> {
        self.slice_rows(i, 1)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = require_2d("slice_cols", self)?;
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let data = self
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        Ok(Tensor::from_op(
            "slice_cols",
            vec![m, len],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for (i, gr) in g.chunks(len).enumerate() {
                    gx[i * n + start..i * n + start + len].copy_from_slice(gr);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = require_2d("select_rows", self)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(Error::shape("select_rows", format!("indices out of 0..{m}")));
        }
        let d = self.data();
        let data = indices.iter().flat_map(|&i| d[i * n..(i + 1) * n].iter().copied()).collect();
        drop(d);
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "select_rows",
            vec![idx.len(), n],
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; m * n];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gx[i * n + j] += g[k * n + j];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout(&self, rate: f64, rng: &mut RngState, training: bool) -> Tensor {
        if !training || rate <= 0.0 {
            return self.clone();
        }
        let n = self.numel();
        let mask: Vec<f64> = if rate >= 1.0 {
            vec![0.0; n]
        } else {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                .collect()
        };
        let data = self.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        Tensor::from_op(
            "dropout",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(&mask).map(|(a, b)| a * b).collect())]),
        )
    }
}

/// Row-wise layer normalisation over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.cols();
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.numel() / n;
    let mut xhat = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks(n) {
        let mu = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        xhat.extend(row.iter().map(|v| (v - mu) * is));
    }
    let (g, b) = (gamma.data(), beta.data());
    let out = xhat
        .chunks(n)
        .flat_map(|r| r.iter().zip(g.iter().zip(b.iter())).map(|(h, (g, b))| h * g + b))
        .collect();
    drop((g, b));
    Ok(Tensor::from_op(
        "layer_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |gout, p| {
            let gamma = p[1].data();
            let mut gx = Vec::with_capacity(gout.len());
            let mut gg = vec![0.0; n];
            let mut gb = vec![0.0; n];
            for ((gr, hr), is) in gout.chunks(n).zip(xhat.chunks(n)).zip(&inv_std) {
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for j in 0..n {
                    let d = gr[j] * gamma[j];
                    mean_d += d;
                    mean_dh += d * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                mean_d /= n as f64;
                mean_dh /= n as f64;
                gx.extend((0..n).map(|j| is * (gr[j] * gamma[j] - mean_d - hr[j] * mean_dh)));
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }),
    ))
}

/// Stacks matrices with equal column counts vertically.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
    let n = first.cols();
    let mut rows = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = require_2d("concat_rows", p)?;
        if c != n {
            return Err(Error::shape("concat_rows", format!("column counts {n} and {c}")));
        }
        rows.push(r);
        data.extend_from_slice(&p.data());
    }
    let total: usize = rows.iter().sum();
    Ok(Tensor::from_op(
        "concat_rows",
        vec![total, n],
        data,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut off = 0;
            rows.iter()
                .map(|&r| {
                    let s = g[off * n..(off + r) * n].to_vec();
                    off += r;
                    Some(s)
                })
                .collect()
        }),
    ))
}

/// Joins matrices with equal row counts side by side.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
    let m = first.rows();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = require_2d("concat_cols", p)?;
        if r != m {
            return Err(Error::shape("concat_cols", format!("row counts {m} and {r}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        for (i, row) in p.data().chunks(w).enumerate() {
            data[i * total + off..i * total + off + w].copy_from_slice(row);
        }
        off += w;
    }
    Ok(Tensor::from_op(
        "concat_cols",
        vec![m, total],
        data,
        parts.to_vec(),
        Box::new(move |g, _| {
            let mut off = 0;
            widths
                .iter()
                .map(|&w| {
                    let s = g
                        .chunks(total)
                        .flat_map(|row| row[off..off + w].iter().copied())
                        .collect();
                    off += w;
                    Some(s)
                })
                .collect()
        }),
    ))
}

/// Looks up rows of a `V×d` table. Only rows that are used receive gradient.
pub fn embedding(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = require_2d("embedding", table)?;
    if ids.is_empty() {
        return Err(Error::shape("embedding", "empty id sequence"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: v });
    }
    let t = table.data();
    let data = ids
        .iter()
        .flat_map(|&i| t[i as usize * d..(i as usize + 1) * d].iter().copied())
        .collect();
    drop(t);
    let ids = ids.to_vec();
    Ok(Tensor::from_op(
        "embedding",
        vec![ids.len(), d],
        data,
        vec![table.clone()],
        Box::new(move |g, _| {
            let mut gt = vec![0.0; v * d];
            for (k, &i) in ids.iter().enumerate() {
                let i = i as usize;
                for j in 0..d {
                    gt[i * d + j] += g[k * d + j];
                }
            }
            vec![Some(gt)]
        }),
    ))
}

/// Convex-style row mixing: `out[r] = Σ_k weights[r, k] · items[k][r]`.
/// Counts `rows·K·cols` MACs.
pub fn mix_rows(weights: &Tensor, items: &[Tensor]) -> Result<Tensor> {
    let (r, k) = require_2d("mix_rows", weights)?;
    if items.len() != k {
        return Err(Error::shape(
            "mix_rows",
            format!("{k} weight columns for {} items", items.len()),
        ));
    }
    let n = items[0].cols();
    for it in items {
        if it.shape() != [r, n] {
            return Err(Error::shape(
                "mix_rows",
                format!("item {:?}, expected {:?}", it.shape(), [r, n]),
            ));
        }
    }
    let w = weights.data();
    let mut out = vec![0.0; r * n];
    for (kk, it) in items.iter().enumerate() {
        let d = it.data();
        for i in 0..r {
            let wik = w[i * k + kk];
            for j in 0..n {
                out[i * n + j] += wik * d[i * n + j];
            }
        }
    }
    drop(w);
    macs::add((r * k * n) as u64);
    let mut parents = vec![weights.clone()];
    parents.extend(items.iter().cloned());
    Ok(Tensor::from_op(
        "mix_rows",
        vec![r, n],
        out,
        parents,
        Box::new(move |g, p| {
            let w = p[0].data();
            let mut gw = vec![0.0; r * k];
            let mut grads = Vec::with_capacity(k + 1);
            for kk in 0..k {
                let d = p[kk + 1].data();
                for i in 0..r {
                    gw[i * k + kk] = (0..n).map(|j| g[i * n + j] * d[i * n + j]).sum();
                }
            }
            grads.push(Some(gw));
            for kk in 0..k {
                let gi = (0..r)
                    .flat_map(|i| {
                        let wik = w[i * k + kk];
                        g[i * n..(i + 1) * n].iter().map(move |v| v * wik)
                    })
                    .collect();
                grads.push(Some(gi));
            }
            grads
        }),
    ))
}

/// `−xᵀy / (‖x‖‖y‖)` for two tensors of equal size, as a scalar.
pub fn negative_cosine(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.numel() != y.numel() {
        return Err(Error::shape(
            "negative_cosine",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let (xd, yd) = (x.data(), y.data());
    let nx = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = yd.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 || !nx.is_finite() || !ny.is_finite() {
        return Err(Error::Degenerate);
    }
    let dot: f64 = xd.iter().zip(yd.iter()).map(|(a, b)| a * b).sum();
    drop((xd, yd));
    let value = -dot / (nx * ny);
    Ok(Tensor::from_op(
        "negative_cosine",
        vec![1],
        vec![value],
        vec![x.clone(), y.clone()],
        Box::new(move |g, p| {
            let (xd, yd) = (p[0].data(), p[1].data());
            let s = g[0];
            let inv = 1.0 / (nx * ny);
            let gx = p[0].requires_grad().then(|| {
                xd.iter()
                    .zip(yd.iter())
                    .map(|(a, b)| -s * (b * inv - dot * a * inv / (nx * nx)))
                    .collect()
            });
            let gy = p[1].requires_grad().then(|| {
                xd.iter()
                    .zip(yd.iter())
                    .map(|(a, b)| -s * (a * inv - dot * b * inv / (ny * ny)))
                    .collect()
            });
            vec![gx, gy]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[0.0, 0.0], &[1, 2]).softmax_lastdim().unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        let s = t(&[1000.0; 3], &[1, 3]).softmax_lastdim().unwrap();
        for v in s.to_vec() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // exp/sum at extended precision
        let s = t(&[1.0, 2.0, 3.0], &[1, 3]).softmax_lastdim().unwrap();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_6, 0.665_240_955_774_821_9];
        for (a, b) in s.to_vec().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let err = t(&[1.0, f64::NAN], &[1, 2]).softmax_lastdim().unwrap_err();
        assert!(err.to_string().contains("non-finite input"));
        assert!(t(&[f64::INFINITY, 0.0], &[2]).softmax_lastdim().is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = t(&[1.0; 3], &[3]);
        let zero = t(&[0.0; 3], &[3]);
        let y = layer_norm(&t(&[1.0, 1.0, 1.0], &[1, 3]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.to_vec(), vec![0.0; 3]);

        let y = layer_norm(&t(&[-1.0, 1.0], &[1, 2]), &t(&[1.0; 2], &[2]), &t(&[0.0; 2], &[2]), 1e-5)
            .unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert_abs_diff_eq!(y.to_vec()[0], -k, epsilon = 1e-15);
        assert_abs_diff_eq!(y.to_vec()[1], k, epsilon = 1e-15);

        let y = layer_norm(&t(&[0.0, 2.0], &[1, 2]), &t(&[2.0; 2], &[2]), &t(&[1.0; 2], &[2]), 1e-5)
            .unwrap();
        assert_abs_diff_eq!(y.to_vec()[0], -2.0 * k + 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(y.to_vec()[1], 2.0 * k + 1.0, epsilon = 1e-14);
    }

    #[test]
    fn layer_norm_shape_mismatch() {
        let x = t(&[1.0, 2.0, 3.0], &[1, 3]);
        assert!(layer_norm(&x, &t(&[1.0; 2], &[2]), &t(&[0.0; 3], &[3]), 1e-5).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let y = t(&[0.0, 1.0, -2.0, 0.5], &[4]).smooth_l1();
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 1.5, 0.125]);
    }

    #[test]
    fn negative_cosine_examples() {
        let x = t(&[1.0, 0.0], &[2]);
        assert_abs_diff_eq!(negative_cosine(&x, &x).unwrap().item(), -1.0, epsilon = 1e-15);
        let y = t(&[0.0, 1.0], &[2]);
        assert_eq!(negative_cosine(&x, &y).unwrap().item(), 0.0);
        let y = t(&[1.0, 1.0], &[2]);
        assert_abs_diff_eq!(
            negative_cosine(&x, &y).unwrap().item(),
            -std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-15
        );
        let z = t(&[0.0, 0.0], &[2]);
        let err = negative_cosine(&x, &z).unwrap_err();
        assert!(err.to_string().contains("degenerate representation"));
    }

    #[test]
    fn matmul_counts_macs() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 12], &[3, 4]);
        let (c, n) = macs::measure(|| a.matmul(&b).unwrap());
        assert_eq!(n, 24);
        assert_eq!(c.to_vec(), vec![3.0; 8]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = t(&[0.0; 8], &[4, 2]);
        assert!(matches!(
            embedding(&table, &[1, 4]),
            Err(Error::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let x = t(&[1.0, 2.0, 3.0], &[3]);
        let mut rng = RngState::new(0);
        assert_eq!(x.dropout(0.0, &mut rng, true).to_vec(), x.to_vec());
        assert_eq!(x.dropout(0.5, &mut rng, false).to_vec(), x.to_vec());
        let y = x.dropout(0.5, &mut rng, true).to_vec();
        for (a, b) in y.iter().zip(x.to_vec()) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0], &[1, 2]);
        let c = concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.slice_rows(2, 1).unwrap().to_vec(), b.to_vec());
        let d = concat_cols(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(d.shape(), &[2, 4]);
        assert_eq!(d.slice_cols(2, 2).unwrap().to_vec(), a.to_vec());
    }
}
