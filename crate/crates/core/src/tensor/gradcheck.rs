use serde::Serialize;

use super::{frozen, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub h: f64,
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Tensors whose error exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.max_rel_error >= self.tol)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let worst = self.worst().expect("failed report has tensors");
        Err(Error::GradCheck {
            name: worst.name.clone(),
            error: worst.max_rel_error,
            tol: self.tol,
        })
    }
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// The error for each element is `|g_ad − g_fd| / max(1, |g_ad|, |g_fd|)`.
/// `f` is evaluated twice before probing; differing results are reported as
/// [`Error::NonDeterministic`]. Values passed through [`Tensor::detach`] are
/// held at their unperturbed values during probes, matching reverse mode's
/// treatment of stop-gradient as a constant.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    finite_diff_check_sampled(f, params, h, tol, None)
}

/// As [`finite_diff_check`], probing at most `max_per_tensor` evenly spaced
/// elements of each tensor.
pub fn finite_diff_check_sampled<F>(
    mut f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    max_per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let (loss, tape) = frozen::record(&mut f);
    let loss = loss?;
    let base = loss.item();
    loss.backward()?;
    drop(loss);
    let mut f = move || frozen::replay(&tape, &mut f);
    let again = f()?.item();
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut tensors = Vec::with_capacity(params.len());
    for (k, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let n = p.numel();
        let indices: Vec<usize> = match max_per_tensor {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, 0usize);
        for &i in &indices {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + h);
            let plus = f()?.item();
            p.update_data(|d| d[i] = orig - h);
            let minus = f()?.item();
            p.update_data(|d| d[i] = orig);
            let numeric = (plus - minus) / (2.0 * h);
            let ad = analytic[i];
            let err = (ad - numeric).abs() / 1f64.max(ad.abs()).max(numeric.abs());
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        tensors.push(TensorCheck {
            name: p.name().map(str::to_owned).unwrap_or_else(|| format!("tensor[{k}]")),
            numel: n,
            checked: indices.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: base,
        h,
        tol,
        passed: max_rel_error < tol,
        max_rel_error,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::{concat_rows, layer_norm, mix_rows, negative_cosine};

    fn random_param(name: &str, shape: &[usize], rng: &mut RngState) -> Tensor {
        let n = shape.iter().product();
        Tensor::param(name, (0..n).map(|_| rng.normal()).collect(), shape).unwrap()
    }

    #[test]
    fn half_squared_norm() {
        let mut rng = RngState::new(1);
        let x = random_param("x", &[7], &mut rng);
        let r = finite_diff_check(|| Ok(x.mul(&x)?.sum().scale(0.5)), &[x.clone()], 1e-5, 1e-9)
            .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut rng = RngState::new(2);
        let logits = random_param("logits", &[4, 5], &mut rng);
        let mut onehot = vec![0.0; 20];
        for i in 0..4 {
            onehot[i * 5 + (i * 3) % 5] = 1.0;
        }
        let target = Tensor::new(onehot, &[4, 5]).unwrap();
        let r = finite_diff_check(
            || {
                let logp = logits.softmax_lastdim()?.ln();
                Ok(logp.mul(&target)?.sum().scale(-1.0))
            },
            &[logits.clone()],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn primitives_over_random_shapes() {
        for seed in 0..20u64 {
            let mut rng = RngState::new(100 + seed);
            let m = 1 + rng.below(4);
            let k = 1 + rng.below(4);
            let n = 1 + rng.below(4);
            let a = random_param("a", &[m, k], &mut rng);
            let b = random_param("b", &[k, n], &mut rng);
            let g = random_param("gamma", &[n], &mut rng);
            let be = random_param("beta", &[n], &mut rng);
            let w = random_param("w", &[m, 2], &mut rng);
            let c = random_param("c", &[m, n], &mut rng);
            let params = [a.clone(), b.clone(), g.clone(), be.clone(), w.clone(), c.clone()];
            let r = finite_diff_check(
                || {
                    let ab = a.matmul(&b)?;
                    let ln = layer_norm(&ab.add(&c)?, &g, &be, 1e-5)?;
                    let acts = ln.gelu().add(&ln.tanh())?.add(&ln.sigmoid())?;
                    let sm = acts.softmax_lastdim()?;
                    let mixed = mix_rows(&w.softmax_lastdim()?, &[sm.clone(), c.smooth_l1()])?;
                    let stacked = concat_rows(&[mixed, ab.transpose()?.transpose()?])?;
                    let cos = negative_cosine(&stacked.mean_rows()?, &c.mean_rows()?.add_scalar(0.5))?;
                    Ok(stacked.mul(&stacked)?.mean().add(&cos)?)
                },
                &params,
                1e-5,
                1e-6,
            )
            .unwrap();
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn stop_gradient_values_are_held_during_probes() {
        let mut rng = RngState::new(3);
        let x = random_param("x", &[4], &mut rng);
        let r = finite_diff_check(
            || Ok(x.mul(&x.detach())?.sum()),
            &[x.clone()],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(x.grad().unwrap(), x.to_vec());
    }

    #[test]
    fn detects_nondeterminism() {
        let x = Tensor::param("x", vec![1.0], &[1]).unwrap();
        let mut calls = 0.0;
        let err = finite_diff_check(
            || {
                calls += 1.0;
                Ok(x.scale(calls))
            },
            &[x.clone()],
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn detects_corrupted_rule_and_names_tensor() {
        let mut rng = RngState::new(9);
        let x = random_param("weights.sig", &[3, 3], &mut rng);
        let y = random_param("weights.plain", &[3], &mut rng);
        crate::tensor::fault::corrupt_backward("sigmoid", 1.5);
        let r = finite_diff_check(
            || Ok(x.sigmoid().sum().add(&y.mul(&y)?.sum())?),
            &[x.clone(), y.clone()],
            1e-5,
            1e-6,
        );
        crate::tensor::fault::clear();
        let r = r.unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst().unwrap().name, "weights.sig");
        assert_eq!(r.failures().count(), 1);
    }
}
