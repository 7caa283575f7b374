//! Sentiment regression metrics and the area under a metric-vs-missing-rate
//! curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Round half away from zero, clamp to [-3, 3].
    Acc7,
    /// Round half away from zero, clamp to [-2, 2].
    Acc5,
    /// Round half away from zero, clamp to [-1, 1].
    Acc3,
    /// Five right-closed bins of [-1, 1] with edges ±0.2, ±0.6.
    Acc5Sims,
    /// Three right-closed bins of [-1, 1] with edges ±0.1.
    Acc3Sims,
    /// Negative vs non-negative.
    Acc2Nonneg,
    /// Negative vs positive; exact zeros have no class.
    Acc2Pos,
}

fn bin_right_closed(y: f64, edges: &[f64]) -> i32 {
    let below = edges.iter().filter(|&&e| y > e).count() as i32;
    below - (edges.len() as i32) / 2
}

/// Class id of `y` under `scheme`, or `None` when excluded.
pub fn discretize(y: f64, scheme: Scheme) -> Option<i32> {
    match scheme {
        Scheme::Acc7 => Some(y.round().clamp(-3.0, 3.0) as i32),
        Scheme::Acc5 => Some(y.round().clamp(-2.0, 2.0) as i32),
        Scheme::Acc3 => Some(y.round().clamp(-1.0, 1.0) as i32),
        Scheme::Acc5Sims => Some(bin_right_closed(y, &[-0.6, -0.2, 0.2, 0.6])),
        Scheme::Acc3Sims => Some(bin_right_closed(y, &[-0.1, 0.1])),
        Scheme::Acc2Nonneg => Some(i32::from(y >= 0.0)),
        Scheme::Acc2Pos => {
            if y == 0.0 {
                None
            } else {
                Some(i32::from(y > 0.0))
            }
        }
    }
}

/// Fraction of samples whose prediction and label fall in the same class,
/// over samples where both have a class. Returns `(accuracy, counted)`.
pub fn accuracy(preds: &[f64], labels: &[f64], scheme: Scheme) -> (f64, usize) {
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        if let (Some(a), Some(b)) = (discretize(p, scheme), discretize(y, scheme)) {
            counted += 1;
            hits += usize::from(a == b);
        }
    }
    if counted == 0 {
        (0.0, 0)
    } else {
        (hits as f64 / counted as f64, counted)
    }
}

/// Support-weighted F1 over the two classes of a binary scheme.
pub fn weighted_f1(preds: &[f64], labels: &[f64], scheme: Scheme) -> f64 {
    let mut pairs = Vec::new();
    for (&p, &y) in preds.iter().zip(labels) {
        if let (Some(a), Some(b)) = (discretize(p, scheme), discretize(y, scheme)) {
            pairs.push((a, b));
        }
    }
    if pairs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for class in [0, 1] {
        let tp = pairs.iter().filter(|&&(p, y)| p == class && y == class).count() as f64;
        let fp = pairs.iter().filter(|&&(p, y)| p == class && y != class).count() as f64;
        let fn_ = pairs.iter().filter(|&&(p, y)| p != class && y == class).count() as f64;
        let support = tp + fn_;
        let denom = 2.0 * tp + fp + fn_;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += support * f1;
    }
    total / pairs.len() as f64
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelScale {
    /// Scores in [-3, 3].
    Mosi,
    /// Scores in [-1, 1].
    Sims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mae: f64,
    pub corr: f64,
    pub corr_degenerate: bool,
    /// `None` on the [-1, 1] scale.
    pub acc7: Option<f64>,
    pub acc5: f64,
    pub acc3: f64,
    pub acc2_nonneg: f64,
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    /// Samples entering the negative/positive metrics.
    pub n_pos: usize,
}

impl MetricReport {
    pub const NAMES: [&'static str; 9] = [
        "mae", "corr", "acc7", "acc5", "acc3", "acc2_nonneg", "acc2_pos", "f1_nonneg", "f1_pos",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mae" => Some(self.mae),
            "corr" => Some(self.corr),
            "acc7" => self.acc7,
            "acc5" => Some(self.acc5),
            "acc3" => Some(self.acc3),
            "acc2_nonneg" => Some(self.acc2_nonneg),
            "acc2_pos" => Some(self.acc2_pos),
            "f1_nonneg" => Some(self.f1_nonneg),
            "f1_pos" => Some(self.f1_pos),
            _ => None,
        }
    }
}

pub fn evaluate(preds: &[f64], labels: &[f64]) -> Result<MetricReport> {
    evaluate_scaled(preds, labels, LabelScale::Mosi)
}

pub fn evaluate_scaled(preds: &[f64], labels: &[f64], scale: LabelScale) -> Result<MetricReport> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "evaluate needs two equal-length series of at least 2, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluate"));
    }
    let n = preds.len();
    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
    let corr = pearson(preds, labels);
    let (acc7, acc5, acc3) = match scale {
        LabelScale::Mosi => (
            Some(accuracy(preds, labels, Scheme::Acc7).0),
            accuracy(preds, labels, Scheme::Acc5).0,
            accuracy(preds, labels, Scheme::Acc3).0,
        ),
        LabelScale::Sims => (
            None,
            accuracy(preds, labels, Scheme::Acc5Sims).0,
            accuracy(preds, labels, Scheme::Acc3Sims).0,
        ),
    };
    let (acc2_pos, n_pos) = accuracy(preds, labels, Scheme::Acc2Pos);
    Ok(MetricReport {
        n,
        mae,
        corr: corr.unwrap_or(0.0),
        corr_degenerate: corr.is_none(),
        acc7,
        acc5,
        acc3,
        acc2_nonneg: accuracy(preds, labels, Scheme::Acc2Nonneg).0,
        acc2_pos,
        f1_nonneg: weighted_f1(preds, labels, Scheme::Acc2Nonneg),
        f1_pos: weighted_f1(preds, labels, Scheme::Acc2Pos),
        n_pos,
    })
}

/// Trapezoidal area under `values` over strictly ascending `rates`.
pub fn auilc(rates: &[f64], values: &[f64]) -> Result<f64> {
    if rates.len() != values.len() || rates.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "auilc needs equal-length series of at least 2, got {} rates and {} values",
            rates.len(),
            values.len()
        )));
    }
    if rates.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("missing rates must be strictly ascending".into()));
    }
    Ok(rates
        .windows(2)
        .zip(values.windows(2))
        .map(|(p, v)| 0.5 * (v[0] + v[1]) * (p[1] - p[0]))
        .sum())
}

/// Least-squares polynomial fit with its coefficient of determination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    /// Coefficients from the constant term upwards.
    pub coeffs: Vec<f64>,
    pub r2: f64,
}

pub fn poly_fit(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    if xs.len() != ys.len() || xs.len() <= degree {
        return Err(Error::InvalidArgument(format!(
            "degree-{degree} fit needs more than {degree} points, got {} x and {} y",
            xs.len(),
            ys.len()
        )));
    }
    let x = nalgebra::DMatrix::from_fn(xs.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let y = nalgebra::DVector::from_column_slice(ys);
    let coeffs = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let fitted = &x * &coeffs;
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = ys.iter().zip(fitted.iter()).map(|(v, f)| (v - f).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PolyFit {
        coeffs: coeffs.iter().copied().collect(),
        r2,
    })
}
