//! Feature restoration under missing data: temporal masks, masked
//! low-level reconstruction and the high-level siamese attraction between
//! complete and incomplete views.

use serde::{Deserialize, Serialize};

use crate::encoders::{RawViews, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{join, Init, Mlp, Parameterized};
use crate::rng::RngState;
use crate::tensor::{negative_cosine, Activation, Tensor};

/// Kept (`true`) / masked (`false`) flags per modality, in the order
/// (text, audio, vision).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalMask {
    pub keep: Vec<Vec<bool>>,
    pub missing_rate: f64,
}

impl TemporalMask {
    pub fn all_kept(lengths: &[usize]) -> Self {
        Self {
            keep: lengths.iter().map(|&t| vec![true; t]).collect(),
            missing_rate: 0.0,
        }
    }

    pub fn masked_count(&self, modality: usize) -> usize {
        self.keep[modality].iter().filter(|&&k| !k).count()
    }

    pub fn is_complete(&self) -> bool {
        self.keep.iter().all(|g| g.iter().all(|&k| k))
    }
}

/// Masks every position independently with probability `p`. Text
/// position 0 stays kept when `protect_summary` is set.
pub fn draw_mask(lengths: &[usize], p: f64, protect_summary: bool, rng: &mut RngState) -> Result<TemporalMask> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("missing rate {p} outside [0, 1]")));
    }
    let keep = lengths
        .iter()
        .enumerate()
        .map(|(m, &t)| {
            (0..t)
                .map(|i| (m == 0 && i == 0 && protect_summary) || !rng.bernoulli(p))
                .collect()
        })
        .collect();
    Ok(TemporalMask { keep, missing_rate: p })
}

fn zero_rows(x: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let cols = x.cols();
    let mut data = x.to_vec();
    for (row, &k) in keep.iter().enumerate() {
        if !k {
            data[row * cols..(row + 1) * cols].fill(0.0);
        }
    }
    Tensor::matrix(x.rows(), cols, data)
}

/// Masked audio/vision rows become zero vectors; masked tokens become UNK.
pub fn apply_mask(views: &RawViews, mask: &TemporalMask) -> Result<RawViews> {
    let lens = [views.tokens.len(), views.audio.rows(), views.vision.rows()];
    if mask.keep.len() != 3 || mask.keep.iter().zip(lens).any(|(g, t)| g.len() != t) {
        return Err(Error::shape(
            "apply_mask",
            format!("mask lengths {:?} vs inputs {lens:?}", mask.keep.iter().map(Vec::len).collect::<Vec<_>>()),
        ));
    }
    let tokens = views
        .tokens
        .iter()
        .zip(&mask.keep[0])
        .map(|(&t, &k)| if k { t } else { UNK_TOKEN })
        .collect();
    Ok(RawViews {
        tokens,
        audio: zero_rows(&views.audio, &mask.keep[1])?,
        vision: zero_rows(&views.vision, &mask.keep[2])?,
    })
}

/// Per-modality decoders `d → d → f_m`.
#[derive(Clone, Debug)]
pub struct Decoders {
    pub nets: Vec<Mlp>,
}

impl Decoders {
    pub fn new(init: &mut Init<'_>, d: usize, widths: &[usize], activation: Activation) -> Self {
        let nets = widths
            .iter()
            .enumerate()
            .map(|(m, &f)| Mlp::new(init, &format!("decoder{m}"), (d, d, f), activation, false))
            .collect();
        Self { nets }
    }
}

impl Parameterized for Decoders {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (m, net) in self.nets.iter().enumerate() {
            net.collect_params(&join(prefix, &format!("decoder{m}")), out);
        }
    }
}

/// Smooth-L1 between decoded outputs and targets, averaged over masked
/// elements of each modality and summed over modalities. Returns exactly 0
/// when nothing is masked.
pub fn reconstruction_from_outputs(outputs: &[Tensor], targets: &[Tensor], mask: &TemporalMask) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (m, (out, target)) in outputs.iter().zip(targets).enumerate() {
        let masked = mask.masked_count(m);
        if masked == 0 {
            continue;
        }
        if out.shape() != target.shape() || out.rows() != mask.keep[m].len() {
            return Err(Error::shape(
                "reconstruction",
                format!("modality {m}: output {:?}, target {:?}", out.shape(), target.shape()),
            ));
        }
        let weight: Vec<f64> = mask.keep[m].iter().map(|&k| if k { 0.0 } else { 1.0 }).collect();
        let weight = Tensor::matrix(weight.len(), 1, weight)?;
        let residual = target.detach().sub(out)?.mul_col(&weight)?;
        let term = residual
            .smooth_l1()
            .sum()
            .scale(1.0 / (masked * out.cols()) as f64);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// Decodes the final local sequences and scores them against the targets.
pub fn reconstruction_loss(
    finals: &[Tensor],
    targets: &[Tensor],
    mask: &TemporalMask,
    decoders: &Decoders,
) -> Result<Tensor> {
    if mask.is_complete() {
        return Ok(Tensor::scalar(0.0));
    }
    let outputs = finals
        .iter()
        .zip(&decoders.nets)
        .map(|(z, net)| net.forward(z))
        .collect::<Result<Vec<_>>>()?;
    reconstruction_from_outputs(&outputs, targets, mask)
}

/// Projector `p` and bottleneck predictor `q` for one representation stream.
#[derive(Clone, Debug)]
pub struct SimSiamHead {
    pub projector: Mlp,
    pub predictor: Mlp,
}

impl SimSiamHead {
    /// Projection width is `2d`, the predictor bottleneck `d / 2`.
    pub fn new(init: &mut Init<'_>, name: &str, input: usize, d: usize, activation: Activation) -> Self {
        let dp = 2 * d;
        Self {
            projector: Mlp::new(init, &join(name, "projector"), (input, dp, dp), activation, true),
            predictor: Mlp::new(init, &join(name, "predictor"), (dp, (dp / 4).max(1), dp), activation, true),
        }
    }
}

impl Parameterized for SimSiamHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.projector.collect_params(&join(prefix, "projector"), out);
        self.predictor.collect_params(&join(prefix, "predictor"), out);
    }
}

/// `D(q(p(a)), sg(p(b)))`.
pub fn directed_similarity(a: &Tensor, b: &Tensor, head: &SimSiamHead) -> Result<Tensor> {
    let online = head.predictor.forward(&head.projector.forward(a)?)?;
    let target = head.projector.forward(b)?.detach();
    negative_cosine(&online, &target)
}

/// Symmetric stop-gradient similarity loss, in `[-1, 1]`.
pub fn simsiam_loss(incomplete: &Tensor, complete: &Tensor, head: &SimSiamHead) -> Result<Tensor> {
    let p_inc = head.projector.forward(incomplete)?;
    let p_com = head.projector.forward(complete)?;
    let a = negative_cosine(&head.predictor.forward(&p_inc)?, &p_com.detach())?;
    let b = negative_cosine(&head.predictor.forward(&p_com)?, &p_inc.detach())?;
    Ok(a.add(&b)?.scale(0.5))
}

/// One head per stream `(h_l, h_a, h_v, g)`. With `shared` the three
/// utterance streams alias one head; `g` is wider and keeps its own.
#[derive(Clone, Debug)]
pub struct SimSiamHeads {
    pub heads: Vec<SimSiamHead>,
}

impl SimSiamHeads {
    pub fn new(init: &mut Init<'_>, d: usize, g_width: usize, shared: bool, activation: Activation) -> Self {
        let mut heads: Vec<SimSiamHead> = Vec::with_capacity(4);
        for m in 0..3 {
            if shared && m > 0 {
                heads.push(heads[0].clone());
            } else {
                heads.push(SimSiamHead::new(init, &format!("simsiam{m}"), d, d, activation));
            }
        }
        heads.push(SimSiamHead::new(init, "simsiam3", g_width, d, activation));
        Self { heads }
    }
}

impl Parameterized for SimSiamHeads {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, head) in self.heads.iter().enumerate() {
            head.collect_params(&join(prefix, &format!("simsiam{i}")), out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Attraction {
    pub total: Tensor,
    /// Per-stream similarity terms `(h_l, h_a, h_v, g)`.
    pub streams: Vec<f64>,
}

/// `Σ_s L_sim(s̃, s̊) + |y − ẙ|` over the streams `(h_l, h_a, h_v, g)`.
pub fn attraction_loss(
    incomplete: &[Tensor],
    complete: &[Tensor],
    heads: &SimSiamHeads,
    complete_prediction: &Tensor,
    label: f64,
) -> Result<Attraction> {
    if incomplete.len() != heads.heads.len() || complete.len() != heads.heads.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} streams per view",
            heads.heads.len()
        )));
    }
    let mut total = complete_prediction.add_scalar(-label).abs().sum();
    let mut streams = Vec::with_capacity(incomplete.len());
    for ((a, b), head) in incomplete.iter().zip(complete).zip(&heads.heads) {
        let term = simsiam_loss(a, b, head)?;
        streams.push(term.item());
        total = total.add(&term)?;
    }
    Ok(Attraction { total, streams })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Complete,
    Incomplete,
}

/// Combines the objective. In the incomplete setting `task` is the
/// incomplete-view L1 loss; in the complete setting it is the complete-view
/// loss and the restoration terms are ignored.
pub fn overall_loss(
    setting: Setting,
    task: &Tensor,
    reconstruction: Option<&Tensor>,
    attraction: Option<&Tensor>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor> {
    if lambda1 < 0.0 || lambda2 < 0.0 || !lambda1.is_finite() || !lambda2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative, got λ1={lambda1}, λ2={lambda2}"
        )));
    }
    let mut total = task.clone();
    if setting == Setting::Complete {
        return Ok(total);
    }
    for (weight, term, name) in [(lambda1, reconstruction, "reconstruction"), (lambda2, attraction, "attraction")] {
        if weight == 0.0 {
            continue;
        }
        let term = term.ok_or_else(|| Error::InvalidArgument(format!("{name} term missing with weight {weight}")))?;
        total = total.add(&term.scale(weight))?;
    }
    Ok(total)
}
