//! Objective assembly, Adam, the training loop with gradient accumulation
//! and early stopping, and batch evaluation under masking.

use serde::{Deserialize, Serialize};

use crate::attention::{Dropouts, ForwardCtx};
use crate::data::Dataset;
use crate::encoders::{RawViews, TEXT_GROUP};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Model, ViewOutput};
use crate::nn::Parameterized;
use crate::restoration::{
    apply_mask, attraction_loss, draw_mask, overall_loss, reconstruction_loss, Setting, TemporalMask,
};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub setting: Setting,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Missing rates used for training masks; one is drawn per batch.
    pub missing_rates: Vec<f64>,
    pub protect_summary: bool,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    pub lr: f64,
    pub text_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Incomplete,
            lambda1: 1.0,
            lambda2: 1.0,
            missing_rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            protect_summary: true,
            max_epochs: 30,
            patience: 8,
            batch_size: 32,
            accumulation: 4,
            lr: 1e-3,
            text_lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.max_epochs", self.max_epochs),
            ("train.patience", self.patience),
            ("train.batch_size", self.batch_size),
            ("train.accumulation", self.accumulation),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [("train.lambda1", self.lambda1), ("train.lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a finite non-negative number"));
            }
        }
        for (field, v) in [("train.lr", self.lr), ("train.text_lr", self.text_lr), ("train.eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if self.setting == Setting::Incomplete {
            if self.missing_rates.is_empty() {
                return Err(Error::config("train.missing_rates", "must not be empty in the incomplete setting"));
            }
            if self.missing_rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::config("train.missing_rates", "rates must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Restoration terms only exist in the incomplete setting.
    pub fn restores(&self) -> bool {
        self.setting == Setting::Incomplete && (self.lambda1 > 0.0 || self.lambda2 > 0.0)
    }
}

/// Per-sample objective with its scalar parts.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: Tensor,
    pub task: f64,
    pub reconstruction: Option<f64>,
    pub attraction: Option<f64>,
    pub prediction: f64,
}

/// Random streams of one sample visit: masking, and dropout for each view.
pub struct SampleRngs {
    pub mask: RngState,
    pub incomplete: RngState,
    pub complete: RngState,
}

impl SampleRngs {
    pub fn new(base: &RngState) -> Self {
        Self {
            mask: base.fork(1),
            incomplete: base.fork(2),
            complete: base.fork(3),
        }
    }
}

fn forward(model: &Model, views: &RawViews, rng: &mut RngState, dropout: Option<Dropouts>) -> Result<ViewOutput> {
    let mut ctx = match dropout {
        Some(d) => ForwardCtx::train(rng, d),
        None => ForwardCtx::eval(rng),
    };
    model.forward_view(views, &mut ctx)
}

/// Builds the objective for one sample.
///
/// Complete setting: `|y − ŷ|` on the unmasked view. Incomplete setting:
/// `|y − ỹ|` on the masked view, plus `λ1·L_recon + λ2·L_attra`, which need
/// a second forward pass over the complete view.
pub fn sample_loss(
    model: &Model,
    views: &RawViews,
    label: f64,
    mask: &TemporalMask,
    cfg: &TrainConfig,
    rngs: &mut SampleRngs,
    dropout: Option<Dropouts>,
) -> Result<SampleLoss> {
    if cfg.setting == Setting::Complete {
        let out = forward(model, views, &mut rngs.complete, dropout)?;
        let task = out.prediction.add_scalar(-label).abs().sum();
        return Ok(SampleLoss {
            task: task.item(),
            prediction: out.prediction.item(),
            total: task,
            reconstruction: None,
            attraction: None,
        });
    }
    let masked = apply_mask(views, mask)?;
    let inc = forward(model, &masked, &mut rngs.incomplete, dropout)?;
    let task = inc.prediction.add_scalar(-label).abs().sum();
    let (mut recon, mut attra) = (None, None);
    if cfg.restores() {
        let com = forward(model, views, &mut rngs.complete, dropout)?;
        if cfg.lambda1 > 0.0 {
            let targets = [
                com.encoded.text_states.clone(),
                views.audio.clone(),
                views.vision.clone(),
            ];
            recon = Some(reconstruction_loss(&inc.finals, &targets, mask, &model.decoders)?);
        }
        if cfg.lambda2 > 0.0 {
            let a = attraction_loss(&inc.streams(), &com.streams(), &model.simsiam, &com.prediction, label)?;
            attra = Some(a.total);
        }
    }
    let total = overall_loss(
        Setting::Incomplete,
        &task,
        recon.as_ref(),
        attra.as_ref(),
        cfg.lambda1,
        cfg.lambda2,
    )?;
    Ok(SampleLoss {
        task: task.item(),
        prediction: inc.prediction.item(),
        reconstruction: recon.map(|t| t.item()),
        attraction: attra.map(|t| t.item()),
        total,
    })
}

/// Bias-corrected Adam over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub lrs: Vec<f64>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[(String, Tensor)], lr: f64, text_lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            lrs: params
                .iter()
                .map(|(name, _)| if name.starts_with(TEXT_GROUP) { text_lr } else { lr })
                .collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update from the accumulated gradients; missing gradients count
    /// as zero.
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in params.iter().enumerate() {
            let grad = p.grad_ref();
            let zeros;
            let g = match grad.as_ref() {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; p.numel()];
                    &zeros
                }
            };
            let (m, v, lr) = (&mut self.m[i], &mut self.v[i], self.lrs[i]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            p.update_data(|w| {
                for j in 0..w.len() {
                    m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                    v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                    let m_hat = m[j] / c1;
                    let v_hat = v[j] / c2;
                    w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }
}

/// Patience counter over validation MAE (lower is better).
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub missing_rates: Vec<f64>,
    pub loss: f64,
    pub task: f64,
    pub reconstruction: Option<f64>,
    pub attraction: Option<f64>,
    pub val_mae: f64,
    pub val_acc2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
}

const EPOCH_TAG: u64 = 0x5eed_0000;
const EVAL_TAG: u64 = 0xe7a1_0000;

/// Random streams of sample `sample` in epoch `epoch` (counted from 1).
pub fn visit_rngs(seed: u64, epoch: usize, sample: usize) -> SampleRngs {
    SampleRngs::new(&RngState::with_stream(seed, EPOCH_TAG + epoch as u64).fork(sample as u64))
}

/// Mask used when evaluating sample `index` at rate `p`; fixed per
/// `(seed, index, p)` so every model sees the same corruption.
pub fn eval_mask(ds: &Dataset, index: usize, p: f64, protect_summary: bool, seed: u64) -> Result<TemporalMask> {
    let mut rng = RngState::with_stream(seed, EVAL_TAG).fork(index as u64).fork(p.to_bits());
    draw_mask(&ds.dims.lengths(), p, protect_summary, &mut rng)
}

/// Inference on `indices`, each sample masked at its own rate.
pub fn predict_masked(
    model: &Model,
    ds: &Dataset,
    indices: &[usize],
    rates: &[f64],
    protect_summary: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = RngState::new(seed);
    indices
        .iter()
        .zip(rates)
        .map(|(&i, &p)| {
            let views = ds.views(i)?;
            let views = if p > 0.0 {
                apply_mask(&views, &eval_mask(ds, i, p, protect_summary, seed)?)?
            } else {
                views
            };
            Ok(model.forward_view(&views, &mut ForwardCtx::eval(&mut rng))?.prediction.item())
        })
        .collect()
}

/// Metrics on `indices` with every sample masked at rate `p`.
pub fn evaluate_at(
    model: &Model,
    ds: &Dataset,
    indices: &[usize],
    p: f64,
    protect_summary: bool,
    seed: u64,
) -> Result<(Vec<f64>, MetricReport)> {
    let rates = vec![p; indices.len()];
    let preds = predict_masked(model, ds, indices, &rates, protect_summary, seed)?;
    let labels = indices.iter().map(|&i| ds.label(i)).collect::<Result<Vec<_>>>()?;
    let report = evaluate(&preds, &labels)?;
    Ok((preds, report))
}

/// Validation rates: complete views in the complete setting; otherwise the
/// training rates assigned round-robin over the validation samples.
fn validation_rates(cfg: &TrainConfig, n: usize) -> Vec<f64> {
    match cfg.setting {
        Setting::Complete => vec![0.0; n],
        Setting::Incomplete => (0..n).map(|i| cfg.missing_rates[i % cfg.missing_rates.len()]).collect(),
    }
}

/// Trains `model` in place on the training split, keeping the parameters of
/// the epoch with the lowest validation MAE.
pub fn train(model: &Model, ds: &Dataset, cfg: &TrainConfig, seed: u64, dropout: Dropouts) -> Result<History> {
    train_with(model, ds, cfg, seed, dropout, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    dropout: Dropouts,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if ds.split.train.is_empty() || ds.split.val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let params = model.named_params("");
    let mut adam = Adam::new(&params, cfg.lr, cfg.text_lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.snapshot();
    let mut epochs = Vec::new();
    let val_rates = validation_rates(cfg, ds.split.val.len());
    let val_labels = ds.split.val.iter().map(|&i| ds.label(i)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / (cfg.batch_size * cfg.accumulation) as f64;
    let lengths = ds.dims.lengths();

    for epoch in 1..=cfg.max_epochs {
        let mut order = ds.split.train.clone();
        RngState::with_stream(seed, EPOCH_TAG + epoch as u64).fork(u64::MAX).shuffle(&mut order);
        let mut rate_rng = RngState::with_stream(seed, EPOCH_TAG + epoch as u64).fork(u64::MAX - 1);
        let (mut loss_sum, mut task_sum, mut recon_sum, mut attra_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut rates_used = Vec::new();
        let mut pending = 0;
        params.iter().for_each(|(_, p)| p.zero_grad());
        for batch in order.chunks(cfg.batch_size) {
            let p = match cfg.setting {
                Setting::Complete => 0.0,
                Setting::Incomplete => cfg.missing_rates[rate_rng.below(cfg.missing_rates.len())],
            };
            rates_used.push(p);
            for &i in batch {
                let views = ds.views(i)?;
                let mut rngs = visit_rngs(seed, epoch, i);
                let mask = match cfg.setting {
                    Setting::Complete => TemporalMask::all_kept(&lengths),
                    Setting::Incomplete => draw_mask(&lengths, p, cfg.protect_summary, &mut rngs.mask)?,
                };
                let loss = sample_loss(model, &views, ds.label(i)?, &mask, cfg, &mut rngs, Some(dropout))?;
                let value = loss.total.item();
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss.total.scale(scale).backward()?;
                loss_sum += value;
                task_sum += loss.task;
                recon_sum += loss.reconstruction.unwrap_or(0.0);
                attra_sum += loss.attraction.unwrap_or(0.0);
            }
            pending += 1;
            if pending == cfg.accumulation {
                adam.step(&params);
                params.iter().for_each(|(_, p)| p.zero_grad());
                pending = 0;
            }
        }
        if pending > 0 {
            adam.step(&params);
        }
        let n = order.len() as f64;
        let preds = predict_masked(model, ds, &ds.split.val, &val_rates, cfg.protect_summary, seed)?;
        let report = evaluate(&preds, &val_labels)?;
        let incomplete = cfg.setting == Setting::Incomplete;
        let record = EpochRecord {
            epoch,
            missing_rates: rates_used,
            loss: loss_sum / n,
            task: task_sum / n,
            reconstruction: (incomplete && cfg.lambda1 > 0.0).then_some(recon_sum / n),
            attraction: (incomplete && cfg.lambda2 > 0.0).then_some(attra_sum / n),
            val_mae: report.mae,
            val_acc2: report.acc2_nonneg,
        };
        on_epoch(&record);
        if stopper.observe(epoch, report.mae) {
            best = model.snapshot();
        }
        epochs.push(record);
        if stopper.should_stop() {
            break;
        }
    }
    model.restore(&best)?;
    let stopped_early = stopper.should_stop();
    Ok(History {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_mae: stopper.best,
        stopped_early,
    })
}
