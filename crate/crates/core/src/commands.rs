//! Command implementations behind the `emt` binary. Every command writes
//! its resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{Block, Direction, Dropouts, ForwardCtx};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{count_macs, emt_forward, param_count, FusionConfig, FusionState, ParamBreakdown, Strategy};
use crate::metrics::{auilc, poly_fit, MetricReport, PolyFit};
use crate::model::{Checkpoint, Model, MODALITIES};
use crate::nn::{Init, Parameterized};
use crate::restoration::{apply_mask, draw_mask, Setting};
use crate::rng::RngState;
use crate::tensor::{finite_diff_check_sampled, macs, GradCheckReport, Tensor};
use crate::training::{eval_mask, evaluate_at, predict_masked, sample_loss, train, History, SampleRngs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare(cfg: &RunConfig, command: &str, out: &Path) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    cfg.command = Some(command.into());
    cfg.output_dir = out.to_path_buf();
    cfg.validate()?;
    cfg.write_resolved(out)?;
    Ok(cfg)
}

/// Test-split evaluation that matches the training protocol: complete views
/// in the complete setting, training rates round-robin otherwise.
pub fn protocol_report(model: &Model, ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<MetricReport> {
    let test = &ds.split.test;
    let rates: Vec<f64> = match cfg.train.setting {
        Setting::Complete => vec![0.0; test.len()],
        Setting::Incomplete => {
            let r = &cfg.train.missing_rates;
            (0..test.len()).map(|i| r[i % r.len()]).collect()
        }
    };
    let preds = predict_masked(model, ds, test, &rates, cfg.train.protect_summary, seed)?;
    let labels = test.iter().map(|&i| ds.label(i)).collect::<Result<Vec<_>>>()?;
    crate::metrics::evaluate(&preds, &labels)
}

fn mean_report(reports: &[MetricReport]) -> BTreeMap<String, f64> {
    MetricReport::NAMES
        .iter()
        .filter_map(|&name| {
            let values: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
            (values.len() == reports.len() && !values.is_empty())
                .then(|| (name.to_string(), values.iter().sum::<f64>() / values.len() as f64))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub history: History,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seeds: Vec<SeedResult>,
    pub mean: BTreeMap<String, f64>,
}

fn train_seed(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<(Model, History)> {
    let model = Model::new(&cfg.model, ds.dims, seed)?;
    let history = train(&model, ds, &cfg.train, seed, cfg.model.fusion.dropout)?;
    Ok((model, history))
}

/// Trains one model per seed. Writes `seed<k>/{checkpoint,history,report}.json`
/// and `aggregate.json`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let cfg = prepare(cfg, "train", out)?;
    let ds = cfg.data.load()?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let (model, history) = train_seed(&cfg, &ds, seed)?;
        let report = protocol_report(&model, &ds, &cfg, seed)?;
        let dir = out.join(format!("seed{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        model.checkpoint(seed).save(&dir.join("checkpoint.json"))?;
        write_json(&dir.join("history.json"), &history)?;
        write_json(&dir.join("report.json"), &report)?;
        seeds.push(SeedResult { seed, history, report });
    }
    let reports: Vec<MetricReport> = seeds.iter().map(|s| s.report.clone()).collect();
    let summary = TrainSummary {
        mean: mean_report(&reports),
        seeds,
    };
    write_json(&out.join("aggregate.json"), &summary.mean)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatePoint {
    pub rate: f64,
    pub protect_summary: bool,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSeed {
    pub seed: u64,
    pub points: Vec<RatePoint>,
    /// Per-metric area over the protected curve; absent with fewer than two rates.
    pub auilc: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rates: Vec<f64>,
    pub seeds: Vec<SweepSeed>,
    pub mean_auilc: BTreeMap<String, f64>,
}

/// Metrics of `model` on the test split at every rate, plus AUILC.
pub fn sweep_model(model: &Model, ds: &Dataset, rates: &[f64], protect_summary: bool, seed: u64) -> Result<SweepSeed> {
    let mut points = Vec::new();
    for &p in rates {
        let (_, report) = evaluate_at(model, ds, &ds.split.test, p, protect_summary, seed)?;
        points.push(RatePoint {
            rate: p,
            protect_summary,
            report,
        });
    }
    let mut auilcs = BTreeMap::new();
    if rates.len() >= 2 {
        for name in MetricReport::NAMES {
            let values: Option<Vec<f64>> = points.iter().map(|pt| pt.report.get(name)).collect();
            if let Some(values) = values {
                auilcs.insert(name.to_string(), auilc(rates, &values)?);
            }
        }
    }
    // at p = 1 the protected summary token is the only text left; report
    // the fully masked view too
    if protect_summary && rates.last() == Some(&1.0) {
        let (_, report) = evaluate_at(model, ds, &ds.split.test, 1.0, false, seed)?;
        points.push(RatePoint {
            rate: 1.0,
            protect_summary: false,
            report,
        });
    }
    Ok(SweepSeed {
        seed,
        points,
        auilc: auilcs,
    })
}

/// Missing-rate sweep over a checkpoint or over freshly trained models.
/// Writes `curve.csv` (seed, rate, protected, metric, value) and `auilc.json`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepSummary> {
    let cfg = prepare(cfg, "sweep", out)?;
    let ds = cfg.data.load()?;
    let rates = cfg.sweep.rates.clone();
    let protect = cfg.train.protect_summary;
    let mut seeds = Vec::new();
    if let Some(path) = &cfg.sweep.checkpoint {
        let ck = Checkpoint::load(path)?;
        let model = Model::from_checkpoint(&ck)?;
        seeds.push(sweep_model(&model, &ds, &rates, protect, ck.seed)?);
    } else {
        for &seed in &cfg.seeds {
            let (model, _) = train_seed(&cfg, &ds, seed)?;
            seeds.push(sweep_model(&model, &ds, &rates, protect, seed)?);
        }
    }
    let mut csv = String::from("seed,rate,protect_summary,metric,value\n");
    for s in &seeds {
        for pt in &s.points {
            for name in MetricReport::NAMES {
                if let Some(v) = pt.report.get(name) {
                    let _ = writeln!(csv, "{},{},{},{},{}", s.seed, pt.rate, pt.protect_summary, name, v);
                }
            }
        }
    }
    write_text(&out.join("curve.csv"), &csv)?;
    let mut mean_auilc = BTreeMap::new();
    for name in MetricReport::NAMES {
        let values: Vec<f64> = seeds.iter().filter_map(|s| s.auilc.get(name).copied()).collect();
        if !values.is_empty() && values.len() == seeds.len() {
            mean_auilc.insert(name.to_string(), values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    let summary = SweepSummary {
        rates,
        seeds,
        mean_auilc,
    };
    write_json(&out.join("auilc.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub strategy: Strategy,
    pub analytic_macs: u64,
    pub measured_macs: u64,
    pub params: ParamBreakdownRow,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamBreakdownRow {
    pub mpu: usize,
    pub pooling: usize,
    pub readout: usize,
    pub total: usize,
}

impl From<ParamBreakdown> for ParamBreakdownRow {
    fn from(b: ParamBreakdown) -> Self {
        Self {
            mpu: b.mpu,
            pooling: b.pooling,
            readout: b.readout,
            total: b.total,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SharingRow {
    pub share_mpu: bool,
    pub share_modality: bool,
    pub share_layer: bool,
    pub direction_storages: usize,
    pub mpu_params: usize,
    pub total: usize,
    /// Distinct scalars reached by walking the built parameter graph.
    pub traversal: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingFit {
    pub strategy: Strategy,
    pub lengths: usize,
    pub modalities: Vec<usize>,
    pub macs: Vec<u64>,
    pub degree: usize,
    pub fit: PolyFit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub lengths: [usize; 3],
    pub d: usize,
    pub layers: usize,
    pub rows: Vec<ComplexityRow>,
    pub sharing: Vec<SharingRow>,
    pub scaling: Vec<ScalingFit>,
}

/// Distinct trainable scalars of a built fusion stack.
pub fn traversal_count(cfg: &FusionConfig, modalities: usize) -> Result<usize> {
    let mut rng = RngState::new(0);
    let state = FusionState::new(&mut Init::new(&mut rng), cfg, modalities)?;
    Ok(state.param_count())
}

/// Tally of one evaluation-mode forward over random inputs.
pub fn measured_macs(cfg: &FusionConfig, lengths: &[usize], seed: u64) -> Result<u64> {
    let mut rng = RngState::new(seed);
    let state = FusionState::new(&mut Init::new(&mut rng), cfg, lengths.len())?;
    let (locals, globals) = random_inputs(&mut rng, cfg.d, lengths)?;
    let (out, count) = macs::measure(|| emt_forward(&state, &locals, &globals, &mut ForwardCtx::eval(&mut rng)));
    out?;
    Ok(count)
}

fn random_inputs(rng: &mut RngState, d: usize, lengths: &[usize]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut draw = |rows: usize| Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.normal()).collect());
    let locals = lengths.iter().map(|&t| draw(t)).collect::<Result<Vec<_>>>()?;
    let globals = lengths.iter().map(|_| draw(1)).collect::<Result<Vec<_>>>()?;
    Ok((locals, globals))
}

/// MAC counts over `M = 2..=6` modalities of length `t`, fitted linearly for
/// OAGL and quadratically otherwise.
pub fn scaling_fits(base: &FusionConfig, t: usize) -> Result<Vec<ScalingFit>> {
    let modalities: Vec<usize> = (2..=6).collect();
    Strategy::ALL
        .iter()
        .map(|&strategy| {
            let cfg = FusionConfig {
                strategy,
                ..base.clone()
            };
            let macs: Vec<u64> = modalities.iter().map(|&m| count_macs(&cfg, &vec![t; m])).collect();
            let degree = if strategy == Strategy::Oagl { 1 } else { 2 };
            let xs: Vec<f64> = modalities.iter().map(|&m| m as f64).collect();
            let ys: Vec<f64> = macs.iter().map(|&v| v as f64).collect();
            Ok(ScalingFit {
                strategy,
                lengths: t,
                modalities: modalities.clone(),
                macs,
                degree,
                fit: poly_fit(&xs, &ys, degree)?,
            })
        })
        .collect()
}

/// Complexity table. Deterministic numbers go to `bench.json`; wall times go
/// to `timing.json`.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    let cfg = prepare(cfg, "bench", out)?;
    let base = FusionConfig {
        dropout: Dropouts::none(),
        ..cfg.model.fusion.clone()
    };
    let lengths = cfg.bench.lengths;
    let mut rows = Vec::new();
    let mut timing = BTreeMap::new();
    for strategy in Strategy::ALL {
        let fc = FusionConfig {
            strategy,
            ..base.clone()
        };
        let analytic = count_macs(&fc, &lengths);
        let start = Instant::now();
        let mut measured = 0;
        for run in 0..cfg.bench.timing_runs.max(1) {
            measured = measured_macs(&fc, &lengths, run as u64)?;
        }
        let per_forward = start.elapsed().as_secs_f64() / cfg.bench.timing_runs.max(1) as f64;
        timing.insert(strategy.name().to_string(), per_forward);
        rows.push(ComplexityRow {
            strategy,
            analytic_macs: analytic,
            measured_macs: measured,
            params: param_count(&fc, MODALITIES).into(),
        });
    }
    let mut sharing = Vec::new();
    for bits in 0..8u8 {
        let fc = FusionConfig {
            strategy: Strategy::Oagl,
            share_mpu: bits & 4 != 0,
            share_modality: bits & 2 != 0,
            share_layer: bits & 1 != 0,
            ..base.clone()
        };
        let b = param_count(&fc, MODALITIES);
        sharing.push(SharingRow {
            share_mpu: fc.share_mpu,
            share_modality: fc.share_modality,
            share_layer: fc.share_layer,
            direction_storages: b.direction_storages,
            mpu_params: b.mpu,
            total: b.total,
            traversal: traversal_count(&fc, MODALITIES)?,
        });
    }
    let report = BenchReport {
        lengths,
        d: base.d,
        layers: base.layers,
        rows,
        sharing,
        scaling: scaling_fits(&base, 32)?,
    };
    write_json(&out.join("bench.json"), &report)?;
    write_json(&out.join("timing.json"), &timing)?;
    let mut csv = String::from("share_mpu,share_modality,share_layer,direction_storages,mpu_params,total,traversal\n");
    for r in &report.sharing {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.share_mpu, r.share_modality, r.share_layer, r.direction_storages, r.mpu_params, r.total, r.traversal
        );
    }
    write_text(&out.join("sharing.csv"), &csv)?;
    Ok(report)
}

/// Finite-difference check of the incomplete-setting objective on sample 0
/// of the configured data, with dropout off.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.fusion.dropout = Dropouts::none();
    let mut train_cfg = cfg.train.clone();
    train_cfg.setting = Setting::Incomplete;
    let seed = cfg.seeds[0];
    let ds = cfg.data.load()?;
    let model = Model::new(&model_cfg, ds.dims, seed)?;
    let views = ds.views(0)?;
    let label = ds.label(0)?;
    let mut mask_rng = RngState::new(seed).fork(0x9c);
    let mask = draw_mask(&ds.dims.lengths(), cfg.gradcheck.missing_rate, train_cfg.protect_summary, &mut mask_rng)?;
    let params: Vec<Tensor> = model.named_params("").into_iter().map(|(_, t)| t).collect();
    let objective = || {
        let mut rngs = SampleRngs::new(&RngState::new(seed));
        Ok(sample_loss(&model, &views, label, &mask, &train_cfg, &mut rngs, None)?.total)
    };
    let limit = (cfg.gradcheck.samples_per_tensor > 0).then_some(cfg.gradcheck.samples_per_tensor);
    finite_diff_check_sampled(objective, &params, cfg.gradcheck.step, cfg.gradcheck.tolerance, limit)
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<GradCheckReport> {
    let cfg = prepare(cfg, "gradcheck", out)?;
    let report = run_gradcheck(&cfg)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    report.into_result()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DumpedMatrix {
    pub layer: usize,
    pub unit: String,
    pub direction: String,
    pub block: String,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::NToM => "n_to_m",
        Direction::MToN => "m_to_n",
    }
}

fn block_name(b: Block) -> &'static str {
    match b {
        Block::Cross => "cross",
        Block::SelfAttn => "self",
    }
}

/// Attention weights of one test-time forward. One CSV per
/// (layer, unit, direction, block) with columns head,row,col,weight, plus
/// `attention_index.json`.
pub fn cmd_dump_attention(cfg: &RunConfig, out: &Path) -> Result<Vec<DumpedMatrix>> {
    if cfg.dump.checkpoint.is_none() {
        return Err(Error::config("dump.checkpoint", "a trained checkpoint is required"));
    }
    let cfg = prepare(cfg, "dump-attn", out)?;
    let path = cfg.dump.checkpoint.as_ref().expect("checked above");
    let ck = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ck)?;
    let ds = cfg.data.load()?;
    let index = cfg.dump.sample;
    let mut views = ds.views(index)?;
    let p = cfg.dump.missing_rate;
    if p > 0.0 {
        views = apply_mask(&views, &eval_mask(&ds, index, p, cfg.train.protect_summary, ck.seed)?)?;
    }
    let mut rng = RngState::new(ck.seed);
    let mut ctx = ForwardCtx::eval(&mut rng);
    ctx.record_attention = true;
    let output = model.forward_view(&views, &mut ctx)?;
    let mut listing = Vec::new();
    for unit in &output.attention {
        for rec in &unit.records {
            let w = &rec.weights;
            let file = format!(
                "attn_l{}_{}_{}_{}.csv",
                unit.layer,
                unit.unit,
                direction_name(rec.direction),
                block_name(rec.block)
            );
            let mut csv = String::from("head,row,col,weight\n");
            for h in 0..w.heads {
                for r in 0..w.rows {
                    for c in 0..w.cols {
                        let _ = writeln!(csv, "{h},{r},{c},{}", w.get(h, r, c));
                    }
                }
            }
            write_text(&out.join(&file), &csv)?;
            listing.push(DumpedMatrix {
                layer: unit.layer,
                unit: unit.unit.clone(),
                direction: direction_name(rec.direction).into(),
                block: block_name(rec.block).into(),
                heads: w.heads,
                rows: w.rows,
                cols: w.cols,
                file,
            });
        }
    }
    write_json(&out.join("attention_index.json"), &listing)?;
    Ok(listing)
}

/// Output directory for a command: the configured one unless overridden.
pub fn output_dir(cfg: &RunConfig, over: Option<PathBuf>) -> PathBuf {
    over.unwrap_or_else(|| cfg.output_dir.clone())
}
