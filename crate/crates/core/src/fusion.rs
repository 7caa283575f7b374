//! Cross-modal fusion stack: the three fusion strategies, context pooling,
//! hierarchical parameter sharing and exact complexity accounting.
//!
//! The stack is generic over the number of modalities `M`; the model uses
//! `M = 3` in the order (text, audio, vision).

use serde::{Deserialize, Serialize};

use crate::attention::{
    mpu_forward, mpu_mac_count, AttnRecord, Dropouts, ForwardCtx, MpuDims, MpuParams,
};
use crate::error::{Error, Result};
use crate::nn::{join, sinusoidal_positions, Init, Linear, Parameterized};
use crate::tensor::{concat_cols, concat_rows, mix_rows, Activation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// One-to-one local-local: an MPU per modality pair.
    Ooll,
    /// One-to-all local-local: every modality against a concatenated
    /// common message.
    Oall,
    /// One-to-all global-local: every modality against the `M × d` global
    /// context of utterance vectors.
    Oagl,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Ooll, Strategy::Oall, Strategy::Oagl];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ooll => "ooll",
            Strategy::Oall => "oall",
            Strategy::Oagl => "oagl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Parallel,
    Serial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Attention,
    Average,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub variant: Variant,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub expansion: usize,
    pub activation: Activation,
    /// Keep the output projection inside each attention block.
    pub attn_output_proj: bool,
    pub pooling: Pooling,
    /// Hidden width of the attention-pooling scorer.
    pub pool_hidden: usize,
    pub share_mpu: bool,
    pub share_modality: bool,
    pub share_layer: bool,
    pub dropout: Dropouts,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Oagl,
            variant: Variant::Parallel,
            layers: 3,
            d: 128,
            heads: 4,
            expansion: 4,
            activation: Activation::Gelu,
            attn_output_proj: true,
            pooling: Pooling::Attention,
            pool_hidden: 128,
            share_mpu: false,
            share_modality: false,
            share_layer: false,
            dropout: Dropouts::default(),
        }
    }
}

impl FusionConfig {
    pub fn mpu_dims(&self) -> MpuDims {
        MpuDims {
            d: self.d,
            d_k: self.d,
            d_v: self.d,
            heads: self.heads,
            expansion: self.expansion,
            output_projection: self.attn_output_proj,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("fusion.layers", "must be at least 1"));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config(
                "fusion.heads",
                format!("d={} must be a positive multiple of heads={}", self.d, self.heads),
            ));
        }
        if self.expansion == 0 {
            return Err(Error::config("fusion.expansion", "must be positive"));
        }
        if self.pooling == Pooling::Attention && self.pool_hidden == 0 {
            return Err(Error::config("fusion.pool_hidden", "must be positive"));
        }
        if self.strategy == Strategy::Ooll && self.variant == Variant::Serial {
            return Err(Error::config(
                "fusion.variant",
                "the serial variant is defined only for oall and oagl",
            ));
        }
        for (name, p) in [
            ("fusion.dropout.embedding", self.dropout.embedding),
            ("fusion.dropout.attention", self.dropout.attention),
            ("fusion.dropout.ffn", self.dropout.ffn),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        self.mpu_dims().validate()
    }

    fn slots(&self, m: usize) -> usize {
        match self.strategy {
            Strategy::Ooll => m * (m - 1) / 2,
            _ => m,
        }
    }

    /// Number of distinct directed sub-unit storages.
    pub fn direction_storages(&self, m: usize) -> usize {
        let layers = if self.share_layer { 1 } else { self.layers };
        let slots = if self.share_modality { 1 } else { self.slots(m) };
        let dirs = if self.share_mpu { 1 } else { 2 };
        layers * slots * dirs
    }

    fn pool_size(&self, m: usize) -> usize {
        match self.pooling {
            Pooling::Attention => Linear::size(self.d, self.pool_hidden) + self.pool_hidden,
            Pooling::Average => 0,
            Pooling::Mlp => Linear::size(m * self.d, self.d),
        }
    }
}

/// All `(i, j)` with `i < j`, in lexicographic order.
pub fn modality_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            out.push((i, j));
        }
    }
    out
}

pub fn modality_name(i: usize, m: usize) -> String {
    const NAMES: [&str; 3] = ["text", "audio", "vision"];
    if m == 3 {
        NAMES[i].to_owned()
    } else {
        format!("m{i}")
    }
}

/// Aggregates `K` same-shape candidates into one, position by position.
#[derive(Clone, Debug)]
pub enum Pool {
    /// `softmax_k(vᵀ tanh(Wᵀ c_k + b)) c_k`, softmax across candidates.
    Attention { score: Linear, v: Tensor },
    Average,
    Mlp(Linear),
}

impl Pool {
    fn new(init: &mut Init<'_>, name: &str, cfg: &FusionConfig, m: usize) -> Self {
        match cfg.pooling {
            Pooling::Attention => Pool::Attention {
                score: Linear::new(init, &join(name, "w"), cfg.d, cfg.pool_hidden),
                v: init.xavier(&join(name, "v"), cfg.pool_hidden, 1),
            },
            Pooling::Average => Pool::Average,
            Pooling::Mlp => Pool::Mlp(Linear::new(init, &join(name, "mlp"), m * cfg.d, cfg.d)),
        }
    }

    /// Per-position candidate weights `R × K` (attention pooling only).
    pub fn weights(&self, candidates: &[Tensor]) -> Result<Option<Tensor>> {
        match self {
            Pool::Attention { score, v } => {
                let scores = candidates
                    .iter()
                    .map(|c| score.forward(c)?.tanh().matmul(v))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(concat_cols(&scores)?.softmax_lastdim()?))
            }
            _ => Ok(None),
        }
    }

    pub fn forward(&self, candidates: &[Tensor]) -> Result<Tensor> {
        let k = candidates.len();
        let rows = candidates[0].rows();
        match self {
            Pool::Attention { .. } => {
                let w = self.weights(candidates)?.expect("attention pooling");
                mix_rows(&w, candidates)
            }
            Pool::Average => {
                let w = Tensor::matrix(rows, k, vec![1.0 / k as f64; rows * k])?;
                mix_rows(&w, candidates)
            }
            Pool::Mlp(lin) => lin.forward(&concat_cols(candidates)?),
        }
    }

    fn mac_count(cfg: &FusionConfig, rows: usize, k: usize) -> u64 {
        let (r, k, d) = (rows as u64, k as u64, cfg.d as u64);
        match cfg.pooling {
            Pooling::Attention => {
                let da = cfg.pool_hidden as u64;
                k * (r * d * da + r * da) + r * k * d
            }
            Pooling::Average => r * k * d,
            Pooling::Mlp => r * k * d * d,
        }
    }
}

impl Parameterized for Pool {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            Pool::Attention { score, v } => {
                score.collect_params(&join(prefix, "w"), out);
                out.push((join(prefix, "v"), v.clone()));
            }
            Pool::Average => {}
            Pool::Mlp(lin) => lin.collect_params(&join(prefix, "mlp"), out),
        }
    }
}

/// Parameters of the fusion stack with sharing resolved to aliasing.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub config: FusionConfig,
    pub modalities: usize,
    /// `mpus[layer][slot]`; slots are modalities, or pairs for OOLL.
    pub mpus: Vec<Vec<MpuParams>>,
    /// One pool per layer (aliased under layer sharing); empty for OOLL.
    pub pools: Vec<Pool>,
    /// OOLL readout from the directed streams' last steps to `M·d`.
    pub readout: Option<Linear>,
}

impl FusionState {
    pub fn new(init: &mut Init<'_>, config: &FusionConfig, modalities: usize) -> Result<Self> {
        config.validate()?;
        if modalities < 2 {
            return Err(Error::config("modalities", "fusion needs at least two"));
        }
        let dims = config.mpu_dims();
        let slots = config.slots(modalities);
        let mut mpus: Vec<Vec<MpuParams>> = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            if config.share_layer && layer > 0 {
                mpus.push(mpus[0].clone());
                continue;
            }
            let mut row: Vec<MpuParams> = Vec::with_capacity(slots);
            for slot in 0..slots {
                if config.share_modality && slot > 0 {
                    row.push(row[0].clone());
                    continue;
                }
                let name = format!("fusion.layer{layer}.mpu{slot}");
                row.push(MpuParams::new(init, &name, &dims, config.share_mpu));
            }
            mpus.push(row);
        }
        let mut pools: Vec<Pool> = Vec::new();
        if config.strategy != Strategy::Ooll {
            for layer in 0..config.layers {
                if config.share_layer && layer > 0 {
                    pools.push(pools[0].clone());
                } else {
                    pools.push(Pool::new(init, &format!("fusion.pool{layer}"), config, modalities));
                }
            }
        }
        let readout = (config.strategy == Strategy::Ooll).then(|| {
            let streams = modalities * (modalities - 1);
            Linear::new(init, "fusion.readout", streams * config.d, modalities * config.d)
        });
        Ok(Self {
            config: config.clone(),
            modalities,
            mpus,
            pools,
            readout,
        })
    }
}

impl Parameterized for FusionState {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (layer, row) in self.mpus.iter().enumerate() {
            for (slot, mpu) in row.iter().enumerate() {
                mpu.collect_params(&join(prefix, &format!("fusion.layer{layer}.mpu{slot}")), out);
            }
        }
        for (layer, pool) in self.pools.iter().enumerate() {
            pool.collect_params(&join(prefix, &format!("fusion.pool{layer}")), out);
        }
        if let Some(r) = &self.readout {
            r.collect_params(&join(prefix, "fusion.readout"), out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct UnitAttention {
    pub layer: usize,
    /// `"<first>-<second>"`, e.g. `text-context` or `text-audio`.
    pub unit: String,
    pub records: Vec<AttnRecord>,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Fused representation `1 × M·d`.
    pub g: Tensor,
    /// Final local sequences `Z_m`, `T_m × d`.
    pub finals: Vec<Tensor>,
    pub attention: Vec<UnitAttention>,
}

/// The global context `G⁰`: row `m` is modality `m`'s utterance vector.
pub fn init_global_context(globals: &[Tensor]) -> Result<Tensor> {
    concat_rows(globals)
}

/// Runs the `L` fusion layers.
pub fn emt_forward(
    state: &FusionState,
    locals: &[Tensor],
    globals: &[Tensor],
    ctx: &mut ForwardCtx<'_>,
) -> Result<FusionOutput> {
    let cfg = &state.config;
    let m = state.modalities;
    if locals.len() != m || globals.len() != m {
        return Err(Error::shape(
            "emt_forward",
            format!("expected {m} modalities, got {} locals and {} globals", locals.len(), globals.len()),
        ));
    }
    let mut h = Vec::with_capacity(m);
    for x in locals {
        if x.cols() != cfg.d {
            return Err(Error::shape("emt_forward", format!("local width {} vs d={}", x.cols(), cfg.d)));
        }
        let pe = sinusoidal_positions(x.rows(), cfg.d);
        h.push(x.add(&pe)?.dropout(cfg.dropout.embedding, ctx.rng, ctx.training));
    }
    let serial = cfg.variant == Variant::Serial;
    let mut attention = Vec::new();

    match cfg.strategy {
        Strategy::Oagl | Strategy::Oall => {
            let lengths: Vec<usize> = h.iter().map(|x| x.rows()).collect();
            let mut context = if cfg.strategy == Strategy::Oagl {
                init_global_context(globals)?
            } else {
                concat_rows(&h)?
            };
            for layer in 0..cfg.layers {
                let mut candidates = Vec::with_capacity(m);
                let mut next = Vec::with_capacity(m);
                for (i, hm) in h.iter().enumerate() {
                    let out = mpu_forward(hm, &context, &state.mpus[layer][i], serial, ctx)?;
                    if ctx.record_attention {
                        attention.push(UnitAttention {
                            layer,
                            unit: format!("{}-context", modality_name(i, m)),
                            records: out.attention,
                        });
                    }
                    next.push(out.n_to_m);
                    candidates.push(out.m_to_n);
                }
                context = state.pools[layer].forward(&candidates)?;
                h = next;
            }
            let g = if cfg.strategy == Strategy::Oagl {
                context.reshape(&[1, m * cfg.d])?
            } else {
                let mut start = 0;
                let mut parts = Vec::with_capacity(m);
                for len in lengths {
                    parts.push(context.slice_rows(start, len)?.mean_rows()?);
                    start += len;
                }
                concat_cols(&parts)?
            };
            Ok(FusionOutput {
                g,
                finals: h,
                attention,
            })
        }
        Strategy::Ooll => {
            let pairs = modality_pairs(m);
            // streams[p] = (towards first of pair, towards second of pair)
            let mut streams: Vec<(Tensor, Tensor)> =
                pairs.iter().map(|&(i, j)| (h[i].clone(), h[j].clone())).collect();
            for layer in 0..cfg.layers {
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let (a, b) = &streams[p];
                    let out = mpu_forward(a, b, &state.mpus[layer][p], false, ctx)?;
                    if ctx.record_attention {
                        attention.push(UnitAttention {
                            layer,
                            unit: format!("{}-{}", modality_name(i, m), modality_name(j, m)),
                            records: out.attention,
                        });
                    }
                    streams[p] = (out.n_to_m, out.m_to_n);
                }
            }
            let mut last = Vec::with_capacity(2 * pairs.len());
            for (a, b) in &streams {
                last.push(a.row(a.rows() - 1)?);
                last.push(b.row(b.rows() - 1)?);
            }
            let readout = state.readout.as_ref().expect("ooll readout");
            let g = readout.forward(&concat_cols(&last)?)?;
            let mut finals = Vec::with_capacity(m);
            for target in 0..m {
                let mut towards = Vec::new();
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    if i == target {
                        towards.push(streams[p].0.clone());
                    } else if j == target {
                        towards.push(streams[p].1.clone());
                    }
                }
                let mut acc = towards[0].clone();
                for t in &towards[1..] {
                    acc = acc.add(t)?;
                }
                finals.push(acc.scale(1.0 / towards.len() as f64));
            }
            Ok(FusionOutput {
                g,
                finals,
                attention,
            })
        }
    }
}

/// Exact multiply–accumulate count of [`emt_forward`] for sequence lengths
/// `lengths` (one per modality).
pub fn count_macs(cfg: &FusionConfig, lengths: &[usize]) -> u64 {
    let dims = cfg.mpu_dims();
    let m = lengths.len();
    let layers = cfg.layers as u64;
    match cfg.strategy {
        Strategy::Oagl => {
            let per_layer: u64 = lengths.iter().map(|&t| mpu_mac_count(t, m, &dims)).sum::<u64>()
                + Pool::mac_count(cfg, m, m);
            layers * per_layer
        }
        Strategy::Oall => {
            let total: usize = lengths.iter().sum();
            let per_layer: u64 = lengths.iter().map(|&t| mpu_mac_count(t, total, &dims)).sum::<u64>()
                + Pool::mac_count(cfg, total, m);
            layers * per_layer
        }
        Strategy::Ooll => {
            let per_layer: u64 = modality_pairs(m)
                .iter()
                .map(|&(i, j)| mpu_mac_count(lengths[i], lengths[j], &dims))
                .sum();
            let streams = (m * (m - 1)) as u64;
            let d = cfg.d as u64;
            layers * per_layer + streams * d * m as u64 * d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub direction_storages: usize,
    pub direction_size: usize,
    pub mpu: usize,
    pub pooling: usize,
    pub readout: usize,
    /// Sinusoidal position tables are fixed.
    pub positional: usize,
    pub total: usize,
}

/// Closed-form distinct trainable scalars in the fusion stack.
pub fn param_count(cfg: &FusionConfig, modalities: usize) -> ParamBreakdown {
    let m = modalities;
    let direction_storages = cfg.direction_storages(m);
    let direction_size = cfg.mpu_dims().direction_size();
    let mpu = direction_storages * direction_size;
    let pooling = if cfg.strategy == Strategy::Ooll {
        0
    } else {
        let pools = if cfg.share_layer { 1 } else { cfg.layers };
        pools * cfg.pool_size(m)
    };
    let readout = if cfg.strategy == Strategy::Ooll {
        Linear::size(m * (m - 1) * cfg.d, m * cfg.d)
    } else {
        0
    };
    ParamBreakdown {
        direction_storages,
        direction_size,
        mpu,
        pooling,
        readout,
        positional: 0,
        total: mpu + pooling + readout,
    }
}
