//! The full model: encoders, fusion stack, prediction head and the
//! restoration heads used during training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::ForwardCtx;
use crate::data::DataDims;
use crate::encoders::{EncodedViews, EncoderDims, Encoders, RawViews};
use crate::error::{Error, Result};
use crate::fusion::{emt_forward, FusionConfig, FusionState, UnitAttention};
use crate::nn::{Init, Mlp, Parameterized};
use crate::restoration::{Decoders, SimSiamHeads};
use crate::rng::RngState;
use crate::tensor::{concat_cols, Activation, Tensor};

pub const MODALITIES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder widths before projection; `None` means the fusion width.
    pub d_text: Option<usize>,
    pub d_audio: Option<usize>,
    pub d_vision: Option<usize>,
    pub fusion: FusionConfig,
    pub head_activation: Activation,
    pub share_simsiam_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_text: None,
            d_audio: None,
            d_vision: None,
            fusion: FusionConfig::default(),
            head_activation: Activation::Gelu,
            share_simsiam_heads: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder_dims(&self, data: &DataDims) -> EncoderDims {
        let d = self.fusion.d;
        EncoderDims {
            vocab: data.vocab,
            d_text: self.d_text.unwrap_or(d),
            d_audio: self.d_audio.unwrap_or(d),
            d_vision: self.d_vision.unwrap_or(d),
            f_audio: data.f_a,
            f_vision: data.f_v,
            d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        for (name, v) in [("model.d_text", self.d_text), ("model.d_audio", self.d_audio), ("model.d_vision", self.d_vision)] {
            if v == Some(0) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.fusion.d < 2 {
            return Err(Error::config("fusion.d", "must be at least 2"));
        }
        Ok(())
    }
}

/// Outputs of one forward pass over one view of an utterance.
#[derive(Clone, Debug)]
pub struct ViewOutput {
    /// `1 × 1` sentiment prediction.
    pub prediction: Tensor,
    pub g: Tensor,
    pub encoded: EncodedViews,
    pub finals: Vec<Tensor>,
    pub attention: Vec<UnitAttention>,
}

impl ViewOutput {
    /// SimSiam streams in the order `(h_l, h_a, h_v, g)`.
    pub fn streams(&self) -> Vec<Tensor> {
        let mut s = self.encoded.globals.clone();
        s.push(self.g.clone());
        s
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub data_dims: DataDims,
    pub encoders: Encoders,
    pub fusion: FusionState,
    /// MLP from `concat(g, h_l, h_a, h_v)` (width `2·M·d`) to a scalar.
    pub head: Mlp,
    pub decoders: Decoders,
    pub simsiam: SimSiamHeads,
}

impl Model {
    pub fn new(config: &ModelConfig, data_dims: DataDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed).fork(0x1d17);
        let mut init = Init::new(&mut rng);
        let enc_dims = config.encoder_dims(&data_dims);
        let d = config.fusion.d;
        let encoders = Encoders::new(&mut init, enc_dims);
        let fusion = FusionState::new(&mut init, &config.fusion, MODALITIES)?;
        let head = Mlp::new(&mut init, "head", (2 * MODALITIES * d, d, 1), config.head_activation, false);
        let decoders = Decoders::new(
            &mut init,
            d,
            &[enc_dims.d_text, data_dims.f_a, data_dims.f_v],
            config.head_activation,
        );
        let simsiam = SimSiamHeads::new(
            &mut init,
            d,
            MODALITIES * d,
            config.share_simsiam_heads,
            config.head_activation,
        );
        Ok(Self {
            config: config.clone(),
            data_dims,
            encoders,
            fusion,
            head,
            decoders,
            simsiam,
        })
    }

    /// `ŷ = head(concat(g, h_l, h_a, h_v))`.
    pub fn predict(&self, g: &Tensor, globals: &[Tensor]) -> Result<Tensor> {
        let mut parts = vec![g.clone()];
        parts.extend(globals.iter().cloned());
        self.head.forward(&concat_cols(&parts)?)
    }

    pub fn forward_view(&self, raw: &RawViews, ctx: &mut ForwardCtx<'_>) -> Result<ViewOutput> {
        let lens = [raw.tokens.len(), raw.audio.rows(), raw.vision.rows()];
        if lens != self.data_dims.lengths() {
            return Err(Error::shape(
                "forward_view",
                format!("lengths {lens:?} vs dataset {:?}", self.data_dims.lengths()),
            ));
        }
        let encoded = self.encoders.encode(raw)?;
        let fused = emt_forward(&self.fusion, &encoded.locals, &encoded.globals, ctx)?;
        let prediction = self.predict(&fused.g, &encoded.globals)?;
        Ok(ViewOutput {
            prediction,
            g: fused.g,
            encoded,
            finals: fused.finals,
            attention: fused.attention,
        })
    }

    /// Parameters that take part in the prediction path (encoders, fusion,
    /// head), excluding restoration-only heads.
    pub fn prediction_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoders.collect_params("", &mut out);
        self.fusion.collect_params("", &mut out);
        self.head.collect_params("head", &mut out);
        crate::nn::dedup(out)
    }

    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            model: self.config.clone(),
            data_dims: self.data_dims,
            seed,
            params: self
                .named_params("")
                .into_iter()
                .map(|(name, t)| StoredParam {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Self::new(&ck.model, ck.data_dims, ck.seed)?;
        model.load_params(&ck.params)?;
        Ok(model)
    }

    pub fn load_params(&self, params: &[StoredParam]) -> Result<()> {
        let named = self.named_params("");
        if named.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                params.len(),
                named.len()
            )));
        }
        for ((name, t), stored) in named.iter().zip(params) {
            if *name != stored.name || t.shape() != stored.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match stored {} {:?}",
                    t.shape(),
                    stored.name,
                    stored.shape
                )));
            }
            t.set_data(&stored.data)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.named_params("").iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, snapshot: &[Vec<f64>]) -> Result<()> {
        for ((_, t), values) in self.named_params("").iter().zip(snapshot) {
            t.set_data(values)?;
        }
        Ok(())
    }
}

impl Parameterized for Model {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.encoders.collect_params(prefix, out);
        self.fusion.collect_params(prefix, out);
        self.head.collect_params(&crate::nn::join(prefix, "head"), out);
        self.decoders.collect_params(prefix, out);
        self.simsiam.collect_params(prefix, out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub data_dims: DataDims,
    pub seed: u64,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
