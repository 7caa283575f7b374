//! Run configuration: presets, TOML/JSON files and dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::Dropouts;
use crate::data::{generate_synthetic, load_features, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `save_dataset`; when unset the synthetic spec
    /// is generated.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.path {
            Some(dir) => load_features(dir),
            None => generate_synthetic(&self.synthetic),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rates: Vec<f64>,
    /// Existing checkpoint to evaluate; when unset a model is trained per seed.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rates: (1..=10).map(|i| i as f64 / 10.0).collect(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Sequence lengths `(T_l, T_a, T_v)` of the complexity table.
    pub lengths: [usize; 3],
    /// Forward passes averaged for the wall-time column.
    pub timing_runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: [50, 375, 500],
            timing_runs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    pub step: f64,
    pub missing_rate: f64,
    /// Entries probed per parameter tensor; 0 probes every entry.
    pub samples_per_tensor: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            missing_rate: 0.4,
            samples_per_tensor: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpConfig {
    pub checkpoint: Option<PathBuf>,
    pub sample: usize,
    pub missing_rate: f64,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            sample: 0,
            missing_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset the file was layered on; informational once resolved.
    pub preset: String,
    /// Command that produced a resolved config.
    pub command: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckConfig,
    pub dump: DumpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::mosi()
    }
}

impl RunConfig {
    /// Full-size hyperparameters of the MOSI configuration.
    pub fn mosi() -> Self {
        Self {
            preset: "mosi".into(),
            command: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            gradcheck: GradcheckConfig::default(),
            dump: DumpConfig::default(),
        }
    }

    /// Same structure scaled for one CPU core and the synthetic data.
    pub fn desk() -> Self {
        let mut cfg = Self::mosi();
        cfg.preset = "desk".into();
        cfg.model.fusion = FusionConfig {
            d: 32,
            layers: 2,
            expansion: 2,
            pool_hidden: 32,
            ..FusionConfig::default()
        };
        cfg.train.batch_size = 8;
        cfg.train.text_lr = 1e-3;
        cfg
    }

    /// Tiny shapes for finite-difference checks.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.preset = "tiny".into();
        cfg.model.fusion = FusionConfig {
            d: 8,
            layers: 2,
            heads: 2,
            expansion: 2,
            pool_hidden: 8,
            dropout: Dropouts::none(),
            ..FusionConfig::default()
        };
        cfg.data.synthetic = SyntheticSpec {
            n_samples: 20,
            t_l: 5,
            t_a: 6,
            t_v: 4,
            f_a: 3,
            f_v: 3,
            vocab: 40,
            ..SyntheticSpec::default()
        };
        cfg.seeds = vec![0];
        cfg
    }

    pub fn preset_named(name: &str) -> Result<Self> {
        match name {
            "mosi" => Ok(Self::mosi()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config("preset", format!("unknown preset {other:?} (mosi, desk, tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.path.is_none() {
            self.data.synthetic.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.sweep.rates.is_empty() || self.sweep.rates.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("sweep.rates", "must be a non-empty list of rates in [0, 1]"));
        }
        if self.sweep.rates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("sweep.rates", "must be strictly ascending"));
        }
        if !(0.0..=1.0).contains(&self.dump.missing_rate) {
            return Err(Error::config("dump.missing_rate", "must lie in [0, 1]"));
        }
        if !(self.gradcheck.tolerance > 0.0 && self.gradcheck.step > 0.0) {
            return Err(Error::config("gradcheck", "tolerance and step must be positive"));
        }
        if self.bench.lengths.contains(&0) {
            return Err(Error::config("bench.lengths", "lengths must be positive"));
        }
        Ok(())
    }

    /// Builds a config from an optional file, a preset and `key.path=value`
    /// overrides, in increasing priority. The preset named inside the file
    /// is used when no explicit preset is given.
    pub fn resolve(file: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_value = match file {
            Some(path) => Some(read_value(path)?),
            None => None,
        };
        let file_preset = file_value
            .as_ref()
            .and_then(|v| v.get("preset"))
            .and_then(|v| v.as_str())
            .map(str::to_owned);
        let preset = preset.map(str::to_owned).or(file_preset).unwrap_or_else(|| "desk".into());
        let mut value = serde_json::to_value(Self::preset_named(&preset)?)?;
        if let Some(v) = file_value {
            merge(&mut value, v);
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        value["preset"] = serde_json::Value::String(preset);
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn read_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        Ok(serde_json::from_str(&text)?)
    } else {
        let v: toml::Value = toml::from_str(&text)?;
        Ok(serde_json::to_value(v)?)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `a.b.c=value`, where the value is read as TOML (numbers, booleans,
/// arrays, quoted strings) and falls back to a bare string.
fn apply_override(value: &mut serde_json::Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like key.path=value"))?;
    let parsed: serde_json::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => serde_json::to_value(&t["v"])?,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut slot = value;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::config(key, format!("{part} is not a table")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        slot = obj.entry(part.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}
