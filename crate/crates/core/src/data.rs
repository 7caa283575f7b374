//! Synthetic multimodal sentiment data and the on-disk feature format.
//!
//! A dataset directory holds `manifest.json` plus four flat little-endian
//! arrays, all row-major:
//!
//! | file              | type  | shape            |
//! |-------------------|-------|------------------|
//! | `text_tokens.bin` | `i32` | `n × T_l`        |
//! | `audio.bin`       | `f64` | `n × T_a × f_a`  |
//! | `vision.bin`      | `f64` | `n × T_v × f_v`  |
//! | `labels.bin`      | `f64` | `n`              |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{RawViews, SUMMARY_TOKEN};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub t_l: usize,
    pub t_a: usize,
    pub t_v: usize,
    pub f_a: usize,
    pub f_v: usize,
    pub vocab: usize,
}

impl DataDims {
    pub fn lengths(&self) -> [usize; 3] {
        [self.t_l, self.t_a, self.t_v]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// `T_a × f_a`, row-major.
    pub audio: Vec<f64>,
    /// `T_v × f_v`, row-major.
    pub vision: Vec<f64>,
    pub label: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Shuffled 60/20/20 split.
    pub fn random(n: usize, rng: &mut RngState) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let n_train = n * 3 / 5;
        let n_val = n / 5;
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }

    /// Disjoint and covering `0..n`.
    pub fn is_partition(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: DataDims,
    pub samples: Vec<Sample>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn views(&self, index: usize) -> Result<RawViews> {
        let s = self.samples.get(index).ok_or(Error::UnknownSample(index))?;
        Ok(RawViews {
            tokens: s.tokens.clone(),
            audio: Tensor::matrix(self.dims.t_a, self.dims.f_a, s.audio.clone())?,
            vision: Tensor::matrix(self.dims.t_v, self.dims.f_v, s.vision.clone())?,
        })
    }

    pub fn label(&self, index: usize) -> Result<f64> {
        self.samples.get(index).map(|s| s.label).ok_or(Error::UnknownSample(index))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub t_l: usize,
    pub t_a: usize,
    pub t_v: usize,
    pub f_a: usize,
    pub f_v: usize,
    pub vocab: usize,
    /// Signal-to-noise power ratio of the audio/vision features.
    pub snr: f64,
    /// Signal weights `(w_l, w_a, w_v)`, non-negative and summing to 1.
    pub weights: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            t_l: 20,
            t_a: 40,
            t_v: 32,
            f_a: 5,
            f_v: 5,
            vocab: 1000,
            snr: 2.0,
            weights: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            seed: 0,
        }
    }
}

/// Sentiment levels planted in text; each level owns `TOKENS_PER_LEVEL` ids.
const LEVELS: usize = 7;
const TOKENS_PER_LEVEL: usize = 4;
const FIRST_SENTIMENT_TOKEN: usize = 2;

impl SyntheticSpec {
    pub fn dims(&self) -> DataDims {
        DataDims {
            t_l: self.t_l,
            t_a: self.t_a,
            t_v: self.t_v,
            f_a: self.f_a,
            f_v: self.f_v,
            vocab: self.vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.n_samples", self.n_samples),
            ("data.t_l", self.t_l),
            ("data.t_a", self.t_a),
            ("data.t_v", self.t_v),
            ("data.f_a", self.f_a),
            ("data.f_v", self.f_v),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.n_samples < 5 {
            return Err(Error::config("data.n_samples", "need at least 5 samples to split"));
        }
        let min_vocab = FIRST_SENTIMENT_TOKEN + LEVELS * TOKENS_PER_LEVEL + 1;
        if self.vocab < min_vocab {
            return Err(Error::config("data.vocab", format!("must be at least {min_vocab}")));
        }
        if !(self.snr > 0.0) {
            return Err(Error::config("data.snr", "must be positive"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("data.weights", "must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

fn unit_direction(dim: usize, rng: &mut RngState) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `T × f` sequence carrying `strength · y/3` along `direction`, scaled by
/// a positive per-step envelope, plus Gaussian noise of variance `1/snr`.
fn planted_sequence(
    y: f64,
    strength: f64,
    direction: &[f64],
    t: usize,
    snr: f64,
    rng: &mut RngState,
) -> Vec<f64> {
    let f = direction.len();
    let sigma = 1.0 / snr.sqrt();
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let mut out = Vec::with_capacity(t * f);
    for step in 0..t {
        let envelope = 1.0 + 0.5 * (std::f64::consts::TAU * step as f64 / t as f64 + phase).sin();
        let amp = 3.0 * strength * (y / 3.0) * envelope;
        for &u in direction {
            out.push(amp * u + sigma * rng.normal());
        }
    }
    out
}

/// Sentiment level in `0..LEVELS` of a noisy score.
fn text_level(y: f64) -> usize {
    let scaled = (y + 3.0) / 6.0 * LEVELS as f64;
    (scaled.floor().max(0.0) as usize).min(LEVELS - 1)
}

/// Position 0 is the SUMMARY token. Of the remaining positions a share
/// proportional to `w_l` carries sentiment tokens whose level tracks `y`;
/// the rest are fillers drawn from the non-reserved vocabulary.
fn planted_tokens(y: f64, w_l: f64, spec: &SyntheticSpec, rng: &mut RngState) -> Vec<u32> {
    let t = spec.t_l;
    let rate = (1.5 * w_l).min(1.0);
    let filler_start = FIRST_SENTIMENT_TOKEN + LEVELS * TOKENS_PER_LEVEL;
    let sigma = 1.0 / spec.snr.sqrt();
    let mut tokens = Vec::with_capacity(t);
    tokens.push(SUMMARY_TOKEN);
    for _ in 1..t {
        if rng.bernoulli(rate) {
            let level = text_level(y + sigma * 0.5 * rng.normal());
            let id = FIRST_SENTIMENT_TOKEN + level * TOKENS_PER_LEVEL + rng.below(TOKENS_PER_LEVEL);
            tokens.push(id as u32);
        } else {
            tokens.push((filler_start + rng.below(spec.vocab - filler_start)) as u32);
        }
    }
    tokens
}

/// Token-level sentiment read-out used by tests: mean planted level of the
/// sentiment tokens in `tokens`, or `None` if none are present.
pub fn planted_text_score(tokens: &[u32]) -> Option<f64> {
    let hi = FIRST_SENTIMENT_TOKEN + LEVELS * TOKENS_PER_LEVEL;
    let levels: Vec<f64> = tokens
        .iter()
        .map(|&t| t as usize)
        .filter(|&t| (FIRST_SENTIMENT_TOKEN..hi).contains(&t))
        .map(|t| ((t - FIRST_SENTIMENT_TOKEN) / TOKENS_PER_LEVEL) as f64)
        .collect();
    if levels.is_empty() {
        None
    } else {
        Some(levels.iter().sum::<f64>() / levels.len() as f64)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut dir_rng = root.fork(1);
    let u_a = unit_direction(spec.f_a, &mut dir_rng);
    let u_v = unit_direction(spec.f_v, &mut dir_rng);
    let [w_l, w_a, w_v] = spec.weights;
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = root.fork(1000 + i as u64);
        let y = rng.uniform_range(-3.0, 3.0);
        let tokens = planted_tokens(y, w_l, spec, &mut rng);
        let audio = planted_sequence(y, w_a, &u_a, spec.t_a, spec.snr, &mut rng);
        let vision = planted_sequence(y, w_v, &u_v, spec.t_v, spec.snr, &mut rng);
        samples.push(Sample {
            tokens,
            audio,
            vision,
            label: y,
        });
    }
    let split = DatasetSplit::random(spec.n_samples, &mut root.fork(2));
    Ok(Dataset {
        dims: spec.dims(),
        samples,
        split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_samples: usize,
    pub dims: DataDims,
    pub text: FileEntry,
    pub audio: FileEntry,
    pub vision: FileEntry,
    pub labels: FileEntry,
    pub split: DatasetSplit,
    pub label_stats: LabelStats,
}

pub const MANIFEST: &str = "manifest.json";

fn f64_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = ds.dims;
    let n = ds.samples.len();
    let tokens: Vec<u8> = ds
        .samples
        .iter()
        .flat_map(|s| s.tokens.iter().flat_map(|&t| (t as i32).to_le_bytes()))
        .collect();
    write_file(&dir.join("text_tokens.bin"), &tokens)?;
    write_file(&dir.join("audio.bin"), &f64_bytes(ds.samples.iter().flat_map(|s| s.audio.iter().copied())))?;
    write_file(&dir.join("vision.bin"), &f64_bytes(ds.samples.iter().flat_map(|s| s.vision.iter().copied())))?;
    write_file(&dir.join("labels.bin"), &f64_bytes(ds.samples.iter().map(|s| s.label)))?;
    let labels: Vec<f64> = ds.samples.iter().map(|s| s.label).collect();
    let manifest = Manifest {
        format_version: 1,
        n_samples: n,
        dims: d,
        text: FileEntry {
            path: "text_tokens.bin".into(),
            dtype: "i32".into(),
            shape: vec![n, d.t_l],
        },
        audio: FileEntry {
            path: "audio.bin".into(),
            dtype: "f64".into(),
            shape: vec![n, d.t_a, d.f_a],
        },
        vision: FileEntry {
            path: "vision.bin".into(),
            dtype: "f64".into(),
            shape: vec![n, d.t_v, d.f_v],
        },
        labels: FileEntry {
            path: "labels.bin".into(),
            dtype: "f64".into(),
            shape: vec![n],
        },
        split: ds.split.clone(),
        label_stats: LabelStats {
            min: labels.iter().cloned().fold(f64::INFINITY, f64::min),
            max: labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            mean: labels.iter().sum::<f64>() / n.max(1) as f64,
        },
    };
    let path = dir.join(MANIFEST);
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
}

fn read_entry(dir: &Path, entry: &FileEntry, dtype: &str, expected: &[usize]) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(&entry.path);
    if entry.dtype != dtype {
        return Err(Error::FileShape {
            file: path,
            expected: format!("dtype {dtype}"),
            found: format!("dtype {}", entry.dtype),
        });
    }
    if entry.shape != expected {
        return Err(Error::FileShape {
            file: path,
            expected: format!("{expected:?}"),
            found: format!("manifest shape {:?}", entry.shape),
        });
    }
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = expected.iter().product::<usize>() * if dtype == "i32" { 4 } else { 8 };
    if bytes.len() != want {
        let width = if dtype == "i32" { 4 } else { 8 };
        let inner: usize = expected[1..].iter().product::<usize>().max(1);
        return Err(Error::FileShape {
            file: path,
            expected: format!("{expected:?} ({want} bytes)"),
            found: format!(
                "{} bytes ({} {dtype} values, {} rows of {inner})",
                bytes.len(),
                bytes.len() / width,
                bytes.len() / width / inner
            ),
        });
    }
    Ok((path, bytes))
}

fn decode_f64(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData {
            file: path.to_path_buf(),
            index,
        });
    }
    Ok(values)
}

pub fn load_features(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::NoManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let n = m.n_samples;
    let d = m.dims;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if [d.t_l, d.t_a, d.t_v, d.f_a, d.f_v, d.vocab].contains(&0) {
        return Err(Error::config("manifest.dims", "all extents must be positive"));
    }
    let (tok_path, tok_bytes) = read_entry(dir, &m.text, "i32", &[n, d.t_l])?;
    let (a_path, a_bytes) = read_entry(dir, &m.audio, "f64", &[n, d.t_a, d.f_a])?;
    let (v_path, v_bytes) = read_entry(dir, &m.vision, "f64", &[n, d.t_v, d.f_v])?;
    let (l_path, l_bytes) = read_entry(dir, &m.labels, "f64", &[n])?;
    let tokens: Vec<i32> = tok_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(&bad) = tokens.iter().find(|&&t| t < 0 || t as usize >= d.vocab) {
        return Err(Error::FileShape {
            file: tok_path,
            expected: format!("token ids in [0, {})", d.vocab),
            found: format!("id {bad}"),
        });
    }
    let audio = decode_f64(&a_path, &a_bytes)?;
    let vision = decode_f64(&v_path, &v_bytes)?;
    let labels = decode_f64(&l_path, &l_bytes)?;
    if !m.split.is_partition(n) {
        return Err(Error::config("manifest.split", "train/val/test must partition the samples"));
    }
    let (sa, sv) = (d.t_a * d.f_a, d.t_v * d.f_v);
    let samples = (0..n)
        .map(|i| Sample {
            tokens: tokens[i * d.t_l..(i + 1) * d.t_l].iter().map(|&t| t as u32).collect(),
            audio: audio[i * sa..(i + 1) * sa].to_vec(),
            vision: vision[i * sv..(i + 1) * sv].to_vec(),
            label: labels[i],
        })
        .collect();
    Ok(Dataset {
        dims: d,
        samples,
        split: m.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pearson;
    use proptest::prelude::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: 40,
            t_l: 6,
            t_a: 5,
            t_v: 4,
            f_a: 3,
            f_v: 2,
            vocab: 64,
            seed,
            ..SyntheticSpec::default()
        }
    }

    /// Ranks with ties averaged.
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }

    fn mean_audio_probe(ds: &Dataset, spec: &SyntheticSpec) -> f64 {
        // the signal lies along one direction, so every coordinate of the
        // time-averaged features is a scaled copy of y plus noise
        let f = spec.f_a;
        let labels: Vec<f64> = ds.samples.iter().map(|s| s.label).collect();
        (0..f)
            .map(|c| {
                let feat: Vec<f64> = ds
                    .samples
                    .iter()
                    .map(|s| (0..spec.t_a).map(|t| s.audio[t * f + c]).sum::<f64>() / spec.t_a as f64)
                    .collect();
                pearson(&feat, &labels).unwrap_or(0.0).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate_synthetic(&small(3)).unwrap(), generate_synthetic(&small(3)).unwrap());
        assert_ne!(generate_synthetic(&small(3)).unwrap(), generate_synthetic(&small(4)).unwrap());
    }

    #[test]
    fn noiseless_audio_recovers_label() {
        let spec = SyntheticSpec {
            n_samples: 300,
            snr: 1e12,
            ..small(0)
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert!(mean_audio_probe(&ds, &spec) > 0.99);
    }

    #[test]
    fn text_only_weights_leave_audio_uninformative() {
        let spec = SyntheticSpec {
            n_samples: 1000,
            weights: [1.0, 0.0, 0.0],
            ..small(1)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let labels: Vec<f64> = ds.samples.iter().map(|s| s.label).collect();
        let feat: Vec<f64> = ds.samples.iter().map(|s| s.audio.iter().sum::<f64>()).collect();
        assert!(pearson(&feat, &labels).unwrap().abs() < 0.1);
    }

    #[test]
    fn planted_text_frequency_is_monotone_in_label() {
        let spec = SyntheticSpec {
            n_samples: 400,
            t_l: 20,
            snr: 10.0,
            ..small(2)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let (mut ys, mut scores) = (Vec::new(), Vec::new());
        for s in &ds.samples {
            if let Some(v) = planted_text_score(&s.tokens) {
                ys.push(s.label);
                scores.push(v);
            }
        }
        let spearman = pearson(&ranks(&ys), &ranks(&scores)).unwrap();
        assert!(spearman > 0.95, "{spearman}");
    }

    #[test]
    fn summary_token_leads_every_sequence() {
        let ds = generate_synthetic(&small(5)).unwrap();
        assert!(ds.samples.iter().all(|s| s.tokens[0] == SUMMARY_TOKEN && s.tokens.iter().all(|&t| (t as usize) < 64)));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ds = generate_synthetic(&small(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_features(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn loader_errors_are_descriptive() {
        let empty = tempfile::tempdir().unwrap();
        let err = load_features(empty.path()).unwrap_err();
        assert!(err.to_string().contains("no manifest"), "{err}");

        let ds = generate_synthetic(&small(7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let audio = dir.path().join("audio.bin");
        let bytes = fs::read(&audio).unwrap();
        fs::write(&audio, &bytes[..bytes.len() - 3 * 8]).unwrap();
        let err = load_features(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("audio.bin") && msg.contains("[40, 5, 3]"), "{msg}");

        fs::write(&audio, &bytes).unwrap();
        let mut vision = fs::read(dir.path().join("vision.bin")).unwrap();
        vision[8..16].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(dir.path().join("vision.bin"), &vision).unwrap();
        assert!(matches!(load_features(dir.path()), Err(Error::NonFiniteData { index: 1, .. })));

        fs::remove_file(dir.path().join("labels.bin")).unwrap();
        assert!(matches!(load_features(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SyntheticSpec { weights: [0.5, 0.5, 0.5], ..small(0) },
            SyntheticSpec { weights: [1.2, -0.1, -0.1], ..small(0) },
            SyntheticSpec { t_a: 0, ..small(0) },
            SyntheticSpec { vocab: 10, ..small(0) },
            SyntheticSpec { snr: 0.0, ..small(0) },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(Error::Config { .. })));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn splits_partition_samples(n in 5usize..500, seed in 0u64..1000) {
            let s = DatasetSplit::random(n, &mut RngState::new(seed));
            prop_assert!(s.is_partition(n));
            prop_assert_eq!(s.train.len(), n * 3 / 5);
        }
    }
}
