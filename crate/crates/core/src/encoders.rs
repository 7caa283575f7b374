//! Unimodal encoders producing local sequences `H_m` and utterance vectors
//! `h_m` for text, audio and vision.
//!
//! Text uses a small stand-in for a pretrained language model: a token
//! embedding followed by a bidirectional LSTM. The forward states form
//! `H_l`; the backward pass ends at the SUMMARY position and its final state
//! is `h_l`. Audio and vision use unidirectional LSTMs with last-step readout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, Linear, Lstm, Parameterized};
use crate::tensor::{concat_rows, embedding, Tensor};

pub const SUMMARY_TOKEN: u32 = 0;
pub const UNK_TOKEN: u32 = 1;

/// Name prefix of the text-encoder parameter group.
pub const TEXT_GROUP: &str = "encoders.text";

/// Runs an LSTM from a zero state and returns every hidden state as a
/// `1 × hidden` row.
pub fn lstm_states(x: &Tensor, p: &Lstm) -> Result<Vec<Tensor>> {
    if x.cols() != p.input_dim() {
        return Err(Error::shape(
            "lstm",
            format!("input width {} vs {}", x.cols(), p.input_dim()),
        ));
    }
    let h = p.hidden;
    let projected = x.matmul(&p.w_ih)?.add_row(&p.bias)?;
    let mut states = Vec::with_capacity(x.rows());
    let mut prev: Option<(Tensor, Tensor)> = None;
    for t in 0..x.rows() {
        let mut gates = projected.row(t)?;
        if let Some((h_prev, _)) = &prev {
            gates = gates.add(&h_prev.matmul(&p.w_hh)?)?;
        }
        let i = gates.slice_cols(0, h)?.sigmoid();
        let f = gates.slice_cols(h, h)?.sigmoid();
        let g = gates.slice_cols(2 * h, h)?.tanh();
        let o = gates.slice_cols(3 * h, h)?.sigmoid();
        let mut c = i.mul(&g)?;
        if let Some((_, c_prev)) = &prev {
            c = c.add(&f.mul(c_prev)?)?;
        }
        let state = o.mul(&c.tanh())?;
        states.push(state.clone());
        prev = Some((state, c));
    }
    Ok(states)
}

/// Full hidden-state sequence `T × hidden`.
pub fn lstm_forward(x: &Tensor, p: &Lstm) -> Result<Tensor> {
    concat_rows(&lstm_states(x, p)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub d_text: usize,
    pub d_audio: usize,
    pub d_vision: usize,
    pub f_audio: usize,
    pub f_vision: usize,
    /// Shared fusion width.
    pub d: usize,
}

impl EncoderDims {
    pub fn param_count(&self) -> usize {
        let text = self.vocab * self.d_text + 2 * Lstm::size(self.d_text, self.d_text);
        let audio = Lstm::size(self.f_audio, self.d_audio);
        let vision = Lstm::size(self.f_vision, self.d_vision);
        let proj = 2 * (Linear::size(self.d_text, self.d)
            + Linear::size(self.d_audio, self.d)
            + Linear::size(self.d_vision, self.d));
        text + audio + vision + proj
    }
}

/// Per-utterance inputs. Audio and vision are `T_m × f_m`.
#[derive(Clone, Debug)]
pub struct RawViews {
    pub tokens: Vec<u32>,
    pub audio: Tensor,
    pub vision: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncodedViews {
    /// Projected `H_l, H_a, H_v`, each `T_m × d`.
    pub locals: Vec<Tensor>,
    /// Projected `h_l, h_a, h_v`, each `1 × d`.
    pub globals: Vec<Tensor>,
    /// Unprojected text-encoder output `T_l × d_text`.
    pub text_states: Tensor,
}

#[derive(Clone, Debug)]
pub struct Encoders {
    pub embedding: Tensor,
    pub text_forward: Lstm,
    pub text_backward: Lstm,
    pub audio: Lstm,
    pub vision: Lstm,
    pub local_proj: Vec<Linear>,
    pub global_proj: Vec<Linear>,
    pub dims: EncoderDims,
}

const MODALITY_NAMES: [&str; 3] = ["text", "audio", "vision"];

impl Encoders {
    pub fn new(init: &mut Init<'_>, dims: EncoderDims) -> Self {
        let name = |s: &str| join(TEXT_GROUP, s);
        let embedding = init.normal(&name("embedding"), &[dims.vocab, dims.d_text], 0.5);
        let text_forward = Lstm::new(init, &name("forward"), dims.d_text, dims.d_text);
        let text_backward = Lstm::new(init, &name("backward"), dims.d_text, dims.d_text);
        let audio = Lstm::new(init, "encoders.audio", dims.f_audio, dims.d_audio);
        let vision = Lstm::new(init, "encoders.vision", dims.f_vision, dims.d_vision);
        let widths = [dims.d_text, dims.d_audio, dims.d_vision];
        let local_proj = (0..3)
            .map(|m| Linear::new(init, &format!("proj.local_{}", MODALITY_NAMES[m]), widths[m], dims.d))
            .collect();
        let global_proj = (0..3)
            .map(|m| Linear::new(init, &format!("proj.global_{}", MODALITY_NAMES[m]), widths[m], dims.d))
            .collect();
        Self {
            embedding,
            text_forward,
            text_backward,
            audio,
            vision,
            local_proj,
            global_proj,
            dims,
        }
    }

    /// `(H_l, h_l)` before projection.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<(Tensor, Tensor)> {
        let emb = embedding(&self.embedding, tokens)?;
        let states = lstm_forward(&emb, &self.text_forward)?;
        let reversed: Vec<usize> = (0..tokens.len()).rev().collect();
        let back = lstm_states(&emb.select_rows(&reversed)?, &self.text_backward)?;
        let summary = back.last().expect("non-empty sequence").clone();
        Ok((states, summary))
    }

    pub fn encode(&self, views: &RawViews) -> Result<EncodedViews> {
        if views.tokens.is_empty() {
            return Err(Error::shape("encode_text", "empty token sequence"));
        }
        let (text_states, text_summary) = self.encode_text(&views.tokens)?;
        let audio_states = lstm_states(&views.audio, &self.audio)?;
        let vision_states = lstm_states(&views.vision, &self.vision)?;
        let audio_last = audio_states.last().expect("non-empty").clone();
        let vision_last = vision_states.last().expect("non-empty").clone();
        let raw_locals = [text_states.clone(), concat_rows(&audio_states)?, concat_rows(&vision_states)?];
        let raw_globals = [text_summary, audio_last, vision_last];
        let mut locals = Vec::with_capacity(3);
        let mut globals = Vec::with_capacity(3);
        for m in 0..3 {
            locals.push(self.local_proj[m].forward(&raw_locals[m])?);
            globals.push(self.global_proj[m].forward(&raw_globals[m])?);
        }
        Ok(EncodedViews {
            locals,
            globals,
            text_states,
        })
    }
}

impl Parameterized for Encoders {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let text = join(prefix, TEXT_GROUP);
        out.push((join(&text, "embedding"), self.embedding.clone()));
        self.text_forward.collect_params(&join(&text, "forward"), out);
        self.text_backward.collect_params(&join(&text, "backward"), out);
        self.audio.collect_params(&join(prefix, "encoders.audio"), out);
        self.vision.collect_params(&join(prefix, "encoders.vision"), out);
        for m in 0..3 {
            self.local_proj[m].collect_params(&join(prefix, &format!("proj.local_{}", MODALITY_NAMES[m])), out);
            self.global_proj[m].collect_params(&join(prefix, &format!("proj.global_{}", MODALITY_NAMES[m])), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::finite_diff_check;
    use approx::assert_abs_diff_eq;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn randomize(p: &impl Parameterized, rng: &mut RngState) {
        for (_, t) in p.named_params("") {
            let n = t.numel();
            t.set_data(&(0..n).map(|_| 0.5 * rng.normal()).collect::<Vec<_>>()).unwrap();
        }
    }

    fn rand_tensor(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    fn dims() -> EncoderDims {
        EncoderDims {
            vocab: 12,
            d_text: 4,
            d_audio: 3,
            d_vision: 5,
            f_audio: 2,
            f_vision: 3,
            d: 4,
        }
    }

    // cell equations written out per element
    fn lstm_oracle(x: &[f64], t: usize, f: usize, p: &Lstm) -> Vec<f64> {
        let h = p.hidden;
        let (wi, wh, b) = (p.w_ih.to_vec(), p.w_hh.to_vec(), p.bias.to_vec());
        let mut hs = vec![0.0; h];
        let mut cs = vec![0.0; h];
        let mut out = Vec::new();
        for step in 0..t {
            let z: Vec<f64> = (0..4 * h)
                .map(|j| {
                    b[j] + (0..f).map(|k| x[step * f + k] * wi[k * 4 * h + j]).sum::<f64>()
                        + (0..h).map(|k| hs[k] * wh[k * 4 * h + j]).sum::<f64>()
                })
                .collect();
            for j in 0..h {
                let (i, fg, g, o) = (sigmoid(z[j]), sigmoid(z[h + j]), z[2 * h + j].tanh(), sigmoid(z[3 * h + j]));
                cs[j] = fg * cs[j] + i * g;
                hs[j] = o * cs[j].tanh();
            }
            out.extend_from_slice(&hs);
        }
        out
    }

    #[test]
    fn zero_lstm_stays_at_zero() {
        let mut rng = RngState::new(0);
        let p = Lstm::new(&mut Init::new(&mut rng), "l", 3, 4);
        for (_, t) in p.named_params("") {
            t.set_data(&vec![0.0; t.numel()]).unwrap();
        }
        let x = rand_tensor(&mut rng, 6, 3);
        assert!(lstm_forward(&x, &p).unwrap().to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_matches_cell_oracle() {
        let mut rng = RngState::new(1);
        let p = Lstm::new(&mut Init::new(&mut rng), "l", 3, 4);
        randomize(&p, &mut rng);
        for t in [1, 5] {
            let x = rand_tensor(&mut rng, t, 3);
            let got = lstm_forward(&x, &p).unwrap().to_vec();
            let want = lstm_oracle(&x.to_vec(), t, 3, &p);
            for (a, b) in got.iter().zip(&want) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_weights_reach_fixed_point() {
        let mut rng = RngState::new(2);
        let p = Lstm::new(&mut Init::new(&mut rng), "l", 3, 4);
        randomize(&p, &mut rng);
        p.w_ih.set_data(&vec![0.0; p.w_ih.numel()]).unwrap();
        p.w_hh.set_data(&vec![0.0; p.w_hh.numel()]).unwrap();
        let row: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let x = Tensor::matrix(8, 3, row.repeat(8)).unwrap();
        let states = lstm_forward(&x, &p).unwrap().to_vec();
        // with no recurrence the cell accumulates c_t = f c_{t-1} + i g, so
        // the trajectory follows the scalar recursion of the oracle
        let want = lstm_oracle(&x.to_vec(), 8, 3, &p);
        for (a, b) in states.iter().zip(&want) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        // with a zero forget gate input and no recurrence, every step is equal
        let b = p.bias.to_vec();
        let mut b2 = b.clone();
        for v in &mut b2[4..8] {
            *v = -1e3;
        }
        p.bias.set_data(&b2).unwrap();
        let states = lstm_forward(&x, &p).unwrap().to_vec();
        for t in 1..8 {
            assert_eq!(&states[t * 4..t * 4 + 4], &states[4..8]);
        }
    }

    #[test]
    fn text_encoder_is_causal_and_composes() {
        let mut rng = RngState::new(3);
        let enc = Encoders::new(&mut Init::new(&mut rng), dims());
        let a = [0u32, 5, 7, 2, 9];
        let b = [0u32, 5, 7, 3, 3];
        let (ha, _) = enc.encode_text(&a).unwrap();
        let (hb, _) = enc.encode_text(&b).unwrap();
        assert_eq!(&ha.to_vec()[..12], &hb.to_vec()[..12]);
        assert_ne!(&ha.to_vec()[12..], &hb.to_vec()[12..]);

        let emb = embedding(&enc.embedding, &a).unwrap();
        let want = lstm_oracle(&emb.to_vec(), 5, 4, &enc.text_forward);
        for (x, y) in ha.to_vec().iter().zip(&want) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
        let rev: Vec<f64> = emb.to_vec().chunks(4).rev().flatten().copied().collect();
        let back = lstm_oracle(&rev, 5, 4, &enc.text_backward);
        let (_, summary) = enc.encode_text(&a).unwrap();
        for (x, y) in summary.to_vec().iter().zip(&back[16..]) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let mut rng = RngState::new(3);
        let enc = Encoders::new(&mut Init::new(&mut rng), dims());
        assert!(matches!(
            enc.encode_text(&[0, 12]),
            Err(Error::TokenOutOfRange { id: 12, vocab: 12 })
        ));
    }

    #[test]
    fn unused_vocab_rows_get_zero_gradient() {
        let mut rng = RngState::new(4);
        let enc = Encoders::new(&mut Init::new(&mut rng), dims());
        let tokens = [0u32, 4, 4, 9];
        let (h, s) = enc.encode_text(&tokens).unwrap();
        h.sum().add(&s.sum()).unwrap().backward().unwrap();
        let g = enc.embedding.grad().unwrap();
        for row in 0..12 {
            let used = tokens.contains(&(row as u32));
            let nonzero = g[row * 4..row * 4 + 4].iter().any(|&v| v != 0.0);
            assert_eq!(used, nonzero, "row {row}");
        }
    }

    #[test]
    fn encode_shapes_and_param_count() {
        let mut rng = RngState::new(5);
        let dm = dims();
        let enc = Encoders::new(&mut Init::new(&mut rng), dm);
        assert_eq!(enc.param_count(), dm.param_count());
        let views = RawViews {
            tokens: vec![0, 3, 1, 6],
            audio: rand_tensor(&mut rng, 7, 2),
            vision: rand_tensor(&mut rng, 5, 3),
        };
        let e = enc.encode(&views).unwrap();
        let lens = [4, 7, 5];
        for m in 0..3 {
            assert_eq!(e.locals[m].shape(), &[lens[m], 4]);
            assert_eq!(e.globals[m].shape(), &[1, 4]);
        }
        // global audio vector is the projected last LSTM state
        let states = lstm_forward(&views.audio, &enc.audio).unwrap();
        let last = states.row(6).unwrap();
        assert_eq!(e.globals[1].to_vec(), enc.global_proj[1].forward(&last).unwrap().to_vec());
    }

    #[test]
    fn zero_audio_with_zero_biases_gives_zero_global() {
        let mut rng = RngState::new(6);
        let enc = Encoders::new(&mut Init::new(&mut rng), dims());
        enc.audio.bias.set_data(&vec![0.0; enc.audio.bias.numel()]).unwrap();
        let views = RawViews {
            tokens: vec![0, 2],
            audio: Tensor::zeros(&[3, 2]),
            vision: rand_tensor(&mut rng, 2, 3),
        };
        let e = enc.encode(&views).unwrap();
        assert!(e.globals[1].to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = RngState::new(7);
        let p = Lstm::new(&mut Init::new(&mut rng), "lstm", 3, 2);
        randomize(&p, &mut rng);
        let x = Tensor::param("x", (0..12).map(|_| rng.normal()).collect(), &[4, 3]).unwrap();
        let mut params: Vec<Tensor> = p.named_params("").into_iter().map(|(_, t)| t).collect();
        params.push(x.clone());
        let r = finite_diff_check(
            || Ok(lstm_forward(&x, &p)?.mul(&lstm_forward(&x, &p)?)?.sum()),
            &params,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{:?}", r.worst());
    }
}
