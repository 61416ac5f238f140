//! One entity-aware decoder: an LSTM whose input mixes the previous character
//! and the previous context, an attention read driven by the new hidden state,
//! and a character distribution from the hidden state plus the new context.

use rand::Rng;

use crate::attention::{self, AttentionCache, AttentionNorm, AttentionParams};
use crate::domain::DecoderState;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, sigmoid};
use crate::numerics::Tensor;

/// Carry values are clamped to `[-CELL_CLIP, CELL_CLIP]` after every update.
pub const CELL_CLIP: f64 = 10.0;

/// Layer widths shared by every decoder of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub hidden: usize,
    pub attention: usize,
    pub embed: usize,
    pub features: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `W_c`, one row per character, `[vocab × embed]`.
    pub embed: Tensor,
    /// `W_ct1`, `[C × embed]`.
    pub ctx_in: Tensor,
    pub in_bias: Tensor,
    /// Gate order within the `4·n_h` axis: input, forget, candidate, output.
    pub lstm_wx: Tensor,
    pub lstm_wh: Tensor,
    pub lstm_b: Tensor,
    /// `W_o`, `[n_h × vocab]`.
    pub out_hidden: Tensor,
    /// `W_ct2`, `[C × vocab]`.
    pub out_ctx: Tensor,
    pub out_bias: Tensor,
}

impl DecoderParams {
    /// Uniform `[-scale, scale]` weights, zero biases, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(d: &DecoderDims, scale: f64, rng: &mut R) -> Self {
        let n4 = 4 * d.hidden;
        let mut lstm_b = Tensor::zeros(&[n4]);
        lstm_b.data_mut()[d.hidden..2 * d.hidden].fill(1.0);
        Self {
            embed: Tensor::uniform(&[d.vocab, d.embed], scale, rng),
            ctx_in: Tensor::uniform(&[d.features, d.embed], scale, rng),
            in_bias: Tensor::zeros(&[d.embed]),
            lstm_wx: Tensor::uniform(&[d.embed, n4], scale, rng),
            lstm_wh: Tensor::uniform(&[d.hidden, n4], scale, rng),
            lstm_b,
            out_hidden: Tensor::uniform(&[d.hidden, d.vocab], scale, rng),
            out_ctx: Tensor::uniform(&[d.features, d.vocab], scale, rng),
            out_bias: Tensor::zeros(&[d.vocab]),
        }
    }

    /// All-zero weights and biases, forget bias included.
    pub fn zeros(d: &DecoderDims) -> Self {
        let n4 = 4 * d.hidden;
        Self {
            embed: Tensor::zeros(&[d.vocab, d.embed]),
            ctx_in: Tensor::zeros(&[d.features, d.embed]),
            in_bias: Tensor::zeros(&[d.embed]),
            lstm_wx: Tensor::zeros(&[d.embed, n4]),
            lstm_wh: Tensor::zeros(&[d.hidden, n4]),
            lstm_b: Tensor::zeros(&[n4]),
            out_hidden: Tensor::zeros(&[d.hidden, d.vocab]),
            out_ctx: Tensor::zeros(&[d.features, d.vocab]),
            out_bias: Tensor::zeros(&[d.vocab]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed.zeros_like(),
            ctx_in: self.ctx_in.zeros_like(),
            in_bias: self.in_bias.zeros_like(),
            lstm_wx: self.lstm_wx.zeros_like(),
            lstm_wh: self.lstm_wh.zeros_like(),
            lstm_b: self.lstm_b.zeros_like(),
            out_hidden: self.out_hidden.zeros_like(),
            out_ctx: self.out_ctx.zeros_like(),
            out_bias: self.out_bias.zeros_like(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm_wh.shape()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.out_bias.len()
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, t) in [
            ("embed", &self.embed),
            ("ctx_in", &self.ctx_in),
            ("in_bias", &self.in_bias),
            ("lstm_wx", &self.lstm_wx),
            ("lstm_wh", &self.lstm_wh),
            ("lstm_b", &self.lstm_b),
            ("out_hidden", &self.out_hidden),
            ("out_ctx", &self.out_ctx),
            ("out_bias", &self.out_bias),
        ] {
            out.push((format!("{prefix}.{name}"), t));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([
            &mut self.embed,
            &mut self.ctx_in,
            &mut self.in_bias,
            &mut self.lstm_wx,
            &mut self.lstm_wh,
            &mut self.lstm_b,
            &mut self.out_hidden,
            &mut self.out_ctx,
            &mut self.out_bias,
        ]);
    }
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `[i | f | g | o]`.
    gates: Vec<f64>,
    c_raw: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Standard LSTM update with the new carry clipped to `[-10, 10]` before the
/// hidden state is computed.
pub fn lstm_step(x: &[f64], state: &DecoderState, p: &DecoderParams) -> (DecoderState, LstmCache) {
    let n = p.hidden_dim();
    let mut gates = p.lstm_b.data().to_vec();
    kernels::vec_mat_acc(x, p.lstm_wx.data(), &mut gates);
    kernels::vec_mat_acc(&state.hidden, p.lstm_wh.data(), &mut gates);
    for (j, a) in gates.iter_mut().enumerate() {
        *a = if (2 * n..3 * n).contains(&j) { kernels::tanh(*a) } else { sigmoid(*a) };
    }
    let mut c_raw = vec![0.0; n];
    let mut carry = vec![0.0; n];
    let mut tanh_c = vec![0.0; n];
    let mut hidden = vec![0.0; n];
    for j in 0..n {
        let (i, f, g, o) = (gates[j], gates[n + j], gates[2 * n + j], gates[3 * n + j]);
        c_raw[j] = f * state.carry[j] + i * g;
        carry[j] = c_raw[j].clamp(-CELL_CLIP, CELL_CLIP);
        tanh_c[j] = kernels::tanh(carry[j]);
        hidden[j] = o * tanh_c[j];
    }
    (
        DecoderState { carry, hidden },
        LstmCache {
            x: x.to_vec(),
            h_prev: state.hidden.clone(),
            c_prev: state.carry.clone(),
            gates,
            c_raw,
            tanh_c,
        },
    )
}

/// Gradients of [`lstm_step`]: given `dL/dh` and `dL/dc` of the new state,
/// returns `(dL/dx, dL/dstate_prev)`.
pub fn lstm_backward(
    cache: &LstmCache,
    p: &DecoderParams,
    grad_hidden: &[f64],
    grad_carry: &[f64],
    grads: &mut DecoderParams,
) -> (Vec<f64>, DecoderState) {
    let n = p.hidden_dim();
    let g = &cache.gates;
    let mut da = vec![0.0; 4 * n];
    let mut dc_prev = vec![0.0; n];
    for j in 0..n {
        let (i, f, cand, o) = (g[j], g[n + j], g[2 * n + j], g[3 * n + j]);
        let tc = cache.tanh_c[j];
        let d_o = grad_hidden[j] * tc;
        let mut dc = grad_carry[j] + grad_hidden[j] * o * (1.0 - tc * tc);
        if cache.c_raw[j].abs() >= CELL_CLIP {
            dc = 0.0;
        }
        dc_prev[j] = dc * f;
        da[j] = dc * cand * i * (1.0 - i);
        da[n + j] = dc * cache.c_prev[j] * f * (1.0 - f);
        da[2 * n + j] = dc * i * (1.0 - cand * cand);
        da[3 * n + j] = d_o * o * (1.0 - o);
    }
    kernels::outer_acc(&cache.x, &da, grads.lstm_wx.data_mut());
    kernels::outer_acc(&cache.h_prev, &da, grads.lstm_wh.data_mut());
    kernels::axpy(1.0, &da, grads.lstm_b.data_mut());
    let mut dx = vec![0.0; cache.x.len()];
    kernels::mat_vec_acc(p.lstm_wx.data(), &da, &mut dx);
    let mut dh_prev = vec![0.0; n];
    kernels::mat_vec_acc(p.lstm_wh.data(), &da, &mut dh_prev);
    (
        dx,
        DecoderState {
            carry: dc_prev,
            hidden: dh_prev,
        },
    )
}

/// The flattened feature map together with one decoder's projected keys.
#[derive(Clone, Copy, Debug)]
pub struct FeatureView<'a> {
    /// `F̂`, `[K × C]` row-major.
    pub features: &'a [f64],
    pub channels: usize,
    /// `F̂·W_f + b`, `[K × n_a]`.
    pub keys: &'a [f64],
}

impl FeatureView<'_> {
    pub fn locations(&self) -> usize {
        self.features.len() / self.channels
    }
}

/// Gradient sinks for the feature map and keys of one decoder.
pub struct FeatureGrads<'a> {
    pub features: &'a mut [f64],
    pub keys: &'a mut [f64],
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub ct: Vec<f64>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepCache {
    prev_char: usize,
    ct_prev: Vec<f64>,
    lstm: LstmCache,
    hidden: Vec<f64>,
    ct: Vec<f64>,
    attn: AttentionCache,
}

fn input_projection(prev_char: Option<usize>, ct_prev: &[f64], p: &DecoderParams) -> Vec<f64> {
    let mut x = p.in_bias.data().to_vec();
    if let Some(c) = prev_char {
        let d = x.len();
        kernels::axpy(1.0, &p.embed.data()[c * d..(c + 1) * d], &mut x);
    }
    kernels::vec_mat_acc(ct_prev, p.ctx_in.data(), &mut x);
    x
}

/// One decoding step: input from the previous character and context, LSTM
/// update, attention with the new hidden state, then logits
/// `h·W_o + ct·W_ct2 + b`.
pub fn decode_step(
    prev_char: usize,
    state: &DecoderState,
    ct_prev: &[f64],
    view: FeatureView<'_>,
    p: &DecoderParams,
    attn: &AttentionParams,
    norm: AttentionNorm,
) -> Result<(StepOutput, StepCache)> {
    if prev_char >= p.vocab_size() {
        return Err(Error::Vocabulary(format!(
            "previous character id {prev_char} outside vocabulary of size {}",
            p.vocab_size()
        )));
    }
    let x = input_projection(Some(prev_char), ct_prev, p);
    let (new_state, lstm) = lstm_step(&x, state, p);
    let (ct, attn_cache) = attention::attend_projected(
        &new_state.hidden,
        view.keys,
        view.features,
        view.channels,
        attn,
        norm,
    );
    let mut logits = p.out_bias.data().to_vec();
    kernels::vec_mat_acc(&new_state.hidden, p.out_hidden.data(), &mut logits);
    kernels::vec_mat_acc(&ct, p.out_ctx.data(), &mut logits);
    let out = StepOutput {
        state: new_state.clone(),
        ct: ct.clone(),
        logits,
        weights: attn_cache.weights.clone(),
    };
    let cache = StepCache {
        prev_char,
        ct_prev: ct_prev.to_vec(),
        lstm,
        hidden: new_state.hidden,
        ct,
        attn: attn_cache,
    };
    Ok((out, cache))
}

/// Gradient flowing into a step from everything downstream of it.
#[derive(Clone, Debug)]
pub struct StepGrad {
    pub state: DecoderState,
    pub ct: Vec<f64>,
}

impl StepGrad {
    pub fn zeros(n_h: usize, c: usize) -> Self {
        Self {
            state: DecoderState::zeros(n_h),
            ct: vec![0.0; c],
        }
    }
}

/// Backward of [`decode_step`]. `downstream` holds `dL/d(state, ct)` from later
/// steps; returns the same quantities for the step's inputs.
#[allow(clippy::too_many_arguments)]
pub fn decode_step_backward(
    cache: &StepCache,
    grad_logits: &[f64],
    downstream: &StepGrad,
    view: FeatureView<'_>,
    p: &DecoderParams,
    attn: &AttentionParams,
    grads: &mut DecoderParams,
    attn_grads: &mut AttentionParams,
    feature_grads: &mut FeatureGrads<'_>,
) -> StepGrad {
    kernels::outer_acc(&cache.hidden, grad_logits, grads.out_hidden.data_mut());
    kernels::outer_acc(&cache.ct, grad_logits, grads.out_ctx.data_mut());
    kernels::axpy(1.0, grad_logits, grads.out_bias.data_mut());

    let mut dh = downstream.state.hidden.clone();
    kernels::mat_vec_acc(p.out_hidden.data(), grad_logits, &mut dh);
    let mut dct = downstream.ct.clone();
    kernels::mat_vec_acc(p.out_ctx.data(), grad_logits, &mut dct);

    attention::attend_projected_backward(
        &cache.attn,
        &cache.hidden,
        view.features,
        view.channels,
        attn,
        &dct,
        attn_grads,
        &mut dh,
        feature_grads.keys,
        feature_grads.features,
    );

    let (dx, state_grad) = lstm_backward(&cache.lstm, p, &dh, &downstream.state.carry, grads);
    let ct_grad = input_backward(Some(cache.prev_char), &cache.ct_prev, &dx, p, grads);
    StepGrad {
        state: state_grad,
        ct: ct_grad,
    }
}

fn input_backward(
    prev_char: Option<usize>,
    ct_prev: &[f64],
    dx: &[f64],
    p: &DecoderParams,
    grads: &mut DecoderParams,
) -> Vec<f64> {
    let d = dx.len();
    if let Some(c) = prev_char {
        kernels::axpy(1.0, dx, &mut grads.embed.data_mut()[c * d..(c + 1) * d]);
    }
    kernels::outer_acc(ct_prev, dx, grads.ctx_in.data_mut());
    kernels::axpy(1.0, dx, grads.in_bias.data_mut());
    let mut dct = vec![0.0; ct_prev.len()];
    kernels::mat_vec_acc(p.ctx_in.data(), dx, &mut dct);
    dct
}

#[derive(Clone, Debug)]
pub struct WarmupCache {
    ct: Vec<f64>,
    attn: AttentionCache,
    lstm: LstmCache,
}

/// The discarded buffer step: attend with a zero hidden state, feed the pooled
/// context through `W_ct1` into the LSTM from the zero state, and return the
/// resulting state as the first decoder's initial state.
pub fn warmup(
    view: FeatureView<'_>,
    p: &DecoderParams,
    attn: &AttentionParams,
    norm: AttentionNorm,
) -> (DecoderState, WarmupCache) {
    let n = p.hidden_dim();
    let zero = DecoderState::zeros(n);
    let (ct, attn_cache) =
        attention::attend_projected(&zero.hidden, view.keys, view.features, view.channels, attn, norm);
    let x = input_projection(None, &ct, p);
    let (state, lstm) = lstm_step(&x, &zero, p);
    (
        state,
        WarmupCache {
            ct,
            attn: attn_cache,
            lstm,
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub fn warmup_backward(
    cache: &WarmupCache,
    grad_state: &DecoderState,
    view: FeatureView<'_>,
    p: &DecoderParams,
    attn: &AttentionParams,
    grads: &mut DecoderParams,
    attn_grads: &mut AttentionParams,
    feature_grads: &mut FeatureGrads<'_>,
) {
    let n = p.hidden_dim();
    let (dx, _) = lstm_backward(&cache.lstm, p, &grad_state.hidden, &grad_state.carry, grads);
    let dct = input_backward(None, &cache.ct, &dx, p, grads);
    let zero_hidden = vec![0.0; n];
    let mut sink = vec![0.0; n];
    attention::attend_projected_backward(
        &cache.attn,
        &zero_hidden,
        view.features,
        view.channels,
        attn,
        &dct,
        attn_grads,
        &mut sink,
        feature_grads.keys,
        feature_grads.features,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> DecoderDims {
        DecoderDims {
            hidden: 6,
            attention: 3,
            embed: 5,
            features: 4,
            vocab: 8,
        }
    }

    #[test]
    fn zero_weights_halve_the_carry() {
        let d = dims();
        let p = DecoderParams::zeros(&d);
        let state = DecoderState {
            carry: vec![4.0, -2.0, 0.0, 1.0, 8.0, -6.0],
            hidden: vec![0.3; 6],
        };
        let (next, _) = lstm_step(&[0.5; 5], &state, &p);
        for (c0, (c1, h1)) in state.carry.iter().zip(next.carry.iter().zip(&next.hidden)) {
            assert_eq!(*c1, 0.5 * c0);
            assert!((h1 - 0.5 * (0.5 * c0).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn carry_is_clipped_to_ten() {
        let d = dims();
        let mut p = DecoderParams::zeros(&d);
        // saturate forget (f≈1) and input gates (i≈1), candidate g≈1, so c ≈ 11 + 1 = 12
        let n = d.hidden;
        p.lstm_b.data_mut()[..n].fill(60.0);
        p.lstm_b.data_mut()[n..2 * n].fill(60.0);
        p.lstm_b.data_mut()[2 * n..3 * n].fill(60.0);
        let state = DecoderState {
            carry: vec![11.0; n],
            hidden: vec![0.0; n],
        };
        let (next, cache) = lstm_step(&[0.0; 5], &state, &p);
        assert!((cache.c_raw[0] - 12.0).abs() < 1e-12);
        assert!(next.carry.iter().all(|&c| c == 10.0));
    }

    #[test]
    fn zero_parameters_give_uniform_logits() {
        let d = dims();
        let p = DecoderParams::zeros(&d);
        let attn = AttentionParams::zeros(d.hidden, d.features, d.attention);
        let feats = vec![0.25; 5 * d.features];
        let keys = attention::project_keys(&feats, d.features, &attn);
        let view = FeatureView {
            features: &feats,
            channels: d.features,
            keys: &keys,
        };
        let (out, _) = decode_step(2, &DecoderState::zeros(d.hidden), &[0.0; 4], view, &p, &attn, AttentionNorm::Softmax).unwrap();
        assert!(out.logits.iter().all(|&l| l == out.logits[0]));
        assert!(decode_step(8, &DecoderState::zeros(d.hidden), &[0.0; 4], view, &p, &attn, AttentionNorm::Softmax).is_err());

        let (is0, _) = warmup(view, &p, &attn, AttentionNorm::Softmax);
        assert!(is0.carry.iter().chain(&is0.hidden).all(|&v| v == 0.0));
    }

    #[test]
    fn decode_step_is_deterministic() {
        let d = dims();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DecoderParams::init(&d, 0.5, &mut rng);
        let attn = AttentionParams::init(d.hidden, d.features, d.attention, 0.5, &mut rng);
        let feats = Tensor::uniform(&[5, d.features], 1.0, &mut rng).into_data();
        let keys = attention::project_keys(&feats, d.features, &attn);
        let view = FeatureView {
            features: &feats,
            channels: d.features,
            keys: &keys,
        };
        let state = DecoderState {
            carry: vec![0.1; 6],
            hidden: vec![-0.2; 6],
        };
        let a = decode_step(3, &state, &[0.3; 4], view, &p, &attn, AttentionNorm::Softmax).unwrap().0;
        let b = decode_step(3, &state, &[0.3; 4], view, &p, &attn, AttentionNorm::Softmax).unwrap().0;
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.state, b.state);
        assert_eq!(a.weights, b.weights);
    }
}
