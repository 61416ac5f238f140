//! Entity-aware additive attention over the flattened feature map.
//!
//! Score `e_k = Σ_j v_j · tanh(h·W_h + F̂_k·W_f + b)_j`, weights from the
//! normalised scores, context `ct = Σ_k α_k F̂_k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;

/// How raw scores become weights. `Ratio` divides by the score sum with no
/// exponential and falls back to uniform weights when `|Σe| < 1e-8`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    #[default]
    Softmax,
    Ratio,
}

pub const RATIO_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `W_h`, `[n_h × n_a]`.
    pub query: Tensor,
    /// `W_f` as a 1×1 convolution, `[C × n_a]`.
    pub key: Tensor,
    pub key_bias: Tensor,
    /// `V`, `[n_a]`.
    pub score: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(n_h: usize, c: usize, n_a: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            query: Tensor::uniform(&[n_h, n_a], scale, rng),
            key: Tensor::uniform(&[c, n_a], scale, rng),
            key_bias: Tensor::zeros(&[n_a]),
            score: Tensor::uniform(&[n_a], scale, rng),
        }
    }

    pub fn zeros(n_h: usize, c: usize, n_a: usize) -> Self {
        Self {
            query: Tensor::zeros(&[n_h, n_a]),
            key: Tensor::zeros(&[c, n_a]),
            key_bias: Tensor::zeros(&[n_a]),
            score: Tensor::zeros(&[n_a]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            key_bias: self.key_bias.zeros_like(),
            score: self.score.zeros_like(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn attn_dim(&self) -> usize {
        self.score.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.key.shape()[0]
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.query"), &self.query));
        out.push((format!("{prefix}.key"), &self.key));
        out.push((format!("{prefix}.key_bias"), &self.key_bias));
        out.push((format!("{prefix}.score"), &self.score));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.query);
        out.push(&mut self.key);
        out.push(&mut self.key_bias);
        out.push(&mut self.score);
    }
}

/// `F̂·W_f + b` for every location; independent of the decoding step.
pub fn project_keys(features: &[f64], c: usize, p: &AttentionParams) -> Vec<f64> {
    let n_a = p.attn_dim();
    let k = features.len() / c;
    let mut keys = Vec::with_capacity(k * n_a);
    for row in features.chunks_exact(c) {
        let start = keys.len();
        keys.extend_from_slice(p.key_bias.data());
        kernels::vec_mat_acc(row, p.key.data(), &mut keys[start..]);
    }
    keys
}

/// Backward of [`project_keys`]. Feature gradients are accumulated for the
/// leading `trainable` channels of each row only; trailing channels (fixed
/// position indicators) have nothing upstream to receive them.
pub fn project_keys_backward(
    features: &[f64],
    c: usize,
    p: &AttentionParams,
    grad_keys: &[f64],
    grads: &mut AttentionParams,
    grad_features: Option<&mut [f64]>,
    trainable: usize,
) {
    let n_a = p.attn_dim();
    for (row, dk) in features.chunks_exact(c).zip(grad_keys.chunks_exact(n_a)) {
        kernels::outer_acc(row, dk, grads.key.data_mut());
        kernels::axpy(1.0, dk, grads.key_bias.data_mut());
    }
    if let Some(gf) = grad_features {
        let w = &p.key.data()[..trainable.min(c) * n_a];
        for (df, dk) in gf.chunks_exact_mut(c).zip(grad_keys.chunks_exact(n_a)) {
            kernels::mat_vec_acc(w, dk, &mut df[..trainable.min(c)]);
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// `tanh(q + keys_k)`, `[K × n_a]`.
    activations: Vec<f64>,
    pub weights: Vec<f64>,
    normalised: Normalised,
}

#[derive(Clone, Copy, Debug)]
enum Normalised {
    Softmax,
    Ratio { sum: f64 },
    /// Ratio guard fired; weights are uniform and carry no score gradient.
    Guarded,
}

/// One attention read using precomputed keys. Returns `(ct, cache)`.
pub fn attend_projected(
    hidden: &[f64],
    keys: &[f64],
    features: &[f64],
    c: usize,
    p: &AttentionParams,
    norm: AttentionNorm,
) -> (Vec<f64>, AttentionCache) {
    let n_a = p.attn_dim();
    let k = keys.len() / n_a;
    let mut q = vec![0.0; n_a];
    kernels::vec_mat_acc(hidden, p.query.data(), &mut q);
    let v = p.score.data();
    let mut activations = keys.to_vec();
    for z in activations.chunks_exact_mut(n_a) {
        kernels::axpy(1.0, &q, z);
    }
    kernels::tanh_in_place(&mut activations);
    let scores: Vec<f64> = activations.chunks_exact(n_a).map(|z| kernels::dot(v, z)).collect();
    let mut weights = vec![0.0; k];
    let normalised = match norm {
        AttentionNorm::Softmax => {
            kernels::softmax_into(&scores, &mut weights);
            Normalised::Softmax
        }
        AttentionNorm::Ratio => {
            let sum: f64 = scores.iter().sum();
            if sum.abs() < RATIO_GUARD {
                weights.iter_mut().for_each(|w| *w = 1.0 / k as f64);
                Normalised::Guarded
            } else {
                for (w, e) in weights.iter_mut().zip(&scores) {
                    *w = e / sum;
                }
                Normalised::Ratio { sum }
            }
        }
    };
    let mut ct = vec![0.0; c];
    for (w, row) in weights.iter().zip(features.chunks_exact(c)) {
        kernels::axpy(*w, row, &mut ct);
    }
    (
        ct,
        AttentionCache {
            activations,
            weights,
            normalised,
        },
    )
}

/// Backward of [`attend_projected`] given `dL/dct`. Accumulates into the
/// query/score gradients, `grad_hidden`, `grad_keys` and `grad_features`.
#[allow(clippy::too_many_arguments)]
pub fn attend_projected_backward(
    cache: &AttentionCache,
    hidden: &[f64],
    features: &[f64],
    c: usize,
    p: &AttentionParams,
    grad_ct: &[f64],
    grads: &mut AttentionParams,
    grad_hidden: &mut [f64],
    grad_keys: &mut [f64],
    grad_features: &mut [f64],
) {
    let n_a = p.attn_dim();
    let k = cache.weights.len();
    let mut grad_w = vec![0.0; k];
    for ((gw, row), (w, gf)) in grad_w
        .iter_mut()
        .zip(features.chunks_exact(c))
        .zip(cache.weights.iter().zip(grad_features.chunks_exact_mut(c)))
    {
        *gw = kernels::dot(row, grad_ct);
        kernels::axpy(*w, grad_ct, gf);
    }
    let mut grad_scores = vec![0.0; k];
    match cache.normalised {
        Normalised::Guarded => return,
        Normalised::Ratio { sum } => {
            let inner = kernels::dot(&cache.weights, &grad_w);
            for (gs, gw) in grad_scores.iter_mut().zip(&grad_w) {
                *gs = (gw - inner) / sum;
            }
        }
        Normalised::Softmax => {
            kernels::softmax_backward_acc(&cache.weights, &grad_w, &mut grad_scores);
        }
    }
    let v = p.score.data();
    let mut grad_q = vec![0.0; n_a];
    {
        let gv = grads.score.data_mut();
        for ((z, gk), gs) in cache
            .activations
            .chunks_exact(n_a)
            .zip(grad_keys.chunks_exact_mut(n_a))
            .zip(&grad_scores)
        {
            for j in 0..n_a {
                gv[j] += gs * z[j];
                let du = gs * v[j] * (1.0 - z[j] * z[j]);
                gk[j] += du;
                grad_q[j] += du;
            }
        }
    }
    kernels::outer_acc(hidden, &grad_q, grads.query.data_mut());
    kernels::mat_vec_acc(p.query.data(), &grad_q, grad_hidden);
}

/// Convenience wrapper computing `(weights, ct)` directly from `F̂` (`K × C`).
pub fn attend(
    hidden: &[f64],
    features: &Tensor,
    p: &AttentionParams,
    norm: AttentionNorm,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let &[k, c] = features.shape() else {
        return Err(Error::dim("attend", features.shape(), &[0, p.feature_dim()]));
    };
    if k == 0 || c != p.feature_dim() || hidden.len() != p.hidden_dim() {
        return Err(Error::dim("attend", features.shape(), p.key.shape()));
    }
    let keys = project_keys(features.data(), c, p);
    let (ct, cache) = attend_projected(hidden, &keys, features.data(), c, p, norm);
    Ok((cache.weights, ct))
}
