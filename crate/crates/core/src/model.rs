//! Full network: backbone → M entity-aware decoders chained by state
//! transition, with a warm-up step in front of the first decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionNorm, AttentionParams};
use crate::backbone::{self, BackboneCache, BackboneConfig, BackboneParams};
use crate::decoder::{
    self, DecoderDims, DecoderParams, FeatureGrads, FeatureView, StepCache, StepGrad, WarmupCache,
};
use crate::domain::{split_on_eos, CharVocab, DecoderState, EntitySchema, GrayImage};
use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub backbone: BackboneConfig,
    /// LSTM width `n_h`.
    pub hidden: usize,
    /// Attention width `n_a`.
    pub attention: usize,
    /// Width of the LSTM input `W_c·C + W_ct1·ct`.
    pub embed: usize,
    #[serde(default)]
    pub attention_norm: AttentionNorm,
    /// One attention parameter set for all decoders instead of one each.
    #[serde(default)]
    pub share_attention: bool,
    #[serde(default = "default_true")]
    pub state_transition: bool,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_init_scale() -> f64 {
    0.08
}

impl ModelConfig {
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.backbone.output_shape(self.image_height, self.image_width)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate(self.image_height, self.image_width)?;
        if self.hidden == 0 || self.attention == 0 || self.embed == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn decoder_dims(&self, vocab: &CharVocab) -> DecoderDims {
        DecoderDims {
            hidden: self.hidden,
            attention: self.attention,
            embed: self.embed,
            features: self.feature_shape().2,
            vocab: vocab.size(),
        }
    }
}

/// All learnable tensors. Also used, zero-initialised, as a gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub decoders: Vec<DecoderParams>,
    pub attention: Vec<AttentionParams>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            decoders: self.decoders.iter().map(DecoderParams::zeros_like).collect(),
            attention: self.attention.iter().map(AttentionParams::zeros_like).collect(),
        }
    }

    /// `self += other`, tensor by tensor in visiting order.
    pub fn accumulate(&mut self, other: &ModelParams) {
        let src = other.named_tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.add_assign(s).expect("identical layouts");
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Copies each tensor of `grads` into the matching tensor's `grad` buffer.
    pub fn load_grads(&mut self, grads: &ModelParams) {
        let src = grads.named_tensors();
        for (dst, (_, g)) in self.tensors_mut().into_iter().zip(src) {
            dst.set_grad(g.data().to_vec()).expect("identical layouts");
        }
    }

    /// Whether weight decay applies: backbone kernels and the character
    /// output projections.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named_tensors()
            .iter()
            .map(|(name, _)| {
                (name.starts_with("backbone.") && name.ends_with(".kernel"))
                    || name.ends_with(".out_hidden")
                    || name.ends_with(".out_ctx")
            })
            .collect()
    }
}

impl Parameters for ModelParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.backbone.visit("backbone", &mut out);
        for (m, d) in self.decoders.iter().enumerate() {
            d.visit(&format!("decoder{m}"), &mut out);
        }
        for (a, p) in self.attention.iter().enumerate() {
            p.visit(&format!("attention{a}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.backbone.visit_mut(&mut out);
        for d in &mut self.decoders {
            d.visit_mut(&mut out);
        }
        for p in &mut self.attention {
            p.visit_mut(&mut out);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct EatenModel {
    pub config: ModelConfig,
    pub schema: EntitySchema,
    pub vocab: CharVocab,
    pub params: ModelParams,
}

/// Everything the backward pass needs from one teacher-forced forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `logits[m][t]` over the vocabulary.
    pub logits: Vec<Vec<Vec<f64>>>,
    /// Attention weights `weights[m][t]` over the `K` locations.
    pub weights: Vec<Vec<Vec<f64>>>,
    features: Vec<f64>,
    channels: usize,
    keys: Vec<Vec<f64>>,
    backbone: BackboneCache,
    warmup: WarmupCache,
    steps: Vec<Vec<StepCache>>,
}

impl EatenModel {
    /// Fresh model with deterministic initialisation from `config.init_seed`.
    pub fn new(config: ModelConfig, schema: EntitySchema, vocab: CharVocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let dims = config.decoder_dims(&vocab);
        let backbone = BackboneParams::init(&config.backbone, &mut rng);
        let decoders = (0..schema.num_decoders())
            .map(|_| DecoderParams::init(&dims, config.init_scale, &mut rng))
            .collect();
        let n_sets = if config.share_attention { 1 } else { schema.num_decoders() };
        let attention = (0..n_sets)
            .map(|_| AttentionParams::init(dims.hidden, dims.features, dims.attention, config.init_scale, &mut rng))
            .collect();
        Ok(Self {
            config,
            schema,
            vocab,
            params: ModelParams {
                backbone,
                decoders,
                attention,
            },
        })
    }

    /// Same layout with every parameter set to zero.
    pub fn zeroed(config: ModelConfig, schema: EntitySchema, vocab: CharVocab) -> Result<Self> {
        let mut m = Self::new(config, schema, vocab)?;
        for t in m.params.tensors_mut() {
            t.fill(0.0);
        }
        Ok(m)
    }

    fn attention_index(&self, m: usize) -> usize {
        if self.config.share_attention {
            0
        } else {
            m
        }
    }

    fn check_image(&self, image: &GrayImage) -> Result<()> {
        if image.width != self.config.image_width || image.height != self.config.image_height {
            return Err(Error::dim(
                "image",
                &[image.height, image.width],
                &[self.config.image_height, self.config.image_width],
            ));
        }
        Ok(())
    }

    fn features(&self, image: &GrayImage) -> Result<(Vec<f64>, usize, BackboneCache, Vec<Vec<f64>>)> {
        self.check_image(image)?;
        let (f, cache) = backbone::extract_features(image, &self.config.backbone, &self.params.backbone)?;
        let c = f.shape()[2];
        let flat = backbone::flatten_features(&f)?.into_data();
        let keys = self
            .params
            .attention
            .iter()
            .map(|p| attention::project_keys(&flat, c, p))
            .collect();
        Ok((flat, c, cache, keys))
    }

    /// The state decoder `m + 1` starts from, given decoder `m`'s last state.
    pub fn state_transition(&self, prev: &DecoderState) -> DecoderState {
        if self.config.state_transition {
            prev.clone()
        } else {
            DecoderState::zeros(self.config.hidden)
        }
    }

    /// Teacher-forced pass; `targets[m]` must hold exactly `T_m` ids.
    pub fn forward_teacher_forced(&self, image: &GrayImage, targets: &[Vec<usize>]) -> Result<ForwardPass> {
        self.forward_with_hook(image, targets, |_, _| {})
    }

    /// As [`Self::forward_teacher_forced`], calling `hook(m, state)` on each
    /// decoder's final state before it is handed on.
    pub fn forward_with_hook(
        &self,
        image: &GrayImage,
        targets: &[Vec<usize>],
        mut hook: impl FnMut(usize, &mut DecoderState),
    ) -> Result<ForwardPass> {
        let steps = self.schema.max_steps();
        if targets.len() != steps.len() || targets.iter().zip(&steps).any(|(t, &s)| t.len() != s) {
            return Err(Error::dim(
                "targets",
                &targets.iter().map(Vec::len).collect::<Vec<_>>(),
                &steps,
            ));
        }
        let (features, c, backbone, keys) = self.features(image)?;
        let norm = self.config.attention_norm;
        let view = |m: usize| FeatureView {
            features: &features,
            channels: c,
            keys: &keys[self.attention_index(m)],
        };
        let (mut state, warmup) = decoder::warmup(
            view(0),
            &self.params.decoders[0],
            &self.params.attention[self.attention_index(0)],
            norm,
        );
        let mut logits = Vec::with_capacity(steps.len());
        let mut weights = Vec::with_capacity(steps.len());
        let mut caches = Vec::with_capacity(steps.len());
        for (m, target) in targets.iter().enumerate() {
            if m > 0 {
                state = self.state_transition(&state);
            }
            let p = &self.params.decoders[m];
            let attn = &self.params.attention[self.attention_index(m)];
            let mut ct = vec![0.0; c];
            let mut prev = self.vocab.warmup_id();
            let (mut lg, mut wt, mut cs) = (Vec::new(), Vec::new(), Vec::new());
            for &y in target {
                let (out, cache) = decoder::decode_step(prev, &state, &ct, view(m), p, attn, norm)?;
                state = out.state;
                ct = out.ct;
                lg.push(out.logits);
                wt.push(out.weights);
                cs.push(cache);
                prev = y;
            }
            hook(m, &mut state);
            logits.push(lg);
            weights.push(wt);
            caches.push(cs);
        }
        Ok(ForwardPass {
            logits,
            weights,
            features,
            channels: c,
            keys,
            backbone,
            warmup,
            steps: caches,
        })
    }

    /// Accumulates parameter gradients into `grads` given `dL/dlogits`.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &[Vec<Vec<f64>>], grads: &mut ModelParams) {
        let n_h = self.config.hidden;
        let c = pass.channels;
        let mut grad_features = vec![0.0; pass.features.len()];
        let mut grad_keys: Vec<Vec<f64>> = pass.keys.iter().map(|k| vec![0.0; k.len()]).collect();
        let mut carried = DecoderState::zeros(n_h);
        for m in (0..pass.steps.len()).rev() {
            let a = self.attention_index(m);
            let view = FeatureView {
                features: &pass.features,
                channels: c,
                keys: &pass.keys[a],
            };
            let mut downstream = StepGrad {
                state: carried.clone(),
                ct: vec![0.0; c],
            };
            for (cache, gl) in pass.steps[m].iter().zip(&grad_logits[m]).rev() {
                let mut fg = FeatureGrads {
                    features: &mut grad_features,
                    keys: &mut grad_keys[a],
                };
                downstream = decoder::decode_step_backward(
                    cache,
                    gl,
                    &downstream,
                    view,
                    &self.params.decoders[m],
                    &self.params.attention[a],
                    &mut grads.decoders[m],
                    &mut grads.attention[a],
                    &mut fg,
                );
            }
            carried = if m == 0 || self.config.state_transition {
                downstream.state
            } else {
                DecoderState::zeros(n_h)
            };
        }
        let a0 = self.attention_index(0);
        let view = FeatureView {
            features: &pass.features,
            channels: c,
            keys: &pass.keys[a0],
        };
        let mut fg = FeatureGrads {
            features: &mut grad_features,
            keys: &mut grad_keys[a0],
        };
        decoder::warmup_backward(
            &pass.warmup,
            &carried,
            view,
            &self.params.decoders[0],
            &self.params.attention[a0],
            &mut grads.decoders[0],
            &mut grads.attention[a0],
            &mut fg,
        );
        let conv_channels = self.config.backbone.stages.last().map_or(c, |s| s.channels);
        for (a, gk) in grad_keys.iter().enumerate() {
            attention::project_keys_backward(
                &pass.features,
                c,
                &self.params.attention[a],
                gk,
                &mut grads.attention[a],
                Some(&mut grad_features),
                conv_channels,
            );
        }
        backbone::backward(&pass.backbone, &self.params.backbone, &grad_features, &mut grads.backbone);
    }

    /// Greedy decoding: each decoder runs exactly `T_m` steps feeding back its
    /// argmax (ties to the lowest id); returns the raw id sequences.
    pub fn decode_greedy(&self, image: &GrayImage) -> Result<Vec<Vec<usize>>> {
        let (features, c, _, keys) = self.features(image)?;
        let norm = self.config.attention_norm;
        let view = |m: usize| FeatureView {
            features: &features,
            channels: c,
            keys: &keys[self.attention_index(m)],
        };
        let (mut state, _) = decoder::warmup(
            view(0),
            &self.params.decoders[0],
            &self.params.attention[self.attention_index(0)],
            norm,
        );
        let mut out = Vec::with_capacity(self.schema.num_decoders());
        for (m, spec) in self.schema.decoders().iter().enumerate() {
            if m > 0 {
                state = self.state_transition(&state);
            }
            let p = &self.params.decoders[m];
            let attn = &self.params.attention[self.attention_index(m)];
            let mut ct = vec![0.0; c];
            let mut prev = self.vocab.warmup_id();
            let mut ids = Vec::with_capacity(spec.max_steps);
            for _ in 0..spec.max_steps {
                let (step, _) = decoder::decode_step(prev, &state, &ct, view(m), p, attn, norm)?;
                prev = argmax(&step.logits);
                ids.push(prev);
                state = step.state;
                ct = step.ct;
            }
            out.push(ids);
        }
        Ok(out)
    }

    /// Extracts one string per schema entity.
    pub fn infer(&self, image: &GrayImage) -> Result<BTreeMap<String, String>> {
        let ids = self.decode_greedy(image)?;
        let mut out = BTreeMap::new();
        for (spec, seq) in self.schema.decoders().iter().zip(&ids) {
            let texts = split_on_eos(seq, spec.entities.len(), &self.vocab);
            for (name, text) in spec.entities.iter().zip(texts) {
                out.insert(name.clone(), text);
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::DecoderSpec;

    fn toy(state_transition: bool, m: usize) -> EatenModel {
        let vocab = CharVocab::new("ABCDEFGH").unwrap();
        let decoders = (0..m)
            .map(|i| DecoderSpec {
                entities: vec![format!("E{i}")],
                max_steps: 3 + i,
            })
            .collect();
        let schema = EntitySchema::new(decoders).unwrap();
        let config = ModelConfig {
            image_width: 16,
            image_height: 16,
            backbone: BackboneConfig::from_stages(&[(4, 2), (8, 2)]),
            hidden: 8,
            attention: 6,
            embed: 5,
            attention_norm: AttentionNorm::Softmax,
            share_attention: false,
            state_transition,
            init_scale: 0.3,
            init_seed: 5,
        };
        EatenModel::new(config, schema, vocab).unwrap()
    }

    fn image(seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Tensor::uniform(&[256], 0.5, &mut rng).data().iter().map(|v| v + 0.5).collect();
        GrayImage {
            width: 16,
            height: 16,
            data,
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn logit_count_is_sum_of_steps() {
        let model = toy(true, 3);
        let targets: Vec<Vec<usize>> = model.schema.max_steps().iter().map(|&t| vec![0; t]).collect();
        let pass = model.forward_teacher_forced(&image(1), &targets).unwrap();
        let total: usize = pass.logits.iter().map(|d| d.iter().map(Vec::len).sum::<usize>()).sum();
        assert_eq!(total, model.schema.total_steps() * model.vocab.size());
    }

    #[test]
    fn zero_model_decodes_deterministically() {
        let model = toy(true, 2);
        let model = EatenModel::zeroed(model.config.clone(), model.schema.clone(), model.vocab.clone()).unwrap();
        let out = model.infer(&image(2)).unwrap();
        let keys: Vec<_> = out.keys().cloned().collect();
        assert_eq!(keys, ["E0", "E1"]);
        // all logits tie, so every step emits id 0 = 'A' and no EOS appears
        assert_eq!(out["E0"], "AAA");
        assert_eq!(model.infer(&image(2)).unwrap(), out);
    }

    #[test]
    fn transition_copy_and_ablation() {
        let on = toy(true, 2);
        let s = DecoderState {
            carry: vec![0.25; 8],
            hidden: vec![-0.5; 8],
        };
        assert_eq!(on.state_transition(&s), s);
        let off = toy(false, 2);
        assert_eq!(off.state_transition(&s), DecoderState::zeros(8));
    }

    #[test]
    fn final_state_of_decoder_feeds_the_next() {
        let model = toy(true, 2);
        let targets = vec![vec![1, 2, 3], vec![4, 5, 6, 7]];
        let img = image(3);
        let base = model.forward_teacher_forced(&img, &targets).unwrap();
        let bumped = model
            .forward_with_hook(&img, &targets, |m, s| {
                if m == 0 {
                    s.hidden[0] += 0.5;
                }
            })
            .unwrap();
        assert_eq!(base.logits[0], bumped.logits[0]);
        assert_ne!(base.logits[1], bumped.logits[1]);

        let off = toy(false, 2);
        let base = off.forward_teacher_forced(&img, &targets).unwrap();
        let bumped = off
            .forward_with_hook(&img, &targets, |m, s| {
                if m == 0 {
                    s.hidden[0] += 0.5;
                }
            })
            .unwrap();
        assert_eq!(base.logits[1], bumped.logits[1]);
    }

    #[test]
    fn wrong_target_lengths_are_rejected() {
        let model = toy(true, 2);
        assert!(model.forward_teacher_forced(&image(4), &[vec![0; 3], vec![0; 3]]).is_err());
    }
}
