//! Multi-decoder NLL with label smoothing, momentum SGD with clipping and
//! weight decay, and the epoch loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{encode_targets, GrayImage, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, EntityMap, EvalReport};
use crate::model::{EatenModel, ModelParams};
use crate::numerics::{kernels, Parameters};
use crate::parallel::Executor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Exclude EOS padding after a decoder's last entity from the loss.
    pub mask_padding: bool,
    /// Share of the training split held out for validation.
    pub val_fraction: f64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.04,
            lr_decay: 0.94,
            decay_every: 4,
            momentum: 0.9,
            weight_decay: 1e-5,
            label_smoothing: 0.1,
            grad_clip_norm: 2.0,
            epochs: 40,
            batch_size: 4,
            seed: 0,
            mask_padding: false,
            val_fraction: 0.1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("train.{what} is out of range")));
        if !(self.lr0 > 0.0) {
            return bad("lr0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay");
        }
        if self.decay_every == 0 {
            return bad("decay_every");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction");
        }
        if self.eval_every == 0 {
            return bad("eval_every");
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// Cross-entropy of `softmax(logits)` against the smoothed one-hot target
/// (`1 - eps` on the target, `eps / (V - 1)` elsewhere) and its logit gradient.
pub fn smoothed_cross_entropy(logits: &[f64], target: usize, eps: f64) -> (f64, Vec<f64>) {
    let v = logits.len();
    let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
    let on = 1.0 - eps;
    let lse = kernels::log_sum_exp(logits);
    let sum: f64 = logits.iter().sum();
    let loss = lse - (on * logits[target] + off * (sum - logits[target]));
    let mut grad = vec![0.0; v];
    kernels::softmax_into(logits, &mut grad);
    for (j, g) in grad.iter_mut().enumerate() {
        *g -= if j == target { on } else { off };
    }
    (loss, grad)
}

/// Summed loss over every decoder and step, with `dL/dlogits`. When
/// `active` is given, only the first `active[m]` steps of decoder `m` count.
pub fn sequence_loss(
    logits: &[Vec<Vec<f64>>],
    targets: &[Vec<usize>],
    eps: f64,
    active: Option<&[usize]>,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    if logits.len() != targets.len() {
        return Err(Error::dim("loss", &[logits.len()], &[targets.len()]));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (m, (lm, tm)) in logits.iter().zip(targets).enumerate() {
        if lm.len() != tm.len() {
            return Err(Error::dim("loss", &[m, lm.len()], &[m, tm.len()]));
        }
        let limit = active.map_or(tm.len(), |a| a[m].min(tm.len()));
        let mut gm = Vec::with_capacity(lm.len());
        for (t, (l, &y)) in lm.iter().zip(tm).enumerate() {
            if y >= l.len() {
                return Err(Error::Vocabulary(format!(
                    "target id {y} outside vocabulary of size {}",
                    l.len()
                )));
            }
            if t < limit {
                let (loss, g) = smoothed_cross_entropy(l, y, eps);
                total += loss;
                gm.push(g);
            } else {
                gm.push(vec![0.0; l.len()]);
            }
        }
        grads.push(gm);
    }
    Ok((total, grads))
}

pub fn loss(logits: &[Vec<Vec<f64>>], targets: &[Vec<usize>], eps: f64) -> Result<f64> {
    Ok(sequence_loss(logits, targets, eps, None)?.0)
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<P: Parameters + ?Sized>(grads: &P) -> f64 {
    grads
        .named_tensors()
        .iter()
        .map(|(_, t)| t.squared_norm())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: Parameters + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One momentum SGD update: clip, `v ← μv + g (+ λθ)`, `θ ← θ − lr·v`.
/// Returns the pre-clip gradient norm.
pub fn sgd_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &mut P,
    velocity: &mut P,
    decay_mask: &[bool],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    for (name, g) in grads.named_tensors() {
        if !g.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient in {name}")));
        }
    }
    let norm = clip_global_norm(grads, cfg.grad_clip_norm);
    let lr = lr_at(epoch, cfg);
    let gs: Vec<Vec<f64>> = grads.named_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    for (((theta, v), g), &decay) in params
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut())
        .zip(&gs)
        .zip(decay_mask)
    {
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(norm)
}

/// A sample with its targets already encoded for the model's schema.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub id: String,
    pub image: GrayImage,
    pub targets: Vec<Vec<usize>>,
    /// Steps up to and including each decoder's final entity EOS.
    pub active: Vec<usize>,
    pub golds: EntityMap,
}

pub fn encode_samples(samples: &[Sample], model: &EatenModel) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            let targets = encode_targets(&s.targets, &model.schema, &model.vocab)?;
            let active = model
                .schema
                .decoders()
                .iter()
                .map(|d| {
                    d.entities
                        .iter()
                        .map(|e| s.targets.get(e).map_or(0, |t| t.chars().count()) + 1)
                        .sum()
                })
                .collect();
            let golds = model
                .schema
                .entity_names()
                .map(|e| (e.to_string(), s.targets.get(e).cloned().unwrap_or_default()))
                .collect();
            Ok(EncodedSample {
                id: s.id.clone(),
                image: s.image.clone(),
                targets,
                active,
                golds,
            })
        })
        .collect()
}

/// Loss and gradients for one sample.
pub fn sample_gradients(
    model: &EatenModel,
    sample: &EncodedSample,
    cfg: &TrainConfig,
) -> Result<(f64, ModelParams)> {
    let pass = model.forward_teacher_forced(&sample.image, &sample.targets)?;
    let active = cfg.mask_padding.then_some(sample.active.as_slice());
    let (loss, grad_logits) = sequence_loss(&pass.logits, &sample.targets, cfg.label_smoothing, active)?;
    let mut grads = model.params.zeros_like();
    model.backward(&pass, &grad_logits, &mut grads);
    Ok((loss, grads))
}

/// Mean loss and mean gradients over a batch. Per-sample results are reduced
/// in batch order, so the outcome does not depend on the executor.
pub fn batch_gradients(
    model: &EatenModel,
    batch: &[&EncodedSample],
    cfg: &TrainConfig,
    exec: &Executor,
) -> Result<(f64, ModelParams)> {
    let results = exec.map(batch, |_, s| sample_gradients(model, s, cfg));
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.accumulate(&g);
    }
    let n = batch.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Greedy predictions for every sample, in order.
pub fn predict_all(model: &EatenModel, samples: &[EncodedSample], exec: &Executor) -> Result<Vec<EntityMap>> {
    exec.map(samples, |_, s| model.infer(&s.image)).into_iter().collect()
}

pub fn evaluate_model(model: &EatenModel, samples: &[EncodedSample], exec: &Executor) -> Result<EvalReport> {
    let preds = predict_all(model, samples, exec)?;
    let golds: Vec<EntityMap> = samples.iter().map(|s| s.golds.clone()).collect();
    metrics::evaluate(&preds, &golds, &model.schema)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_mea: Option<f64>,
    pub seconds: f64,
}

/// Optimizer state needed to resume training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub velocity: ModelParams,
}

#[derive(Debug)]
pub struct Trainer<'e> {
    cfg: TrainConfig,
    exec: &'e Executor,
    state: TrainState,
    decay_mask: Vec<bool>,
    best: Option<(f64, usize, ModelParams)>,
    history: Vec<EpochRecord>,
}

impl<'e> Trainer<'e> {
    pub fn new(model: &EatenModel, cfg: TrainConfig, exec: &'e Executor) -> Result<Self> {
        let state = TrainState {
            epoch: 0,
            step: 0,
            velocity: model.params.zeros_like(),
        };
        Self::resume(model, cfg, exec, state)
    }

    pub fn resume(model: &EatenModel, cfg: TrainConfig, exec: &'e Executor, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            decay_mask: model.params.decay_mask(),
            cfg,
            exec,
            state,
            best: None,
            history: Vec::new(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Best `(val_mEA, epoch, params)` seen so far; later epochs win ties.
    pub fn best(&self) -> Option<&(f64, usize, ModelParams)> {
        self.best.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let seed = self.cfg.seed ^ (self.state.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch. On divergence the model is restored to its state at the
    /// start of the epoch and an error is returned.
    pub fn run_epoch(
        &mut self,
        model: &mut EatenModel,
        train: &[EncodedSample],
        val: &[EncodedSample],
    ) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let start = Instant::now();
        let snapshot = (model.params.clone(), self.state.clone());
        let epoch = self.state.epoch;
        let order = self.epoch_order(train.len());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let outcome = batch_gradients(model, &batch, &self.cfg, self.exec).and_then(|(loss, mut grads)| {
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("loss became {loss} at epoch {epoch}")));
                }
                sgd_step(
                    &mut model.params,
                    &mut grads,
                    &mut self.state.velocity,
                    &self.decay_mask,
                    &self.cfg,
                    epoch,
                )?;
                Ok(loss)
            });
            match outcome {
                Ok(loss) => {
                    loss_sum += loss;
                    batches += 1;
                    self.state.step += 1;
                }
                Err(e) => {
                    model.params = snapshot.0;
                    self.state = snapshot.1;
                    return Err(e);
                }
            }
        }
        self.state.epoch += 1;
        let evaluate = !val.is_empty()
            && (self.state.epoch % self.cfg.eval_every == 0 || self.state.epoch == self.cfg.epochs);
        let val_mea = if evaluate {
            let report = evaluate_model(model, val, self.exec)?;
            if self.best.as_ref().is_none_or(|b| report.mea >= b.0) {
                self.best = Some((report.mea, epoch, model.params.clone()));
            }
            Some(report.mea)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            step: self.state.step,
            loss: loss_sum / batches as f64,
            lr: lr_at(epoch, &self.cfg),
            val_mea,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.history.push(record.clone());
        Ok(record)
    }
}

/// Runs all configured epochs; returns the per-epoch history. The model is
/// left at its final parameters.
pub fn train(
    model: &mut EatenModel,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    cfg: &TrainConfig,
    exec: &Executor,
) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::new(model, cfg.clone(), exec)?;
    while !trainer.is_done() {
        let rec = trainer.run_epoch(model, train_set, val_set)?;
        log::info!(
            "epoch {} loss {:.4} lr {:.5} val_mEA {:?} ({:.1}s)",
            rec.epoch,
            rec.loss,
            rec.lr,
            rec.val_mea,
            rec.seconds
        );
    }
    Ok(trainer.history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn recipe_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lr0, c.lr_decay, c.decay_every, c.momentum), (0.04, 0.94, 4, 0.9));
        assert_eq!((c.weight_decay, c.label_smoothing, c.grad_clip_norm), (1e-5, 0.1, 2.0));
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.04);
        assert_eq!(lr_at(3, &c), 0.04);
        assert!((lr_at(4, &c) - 0.0376).abs() < 1e-15);
        assert!((lr_at(8, &c) - 0.035344).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let logits = vec![vec![vec![0.0, 800.0, 0.0], vec![800.0, 0.0, 0.0]]];
        let l = loss(&logits, &[vec![1, 0]], 0.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn target_out_of_vocab_is_rejected() {
        let logits = vec![vec![vec![0.0; 3]]];
        assert!(matches!(loss(&logits, &[vec![3]], 0.0), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn masked_steps_do_not_contribute() {
        let logits = vec![vec![vec![0.0; 4]; 3]];
        let (l, g) = sequence_loss(&logits, &[vec![0, 1, 1]], 0.0, Some(&[1])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(g[0][1].iter().chain(&g[0][2]).all(|&v| v == 0.0));
    }

    fn single(values: Vec<f64>) -> Vec<Tensor> {
        vec![Tensor::from_vec(values)]
    }

    #[test]
    fn clipping_below_and_above_threshold() {
        let mut g = single(vec![0.6, 0.8]);
        assert_eq!(clip_global_norm(&mut g, 2.0), 1.0);
        assert_eq!(g[0].data(), &[0.6, 0.8]);

        let mut g = single(vec![2.4, 3.2]);
        assert_eq!(clip_global_norm(&mut g, 2.0), 4.0);
        assert!((global_norm(&g) - 2.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = single(vec![1.0, -2.0]);
        let mut g = single(vec![0.5, 0.25]);
        let mut v = single(vec![0.0, 0.0]);
        sgd_step(&mut p, &mut g, &mut v, &[true], &cfg, 0).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.04 * 0.5, -2.0 - 0.04 * 0.25]);
    }

    #[test]
    fn momentum_and_decay_update() {
        let cfg = TrainConfig::default();
        let mut p = single(vec![1.0]);
        let mut v = single(vec![0.5]);
        let mut g = single(vec![0.1]);
        sgd_step(&mut p, &mut g, &mut v, &[true], &cfg, 4).unwrap();
        let expected_v = 0.9 * 0.5 + 0.1 + 1e-5 * 1.0;
        assert!((v[0].data()[0] - expected_v).abs() < 1e-15);
        assert!((p[0].data()[0] - (1.0 - 0.0376 * expected_v)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let cfg = TrainConfig::default();
        let mut p = single(vec![1.0]);
        let mut v = single(vec![0.0]);
        let mut g = single(vec![f64::NAN]);
        let err = sgd_step(&mut p, &mut g, &mut v, &[false], &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("param.0"), "{err}");
    }
}
