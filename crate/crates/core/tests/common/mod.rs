//! Helpers shared by integration test targets.
#![allow(dead_code)]

use eaten::attention::AttentionNorm;
use eaten::backbone::BackboneConfig;
use eaten::domain::{CharVocab, DecoderSpec, EntitySchema, GrayImage};
use eaten::model::{EatenModel, ModelConfig, ModelParams};
use eaten::numerics::*;
use eaten::training::sequence_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The toy network: 16×16 input, C=8 features, n_h=8, n_a=6, vocab of 10
/// (8 characters plus EOS and WARMUP), two decoders with T=(3,4).
pub fn toy_model(state_transition: bool, norm: AttentionNorm) -> EatenModel {
    let vocab = CharVocab::new("ABCDEFGH").unwrap();
    let schema = EntitySchema::new(vec![
        DecoderSpec {
            entities: vec!["first".into()],
            max_steps: 3,
        },
        DecoderSpec {
            entities: vec!["second".into(), "third".into()],
            max_steps: 4,
        },
    ])
    .unwrap();
    let config = ModelConfig {
        image_width: 16,
        image_height: 16,
        backbone: BackboneConfig::from_stages(&[(4, 2), (8, 2)]),
        hidden: 8,
        attention: 6,
        embed: 6,
        attention_norm: norm,
        share_attention: false,
        state_transition,
        init_scale: 1.0,
        init_seed: 11,
    };
    EatenModel::new(config, schema, vocab).unwrap()
}

pub fn toy_image(seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage {
        width: 16,
        height: 16,
        data: (0..256).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

/// Worst relative error over all parameters and the tensor it occurs in.
/// A 1e-4 step keeps roundoff small next to the tiniest gradients, which sit
/// near 1e-8 and would otherwise be swamped at the fixed 1e-8 floor.
pub fn model_worst_error(model: &EatenModel, eps: f64) -> (f64, String) {
    let step = 1e-4;
    let image = toy_image(3);
    let targets = vec![vec![0, 5, 8], vec![2, 8, 7, 8]];
    let objective = |p: &ModelParams| {
        let m = EatenModel {
            params: p.clone(),
            ..model.clone()
        };
        let pass = m.forward_teacher_forced(&image, &targets).unwrap();
        sequence_loss(&pass.logits, &targets, eps, None).unwrap().0
    };
    let pass = model.forward_teacher_forced(&image, &targets).unwrap();
    let (_, gl) = sequence_loss(&pass.logits, &targets, eps, None).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&pass, &gl, &mut grads);
    let mut params = model.params.clone();
    params.load_grads(&grads);
    let errs = finite_diff_check(objective, &mut params, step).unwrap();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let (i, e) = errs
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
    (e, names[i].clone())
}
