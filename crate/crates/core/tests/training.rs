//! Optimizer, loss and epoch-loop properties.

mod common;

use std::path::Path;

use eaten::attention::AttentionNorm;
use eaten::config::RunConfig;
use eaten::numerics::{Parameters, Tensor};
use eaten::parallel::Executor;
use eaten::synthgen::generate_dataset;
use eaten::training::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smoke(n_train: usize) -> (RunConfig, Vec<EncodedSample>) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = RunConfig::load(&path).unwrap();
    let data = generate_dataset(&cfg.scenario, &cfg.transform, n_train, 1, cfg.seed, &Executor::sequential()).unwrap();
    let model = cfg.build_model().unwrap();
    let enc = encode_samples(&data.train, &model).unwrap();
    (cfg, enc)
}

#[test]
fn batch_gradients_do_not_depend_on_the_worker_count() {
    let (cfg, enc) = smoke(6);
    let model = cfg.build_model().unwrap();
    let refs: Vec<_> = enc.iter().collect();
    let (l1, g1) = batch_gradients(&model, &refs, &cfg.train, &Executor::sequential()).unwrap();
    let (l3, g3) = batch_gradients(&model, &refs, &cfg.train, &Executor::with_jobs(3)).unwrap();
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1, g3);
}

#[test]
fn fixed_seed_gives_identical_loss_curves() {
    let (mut cfg, enc) = smoke(10);
    cfg.train.epochs = 3;
    cfg.train.batch_size = 4;
    let run = |jobs| {
        let mut model = cfg.build_model().unwrap();
        let hist = train(&mut model, &enc, &[], &cfg.train, &Executor::with_jobs(jobs)).unwrap();
        (hist.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), model.params)
    };
    let (a, pa) = run(1);
    let (b, pb) = run(2);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn small_step_along_the_gradient_decreases_the_loss() {
    let model = common::toy_model(true, AttentionNorm::Softmax);
    let image = common::toy_image(9);
    let targets = vec![vec![1, 4, 8], vec![3, 8, 0, 8]];
    let loss_of = |m: &eaten::model::EatenModel| {
        let pass = m.forward_teacher_forced(&image, &targets).unwrap();
        sequence_loss(&pass.logits, &targets, 0.1, None).unwrap()
    };
    let (before, gl) = loss_of(&model);
    let pass = model.forward_teacher_forced(&image, &targets).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&pass, &gl, &mut grads);
    let mut stepped = model.clone();
    for (p, (_, g)) in stepped.params.tensors_mut().into_iter().zip(grads.named_tensors()) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= 1e-4 * d;
        }
    }
    let (after, _) = loss_of(&stepped);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn unsmoothed_loss_is_the_summed_negative_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let v = rng.gen_range(2..9);
        let lens = [rng.gen_range(1..5), rng.gen_range(1..5)];
        let logits: Vec<Vec<Vec<f64>>> = lens
            .iter()
            .map(|&t| (0..t).map(|_| (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect()).collect())
            .collect();
        let targets: Vec<Vec<usize>> = lens.iter().map(|&t| (0..t).map(|_| rng.gen_range(0..v)).collect()).collect();
        let mut oracle = 0.0;
        for (seq, ys) in logits.iter().zip(&targets) {
            for (z, &y) in seq.iter().zip(ys) {
                let denom: f64 = z.iter().map(|x| x.exp()).sum();
                oracle -= (z[y].exp() / denom).ln();
            }
        }
        let l = loss(&logits, &targets, 0.0).unwrap();
        assert!((l - oracle).abs() < 1e-12 * oracle.abs().max(1.0), "{l} vs {oracle}");
    }
}

#[test]
fn divergence_restores_the_epoch_start_parameters() {
    let (mut cfg, enc) = smoke(4);
    cfg.train.lr0 = 1e300;
    cfg.train.grad_clip_norm = 1e300;
    cfg.train.batch_size = 1;
    let mut model = cfg.build_model().unwrap();
    let start = model.params.clone();
    let exec = Executor::sequential();
    let mut t = Trainer::new(&model, cfg.train.clone(), &exec).unwrap();
    let err = t.run_epoch(&mut model, &enc, &[]).unwrap_err();
    assert!(matches!(err, eaten::Error::Divergence(_)), "{err}");
    assert_eq!(model.params, start);
    assert_eq!(t.state().epoch, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clipping_caps_the_norm_and_keeps_the_direction(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let original: Vec<Tensor> = (0..3).map(|i| Tensor::uniform(&[i + 1, 4], scale, &mut rng)).collect();
        let mut clipped = original.clone();
        let before = global_norm(&original);
        clip_global_norm(&mut clipped, 2.0);
        let after = global_norm(&clipped);
        prop_assert!(after <= 2.0 + 1e-9);
        if before <= 2.0 {
            prop_assert_eq!(&clipped, &original);
        }
        let dot: f64 = original.iter().zip(&clipped)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y))
            .sum();
        prop_assert!((dot / (before * after) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative(seed in any::<u64>(), eps in 0.0f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rng.gen_range(2..12);
        let logits = vec![(0..5).map(|_| (0..v).map(|_| rng.gen_range(-50.0..50.0)).collect()).collect()];
        let targets = vec![(0..5).map(|_| rng.gen_range(0..v)).collect()];
        prop_assert!(loss(&logits, &targets, eps).unwrap() >= 0.0);
    }
}
