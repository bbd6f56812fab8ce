#![allow(clippy::field_reassign_with_default)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tab_core::model::{HeadOutput, ModelConfig, SampleNoise, SsHead, Variant};
use tab_core::nn::ParamStore;
use tab_core::optim::lr_at;
use tab_core::synth::{generate, to_split, AnnotatorProfile, Normalizer, Preference, SynthConfig};
use tab_core::train::{predict, preference_targets, total_loss, RngState, Split, TrainConfig, Trainer};
use tab_core::{Error, Graph, Tensor};

fn small(annotators: usize, variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.annotators = annotators;
    c.encoder.widths = vec![8, 16, 32, 64];
    c.decoder.widths = vec![32, 16, 8, 8];
    c.d = 32;
    c.ss.alpha = 4;
    c.variant = variant;
    c
}

fn tiny_split(n: usize) -> Split<f32> {
    let cfg = SynthConfig {
        n,
        image_size: 32,
        seed: 5,
        ..SynthConfig::default()
    };
    let samples = generate(&cfg).unwrap();
    let images: Vec<&[u8]> = samples.iter().map(|s| s.image.as_slice()).collect();
    to_split(&samples, &Normalizer::fit(&images).unwrap()).unwrap()
}

fn bce(z: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Logits drawn through the head with `P = 0` and a vanishing `D`.
fn near_deterministic_sample(mu: Tensor<f64>) -> Tensor<f64> {
    let mut cfg = ModelConfig::default();
    cfg.ss.alpha = 2;
    let mut ps = ParamStore::<f64>::new();
    let head = SsHead::new(&mut ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let shape = mu.shape().to_vec();
    let (n, hw) = (shape[0], shape[2] * shape[3]);
    let mut g = Graph::new();
    let out = HeadOutput {
        mu: g.constant(mu),
        factor: Some(g.constant(Tensor::zeros(&[n, 2, hw]))),
        diag: Some(g.constant(Tensor::full(&shape, 1e-12))),
    };
    let noise = SampleNoise::draw(n, 2, shape[2], shape[3], &mut ChaCha8Rng::seed_from_u64(1));
    let z = head.sample(&mut g, &out, &noise).unwrap();
    g.value(z).clone()
}

#[test]
fn saturated_logits_give_vanishing_loss() {
    let masks = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let targets = preference_targets(&masks, 3, &[1, 2]).unwrap();
    let z = near_deterministic_sample(targets.map(|y| if y > 0.5 { 20.0 } else { -20.0 }));
    let mut g = Graph::new();
    let zv = g.constant(z);
    let l = total_loss(&mut g, zv, &targets, 4).unwrap();
    assert!(g.value(l.total).item().unwrap() < 1e-6);
}

#[test]
fn uninformative_logits_cost_ln2_per_term() {
    let masks = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| (i % 2) as f64);
    let targets = preference_targets(&masks, 3, &[0, 0]).unwrap();
    let z = near_deterministic_sample(Tensor::zeros(targets.shape()));
    let mut g = Graph::new();
    let zv = g.constant(z);
    let l = total_loss(&mut g, zv, &targets, 4).unwrap();
    let ln2 = std::f64::consts::LN_2;
    assert!((l.meta - ln2).abs() < 1e-4);
    for t in &l.per_annotator {
        assert!((t - ln2).abs() < 1e-4);
    }
    assert!((g.value(l.total).item().unwrap() - 4.0 * ln2).abs() < 4e-4);
}

#[test]
fn hand_built_two_by_two_loss() {
    // One image, R = 3, meta target is annotator 2.
    let y = [[1.0, 0.0, 0.0, 1.0], [1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 1.0, 1.0]];
    let masks = Tensor::<f64>::new(&[1, 3, 2, 2], y.concat()).unwrap();
    let targets = preference_targets(&masks, 3, &[2]).unwrap();
    let z = [[0.5, -1.0, 2.0, 0.0], [1.5, -0.5, 0.25, -2.0], [3.0, 1.0, -1.0, 0.5], [-0.3, 0.7, 1.2, 2.2]];
    let mut g = Graph::new();
    let zv = g.constant(Tensor::new(&[4, 1, 2, 2], z.concat()).unwrap());
    let l = total_loss(&mut g, zv, &targets, 4).unwrap();
    let term = |zr: &[f64; 4], yr: &[f64; 4]| zr.iter().zip(yr).map(|(&a, &b)| bce(a, b)).sum::<f64>() / 4.0;
    let expect = term(&z[0], &y[2]) + term(&z[1], &y[0]) + term(&z[2], &y[1]) + term(&z[3], &y[2]);
    assert!((g.value(l.total).item().unwrap() - expect).abs() < 1e-12);
    assert!((l.meta - term(&z[0], &y[2])).abs() < 1e-12);
}

#[test]
fn duplicating_an_annotator_adds_its_term() {
    let masks3 = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |i| ((i * 5) % 4 == 1) as u8 as f64);
    let mut m4 = Vec::new();
    for b in 0..2 {
        let img = &masks3.data()[b * 27..(b + 1) * 27];
        m4.extend_from_slice(img);
        m4.extend_from_slice(&img[18..27]);
    }
    let masks4 = Tensor::new(&[2, 4, 3, 3], m4).unwrap();
    let t3 = preference_targets(&masks3, 3, &[0, 1]).unwrap();
    let t4 = preference_targets(&masks4, 4, &[0, 1]).unwrap();
    let z3 = tab_core::gradcheck::uniform(&[8, 1, 3, 3], -3.0, 3.0, 2);
    let mut z4 = Vec::new();
    for b in 0..2 {
        let rows = &z3.data()[b * 36..(b + 1) * 36];
        z4.extend_from_slice(rows);
        z4.extend_from_slice(&rows[27..36]);
    }
    let z4 = Tensor::new(&[10, 1, 3, 3], z4).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.constant(z3), g.constant(z4));
    let l3 = total_loss(&mut g, a, &t3, 4).unwrap();
    let l4 = total_loss(&mut g, b, &t4, 5).unwrap();
    let (v3, v4) = (g.value(l3.total).item().unwrap(), g.value(l4.total).item().unwrap());
    assert!((v4 - v3 - l3.per_annotator[2]).abs() < 1e-12);
    assert!((l4.per_annotator[3] - l3.per_annotator[2]).abs() < 1e-15);
}

#[test]
fn missing_annotator_mask_is_a_data_error() {
    let masks = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
    assert!(matches!(preference_targets(&masks, 3, &[0]), Err(Error::Data(_))));
    let mut t = Trainer::<f32>::new(&small(3, Variant::Full), &TrainConfig::default()).unwrap();
    assert!(matches!(t.step(&Tensor::zeros(&[1, 1, 32, 32]), &masks, 1e-3), Err(Error::Data(_))));
}

#[test]
fn schedule_values() {
    assert_eq!(lr_at(0, 1e-3, 60).unwrap(), 1e-3);
    assert!((lr_at(150, 5e-5, 300).unwrap() - 2.679e-5).abs() < 5e-9);
    assert!((lr_at(299, 5e-5, 300).unwrap() - 2.95e-7).abs() < 5e-10);
    assert!(matches!(lr_at(300, 5e-5, 300), Err(Error::Contract(_))));
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn two_epoch_runs_are_identical() {
    let data = tiny_split(20);
    let run = || {
        let mut t = Trainer::<f32>::new(&small(3, Variant::Full), &train_config(2)).unwrap();
        let logs: Vec<_> = (0..2).map(|_| t.train_epoch(&data).unwrap()).collect();
        assert!(t.done());
        (logs, t.params.clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a[1].loss_total < a[0].loss_total);
}

#[test]
fn resumed_run_continues_identically() {
    let data = tiny_split(12);
    let mc = small(3, Variant::Full);
    let tc = train_config(3);
    let mut full = Trainer::<f32>::new(&mc, &tc).unwrap();
    let expect: Vec<_> = (0..3).map(|_| full.train_epoch(&data).unwrap()).collect();

    let mut first = Trainer::<f32>::new(&mc, &tc).unwrap();
    first.train_epoch(&data).unwrap();
    let state = RngState::capture(&first.rng);
    let mut resumed =
        Trainer::restore(&mc, &tc, first.params.clone(), first.optim.clone(), first.epoch, &state).unwrap();
    drop(first);
    let rest: Vec<_> = (0..2).map(|_| resumed.train_epoch(&data).unwrap()).collect();
    assert_eq!(rest, expect[1..]);
    assert_eq!(resumed.params, full.params);

    let other = small(2, Variant::Full);
    let t = Trainer::<f32>::new(&mc, &tc).unwrap();
    assert!(matches!(
        Trainer::restore(&other, &tc, t.params.clone(), t.optim.clone(), 0, &state),
        Err(Error::Config(_))
    ));
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = tiny_split(4);
    let mut t = Trainer::<f32>::new(&small(3, Variant::Full), &train_config(1)).unwrap();
    let id = t.params.find("decoder.out.conv.weight").unwrap();
    t.params.get_mut(id).value.data_mut()[0] = f32::NAN;
    match t.train_epoch(&data) {
        Err(Error::Numeric(msg)) => {
            assert!(msg.contains("epoch 0") && msg.contains("step 1") && msg.contains("lr"), "{msg}");
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}

#[test]
fn every_variant_trains_with_finite_loss() {
    let data = tiny_split(8);
    for v in Variant::ALL {
        let mut t = Trainer::<f32>::new(&small(3, v), &train_config(1)).unwrap();
        let log = t.train_epoch(&data).unwrap();
        assert!(log.loss_total.is_finite(), "{v:?}");
        assert_eq!(log.loss_per_annotator.len(), 3);
        let (images, _) = data.batch(&[0, 1]).unwrap();
        let p = predict(&t.model, &t.params, &images).unwrap();
        assert_eq!(p.probs.shape(), &[2, 4, 32, 32]);
        assert!(p.probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p.heatmaps.is_some(), v != Variant::NoPfe);
        if v == Variant::NoPfe {
            let hw = 32 * 32;
            for r in 1..4 {
                assert_eq!(p.probs.data()[..hw], p.probs.data()[r * hw..(r + 1) * hw]);
            }
        }
    }
}

#[test]
fn prediction_is_deterministic_and_batch_independent() {
    let data = tiny_split(4);
    let mut t = Trainer::<f32>::new(&small(2, Variant::Full), &train_config(1)).unwrap();
    t.train_epoch(&Split {
        images: data.images.clone(),
        masks: data.masks.iter().map(|m| Tensor::new(&[2, 32, 32], m.data()[..2 * 1024].to_vec()).unwrap()).collect(),
    })
    .unwrap();
    let (both, _) = data.batch(&[0, 1]).unwrap();
    let (one, _) = data.batch(&[1]).unwrap();
    let a = predict(&t.model, &t.params, &both).unwrap();
    let b = predict(&t.model, &t.params, &one).unwrap();
    let rows = 3 * 1024;
    assert_eq!(a.probs.data()[rows..], b.probs.data()[..]);
    assert_eq!(predict(&t.model, &t.params, &both).unwrap(), a);
}

#[test]
fn noiseless_identity_profiles_make_identical_targets() {
    let cfg = SynthConfig {
        n: 2,
        image_size: 32,
        profiles: vec![AnnotatorProfile::new(Preference::Identity, 0.0); 2],
        seed: 1,
    };
    let s = &generate(&cfg).unwrap()[0];
    let masks = s.annotator_tensor::<f32>().unwrap().reshape(&[1, 2, 32, 32]).unwrap();
    let t = preference_targets(&masks, 2, &[1]).unwrap();
    let d = t.data();
    assert_eq!(d[..1024], d[1024..2048]);
    assert_eq!(d[1024..2048], d[2048..]);
}
