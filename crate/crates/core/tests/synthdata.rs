use proptest::prelude::*;
use tab_core::synth::{
    arc_noise, dilate, erode, generate, generate_sample, mean_voting, to_split, AnnotatorProfile, Mask, Normalizer,
    Preference, SynthConfig,
};
use tab_core::Tensor;

/// Dilation by brute force over every foreground pixel within Euclidean
/// distance `r`.
fn oracle_dilate(m: &Mask, r: i64) -> Mask {
    let mut out = Mask::empty(m.h, m.w);
    for y in 0..m.h as i64 {
        for x in 0..m.w as i64 {
            let mut hit = false;
            for sy in (y - r).max(0)..=(y + r).min(m.h as i64 - 1) {
                for sx in (x - r).max(0)..=(x + r).min(m.w as i64 - 1) {
                    let d2 = (sy - y) * (sy - y) + (sx - x) * (sx - x);
                    hit |= d2 <= r * r && m.get(sy as usize, sx as usize);
                }
            }
            out.data[(y * m.w as i64 + x) as usize] = hit as u8;
        }
    }
    out
}

fn cfg(n: usize, profiles: Vec<AnnotatorProfile>) -> SynthConfig {
    SynthConfig {
        n,
        image_size: 64,
        profiles,
        seed: 11,
    }
}

#[test]
fn dilate_without_noise_matches_morphology_oracle() {
    let c = cfg(
        6,
        vec![
            AnnotatorProfile::new(Preference::Dilate { radius: 2 }, 0.0),
            AnnotatorProfile::new(Preference::Identity, 0.0),
        ],
    );
    for s in generate(&c).unwrap() {
        assert_eq!(s.annotators[0], oracle_dilate(&s.meta, 2));
        assert!(s.annotators[0].area() > s.meta.area());
        assert_eq!(s.annotators[1], s.meta);
    }
}

#[test]
fn noiseless_masks_are_exact_transforms_of_meta() {
    let c = cfg(
        5,
        vec![
            AnnotatorProfile::new(Preference::Erode { radius: 3 }, 0.0),
            AnnotatorProfile::new(Preference::Shift { dx: -2, dy: 4 }, 0.0),
        ],
    );
    for s in generate(&c).unwrap() {
        assert_eq!(s.annotators[0], erode(&s.meta, 3));
        let shifted = Mask::from_fn(64, 64, |y, x| {
            let (sy, sx) = (y as i64 - 4, x as i64 + 2);
            (0..64).contains(&sy) && (0..64).contains(&sx) && s.meta.get(sy as usize, sx as usize)
        });
        assert_eq!(s.annotators[1], shifted);
    }
}

#[test]
fn benchmark_area_ordering() {
    let c = SynthConfig {
        n: 100,
        ..SynthConfig::default()
    };
    let samples = generate(&c).unwrap();
    let mean = |f: &dyn Fn(&tab_core::synth::Sample) -> usize| {
        samples.iter().map(|s| f(s) as f64).sum::<f64>() / samples.len() as f64
    };
    let a1 = mean(&|s| s.annotators[0].area());
    let meta = mean(&|s| s.meta.area());
    let a2 = mean(&|s| s.annotators[1].area());
    assert!(a1 > meta && meta > a2, "{a1} {meta} {a2}");
}

#[test]
fn generation_is_deterministic() {
    let c = cfg(8, SynthConfig::default().profiles);
    assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(generate(&c).unwrap(), generate(&other).unwrap());
}

#[test]
fn arc_noise_is_unbiased_in_area() {
    for level in [0.2, 0.6] {
        let c = cfg(
            240,
            vec![
                AnnotatorProfile::new(Preference::Identity, level),
                AnnotatorProfile::new(Preference::Identity, level),
            ],
        );
        let diffs: Vec<f64> = (0..c.n)
            .map(|i| {
                let s = generate_sample(&c, i);
                s.annotators[0].area() as f64 - s.meta.area() as f64
            })
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(var > 0.0, "noise level {level} changed nothing");
        assert!(mean.abs() <= 2.0 * se, "level {level}: mean {mean} se {se}");
    }
}

#[test]
fn normalised_training_pixels_are_standard() {
    let c = cfg(40, SynthConfig::default().profiles);
    let samples = generate(&c).unwrap();
    let (train, _) = c.splits();
    let train = &samples[train];
    let images: Vec<&[u8]> = train.iter().map(|s| s.image.as_slice()).collect();
    let norm = Normalizer::fit(&images).unwrap();
    let split = to_split::<f32>(train, &norm).unwrap();
    let px: Vec<f64> = split.images.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect();
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let std = (px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-5, "{mean}");
    assert!((std - 1.0).abs() < 1e-3, "{std}");
    assert_eq!(split.masks[0].shape(), &[3, 64, 64]);
}

fn arb_mask() -> impl Strategy<Value = Mask> {
    (8usize..20, 8usize..20).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0u8..2, h * w).prop_map(move |data| Mask { h, w, data })
    })
}

proptest! {
    #[test]
    fn erode_inside_mask_inside_dilate(m in arb_mask(), r in 0u32..4) {
        let (e, d) = (erode(&m, r), dilate(&m, r));
        for i in 0..m.data.len() {
            prop_assert!(e.data[i] <= m.data[i] && m.data[i] <= d.data[i]);
        }
        prop_assert_eq!(d, oracle_dilate(&m, r as i64));
    }

    #[test]
    fn zero_level_noise_is_identity(m in arb_mask(), seed in any::<u64>()) {
        let mut rng = tab_core::synth::sample_rng(seed, 0);
        prop_assert_eq!(arc_noise(&m, 0.0, &mut rng), m);
    }

    #[test]
    fn mean_voting_stays_in_unit_interval(ms in proptest::collection::vec(arb_mask(), 1..4)) {
        let (h, w) = (ms[0].h, ms[0].w);
        let ts: Vec<Tensor<f64>> = ms
            .iter()
            .map(|m| Tensor::from_fn(&[1, h, w], |i| m.data.get(i).copied().unwrap_or(0) as f64))
            .collect();
        let mv = mean_voting(&ts).unwrap();
        prop_assert!(mv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
