//! Synthetic multi-annotator segmentation data.
//!
//! Each sample is a smooth blob rendered into a noisy grayscale image. The
//! clean blob is the meta mask; annotator `r` sees it through a systematic
//! preference (morphological transform or shift) followed by correlated
//! boundary noise on random arcs.

mod morph;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use morph::{dilate, disk, erode, shift, Mask};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::Split;

/// Largest radius or offset a preference may use.
pub const MAX_PREFERENCE_PX: u32 = 5;
/// Angular sectors the boundary is cut into for arc noise.
pub const NOISE_SECTORS: usize = 12;
/// Guard added to the standard deviation during normalisation.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preference {
    Identity,
    Dilate { radius: u32 },
    Erode { radius: u32 },
    Shift { dx: i32, dy: i32 },
}

impl Preference {
    pub fn apply(&self, m: &Mask) -> Mask {
        match *self {
            Preference::Identity => m.clone(),
            Preference::Dilate { radius } => dilate(m, radius),
            Preference::Erode { radius } => erode(m, radius),
            Preference::Shift { dx, dy } => shift(m, dx, dy),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Preference::Identity => "identity".into(),
            Preference::Dilate { radius } => format!("dilate {radius}"),
            Preference::Erode { radius } => format!("erode {radius}"),
            Preference::Shift { dx, dy } => format!("shift ({dx}, {dy})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorProfile {
    pub preference: Preference,
    pub noise_level: f64,
}

impl AnnotatorProfile {
    pub fn new(preference: Preference, noise_level: f64) -> Self {
        Self { preference, noise_level }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.preference {
            Preference::Identity => true,
            Preference::Dilate { radius } | Preference::Erode { radius } => radius <= MAX_PREFERENCE_PX,
            Preference::Shift { dx, dy } => dx.unsigned_abs() <= MAX_PREFERENCE_PX && dy.unsigned_abs() <= MAX_PREFERENCE_PX,
        };
        if !ok {
            return Err(Error::Config(format!(
                "preference {} exceeds {MAX_PREFERENCE_PX} px",
                self.preference.name()
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level {} is outside [0, 1]", self.noise_level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    pub profiles: Vec<AnnotatorProfile>,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 300 samples of 64x64 with a dilating, an eroding and a neutral
    /// annotator at noise 0.2.
    fn default() -> Self {
        Self {
            n: 300,
            image_size: 64,
            profiles: alloc::vec![
                AnnotatorProfile::new(Preference::Dilate { radius: 2 }, 0.2),
                AnnotatorProfile::new(Preference::Erode { radius: 2 }, 0.2),
                AnnotatorProfile::new(Preference::Identity, 0.2),
            ],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn annotators(&self) -> usize {
        self.profiles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(32..=256).contains(&self.image_size) {
            return Err(Error::Config(format!("image_size {} is outside 32..=256", self.image_size)));
        }
        if self.profiles.len() < 2 {
            return Err(Error::Config("at least two annotator profiles are required".into()));
        }
        self.profiles.iter().try_for_each(AnnotatorProfile::validate)
    }

    /// Train and held-out index ranges: the last fifth is held out.
    pub fn splits(&self) -> (Range<usize>, Range<usize>) {
        let held = self.n / 5;
        (0..self.n - held, self.n - held..self.n)
    }
}

/// One generated sample. The image is 8-bit so it survives a PNG round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub size: usize,
    pub image: Vec<u8>,
    pub meta: Mask,
    pub annotators: Vec<Mask>,
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Per-sample generator: stream `index` of the master seed.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Star-shaped blob: a circle whose radius carries random low harmonics.
#[derive(Clone, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    r0: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random(size: usize, rng: &mut impl Rng) -> Self {
        let s = size as f64;
        let cy = s * rng.random_range(0.4..0.6);
        let cx = s * rng.random_range(0.4..0.6);
        let r0 = s * rng.random_range(0.17..0.26);
        let amp = [0.15, 0.08, 0.05];
        let harmonics = amp.map(|a| (rng.random_range(0.0..a), rng.random_range(0.0..2.0 * PI)));
        Self { cy, cx, r0, harmonics }
    }

    /// Signed distance proxy: positive inside, in pixels along the ray.
    fn inside_by(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let theta = Float::atan2(dy, dx);
        let mut r = 1.0;
        for (k, &(a, phase)) in self.harmonics.iter().enumerate() {
            r += a * Float::cos((k as f64 + 2.0) * theta + phase);
        }
        self.r0 * r - Float::sqrt(dy * dy + dx * dx)
    }
}

fn render(blob: &Blob, size: usize, rng: &mut impl Rng) -> (Vec<u8>, Mask) {
    let bg = rng.random_range(0.15..0.35);
    let contrast = rng.random_range(0.25..0.45);
    let (gy, gx) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let s = size as f64;
    let mut image = Vec::with_capacity(size * size);
    let meta = Mask::from_fn(size, size, |y, x| blob.inside_by(y as f64, x as f64) >= 0.0);
    for y in 0..size {
        for x in 0..size {
            let d = blob.inside_by(y as f64, x as f64);
            let edge = 1.0 / (1.0 + Float::exp(-d / 0.8));
            let shade = gy * (y as f64 / s - 0.5) + gx * (x as f64 / s - 0.5);
            let n: f64 = StandardNormal.sample(rng);
            let v = bg + contrast * edge + shade + 0.06 * n;
            image.push(Float::round(v.clamp(0.0, 1.0) * 255.0) as u8);
        }
    }
    (image, meta)
}

/// Grows or shrinks the mask on random boundary arcs. Each of the
/// [`NOISE_SECTORS`] angular sectors around the centroid is perturbed with
/// probability `level`; a perturbed sector is dilated with probability
/// `removed / (added + removed)` and eroded otherwise, which makes the
/// expected area change zero.
pub fn arc_noise(m: &Mask, level: f64, rng: &mut impl Rng) -> Mask {
    let (cy, cx) = m.centroid();
    let offset = rng.random_range(0.0..2.0 * PI);
    let width = 2.0 * PI / NOISE_SECTORS as f64;
    let sector = |y: usize, x: usize| -> usize {
        let a = Float::atan2(y as f64 - cy, x as f64 - cx) - offset;
        let a = a - 2.0 * PI * Float::floor(a / (2.0 * PI));
        ((a / width) as usize).min(NOISE_SECTORS - 1)
    };
    let max_radius = 1 + (3.0 * level) as u32;
    let mut out = m.clone();
    for s in 0..NOISE_SECTORS {
        let active = rng.random::<f64>() < level;
        let radius = rng.random_range(1..=max_radius);
        let u = rng.random::<f64>();
        if !active {
            continue;
        }
        let grown = dilate(m, radius);
        let shrunk = erode(m, radius);
        let (mut added, mut removed) = (0usize, 0usize);
        for y in 0..m.h {
            for x in 0..m.w {
                if sector(y, x) != s {
                    continue;
                }
                added += (grown.get(y, x) && !m.get(y, x)) as usize;
                removed += (m.get(y, x) && !shrunk.get(y, x)) as usize;
            }
        }
        if added + removed == 0 {
            continue;
        }
        let grow = u < removed as f64 / (added + removed) as f64;
        let src = if grow { &grown } else { &shrunk };
        for y in 0..m.h {
            for x in 0..m.w {
                if sector(y, x) == s {
                    out.data[y * m.w + x] = src.data[y * m.w + x];
                }
            }
        }
    }
    out
}

/// Deterministic sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Sample {
    let mut rng = sample_rng(cfg.seed, index);
    let blob = Blob::random(cfg.image_size, &mut rng);
    let (image, meta) = render(&blob, cfg.image_size, &mut rng);
    let annotators = cfg
        .profiles
        .iter()
        .map(|p| arc_noise(&p.preference.apply(&meta), p.noise_level, &mut rng))
        .collect();
    Sample {
        id: sample_id(index),
        size: cfg.image_size,
        image,
        meta,
        annotators,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..cfg.n).map(|i| generate_sample(cfg, i)).collect())
}

/// Pixelwise mean of equally shaped masks.
pub fn mean_voting<T: Scalar>(masks: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = masks.first() else {
        return Err(Error::Contract("mean voting over zero masks".into()));
    };
    let mut acc = Tensor::<T>::zeros(first.shape());
    for m in masks {
        acc.add_assign(m)?;
    }
    let inv = T::from_f64(1.0 / masks.len() as f64);
    Ok(acc.map(|v| v * inv))
}

/// Image standardisation with statistics of the training pixels (scaled
/// to `[0, 1]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Mean and population standard deviation from exact integer sums.
    pub fn fit(images: &[&[u8]]) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0u128, 0u128, 0u128);
        for &p in images.iter().flat_map(|i| i.iter()) {
            n += 1;
            sum += p as u128;
            sq += (p as u128) * (p as u128);
        }
        if n == 0 {
            return Err(Error::Data("cannot fit normalisation on zero pixels".into()));
        }
        let mean = sum as f64 / (255.0 * n as f64);
        let var = (n * sq - sum * sum) as f64 / (255.0 * 255.0 * (n * n) as f64);
        Ok(Self { mean, std: Float::sqrt(var) })
    }

    pub fn apply<T: Scalar>(&self, image: &[u8], h: usize, w: usize) -> Result<Tensor<T>> {
        let scale = 1.0 / (self.std + NORM_EPS);
        Tensor::new(
            &[1, h, w],
            image.iter().map(|&p| T::from_f64((p as f64 / 255.0 - self.mean) * scale)).collect(),
        )
    }
}

fn mask_tensor<T: Scalar>(masks: &[&Mask]) -> Result<Tensor<T>> {
    let Some(first) = masks.first() else {
        return Err(Error::Data("sample has no masks".into()));
    };
    let mut data = Vec::with_capacity(masks.len() * first.data.len());
    for m in masks {
        if (m.h, m.w) != (first.h, first.w) {
            return Err(Error::Data("masks of one sample differ in size".into()));
        }
        data.extend(m.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }));
    }
    Tensor::new(&[masks.len(), first.h, first.w], data)
}

impl Sample {
    /// `[R, H, W]` annotator masks.
    pub fn annotator_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        mask_tensor(&self.annotators.iter().collect::<Vec<_>>())
    }

    /// `[1, H, W]` meta mask.
    pub fn meta_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        mask_tensor(&[&self.meta])
    }
}

/// Normalised images and annotator masks of `samples` as a training split.
pub fn to_split<T: Scalar>(samples: &[Sample], norm: &Normalizer) -> Result<Split<T>> {
    let mut split = Split {
        images: Vec::with_capacity(samples.len()),
        masks: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        split.images.push(norm.apply(&s.image, s.size, s.size)?);
        split.masks.push(s.annotator_tensor()?);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(profiles: Vec<AnnotatorProfile>) -> SynthConfig {
        SynthConfig {
            n: 4,
            image_size: 48,
            profiles,
            seed: 3,
        }
    }

    #[test]
    fn identity_without_noise_copies_meta() {
        let c = cfg(alloc::vec![AnnotatorProfile::new(Preference::Identity, 0.0); 2]);
        for i in 0..c.n {
            let s = generate_sample(&c, i);
            assert!(s.meta.area() > 0);
            assert_eq!(s.annotators[0], s.meta);
            assert_eq!(s.annotators[1], s.meta);
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let c = SynthConfig::default();
        assert_eq!(generate_sample(&c, 7), generate_sample(&c, 7));
        assert_ne!(generate_sample(&c, 7).image, generate_sample(&c, 8).image);
    }

    #[test]
    fn validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let c = SynthConfig { image_size: 16, ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.profiles[0].preference = Preference::Dilate { radius: 6 };
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.profiles.truncate(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn splits_hold_out_a_fifth() {
        let (tr, te) = SynthConfig::default().splits();
        assert_eq!((tr.len(), te.len()), (240, 60));
    }

    #[test]
    fn mean_voting_cases() {
        let a = Tensor::<f64>::from_f64(&[1, 1, 3], &[1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 1, 3], &[1.0, 1.0, 0.0]).unwrap();
        let c = Tensor::<f64>::from_f64(&[1, 1, 3], &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(mean_voting(&[a.clone(), a.clone()]).unwrap(), a);
        let na = a.map(|v| 1.0 - v);
        assert_eq!(mean_voting(&[a.clone(), na]).unwrap(), Tensor::full(&[1, 1, 3], 0.5));
        let mv = mean_voting(&[a, b, c]).unwrap();
        assert!((mv.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mean_voting::<f64>(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_image_normalises_to_zero() {
        let img = [100u8; 16];
        let n = Normalizer::fit(&[&img[..]]).unwrap();
        assert_eq!(n.std, 0.0);
        let t: Tensor<f64> = n.apply(&img, 4, 4).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}
