//! Peak single-allocation tracking: no step may allocate anything close to a
//! dense `dim x dim` covariance.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tab_core::lowrank::LowRankGaussian;
use tab_core::model::ModelConfig;
use tab_core::synth::{generate, to_split, Normalizer, SynthConfig};
use tab_core::train::{TrainConfig, Trainer};

struct Peak;

static LARGEST: AtomicUsize = AtomicUsize::new(0);
static SERIAL: Mutex<()> = Mutex::new(());

unsafe impl GlobalAlloc for Peak {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        LARGEST.fetch_max(new_size, Ordering::Relaxed);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static GLOBAL: Peak = Peak;

fn largest_during(f: impl FnOnce()) -> usize {
    let _guard = SERIAL.lock().unwrap();
    LARGEST.store(0, Ordering::Relaxed);
    f();
    LARGEST.load(Ordering::Relaxed)
}

#[test]
fn log_prob_and_sampling_stay_linear_in_dim() {
    let (dim, rank) = (4096, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = LowRankGaussian::new(
        vec![0.1; dim],
        (0..dim * rank).map(|i| ((i % 7) as f64 - 3.0) * 0.01).collect(),
        vec![0.5; dim],
        rank,
    )
    .unwrap();
    let peak = largest_during(|| {
        let z = g.sample(&mut rng);
        assert!(g.log_prob(&z).unwrap().is_finite());
    });
    assert!(peak < dim * dim, "largest allocation {peak} bytes");
}

#[test]
fn training_step_never_builds_a_dense_covariance() {
    let mut mc = ModelConfig::default();
    mc.encoder.widths = vec![8, 16, 32, 64];
    mc.decoder.widths = vec![32, 16, 8, 8];
    mc.d = 32;
    let cfg = SynthConfig {
        n: 2,
        ..SynthConfig::default()
    };
    let samples = generate(&cfg).unwrap();
    let images: Vec<&[u8]> = samples.iter().map(|s| s.image.as_slice()).collect();
    let split = to_split::<f32>(&samples, &Normalizer::fit(&images).unwrap()).unwrap();
    let (x, m) = split.batch(&[0, 1]).unwrap();
    let mut t = Trainer::<f32>::new(&mc, &TrainConfig::default()).unwrap();
    // Per-image logit dimension K*H*W.
    let dim = mc.preferences() * 64 * 64;
    let peak = largest_during(|| {
        t.step(&x, &m, 1e-3).unwrap();
    });
    assert!(dim >= 4096);
    assert!(peak < dim * dim, "largest allocation {peak} bytes for dim {dim}");
}
