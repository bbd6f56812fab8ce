//! Central finite-difference oracles for gradient checking.
//!
//! These evaluate forward passes only and never consult a backward rule, so
//! they stay independent of the tape they check.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for each `i` in
/// `indices`.
pub fn finite_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Uniform::new(lo, hi).expect("lo < hi");
    Tensor::from_fn(shape, |_| d.sample(&mut rng))
}

/// Outcome of [`check_op`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares the tape gradient of `op` against central differences.
///
/// The op output is reduced to a scalar through a fixed random projection so
/// that every output component contributes. Relative errors use an absolute
/// floor of `1e-3` (the projected loss is O(1)).
pub fn check_op(
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<OpCheck> {
    let loss_of = |values: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let out = op(&mut g, &vars)?;
        let proj = uniform(g.shape(out), -1.0, 1.0, 0x5eed);
        let p = g.constant(proj);
        let prod = g.mul(out, p)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item()?;
        let mut gs = Vec::new();
        if grads {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                gs.push(g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((value, gs))
    };
    let (_, analytic) = loss_of(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let idx: Vec<usize> = (0..input.len()).collect();
        let fd = finite_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = Tensor::new(input.shape(), x.to_vec()).expect("same shape");
                loss_of(&vals, false).map(|(v, _)| v).unwrap_or(f64::NAN)
            },
            input.data(),
            &idx,
            h,
        );
        for (a, b) in analytic[k].data().iter().zip(&fd) {
            let e = rel_err(*a, *b, 1e-3);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            checked += 1;
        }
    }
    Ok(OpCheck {
        max_rel_err: worst,
        checked,
    })
}

/// Named single-op checks covering every differentiable primitive on the
/// tape, with inputs drawn uniformly from `[-2, 2]`.
pub fn op_suite(h: f64) -> Vec<(&'static str, Result<OpCheck>)> {
    let u = |shape: &[usize], seed: u64| uniform(shape, -2.0, 2.0, seed);
    let pos = |shape: &[usize], seed: u64| uniform(shape, 0.5, 2.0, seed);
    let mut out: Vec<(&'static str, Result<OpCheck>)> = Vec::new();
    let mut run = |name, op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: Vec<Tensor<f64>>| {
        out.push((name, check_op(op, &inputs, h)));
    };
    run("add", &|g, v| g.add(v[0], v[1]), vec![u(&[3, 4], 1), u(&[3, 4], 2)]);
    run("sub", &|g, v| g.sub(v[0], v[1]), vec![u(&[3, 4], 3), u(&[3, 4], 4)]);
    run("mul", &|g, v| g.mul(v[0], v[1]), vec![u(&[3, 4], 5), u(&[3, 4], 6)]);
    run("scale", &|g, v| Ok(g.scale(v[0], -1.5)), vec![u(&[5], 7)]);
    run("add_scalar", &|g, v| Ok(g.add_scalar(v[0], 0.3)), vec![u(&[5], 8)]);
    run("add_bias", &|g, v| g.add_bias(v[0], v[1], 1), vec![u(&[2, 3, 4], 9), u(&[3], 10)]);
    run("relu", &|g, v| Ok(g.relu(v[0])), vec![u(&[4, 5], 11)]);
    run("sigmoid", &|g, v| Ok(g.sigmoid(v[0])), vec![u(&[4, 5], 12)]);
    run("softplus", &|g, v| Ok(g.softplus(v[0])), vec![u(&[4, 5], 13)]);
    run("exp", &|g, v| Ok(g.exp(v[0])), vec![u(&[4, 5], 14)]);
    run("neg", &|g, v| Ok(g.neg(v[0])), vec![u(&[4], 15)]);
    run("sqrt", &|g, v| Ok(g.sqrt(v[0])), vec![pos(&[4, 5], 16)]);
    run("matmul", &|g, v| g.matmul(v[0], v[1]), vec![u(&[5, 7], 17), u(&[7, 3], 18)]);
    run("bmm", &|g, v| g.bmm(v[0], v[1], false), vec![u(&[2, 3, 4], 19), u(&[2, 4, 5], 20)]);
    run("bmm_transposed", &|g, v| g.bmm(v[0], v[1], true), vec![u(&[2, 3, 4], 21), u(&[2, 5, 4], 22)]);
    run(
        "conv2d",
        &|g, v| g.conv2d(v[0], v[1], 2, 1),
        vec![u(&[1, 2, 8, 8], 23), u(&[4, 2, 3, 3], 24)],
    );
    run(
        "conv2d_stride1",
        &|g, v| g.conv2d(v[0], v[1], 1, 1),
        vec![u(&[2, 2, 5, 5], 25), u(&[3, 2, 3, 3], 26)],
    );
    run(
        "conv2d_pointwise",
        &|g, v| g.conv2d(v[0], v[1], 1, 0),
        vec![u(&[2, 3, 4, 4], 27), u(&[2, 3, 1, 1], 28)],
    );
    run(
        "batch_norm_train",
        &|g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y),
        vec![u(&[3, 2, 3, 3], 29), u(&[2], 30), u(&[2], 31)],
    );
    run(
        "batch_norm_eval",
        &|g, v| {
            let mean = Tensor::from_f64(&[2], &[0.1, -0.2]).expect("2 values");
            let var = Tensor::from_f64(&[2], &[0.5, 1.5]).expect("2 values");
            g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        },
        vec![u(&[2, 2, 3, 3], 32), u(&[2], 33), u(&[2], 34)],
    );
    run(
        "layer_norm",
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        vec![u(&[4, 6], 35), u(&[6], 36), u(&[6], 37)],
    );
    run("sum", &|g, v| Ok(g.sum(v[0])), vec![u(&[3, 3], 38)]);
    run("mean", &|g, v| Ok(g.mean(v[0])), vec![u(&[3, 3], 39)]);
    run("softmax", &|g, v| g.softmax(v[0], 1), vec![u(&[2, 5, 3], 40)]);
    run("reshape", &|g, v| g.reshape(v[0], &[6, 2]), vec![u(&[3, 4], 41)]);
    run("permute", &|g, v| g.permute(v[0], &[2, 0, 1]), vec![u(&[2, 3, 4], 42)]);
    run("index_select0", &|g, v| g.index_select0(v[0], &[2, 0, 2]), vec![u(&[3, 2], 43)]);
    run("repeat_interleave0", &|g, v| g.repeat_interleave0(v[0], 3), vec![u(&[2, 3], 44)]);
    run("narrow", &|g, v| g.narrow(v[0], 1, 1, 2), vec![u(&[2, 4, 2], 45)]);
    run("concat", &|g, v| g.concat(&[v[0], v[1]], 1), vec![u(&[2, 1, 3], 46), u(&[2, 2, 3], 47)]);
    run("upsample_bilinear", &|g, v| g.upsample_bilinear(v[0], 2), vec![u(&[1, 2, 3, 4], 48)]);
    run(
        "bce_with_logits",
        &|g, v| {
            let y = uniform(&[3, 4], 0.0, 1.0, 49);
            g.bce_with_logits(v[0], &y)
        },
        vec![u(&[3, 4], 50)],
    );
    out
}

/// Outcome of [`model_check`]: one entry per probed scalar parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    /// `(parameter name, flat index, analytic f32, finite difference f64)`.
    pub probes: Vec<(alloc::string::String, usize, f64, f64)>,
    pub max_rel_err: f64,
}

/// Gradient of the full training loss of a freshly initialised model,
/// analytic on an `f32` tape against central differences of the same loss
/// evaluated in `f64`. Noise, meta targets and inputs are fixed, so the loss
/// is a deterministic function of the parameters. `samples` scalar
/// parameters are drawn uniformly; relative errors use the absolute `floor`.
pub fn model_check(
    cfg: &crate::model::ModelConfig,
    batch: usize,
    size: usize,
    samples: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<ModelCheck> {
    use crate::model::TabModel;
    use crate::nn::ParamStore;
    use crate::train::{pick_meta_targets, preference_targets, total_loss};
    use rand::Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f32>::new();
    let model = TabModel::new(&mut ps, cfg, &mut rng)?;
    let images = uniform(&[batch, cfg.in_channels, size, size], -2.0, 2.0, seed ^ 1);
    let masks = uniform(&[batch, cfg.annotators, size, size], 0.0, 1.0, seed ^ 2).map(|v| (v > 0.5) as u8 as f64);
    let meta = pick_meta_targets(batch, cfg.annotators, &mut rng);
    let targets = preference_targets(&masks, cfg.annotators, &meta)?;
    let noise = model.draw_noise::<f64>(batch, size, size, &mut rng);

    let mut g = Graph::<f32>::new();
    let x = g.constant(images.cast());
    let noise32 = noise.as_ref().map(|n| n.cast::<f32>());
    let out = model.forward(&mut g, &ps, x, noise32.as_ref())?;
    let loss = total_loss(&mut g, out.logits, &targets.cast(), cfg.preferences())?;
    g.backward(loss.total)?;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; ps.len()];
    for (id, t) in g.param_grads() {
        grads[id.index()] = Some(t.clone());
    }

    let base = ps.cast::<f64>();
    let loss64 = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(images.clone());
        let out = model.forward(&mut g, store, x, noise.as_ref())?;
        let l = total_loss(&mut g, out.logits, &targets, cfg.preferences())?;
        g.value(l.total).item()
    };
    let trainable: Vec<(crate::nn::ParamId, usize)> = base
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let total: usize = trainable.iter().map(|t| t.1).sum();
    let mut probes = Vec::with_capacity(samples);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let &(id, _) = trainable
            .iter()
            .find(|&&(_, n)| {
                let hit = k < n;
                if !hit {
                    k -= n;
                }
                hit
            })
            .expect("k < total");
        let mut store = base.clone();
        let x0 = store.get(id).value.data()[k];
        store.get_mut(id).value.data_mut()[k] = x0 + h;
        let up = loss64(&store)?;
        store.get_mut(id).value.data_mut()[k] = x0 - h;
        let down = loss64(&store)?;
        let fd = (up - down) / (2.0 * h);
        let analytic = grads[id.index()].as_ref().map_or(0.0, |t| t.data()[k] as f64);
        max_rel_err = max_rel_err.max(rel_err(analytic, fd, floor));
        probes.push((base.get(id).name.clone(), k, analytic, fd));
    }
    Ok(ModelCheck { probes, max_rel_err })
}
