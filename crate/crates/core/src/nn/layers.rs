use alloc::format;

use rand::Rng;

use super::{Init, ParamId, ParamStore};
use crate::autograd::{BnUpdate, Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square-kernel 2-D convolution, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = Init::Kaiming { fan_in }.tensor(&[c_out, c_in, kernel, kernel], rng);
        let weight = ps.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true));
        Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalisation over channel axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: ps.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: ps.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
            eps: 1e-5,
        }
    }

    /// Batch statistics on a training tape (recorded for the running
    /// averages), running statistics otherwise.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        if g.is_training() {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, self.eps)?;
            g.record_bn(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let mean = &ps.get(self.running_mean).value;
            let var = &ps.get(self.running_var).value;
            g.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
        }
    }
}

/// Affine map over the last axis: `y = x W + b`, `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Init::Xavier {
            fan_in: d_in,
            fan_out: d_out,
        }
        .tensor(&[d_in, d_out], rng);
        Self {
            weight: ps.add(format!("{name}.weight"), w, true),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).len() / self.d_in.max(1);
        let flat = g.reshape(x, &[rows, self.d_in])?;
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(flat, w)?;
        let y = g.add_bias(y, b, 1)?;
        let mut out_shape = shape;
        if let Some(last) = out_shape.last_mut() {
            *last = self.d_out;
        }
        g.reshape(y, &out_shape)
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[d]), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d]), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_batches() {
        let mut ps = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 1, 2, 2], 3.0));
        bn.forward(&mut g, &ps, x).unwrap();
        ps.apply_bn_updates(&g, 0.1);
        let rm = ps.get(bn.running_mean).value.data()[0];
        assert!((rm - 0.3).abs() < 1e-12);
    }

    #[test]
    fn linear_keeps_leading_axes() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut ps, "l", 4, 6, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 4]));
        let y = lin.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 6]);
    }

    #[test]
    fn inference_tape_has_no_param_gradients() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut ps, "c", 1, 2, 3, 1, true, &mut rng);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let y = conv.forward(&mut g, &ps, x).unwrap();
        assert!(!g.requires_grad(y));
    }
}
