use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter (or buffer) inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by the model. Buffers such as batch-norm running
/// statistics are stored with `trainable = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// He-normal for layers followed by ReLU.
    Kaiming { fan_in: usize },
    /// Glorot-uniform.
    Xavier { fan_in: usize, fan_out: usize },
}

impl Init {
    pub fn tensor<T: Scalar>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        let normal = |std: f64, rng: &mut dyn rand::RngCore| {
            let d = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| T::from_f64(d.sample(rng)))
        };
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal { std } => normal(std, rng),
            Init::Kaiming { fan_in } => normal(Float::sqrt(2.0 / fan_in.max(1) as f64), rng),
            Init::Xavier { fan_in, fan_out } => {
                let a = Float::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
                let d = Uniform::new(-a, a).expect("a > 0");
                Tensor::from_fn(shape, |_| T::from_f64(d.sample(rng)))
            }
        }
    }
}

/// Flat list of every parameter and buffer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Adds the parameter-leaf gradients of a finished backward pass.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for (id, g) in graph.param_grads() {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Folds the batch statistics recorded on `graph` into the running
    /// buffers: `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, graph: &Graph<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for u in graph.bn_updates() {
            for (dst, src) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
                for (r, &b) in self.params[dst.0].value.data_mut().iter_mut().zip(src) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    /// Copy of the store in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shapes("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seed_deterministic() {
        let a: Tensor<f32> = Init::Kaiming { fan_in: 9 }.tensor(&[4, 9], &mut ChaCha8Rng::seed_from_u64(3));
        let b: Tensor<f32> = Init::Kaiming { fan_in: 9 }.tensor(&[4, 9], &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn cast_round_trips_names_and_shapes() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::ones(&[2, 2]), true);
        let d = s.cast::<f64>();
        assert_eq!(d.get(id).name, "w");
        assert_eq!(d.get(id).value.shape(), &[2, 2]);
        assert_eq!(s.find("w"), Some(id));
    }
}
