use super::{Backward, BackwardCtx, Graph, Var};
use crate::autograd::elementwise::sigmoid;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct BceWithLogits<T> {
    z: Var,
    target: Tensor<T>,
}

impl<T: Scalar> Backward<T> for BceWithLogits<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let zv = ctx.value(self.z).data();
        let scale = grad.data()[0] / T::from_f64(zv.len() as f64);
        let y = self.target.data();
        let gz = ctx.grad_mut(self.z);
        for i in 0..gz.len() {
            gz[i] = gz[i] + scale * (sigmoid(zv[i]) - y[i]);
        }
    }
}

/// `BCE(sigmoid(z), y)` for one logit/target pair, without forming the
/// probability.
pub fn bce_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    /// Mean binary cross-entropy between `sigmoid(z)` and `target` (values
    /// in `[0, 1]`), evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor<T>) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape() != target.shape() {
            return Err(Error::shapes("bce_with_logits", zv.shape(), target.shape()));
        }
        let n = T::from_f64(zv.len().max(1) as f64);
        let total: T = zv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| bce_logit(a, b))
            .sum();
        Ok(self.push_op(
            Tensor::scalar(total / n),
            &[z],
            BceWithLogits {
                z,
                target: target.clone(),
            },
        ))
    }
}
