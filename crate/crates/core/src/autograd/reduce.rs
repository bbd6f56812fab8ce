use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

struct Sum {
    x: Var,
    scale: f64,
}

impl<T: Scalar> Backward<T> for Sum {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let g = grad.data()[0] * T::from_f64(self.scale);
        for v in ctx.grad_mut(self.x) {
            *v = *v + g;
        }
    }
}

struct Softmax {
    x: Var,
    out: Var,
    axis: usize,
}

impl<T: Scalar> Backward<T> for Softmax {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let y = ctx.value(self.out);
        let (outer, dim, inner) = split_axis(y.shape(), self.axis);
        let (yd, g) = (y.data(), grad.data());
        let gx = ctx.grad_mut(self.x);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * dim + j) * inner + i;
                let dot: T = (0..dim).map(|j| g[idx(j)] * yd[idx(j)]).sum();
                for j in 0..dim {
                    let k = idx(j);
                    gx[k] = gx[k] + yd[k] * (g[k] - dot);
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_op(Tensor::scalar(s), &[x], Sum { x, scale: 1.0 })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).sum() / T::from_f64(n);
        self.push_op(Tensor::scalar(s), &[x], Sum { x, scale: 1.0 / n })
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::dim(
                "softmax",
                alloc::format!("axis {axis} out of range for {:?}", xv.shape()),
            ));
        }
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.clone();
        {
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * dim + j) * inner + i;
                    let mx = (0..dim).map(|j| od[idx(j)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for j in 0..dim {
                        let e = (od[idx(j)] - mx).exp();
                        od[idx(j)] = e;
                        z = z + e;
                    }
                    for j in 0..dim {
                        od[idx(j)] = od[idx(j)] / z;
                    }
                }
            }
        }
        let id = Var(self.len());
        Ok(self.push_op(out, &[x], Softmax { x, out: id, axis }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn softmax_of(v: &[f64]) -> alloc::vec::Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[v.len()], v.to_vec()).unwrap());
        let y = g.softmax(x, 0).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn uniform_on_equal_inputs() {
        for p in softmax_of(&[0.0, 0.0, 0.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_inputs_do_not_overflow() {
        assert_eq!(softmax_of(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn closed_form_values() {
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let want: alloc::vec::Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
        let got = softmax_of(&[1.0, 2.0, 3.0]);
        for ((g, w), lit) in got.iter().zip(&want).zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - w).abs() < 1e-15);
            assert!((g - lit).abs() < 5e-6);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn middle_axis_sums_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin() * 3.0));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
