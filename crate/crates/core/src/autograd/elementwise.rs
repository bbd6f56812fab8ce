use alloc::vec::Vec;

use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    a: Var,
    b: Var,
}

impl<T: Scalar> Backward<T> for Binary {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let g = grad.data();
        match self.kind {
            BinaryKind::Add | BinaryKind::Sub => {
                let sign = if matches!(self.kind, BinaryKind::Sub) {
                    -T::one()
                } else {
                    T::one()
                };
                if ctx.wants(self.a) {
                    add_into(ctx.grad_mut(self.a), g, T::one());
                }
                if ctx.wants(self.b) {
                    add_into(ctx.grad_mut(self.b), g, sign);
                }
            }
            BinaryKind::Mul => {
                let av = ctx.value(self.a).data();
                let bv = ctx.value(self.b).data();
                if ctx.wants(self.a) {
                    let ga = ctx.grad_mut(self.a);
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * bi;
                    }
                }
                if ctx.wants(self.b) {
                    let gb = ctx.grad_mut(self.b);
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * ai;
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T], scale: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + scale * s;
    }
}

/// Pointwise nonlinearities. Each saves what its derivative needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Sqrt,
    Exp,
    Neg,
}

struct UnaryOp {
    kind: Unary,
    x: Var,
    out: Var,
}

impl<T: Scalar> Backward<T> for UnaryOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let x = ctx.value(self.x).data();
        let y = ctx.value(self.out).data();
        let g = grad.data();
        let one = T::one();
        let half = T::from_f64(0.5);
        let kind = self.kind;
        let gx = ctx.grad_mut(self.x);
        for i in 0..gx.len() {
            let d = match kind {
                Unary::Relu => {
                    if x[i] > T::zero() {
                        one
                    } else {
                        T::zero()
                    }
                }
                Unary::Sigmoid => y[i] * (one - y[i]),
                Unary::Softplus => sigmoid(x[i]),
                Unary::Sqrt => half / y[i],
                Unary::Exp => y[i],
                Unary::Neg => -one,
            };
            gx[i] = gx[i] + g[i] * d;
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn apply_unary<T: Scalar>(kind: Unary, x: T) -> T {
    match kind {
        Unary::Relu => if x < T::zero() { T::zero() } else { x },
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Sqrt => x.sqrt(),
        Unary::Exp => x.exp(),
        Unary::Neg => -x,
    }
}

struct Scale {
    x: Var,
    c: f64,
}

impl<T: Scalar> Backward<T> for Scale {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        add_into(ctx.grad_mut(self.x), grad.data(), T::from_f64(self.c));
    }
}

struct AddScalar {
    x: Var,
}

impl<T: Scalar> Backward<T> for AddScalar {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        add_into(ctx.grad_mut(self.x), grad.data(), T::one());
    }
}

struct AddBias {
    x: Var,
    b: Var,
    axis: usize,
}

impl<T: Scalar> Backward<T> for AddBias {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        if ctx.wants(self.x) {
            add_into(ctx.grad_mut(self.x), grad.data(), T::one());
        }
        if ctx.wants(self.b) {
            let (outer, dim, inner) = split_axis(grad.shape(), self.axis);
            let g = grad.data();
            let gb = ctx.grad_mut(self.b);
            for o in 0..outer {
                for c in 0..dim {
                    let base = (o * dim + c) * inner;
                    let s: T = g[base..base + inner].iter().copied().sum();
                    gb[c] = gb[c] + s;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shapes(name, av.shape(), bv.shape()));
        }
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push_op(out, &[a, b], Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out = self.value(x).map(|v| apply_unary(kind, v));
        let id = Var(self.len());
        self.push_op(out, &[x], UnaryOp { kind, x, out: id })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::from_f64(c);
        let out = self.value(x).map(|v| v * k);
        self.push_op(out, &[x], Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let k = T::from_f64(c);
        let out = self.value(x).map(|v| v + k);
        self.push_op(out, &[x], AddScalar { x })
    }

    /// Adds the vector `b` along `axis` of `x` (bias broadcast).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if axis >= xv.rank() || bv.len() != xv.shape()[axis] {
            return Err(Error::shapes("add_bias", xv.shape(), bv.shape()));
        }
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.clone();
        let bd = bv.data();
        let od = out.data_mut();
        for o in 0..outer {
            for c in 0..dim {
                let base = (o * dim + c) * inner;
                for v in &mut od[base..base + inner] {
                    *v = *v + bd[c];
                }
            }
        }
        Ok(self.push_op(out, &[x, b], AddBias { x, b, axis }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2], alloc::vec![-3.0, 3.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn bias_along_channel_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2]));
        let b = g.constant(Tensor::new(&[2], alloc::vec![1.0, -1.0]).unwrap());
        let y = g.add_bias(x, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, -1.0, -1.0]);
    }
}
