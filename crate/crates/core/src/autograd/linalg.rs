use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Batched product `a[b] * op(b[b])`, `op` optionally transposing.
struct Bmm {
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
}

impl<T: Scalar> Backward<T> for Bmm {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = ctx.value(self.a).data();
        let bv = ctx.value(self.b).data();
        let g = grad.data();
        if ctx.wants(self.a) {
            let ga = ctx.grad_mut(self.a);
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                // dA = dC * op(B)^T
                gemm(
                    false,
                    !self.trans_b,
                    m,
                    k,
                    n,
                    T::one(),
                    gi,
                    bi,
                    T::one(),
                    &mut ga[i * m * k..(i + 1) * m * k],
                );
            }
        }
        if ctx.wants(self.b) {
            let gb = ctx.grad_mut(self.b);
            for i in 0..self.batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &av[i * m * k..(i + 1) * m * k];
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                if self.trans_b {
                    // B is n x k: dB = dC^T * A
                    gemm(true, false, n, k, m, T::one(), gi, ai, T::one(), dst);
                } else {
                    // dB = A^T * dC
                    gemm(true, false, k, n, m, T::one(), ai, gi, T::one(), dst);
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Matrix product of `a[m x k]` and `b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", &sa, &sb));
        }
        self.bmm_impl(a, b, 1, sa[0], sa[1], sb[1], false, &[sa[0], sb[1]])
    }

    /// Batched product of `a[B x m x k]` with `b[B x k x n]`, or with
    /// `b[B x n x k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shapes("bmm", &sa, &sb));
        }
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sa[2] != kb {
            return Err(Error::shapes("bmm", &sa, &sb));
        }
        self.bmm_impl(a, b, sa[0], sa[1], sa[2], n, trans_b, &[sa[0], sa[1], n])
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out_shape: &[usize],
    ) -> Result<Var> {
        let mut out = Tensor::zeros(out_shape);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for i in 0..batch {
                gemm(
                    false,
                    trans_b,
                    m,
                    n,
                    k,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    T::zero(),
                    &mut od[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push_op(
            out,
            &[a, b],
            Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }
}
