use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel statistics of one training batch. `var` is the unbiased
/// estimate used for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Shared backward for batch and layer normalisation: `groups` independent
/// normalisation groups, each with `count` members, affine parameters indexed
/// by `param_index`.
struct Normalize<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Batch statistics participate in the gradient (training batch norm and
    /// layer norm); running statistics do not.
    batch_stats: bool,
    layout: Layout,
}

#[derive(Clone, Copy)]
enum Layout {
    /// `N x C x S`: group = channel, members strided over N and S.
    Channels { n: usize, c: usize, s: usize },
    /// `rows x D`: group = row, parameters indexed by column.
    Rows { rows: usize, d: usize },
}

impl Layout {
    /// Contiguous runs `(group, start, len)` covering the buffer. Within a
    /// run the group is fixed; the affine parameter is the group itself for
    /// `Channels` and the offset within the run for `Rows`.
    fn segments(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let (runs, len, c) = match *self {
            Layout::Channels { n, c, s } => (n * c, s, c),
            Layout::Rows { rows, d } => (rows, d, usize::MAX),
        };
        (0..runs).map(move |r| (if c == usize::MAX { r } else { r % c }, r * len, len))
    }

    fn per_channel(&self) -> bool {
        matches!(self, Layout::Channels { .. })
    }

    fn groups(&self) -> usize {
        match *self {
            Layout::Channels { c, .. } => c,
            Layout::Rows { rows, .. } => rows,
        }
    }

    fn count(&self) -> usize {
        match *self {
            Layout::Channels { n, s, .. } => n * s,
            Layout::Rows { d, .. } => d,
        }
    }
}

impl<T: Scalar> Backward<T> for Normalize<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let g = grad.data();
        let gamma = ctx.value(self.gamma).data();
        let n_par = gamma.len();
        let groups = self.layout.groups();
        let per_channel = self.layout.per_channel();
        let mut d_gamma = vec![T::zero(); n_par];
        let mut d_beta = vec![T::zero(); n_par];
        let mut sum_dxh = vec![T::zero(); groups];
        let mut sum_dxh_xh = vec![T::zero(); groups];
        let xv = ctx.value(self.x).data();
        for (grp, start, len) in self.layout.segments() {
            let gs = &g[start..start + len];
            let xs = &xv[start..start + len];
            let (mu, inv) = (self.mean[grp], self.inv_std[grp]);
            if per_channel {
                let (mut gx_sum, mut db) = (T::zero(), T::zero());
                for (&gi, &xi) in gs.iter().zip(xs) {
                    gx_sum = gx_sum + gi * xi;
                    db = db + gi;
                }
                // sum g * x_hat = inv * (sum g * x - mu * sum g)
                let dg = inv * (gx_sum - mu * db);
                d_gamma[grp] = d_gamma[grp] + dg;
                d_beta[grp] = d_beta[grp] + db;
                sum_dxh[grp] = sum_dxh[grp] + db * gamma[grp];
                sum_dxh_xh[grp] = sum_dxh_xh[grp] + dg * gamma[grp];
            } else {
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..len {
                    let hj = (xs[j] - mu) * inv;
                    d_gamma[j] = d_gamma[j] + gs[j] * hj;
                    d_beta[j] = d_beta[j] + gs[j];
                    let dxh = gs[j] * gamma[j];
                    s1 = s1 + dxh;
                    s2 = s2 + dxh * hj;
                }
                sum_dxh[grp] = s1;
                sum_dxh_xh[grp] = s2;
            }
        }
        if ctx.wants(self.x) {
            let inv_m = T::one() / T::from_f64(self.layout.count() as f64);
            let batch_stats = self.batch_stats;
            let gx = ctx.grad_mut(self.x);
            for (grp, start, len) in self.layout.segments() {
                let gs = &g[start..start + len];
                let xs = &xv[start..start + len];
                let out = &mut gx[start..start + len];
                let (mu, inv_std) = (self.mean[grp], self.inv_std[grp]);
                let (a, b) = if batch_stats {
                    (sum_dxh[grp] * inv_m, sum_dxh_xh[grp] * inv_m)
                } else {
                    (T::zero(), T::zero())
                };
                for j in 0..len {
                    let gm = gamma[if per_channel { grp } else { j }];
                    let hj = (xs[j] - mu) * inv_std;
                    out[j] = out[j] + inv_std * (gs[j] * gm - a - hj * b);
                }
            }
        }
        if ctx.wants(self.gamma) {
            for (a, b) in ctx.grad_mut(self.gamma).iter_mut().zip(&d_gamma) {
                *a = *a + *b;
            }
        }
        if ctx.wants(self.beta) {
            for (a, b) in ctx.grad_mut(self.beta).iter_mut().zip(&d_beta) {
                *a = *a + *b;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var, n: usize) -> Result<()> {
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim(
                op,
                alloc::format!(
                    "input {:?} needs affine parameters of length {n}, got {:?} and {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    fn channel_layout(&self, x: Var) -> Result<Layout> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::dim("batch_norm", alloc::format!("input {s:?} has no channel axis")));
        }
        Ok(Layout::Channels {
            n: s[0],
            c: s[1],
            s: s[2..].iter().product(),
        })
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: Layout,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(xv.shape());
        {
            let xd = xv.data();
            let od = out.data_mut();
            let per_channel = layout.per_channel();
            for (grp, start, len) in layout.segments() {
                let (m, inv) = (mean[grp], inv_std[grp]);
                let xs = &xd[start..start + len];
                let os = &mut od[start..start + len];
                for j in 0..len {
                    let p = if per_channel { grp } else { j };
                    os[j] = gv[p] * ((xs[j] - m) * inv) + bv[p];
                }
            }
        }
        self.push_op(
            out,
            &[x, gamma, beta],
            Normalize {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats,
                layout,
            },
        )
    }

    fn group_moments(&self, x: Var, layout: Layout) -> (Vec<T>, Vec<T>) {
        let xd = self.value(x).data();
        let groups = layout.groups();
        let m = T::from_f64(layout.count() as f64);
        let mut mean = vec![T::zero(); groups];
        for (grp, start, len) in layout.segments() {
            mean[grp] = mean[grp] + xd[start..start + len].iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        let mut var = vec![T::zero(); groups];
        for (grp, start, len) in layout.segments() {
            let mu = mean[grp];
            let ss: T = xd[start..start + len].iter().map(|&x| (x - mu) * (x - mu)).sum();
            var[grp] = var[grp] + ss;
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        (mean, var)
    }

    /// Batch normalisation over axes `0, 2, 3, ..` using the batch's own
    /// statistics. Returns the output and the statistics for running-average
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let layout = self.channel_layout(x)?;
        self.check_affine("batch_norm", x, gamma, beta, layout.groups())?;
        let (mean, var) = self.group_moments(x, layout);
        let e = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let m = layout.count();
        let unbias = if m > 1 {
            T::from_f64(m as f64 / (m - 1) as f64)
        } else {
            T::one()
        };
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|&v| v * unbias).collect(),
        };
        Ok((self.normalize(x, gamma, beta, layout, &mean, inv_std, true), stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let layout = self.channel_layout(x)?;
        self.check_affine("batch_norm", x, gamma, beta, layout.groups())?;
        if running_mean.len() != layout.groups() || running_var.len() != layout.groups() {
            return Err(Error::dim("batch_norm", "running statistics length"));
        }
        let e = T::from_f64(eps);
        let inv_std = running_var.data().iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        let mean = running_mean.data().to_vec();
        Ok(self.normalize(x, gamma, beta, layout, &mean, inv_std, false))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x);
        let Some(&d) = s.last() else {
            return Err(Error::dim("layer_norm", "rank-0 input"));
        };
        let layout = Layout::Rows {
            rows: self.value(x).len() / d.max(1),
            d,
        };
        self.check_affine("layer_norm", x, gamma, beta, d)?;
        let (mean, var) = self.group_moments(x, layout);
        let e = T::from_f64(eps);
        let inv_std = var.iter().map(|&v| T::one() / (v + e).sqrt()).collect();
        Ok(self.normalize(x, gamma, beta, layout, &mean, inv_std, true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_batch_norm_standardises_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i * i) as f64 * 0.1));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..4).map(move |i| (n * 3 + c) * 4 + i))
                .map(|i| v[i])
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 8.0;
            let var: f64 = vals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
        }
        assert_eq!(stats.mean.len(), 3);
    }

    #[test]
    fn eval_batch_norm_uses_running_stats() {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let gamma = g.constant(Tensor::full(&[1], 2.0));
        let beta = g.constant(Tensor::full(&[1], 1.0));
        let y = g
            .batch_norm_eval(x, gamma, beta, &Tensor::full(&[1], 1.0), &Tensor::full(&[1], 4.0), 0.0)
            .unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
    }

    #[test]
    fn layer_norm_rows_have_zero_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f64).sin()));
        let gamma = g.constant(Tensor::ones(&[5]));
        let beta = g.constant(Tensor::zeros(&[5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y).data()[r * 5..r * 5 + 5].iter().sum();
            assert!(s.abs() < 1e-9);
        }
    }
}
