use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output positions `o` in `[lo, hi)` whose input tap `o * stride + k - pad`
/// falls inside `[0, n)`.
fn valid_range(n: usize, k: usize, stride: usize, pad: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n + pad - k - 1) / stride + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `c_in x h x w` image into a `(c_in*k*k) x (h_out*w_out)`
/// patch matrix.
fn im2col<T: Scalar>(x: &[T], geo: &Geometry, cols: &mut [T]) {
    let Geometry {
        c_in,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = *geo;
    let mut row = 0;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(h, ky, stride, pad, h_out);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(w, kx, stride, pad, w_out);
                let dst = &mut cols[row * h_out * w_out..(row + 1) * h_out * w_out];
                dst[..y_lo * w_out].fill(T::zero());
                dst[y_hi * w_out..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = oy * stride + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    let line = &mut dst[oy * w_out..(oy + 1) * w_out];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    let first = x_lo * stride + kx - pad;
                    if stride == 1 {
                        line[x_lo..x_hi].copy_from_slice(&src[first..first + x_hi - x_lo]);
                    } else {
                        for (d, s) in line[x_lo..x_hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(cols: &[T], geo: &Geometry, dx: &mut [T]) {
    let Geometry {
        c_in,
        h,
        w,
        k,
        stride,
        pad,
        h_out,
        w_out,
    } = *geo;
    let mut row = 0;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let (y_lo, y_hi) = valid_range(h, ky, stride, pad, h_out);
            for kx in 0..k {
                let (x_lo, x_hi) = valid_range(w, kx, stride, pad, w_out);
                let src = &cols[row * h_out * w_out..(row + 1) * h_out * w_out];
                for oy in y_lo..y_hi {
                    let iy = oy * stride + ky - pad;
                    let line = &mut plane[iy * w..(iy + 1) * w];
                    let s = &src[oy * w_out + x_lo..oy * w_out + x_hi];
                    let first = x_lo * stride + kx - pad;
                    if stride == 1 {
                        for (d, &v) in line[first..first + s.len()].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in line[first..].iter_mut().step_by(stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

struct ConvCols<T> {
    per_sample: Vec<Vec<T>>,
}

impl<T: Scalar> Backward<T> for ConvBackward<T> {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let geo = self.geo;
        let (kk, hw) = (geo.col_rows(), geo.col_cols());
        let in_plane = geo.c_in * geo.h * geo.w;
        let g = grad.data();
        let xv = ctx.value(self.x).data();
        let wv = ctx.value(self.weight).data();
        if ctx.wants(self.weight) {
            let gw = ctx.grad_mut(self.weight);
            for n in 0..self.batch {
                let gn = &g[n * self.c_out * hw..(n + 1) * self.c_out * hw];
                let cols: &[T] = if geo.pointwise() {
                    &xv[n * in_plane..(n + 1) * in_plane]
                } else {
                    &self.cols.per_sample[n]
                };
                // dW += dY_n * cols_n^T
                gemm(false, true, self.c_out, kk, hw, T::one(), gn, cols, T::one(), gw);
            }
        }
        if ctx.wants(self.x) {
            let mut dcols = if geo.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); kk * hw]
            };
            let gx = ctx.grad_mut(self.x);
            for n in 0..self.batch {
                let gn = &g[n * self.c_out * hw..(n + 1) * self.c_out * hw];
                let dst = &mut gx[n * in_plane..(n + 1) * in_plane];
                if geo.pointwise() {
                    gemm(true, false, kk, hw, self.c_out, T::one(), wv, gn, T::one(), dst);
                } else {
                    gemm(true, false, kk, hw, self.c_out, T::one(), wv, gn, T::zero(), &mut dcols);
                    col2im(&dcols, &geo, dst);
                }
            }
        }
    }
}

struct ConvBackward<T> {
    x: Var,
    weight: Var,
    geo: Geometry,
    batch: usize,
    c_out: usize,
    cols: ConvCols<T>,
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation of `x[N x C_in x H x W]` with
    /// `weight[C_out x C_in x k x k]`. Output size is
    /// `floor((H + 2 pad - k) / stride) + 1` per axis.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shapes("conv2d", &xs, &ws));
        }
        let k = ws[2];
        if k.is_multiple_of(2) {
            return Err(Error::dim("conv2d", alloc::format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                alloc::format!("input {h}x{w} with padding {pad} is smaller than kernel {k}"),
            ));
        }
        let geo = Geometry {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let c_out = ws[0];
        let (kk, hw) = (geo.col_rows(), geo.col_cols());
        let in_plane = c_in * h * w;
        let mut out = Tensor::zeros(&[batch, c_out, geo.h_out, geo.w_out]);
        let mut per_sample = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            let od = out.data_mut();
            for n in 0..batch {
                let xn = &xv[n * in_plane..(n + 1) * in_plane];
                let dst = &mut od[n * c_out * hw..(n + 1) * c_out * hw];
                if geo.pointwise() {
                    gemm(false, false, c_out, hw, kk, T::one(), wv, xn, T::zero(), dst);
                } else {
                    let mut cols = vec![T::zero(); kk * hw];
                    im2col(xn, &geo, &mut cols);
                    gemm(false, false, c_out, hw, kk, T::one(), wv, &cols, T::zero(), dst);
                    per_sample.push(cols);
                }
            }
        }
        // Patch matrices are only needed for the weight gradient.
        if !self.requires_grad(weight) {
            per_sample.clear();
        }
        Ok(self.push_op(
            out,
            &[x, weight],
            ConvBackward {
                x,
                weight,
                geo,
                batch,
                c_out,
                cols: ConvCols { per_sample },
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let xt = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f32 * 0.5 - 3.0);
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn averaging_kernel_keeps_constant_interior() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 6, 6], 2.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let v = g.value(y);
        for r in 1..5 {
            for c in 1..5 {
                assert!((v.data()[r * 6 + c] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4]);
    }

    #[test]
    fn even_kernel_and_channel_mismatch_fail() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w2 = g.constant(Tensor::zeros(&[4, 2, 2, 2]));
        assert!(g.conv2d(x, w2, 1, 0).is_err());
        let w3 = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(g.conv2d(x, w3, 1, 1).is_err());
        let w5 = g.constant(Tensor::zeros(&[1, 2, 11, 11]));
        assert!(g.conv2d(x, w5, 1, 1).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let geo = Geometry {
            c_in: 2,
            h: 5,
            w: 6,
            k: 3,
            stride: 2,
            pad: 1,
            h_out: 3,
            w_out: 3,
        };
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..18 * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; 18 * 9];
        im2col(&x, &geo, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        col2im(&y, &geo, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
