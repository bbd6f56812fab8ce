use alloc::vec::Vec;

use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps of one output coordinate: `(lo, hi, weight of hi)`.
type Tap = (usize, usize, f64);

/// Half-pixel-centre sampling positions for upscaling `n` by `factor`.
fn taps(n: usize, factor: usize) -> Vec<Tap> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (num_traits::Float::floor(src) as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

struct Upsample {
    x: Var,
    h: usize,
    w: usize,
    ty: Vec<Tap>,
    tx: Vec<Tap>,
}

impl<T: Scalar> Backward<T> for Upsample {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let (h, w) = (self.h, self.w);
        let (ho, wo) = (self.ty.len(), self.tx.len());
        let planes = grad.len() / (ho * wo);
        let g = grad.data();
        let gx = ctx.grad_mut(self.x);
        for p in 0..planes {
            let src = &g[p * ho * wo..(p + 1) * ho * wo];
            let dst = &mut gx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
                for (ox, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                    let v = src[oy * wo + ox];
                    dst[y0 * w + x0] = dst[y0 * w + x0] + v * wy0 * wx0;
                    dst[y0 * w + x1] = dst[y0 * w + x1] + v * wy0 * wx1;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + v * wy1 * wx0;
                    dst[y1 * w + x1] = dst[y1 * w + x1] + v * wy1 * wx1;
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Bilinear upsampling of the two trailing axes by an integer factor
    /// (half-pixel centres, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || factor == 0 || shape[shape.len() - 1] == 0 || shape[shape.len() - 2] == 0 {
            return Err(Error::dim(
                "upsample_bilinear",
                alloc::format!("cannot upsample {shape:?} by {factor}"),
            ));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (ty, tx) = (taps(h, factor), taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let planes = self.value(x).len() / (h * w);
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let mut out = Tensor::zeros(&out_shape);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for p in 0..planes {
                let src = &xd[p * h * w..(p + 1) * h * w];
                let dst = &mut od[p * ho * wo..(p + 1) * ho * wo];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let (wy0, wy1) = (T::from_f64(1.0 - fy), T::from_f64(fy));
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let (wx0, wx1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                        dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                            + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                    }
                }
            }
        }
        Ok(self.push_op(out, &[x], Upsample { x, h, w, ty, tx }))
    }
}
