use alloc::vec;
use alloc::vec::Vec;

use super::{Backward, BackwardCtx, Graph, Var};
use crate::error::{shape_list, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

struct Reshape {
    x: Var,
}

impl<T: Scalar> Backward<T> for Reshape {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        for (a, &b) in ctx.grad_mut(self.x).iter_mut().zip(grad.data()) {
            *a = *a + b;
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `shape.permute(perm)`, the flat input index.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += src_strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    map
}

struct Gather {
    x: Var,
    /// `out[i] = x[src[i]]`
    src: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Gather {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let gx = ctx.grad_mut(self.x);
        for (&s, &g) in self.src.iter().zip(grad.data()) {
            gx[s] = gx[s] + g;
        }
    }
}

/// Axis-0 row selection; `rows[i]` is copied to output block `i`.
struct SelectRows {
    x: Var,
    rows: Vec<usize>,
    stride: usize,
}

impl<T: Scalar> Backward<T> for SelectRows {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let st = self.stride;
        let g = grad.data();
        let gx = ctx.grad_mut(self.x);
        for (i, &r) in self.rows.iter().enumerate() {
            for (d, &v) in gx[r * st..(r + 1) * st].iter_mut().zip(&g[i * st..(i + 1) * st]) {
                *d = *d + v;
            }
        }
    }
}

struct Narrow {
    x: Var,
    axis: usize,
    start: usize,
}

impl<T: Scalar> Backward<T> for Narrow {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let (outer, len, inner) = split_axis(grad.shape(), self.axis);
        let dim = ctx.value(self.x).shape()[self.axis];
        let g = grad.data();
        let gx = ctx.grad_mut(self.x);
        for o in 0..outer {
            let dst = &mut gx[(o * dim + self.start) * inner..(o * dim + self.start + len) * inner];
            for (d, &v) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                *d = *d + v;
            }
        }
    }
}

struct Concat {
    parts: Vec<Var>,
    axis: usize,
}

impl<T: Scalar> Backward<T> for Concat {
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, grad: &Tensor<T>) {
        let (outer, total, inner) = split_axis(grad.shape(), self.axis);
        let g = grad.data();
        let mut start = 0;
        for &p in &self.parts {
            let dim = ctx.value(p).shape()[self.axis];
            if ctx.wants(p) {
                let gp = ctx.grad_mut(p);
                for o in 0..outer {
                    let src = &g[(o * total + start) * inner..(o * total + start + dim) * inner];
                    let dst = &mut gp[o * dim * inner..(o + 1) * dim * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            start += dim;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(out, &[x], Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(
                "permute",
                alloc::format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let src = permute_index(&shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(x, src, &out_shape)
    }

    /// Selects (with repetition) slices along axis 0.
    pub fn index_select0(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&n, rest)) = shape.split_first() else {
            return Err(Error::dim("index_select0", "rank-0 input"));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim(
                "index_select0",
                alloc::format!("row {bad} out of range for {shape:?}"),
            ));
        }
        let stride: usize = rest.iter().product();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&xd[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = vec![rows.len()];
        out_shape.extend_from_slice(rest);
        let out = Tensor::new(&out_shape, data)?;
        let op = SelectRows {
            x,
            rows: rows.to_vec(),
            stride,
        };
        Ok(self.push_op(out, &[x], op))
    }

    /// Repeats every axis-0 slice `times` times consecutively:
    /// `[a, b] -> [a, a, b, b]` for `times = 2`.
    pub fn repeat_interleave0(&mut self, x: Var, times: usize) -> Result<Var> {
        let n = self.shape(x).first().copied().unwrap_or(0);
        let rows: Vec<usize> = (0..n).flat_map(|r| core::iter::repeat_n(r, times)).collect();
        self.index_select0(x, &rows)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "narrow",
                alloc::format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xd[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(out, &[x], Narrow { x, axis, start }))
    }

    fn gather(&mut self, x: Var, src: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        let data: Vec<T> = src.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push_op(out, &[x], Gather { x, src }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        let mismatch = || {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
            Error::dim("concat", alloc::format!("cannot join {} on axis {axis}", shape_list(&shapes)))
        };
        if axis >= base.len() {
            return Err(mismatch());
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch());
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let dim = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * dim * inner..(o + 1) * dim * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(
            out,
            parts,
            Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }
}
