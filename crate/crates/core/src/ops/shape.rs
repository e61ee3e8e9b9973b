use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Marks an output slot of [`Var::gather`] that is filled with zero.
pub const PAD: usize = usize::MAX;

pub(crate) fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

impl Var {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let out = self.value().reshaped(shape)?;
        Ok(Var::record("reshape", out, &[self], |g, ins, _| {
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), g.data().to_vec()))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {:?} for shape {:?}", axes, self.shape())));
        }
        let (shape, data) = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(Var::record("permute", Tensor::from_parts(shape, data), &[self], move |g, _, _| {
            let (s, d) = permute_data(g.data(), g.shape(), &inverse);
            vec![Some(Tensor::from_parts(s, d))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r}")));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no operands"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {:?}", first)));
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {axis}", s, first)));
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let out = Tensor::from_parts(shape, data);
        Ok(Var::record("concat", out, parts, move |g, ins, _| {
            let mut grads: Vec<Vec<f32>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
            for o in 0..outer {
                let mut off = o * total;
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g.data()[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(ins)
                .map(|(d, t)| Some(Tensor::from_parts(t.shape().to_vec(), d)))
                .collect()
        }))
    }

    /// Takes `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(Var::record("slice", Tensor::from_parts(out_shape, data), &[self], move |g, ins, _| {
            let mut gx = vec![0f32; ins[0].numel()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }))
    }

    /// `out[i] = self[index[i]]`, or zero where `index[i] == PAD`.
    /// Backward scatters (and sums) into the source positions.
    pub fn gather(&self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {:?}", index.len(), out_shape)));
        }
        let src = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i != PAD && i >= src.len()) {
            return Err(shape_err("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| if i == PAD { 0.0 } else { src[i] }).collect();
        let out = Tensor::from_parts(out_shape.to_vec(), data);
        Ok(Var::record("gather", out, &[self], move |g, ins, _| {
            let mut gx = vec![0f32; ins[0].numel()];
            for (&i, &gv) in index.iter().zip(g.data()) {
                if i != PAD {
                    gx[i] += gv;
                }
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }))
    }

    /// Inserts a new axis of length `n` at position `axis`, repeating the
    /// existing values along it.
    pub fn expand_axis(&self, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape();
        if axis > shape.len() || n == 0 {
            return Err(shape_err("expand_axis", format!("axis {axis} x{n} on {:?}", shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut index = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                index.extend(o * inner..(o + 1) * inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, n);
        self.gather(Rc::new(index), &out_shape)
    }

    /// `out[index[i]] += self[i]` (entries with `PAD` are dropped).
    /// The adjoint of [`Var::gather`].
    pub fn scatter_add(&self, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        if index.len() != self.numel() {
            return Err(shape_err("scatter_add", format!("{} indices for {} values", index.len(), self.numel())));
        }
        let n: usize = out_shape.iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i != PAD && i >= n) {
            return Err(shape_err("scatter_add", format!("index {bad} out of range {n}")));
        }
        let mut data = vec![0f32; n];
        for (&i, &v) in index.iter().zip(self.data()) {
            if i != PAD {
                data[i] += v;
            }
        }
        let out = Tensor::from_parts(out_shape.to_vec(), data);
        Ok(Var::record("scatter_add", out, &[self], move |g, ins, _| {
            let gx = index.iter().map(|&i| if i == PAD { 0.0 } else { g.data()[i] }).collect();
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }))
    }
}
