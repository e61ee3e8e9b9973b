use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Var {
    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Var {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        Var::record("sum", out, &[self], |g, ins, _| {
            vec![Some(Tensor::full(ins[0].shape(), g.item()))]
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar((s / n) as f32);
        Var::record("mean", out, &[self], move |g, ins, _| {
            vec![Some(Tensor::full(ins[0].shape(), (g.item() as f64 / n) as f32))]
        })
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", axis, 1.0)
    }

    /// Averages over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis} of {:?}", self.shape())))?;
        self.reduce_axis("mean_axis", axis, 1.0 / n as f64)
    }

    fn reduce_axis(&self, op: &'static str, axis: usize, factor: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err(op, format!("axis {axis} of {:?}", shape)));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let d = self.data();
        let mut acc = vec![0f64; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (a, &v) in acc[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
        }
        let out = Tensor::from_parts(out_shape, acc.iter().map(|&v| (v * factor) as f32).collect());
        Ok(Var::record(op, out, &[self], move |g, ins, _| {
            let mut gx = vec![0f32; ins[0].numel()];
            for o in 0..outer {
                for k in 0..n {
                    let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                    for (dv, &gv) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                        *dv = (gv as f64 * factor) as f32;
                    }
                }
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }))
    }
}
