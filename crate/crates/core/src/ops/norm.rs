use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

impl Var {
    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&self, gamma: &Var, beta: &Var) -> Result<Var> {
        let d = *self.shape().last().ok_or_else(|| shape_err("layernorm", "rank 0"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(), gamma.shape(), beta.shape()),
            ));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut out = vec![0f32; x.len()];
        let mut xhat = vec![0f32; x.len()];
        let mut inv_std = vec![0f64; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * is) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), out);
        Ok(Var::record("layernorm", out, &[self, gamma, beta], move |g, ins, _| {
            let gm = ins[1].data();
            let gd = g.data();
            let mut gx = vec![0f32; gd.len()];
            let mut ggamma = vec![0f64; d];
            let mut gbeta = vec![0f64; d];
            for r in 0..rows {
                let gr = &gd[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut s1 = 0f64;
                let mut s2 = 0f64;
                for j in 0..d {
                    let gh = gr[j] as f64 * gm[j] as f64;
                    s1 += gh;
                    s2 += gh * hr[j] as f64;
                    ggamma[j] += gr[j] as f64 * hr[j] as f64;
                    gbeta[j] += gr[j] as f64;
                }
                let is = inv_std[r];
                for j in 0..d {
                    let gh = gr[j] as f64 * gm[j] as f64;
                    gx[r * d + j] = (is * (gh - s1 / d as f64 - hr[j] as f64 * s2 / d as f64)) as f32;
                }
            }
            let to = |v: Vec<f64>| Tensor::from_parts(vec![d], v.into_iter().map(|x| x as f32).collect());
            vec![
                Some(Tensor::from_parts(ins[0].shape().to_vec(), gx)),
                Some(to(ggamma)),
                Some(to(gbeta)),
            ]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var> {
        let d = *self.shape().last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
        let x = self.data();
        let mut out = vec![0f32; x.len()];
        for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mx = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0f64;
            for (o, &v) in or.iter_mut().zip(xr) {
                let e = ((v - mx) as f64).exp();
                *o = e as f32;
                s += e;
            }
            for o in or.iter_mut() {
                *o = (*o as f64 / s) as f32;
            }
        }
        let out = Tensor::from_parts(self.shape().to_vec(), out);
        Ok(Var::record("softmax", out, &[self], move |g, _, y| {
            let mut gx = vec![0f32; g.numel()];
            for ((gr, yr), xr) in g.data().chunks_exact(d).zip(y.data().chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                for j in 0..d {
                    xr[j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }
}
