//! Stride-1 2D convolutions on channel-last `[B, H, W, C]` maps with
//! symmetric zero padding.

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::tensor::{profile, Tensor};

struct Geom {
    b: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(op: &'static str, x: &[usize], k: usize, pad: usize) -> Result<Geom> {
        if x.len() != 4 || k == 0 {
            return Err(shape_err(op, format!("input {:?}, kernel {k}", x)));
        }
        let (b, h, w) = (x[0], x[1], x[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(op, format!("kernel {k} larger than padded {h}x{w}")));
        }
        Ok(Geom { b, h, w, k, pad, oh: h + 2 * pad - k + 1, ow: w + 2 * pad - k + 1 })
    }

    /// Visits every (output pixel, tap, input pixel) triple that lands inside the input.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for bi in 0..self.b {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let o = (bi * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.k {
                        let iy = oy + ky;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = ox + kx;
                            if ix < self.pad || ix - self.pad >= self.w {
                                continue;
                            }
                            let i = (bi * self.h + iy - self.pad) * self.w + ix - self.pad;
                            f(o, ky * self.k + kx, i);
                        }
                    }
                }
            }
        }
    }
}

impl Var {
    /// Depthwise convolution; `kernel` is `[k, k, C]`.
    pub fn conv2d_depthwise(&self, kernel: &Var, pad: usize) -> Result<Var> {
        let ks = kernel.shape();
        if ks.len() != 3 || ks[0] != ks[1] {
            return Err(shape_err("conv2d_depthwise", format!("kernel {:?}", ks)));
        }
        let geo = Geom::new("conv2d_depthwise", self.shape(), ks[0], pad)?;
        let c = self.shape()[3];
        if ks[2] != c {
            return Err(shape_err("conv2d_depthwise", format!("kernel {:?} vs input {:?}", ks, self.shape())));
        }
        let (x, kw) = (self.data(), kernel.data());
        let mut out = vec![0f64; geo.b * geo.oh * geo.ow * c];
        geo.for_each(|o, t, i| {
            for ch in 0..c {
                out[o * c + ch] += x[i * c + ch] as f64 * kw[t * c + ch] as f64;
            }
        });
        profile::add_flops((geo.b * geo.oh * geo.ow * geo.k * geo.k * c) as u64);
        let shape = vec![geo.b, geo.oh, geo.ow, c];
        let out = Tensor::from_parts(shape, out.into_iter().map(|v| v as f32).collect());
        Ok(Var::record("conv2d_depthwise", out, &[self, kernel], move |g, ins, _| {
            let (x, kw, gd) = (ins[0].data(), ins[1].data(), g.data());
            let mut gx = vec![0f64; x.len()];
            let mut gk = vec![0f64; kw.len()];
            geo.for_each(|o, t, i| {
                for ch in 0..c {
                    let gv = gd[o * c + ch] as f64;
                    gx[i * c + ch] += gv * kw[t * c + ch] as f64;
                    gk[t * c + ch] += gv * x[i * c + ch] as f64;
                }
            });
            let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
            vec![
                Some(Tensor::from_parts(ins[0].shape().to_vec(), f(gx))),
                Some(Tensor::from_parts(ins[1].shape().to_vec(), f(gk))),
            ]
        }))
    }

    /// Dense convolution; `kernel` is `[k, k, C_in, C_out]`.
    pub fn conv2d(&self, kernel: &Var, pad: usize) -> Result<Var> {
        let ks = kernel.shape().to_vec();
        if ks.len() != 4 || ks[0] != ks[1] {
            return Err(shape_err("conv2d", format!("kernel {:?}", ks)));
        }
        let geo = Geom::new("conv2d", self.shape(), ks[0], pad)?;
        let (ci, co) = (ks[2], ks[3]);
        if self.shape()[3] != ci {
            return Err(shape_err("conv2d", format!("kernel {:?} vs input {:?}", ks, self.shape())));
        }
        let (x, kw) = (self.data(), kernel.data());
        let mut out = vec![0f64; geo.b * geo.oh * geo.ow * co];
        geo.for_each(|o, t, i| {
            let acc = &mut out[o * co..(o + 1) * co];
            for a in 0..ci {
                let xv = x[i * ci + a] as f64;
                let row = &kw[(t * ci + a) * co..(t * ci + a + 1) * co];
                for (s, &wv) in acc.iter_mut().zip(row) {
                    *s += xv * wv as f64;
                }
            }
        });
        profile::add_flops((geo.b * geo.oh * geo.ow * geo.k * geo.k * ci * co) as u64);
        let shape = vec![geo.b, geo.oh, geo.ow, co];
        let out = Tensor::from_parts(shape, out.into_iter().map(|v| v as f32).collect());
        Ok(Var::record("conv2d", out, &[self, kernel], move |g, ins, _| {
            let (x, kw, gd) = (ins[0].data(), ins[1].data(), g.data());
            let mut gx = vec![0f64; x.len()];
            let mut gk = vec![0f64; kw.len()];
            geo.for_each(|o, t, i| {
                let go = &gd[o * co..(o + 1) * co];
                for a in 0..ci {
                    let base = (t * ci + a) * co;
                    let mut s = 0f64;
                    for (j, &gv) in go.iter().enumerate() {
                        s += gv as f64 * kw[base + j] as f64;
                        gk[base + j] += gv as f64 * x[i * ci + a] as f64;
                    }
                    gx[i * ci + a] += s;
                }
            });
            let f = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
            vec![
                Some(Tensor::from_parts(ins[0].shape().to_vec(), f(gx))),
                Some(Tensor::from_parts(ins[1].shape().to_vec(), f(gk))),
            ]
        }))
    }
}
