//! Fixed (non-learned) image resampling on plain tensors.
//!
//! Network-side maps are channel-last `[B, H, W, C]`; files and metrics use
//! band-first `[C, H, W]`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(shape_err(op, format!("expected rank 3, got {:?}", s))),
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        ref s => Err(shape_err(op, format!("expected [B, H, W, C], got {:?}", s))),
    }
}

/// `[C, H, W]` → `[H, W, C]`.
pub fn to_channel_last(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3("to_channel_last", img)?;
    let d = img.data();
    Tensor::new(&[h, w, c], (0..h * w * c).map(|i| d[(i % c) * h * w + i / c]).collect())
}

/// `[H, W, C]` → `[C, H, W]`.
pub fn to_band_first(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3("to_band_first", img)?;
    let d = img.data();
    let hw = h * w;
    Tensor::new(&[c, h, w], (0..c * hw).map(|i| d[(i % hw) * c + i / hw]).collect())
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| shape_err("stack", "no items"))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(shape_err("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// Item `i` of the leading axis.
pub fn unstack(t: &Tensor, i: usize) -> Result<Tensor> {
    let n = *t.shape().first().ok_or_else(|| shape_err("unstack", "rank 0"))?;
    if i >= n {
        return Err(shape_err("unstack", format!("index {i} of {n}")));
    }
    let per = t.numel() / n;
    Tensor::new(&t.shape()[1..], t.data()[i * per..(i + 1) * per].to_vec())
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four (source index, weight) taps per output position, edges replicated.
fn cubic_taps(src_len: usize, ratio: usize) -> Vec<[(usize, f64); 4]> {
    (0..src_len * ratio)
        .map(|o| {
            let s = (o as f64 + 0.5) / ratio as f64 - 0.5;
            let i0 = s.floor();
            let t = s - i0;
            let mut taps = [(0usize, 0f64); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let idx = (i0 as i64 + j as i64 - 1).clamp(0, src_len as i64 - 1) as usize;
                *tap = (idx, cubic(t + 1.0 - j as f64));
            }
            taps
        })
        .collect()
}

/// Bicubic upsampling of `[B, h, w, C]` by an integer factor.
pub fn bicubic_upsample(x: &Tensor, ratio: usize) -> Result<Tensor> {
    let (b, h, w, c) = dims4("bicubic_upsample", x)?;
    if ratio == 0 {
        return Err(Error::Domain("upsampling ratio must be positive".into()));
    }
    let (oh, ow) = (h * ratio, w * ratio);
    let ty = cubic_taps(h, ratio);
    let tx = cubic_taps(w, ratio);
    let src = x.data();
    // rows first: [B, h, ow, C]
    let mut mid = vec![0f64; b * h * ow * c];
    for bi in 0..b {
        for r in 0..h {
            for (ox, taps) in tx.iter().enumerate() {
                let dst = ((bi * h + r) * ow + ox) * c;
                for &(ix, wt) in taps {
                    let s = ((bi * h + r) * w + ix) * c;
                    for ch in 0..c {
                        mid[dst + ch] += wt * src[s + ch] as f64;
                    }
                }
            }
        }
    }
    let mut out = vec![0f32; b * oh * ow * c];
    let mut acc = vec![0f64; c];
    for bi in 0..b {
        for (oy, taps) in ty.iter().enumerate() {
            for ox in 0..ow {
                acc.fill(0.0);
                for &(iy, wt) in taps {
                    let s = ((bi * h + iy) * ow + ox) * c;
                    for ch in 0..c {
                        acc[ch] += wt * mid[s + ch];
                    }
                }
                let dst = ((bi * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    out[dst + ch] = acc[ch] as f32;
                }
            }
        }
    }
    Tensor::new(&[b, oh, ow, c], out)
}

/// Mean over non-overlapping `factor × factor` blocks of `[B, H, W, C]`.
pub fn area_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, h, w, c) = dims4("area_downsample", x)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err("area_downsample", format!("{h}x{w} by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0f64; b * oh * ow * c];
    let src = x.data();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let d = ((bi * oh + y / factor) * ow + xx / factor) * c;
                let s = ((bi * h + y) * w + xx) * c;
                for ch in 0..c {
                    out[d + ch] += src[s + ch] as f64;
                }
            }
        }
    }
    let norm = (factor * factor) as f64;
    Tensor::new(&[b, oh, ow, c], out.into_iter().map(|v| (v / norm) as f32).collect())
}

/// Zero-pads `[B, H, W, C]` at the bottom/right up to multiples of `m`.
pub fn pad_to_multiple(x: &Tensor, m: usize) -> Result<Tensor> {
    let (b, h, w, c) = dims4("pad_to_multiple", x)?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = vec![0f32; b * ph * pw * c];
    for bi in 0..b {
        for y in 0..h {
            let s = (bi * h + y) * w * c;
            let d = (bi * ph + y) * pw * c;
            out[d..d + w * c].copy_from_slice(&x.data()[s..s + w * c]);
        }
    }
    Tensor::new(&[b, ph, pw, c], out)
}

/// Normalized 1D Gaussian taps with radius `ceil(3σ)`; σ = 0 gives a delta.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a band-first `[C, H, W]` image with
/// replicated borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = dims3("gaussian_blur", img)?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut mid = vec![0f64; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0f64;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                    s += kv * src[(ch * h + y) * w + xx] as f64;
                }
                mid[(ch * h + y) * w + x] = s;
            }
        }
    }
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0f64;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                    s += kv * mid[(ch * h + yy) * w + x];
                }
                out[(ch * h + y) * w + x] = s as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}
