//! Independent reference implementations used by the integration and
//! acceptance tests. Each one is written directly from the defining
//! formula, in f64, without reusing library internals.
#![allow(dead_code)]

use lemamba_core::Tensor;
use rand::Rng;

/// Straight recurrence over `[B, K, L, D]` tokens with per-step ZOH:
/// `h ← exp(Δa)·h + (exp(Δa) − 1)/a · b · x`, `y = ⟨c, h⟩`.
/// Returns `(y [B,K,L,D], h_final [B,K,D,N])` as f64.
pub fn scan_oracle(
    x: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    h0: Option<&Tensor>,
) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (bs, k, l, d) = (s[0], s[1], s[2], s[3]);
    let n = a.shape()[2];
    let mut y = vec![0f64; bs * k * l * d];
    let mut hf = vec![0f64; bs * k * d * n];
    for bi in 0..bs {
        for kk in 0..k {
            let fiber = bi * k + kk;
            for ch in 0..d {
                let mut h: Vec<f64> = (0..n)
                    .map(|j| h0.map_or(0.0, |h| h.data()[(fiber * d + ch) * n + j] as f64))
                    .collect();
                for t in 0..l {
                    let xi = x.data()[(fiber * l + t) * d + ch] as f64;
                    let dt = delta.data()[(fiber * l + t) * d + ch] as f64;
                    let mut acc = 0.0;
                    for (j, hj) in h.iter_mut().enumerate() {
                        let aj = a.data()[(kk * d + ch) * n + j] as f64;
                        let bj = b.data()[(fiber * l + t) * n + j] as f64;
                        let cj = c.data()[(fiber * l + t) * n + j] as f64;
                        let abar = (dt * aj).exp();
                        // (exp(Δa) − 1)/(Δa) · Δ · b, written without the Δ cancellation
                        let bbar = (dt * aj).exp_m1() / aj * bj;
                        *hj = abar * *hj + bbar * xi;
                        acc += cj * *hj;
                    }
                    y[(fiber * l + t) * d + ch] = acc;
                }
                for j in 0..n {
                    hf[(fiber * d + ch) * n + j] = h[j];
                }
            }
        }
    }
    (y, hf)
}

/// 1D Gaussian, radius 5, σ = 1.5, normalized.
fn gauss11() -> Vec<f64> {
    let w: Vec<f64> = (-5i32..=5).map(|i| (-(i * i) as f64 / (2.0 * 1.5 * 1.5)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// SSIM straight from its definition: for every fully contained 11×11
/// window, weighted local statistics with a non-separable 2D Gaussian,
/// C1 = 0.01², C2 = 0.03²; mean over windows, then over bands.
pub fn ssim_oracle(x: &Tensor, y: &Tensor) -> f64 {
    let s = x.shape();
    let (bands, h, w) = (s[0], s[1], s[2]);
    let g = gauss11();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for b in 0..bands {
        let px = |r: usize, c: usize| x.data()[(b * h + r) * w + c] as f64;
        let py = |r: usize, c: usize| y.data()[(b * h + r) * w + c] as f64;
        let mut acc = 0.0;
        let mut count = 0usize;
        for r0 in 0..=h - 11 {
            for c0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j];
                        mx += wt * px(r0 + i, c0 + j);
                        my += wt * py(r0 + i, c0 + j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j];
                        let (dx, dy) = (px(r0 + i, c0 + j) - mx, py(r0 + i, c0 + j) - my);
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / bands as f64
}

/// ERGAS = 100/r · sqrt(mean_b RMSE_b² / μ_b²), band-first inputs.
pub fn ergas_oracle(x: &Tensor, gt: &Tensor, ratio: usize) -> f64 {
    let s = gt.shape();
    let hw = s[1] * s[2];
    let mut acc = 0.0;
    for b in 0..s[0] {
        let (mut se, mut sum) = (0.0, 0.0);
        for p in 0..hw {
            let (u, v) = (x.data()[b * hw + p] as f64, gt.data()[b * hw + p] as f64);
            se += (u - v) * (u - v);
            sum += v;
        }
        let (rmse, mu) = ((se / hw as f64).sqrt(), sum / hw as f64);
        acc += (rmse / mu).powi(2);
    }
    100.0 / ratio as f64 * (acc / s[0] as f64).sqrt()
}

/// Mean per-pixel spectral angle in degrees.
pub fn sam_oracle(x: &Tensor, y: &Tensor) -> f64 {
    let s = x.shape();
    let hw = s[1] * s[2];
    let mut total = 0.0;
    for p in 0..hw {
        let u: Vec<f64> = (0..s[0]).map(|b| x.data()[b * hw + p] as f64).collect();
        let v: Vec<f64> = (0..s[0]).map(|b| y.data()[b * hw + p] as f64).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        total += (dot / (nu * nv)).clamp(-1.0, 1.0).acos();
    }
    (total / hw as f64).to_degrees()
}

/// Keys (a = −0.5) bicubic weight.
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0
    } else if t < 2.0 {
        -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Bicubic upsampling of one band-first image by summing the full 4×4
/// neighbourhood directly (half-pixel centres, clamped borders).
pub fn bicubic_oracle(img: &Tensor, r: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = |ch: usize, y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        img.data()[(ch * h + y) * w + x] as f64
    };
    Tensor::from_fn(&[c, h * r, w * r], |i| {
        let (ch, oy, ox) = (i / (h * r * w * r), (i / (w * r)) % (h * r), i % (w * r));
        let sy = (oy as f64 + 0.5) / r as f64 - 0.5;
        let sx = (ox as f64 + 0.5) / r as f64 - 0.5;
        let (y0, x0) = (sy.floor() as i64, sx.floor() as i64);
        let mut v = 0.0;
        for dy in -1..=2 {
            for dx in -1..=2 {
                let (yy, xx) = (y0 + dy, x0 + dx);
                v += keys(sy - yy as f64) * keys(sx - xx as f64) * src(ch, yy, xx);
            }
        }
        v as f32
    })
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn max_abs_diff64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).abs()).fold(0.0, f64::max)
}
