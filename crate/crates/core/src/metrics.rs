//! Reduced-resolution fusion quality metrics on band-first `[S, H, W]`
//! images. All arithmetic is f64.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Denominator guard for the spectral angle.
pub const SAM_EPS: f64 = 1e-8;
/// Reported PSNR for (near-)exact matches.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize)> {
    if x.shape() != y.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    match *x.shape() {
        [s, h, w] => Ok((s, h, w)),
        ref s => Err(shape_err(op, format!("expected [S, H, W], got {:?}", s))),
    }
}

fn band(t: &Tensor, b: usize, hw: usize) -> &[f32] {
    &t.data()[b * hw..(b + 1) * hw]
}

/// Mean spectral angle in degrees; pixels where either vector is zero are
/// skipped.
pub fn sam(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (s, h, w) = check_pair("sam", x, y)?;
    let hw = h * w;
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0f64;
    let mut count = 0usize;
    for p in 0..hw {
        let (mut dot, mut nx, mut ny) = (0f64, 0f64, 0f64);
        for b in 0..s {
            let (a, c) = (xd[b * hw + p] as f64, yd[b * hw + p] as f64);
            dot += a * c;
            nx += a * a;
            ny += c * c;
        }
        if nx == 0.0 || ny == 0.0 {
            continue;
        }
        let cos = (dot / (nx * ny).sqrt().max(SAM_EPS)).clamp(-1.0, 1.0);
        total += cos.acos();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { (total / count as f64).to_degrees() })
}

/// ERGAS with `gt` as reference. Bands whose reference mean is zero are
/// skipped.
pub fn ergas(x: &Tensor, gt: &Tensor, ratio: usize) -> Result<f64> {
    let (s, h, w) = check_pair("ergas", x, gt)?;
    let hw = h * w;
    let mut acc = 0f64;
    let mut used = 0usize;
    for b in 0..s {
        let (xb, gb) = (band(x, b, hw), band(gt, b, hw));
        let mean = gb.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        if mean == 0.0 {
            log::warn!("ergas: band {b} has zero reference mean; skipped");
            continue;
        }
        let mse = xb.iter().zip(gb).map(|(&a, &c)| (a as f64 - c as f64).powi(2)).sum::<f64>() / hw as f64;
        acc += mse / (mean * mean);
        used += 1;
    }
    if used == 0 {
        return Ok(0.0);
    }
    Ok(100.0 / ratio as f64 * (acc / used as f64).sqrt())
}

/// PSNR over all bands and pixels, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Tensor, gt: &Tensor, peak: f64) -> Result<f64> {
    check_pair("psnr", x, gt)?;
    Ok(psnr_slices(x.data(), gt.data(), peak))
}

fn psnr_slices(x: &[f32], gt: &[f32], peak: f64) -> f64 {
    let mse = x.iter().zip(gt).map(|(&a, &c)| (a as f64 - c as f64).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// Valid-region separable filtering of one `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut mid = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            mid[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * mid[(y + j) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn ssim_band(x: &[f32], y: &[f32], h: usize, w: usize, k: &[f64]) -> f64 {
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, _, _) = filter_valid(&xs, h, w, k);
    let (my, _, _) = filter_valid(&ys, h, w, k);
    let (sxx, _, _) = filter_valid(&prod(&xs, &xs), h, w, k);
    let (syy, _, _) = filter_valid(&prod(&ys, &ys), h, w, k);
    let (sxy, _, _) = filter_valid(&prod(&xs, &ys), h, w, k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mx.len();
    let mut acc = 0f64;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cxy = sxy[i] - a * b;
        acc += ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    acc / n as f64
}

/// The normalized 11×11 Gaussian SSIM window, flattened row-major.
pub fn ssim_window() -> Vec<f64> {
    let k = ssim_taps();
    let mut out = Vec::with_capacity(k.len() * k.len());
    for a in &k {
        for b in &k {
            out.push(a * b);
        }
    }
    out
}

fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    debug_assert_eq!(k.len(), SSIM_WINDOW);
    k
}

/// Per-band mean SSIM (data range 1, valid windows), averaged over bands.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ssim_per_band(x, y)?.iter().sum::<f64>() / x.shape()[0] as f64)
}

fn ssim_per_band(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let (s, h, w) = check_pair("ssim", x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err("ssim", format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let k = ssim_taps();
    let hw = h * w;
    Ok((0..s).map(|b| ssim_band(band(x, b, hw), band(y, b, hw), h, w, &k)).collect())
}

fn laplacian(src: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    let at = |y: usize, x: usize| src[y * w + x] as f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            out.push(4.0 * at(y, x) - at(y - 1, x) - at(y + 1, x) - at(y, x - 1) - at(y, x + 1));
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0f64, 0f64, 0f64);
    for (p, q) in a.iter().zip(b) {
        cov += (p - ma) * (q - mb);
        va += (p - ma).powi(2);
        vb += (q - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

fn scc_per_band(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    let (s, h, w) = check_pair("scc", x, y)?;
    if h < 3 || w < 3 {
        return Err(shape_err("scc", format!("{h}x{w} is smaller than the 3x3 filter")));
    }
    let hw = h * w;
    Ok((0..s)
        .map(|b| {
            let la = laplacian(band(x, b, hw), h, w);
            let lb = laplacian(band(y, b, hw), h, w);
            pearson(&la, &lb).unwrap_or_else(|| {
                log::warn!("scc: band {b} has zero high-pass variance; reporting 0");
                0.0
            })
        })
        .collect())
}

/// Mean over bands of the Pearson correlation of Laplacian-filtered images.
pub fn scc(x: &Tensor, y: &Tensor) -> Result<f64> {
    let v = scc_per_band(x, y)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub scc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sam_deg: f64,
    pub ergas: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub scc: f64,
    pub per_band: Option<Vec<BandMetrics>>,
}

impl MetricReport {
    /// All five metrics of `x` against the reference `gt`.
    pub fn compute(x: &Tensor, gt: &Tensor, ratio: usize, per_band: bool) -> Result<Self> {
        let (s, h, w) = check_pair("metrics", x, gt)?;
        let ssim_b = ssim_per_band(x, gt)?;
        let scc_b = scc_per_band(x, gt)?;
        let per_band = per_band.then(|| {
            (0..s)
                .map(|b| BandMetrics {
                    psnr_db: psnr_slices(band(x, b, h * w), band(gt, b, h * w), 1.0),
                    ssim: ssim_b[b],
                    scc: scc_b[b],
                })
                .collect()
        });
        Ok(MetricReport {
            sam_deg: sam(x, gt)?,
            ergas: ergas(x, gt, ratio)?,
            psnr_db: psnr(x, gt, 1.0)?,
            ssim: ssim_b.iter().sum::<f64>() / s as f64,
            scc: scc_b.iter().sum::<f64>() / s as f64,
            per_band,
        })
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.sam_deg, self.ergas, self.psnr_db, self.ssim, self.scc]
    }

    pub const NAMES: [&'static str; 5] = ["SAM", "ERGAS", "PSNR", "SSIM", "SCC"];
}

/// Mean and (population) standard deviation of each metric across reports.
pub fn summarize(reports: &[MetricReport]) -> [(f64, f64); 5] {
    let mut out = [(0.0, 0.0); 5];
    if reports.is_empty() {
        return out;
    }
    let n = reports.len() as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| r.as_array()[i]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        *slot = (mean, var.sqrt());
    }
    out
}
