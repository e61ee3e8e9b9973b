//! Wald-protocol sample simulation, a procedural multiband dataset, and the
//! on-disk manifest format.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::image::gaussian_blur;
use crate::tensor::Tensor;

/// One reduced-resolution training triple, band-first.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSample {
    pub id: String,
    /// `[S, H/r, W/r]`
    pub lrms: Tensor,
    /// `[P, H, W]`
    pub pan: Tensor,
    /// `[S, H, W]`
    pub gt: Tensor,
}

impl FusionSample {
    pub fn bands(&self) -> usize {
        self.gt.shape()[0]
    }

    /// Integer spatial ratio between `gt` and `lrms`, validated.
    pub fn ratio(&self) -> Result<usize> {
        let (g, l) = (self.gt.shape(), self.lrms.shape());
        if g.len() != 3 || l.len() != 3 || g[0] != l[0] || l[1] == 0 || g[1] % l[1] != 0 {
            return Err(shape_err("sample", format!("gt {:?} vs lrms {:?}", g, l)));
        }
        let r = g[1] / l[1];
        if g[2] != l[2] * r {
            return Err(shape_err("sample", format!("non-uniform ratio: gt {:?} vs lrms {:?}", g, l)));
        }
        Ok(r)
    }
}

/// Blur σ used for a given ratio.
pub fn default_blur_sigma(ratio: usize) -> f64 {
    ratio as f64 / 2.0
}

/// Panchromatic-like guide from `[S, H, W]`: the band mean (1 band), or the
/// means of three contiguous band groups (3 bands).
pub fn pan_from_gt(gt: &Tensor, pan_bands: usize) -> Result<Tensor> {
    let (s, h, w) = match *gt.shape() {
        [s, h, w] => (s, h, w),
        ref sh => return Err(shape_err("pan_from_gt", format!("{:?}", sh))),
    };
    if pan_bands == 0 || pan_bands > s {
        return Err(Error::Domain(format!("{pan_bands} guide bands from {s} spectral bands")));
    }
    let hw = h * w;
    let mut out = vec![0f32; pan_bands * hw];
    for g in 0..pan_bands {
        let (lo, hi) = (g * s / pan_bands, (g + 1) * s / pan_bands);
        for p in 0..hw {
            let sum: f64 = (lo..hi).map(|b| gt.data()[b * hw + p] as f64).sum();
            out[g * hw + p] = (sum / (hi - lo) as f64) as f32;
        }
    }
    Tensor::new(&[pan_bands, h, w], out)
}

/// Degrades `gt` into an (LRMS, PAN) pair: Gaussian blur then decimation
/// at offset `ratio / 2` in each block.
pub fn wald_simulate(gt: &Tensor, ratio: usize, blur_sigma: f64, pan_bands: usize) -> Result<FusionSample> {
    let (s, h, w) = match *gt.shape() {
        [s, h, w] => (s, h, w),
        ref sh => return Err(shape_err("wald_simulate", format!("{:?}", sh))),
    };
    if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
        return Err(shape_err("wald_simulate", format!("{h}x{w} not divisible by ratio {ratio}")));
    }
    let blurred = gaussian_blur(gt, blur_sigma)?;
    let (lh, lw) = (h / ratio, w / ratio);
    let off = ratio / 2;
    let b = blurred.data();
    let lrms = Tensor::from_fn(&[s, lh, lw], |i| {
        let (c, y, x) = (i / (lh * lw), i / lw % lh, i % lw);
        b[(c * h + y * ratio + off) * w + x * ratio + off]
    });
    Ok(FusionSample {
        id: String::new(),
        lrms,
        pan: pan_from_gt(gt, pan_bands)?,
        gt: gt.clone(),
    })
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub ratio: usize,
    pub pan_bands: usize,
    pub seed: u64,
}

/// Procedural band-correlated ground truth in `[0, 1]`: a sum of Gaussian
/// blobs, a linear gradient, hard edges and a sinusoidal texture, each mixed
/// into every band with a shared weight plus a band-specific perturbation.
pub fn synthetic_gt(bands: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    const FIELDS: usize = 6;
    let hw = h * w;
    let mut fields = vec![vec![0f64; hw]; FIELDS];
    let (hf, wf) = (h as f64, w as f64);
    // three blobs
    for f in fields.iter_mut().take(3) {
        let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
        let sig = rng.gen_range(hf.min(wf) / 16.0..hf.min(wf) / 4.0).max(1.0);
        for (p, v) in f.iter_mut().enumerate() {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            *v = (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sig * sig)).exp();
        }
    }
    // gradient
    let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for (p, v) in fields[3].iter_mut().enumerate() {
        let (y, x) = ((p / w) as f64 / hf, (p % w) as f64 / wf);
        *v = 0.5 + 0.5 * ((x - 0.5) * th.cos() + (y - 0.5) * th.sin());
    }
    // edges: a half-plane step plus a rectangle
    let (ey, ex, eth) = (rng.gen_range(0.2..0.8) * hf, rng.gen_range(0.2..0.8) * wf, rng.gen_range(0.0..std::f64::consts::TAU));
    let (r0, r1) = (rng.gen_range(0..h / 2), rng.gen_range(h / 2..h));
    let (c0, c1) = (rng.gen_range(0..w / 2), rng.gen_range(w / 2..w));
    for (p, v) in fields[4].iter_mut().enumerate() {
        let (y, x) = (p / w, p % w);
        let half = ((x as f64 - ex) * eth.cos() + (y as f64 - ey) * eth.sin() > 0.0) as u8 as f64;
        let rect = ((r0..r1).contains(&y) && (c0..c1).contains(&x)) as u8 as f64;
        *v = 0.6 * half + 0.4 * rect;
    }
    // texture
    let (fy, fx, ph) = (rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35), rng.gen_range(0.0..std::f64::consts::TAU));
    for (p, v) in fields[5].iter_mut().enumerate() {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        *v = 0.5 + 0.5 * (fy * y + fx * x + ph).sin();
    }
    let shared: Vec<f64> = (0..FIELDS).map(|_| rng.gen_range(0.2..1.0)).collect();
    let mut img = vec![0f64; bands * hw];
    for b in 0..bands {
        let mix: Vec<f64> = shared.iter().map(|m| m * rng.gen_range(0.7..1.3)).collect();
        let offset = rng.gen_range(0.0..0.2);
        for p in 0..hw {
            img[b * hw + p] = offset + (0..FIELDS).map(|f| mix[f] * fields[f][p]).sum::<f64>();
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    Tensor::from_fn(&[bands, h, w], |i| (0.05 + 0.9 * (img[i] - lo) / span) as f32)
}

/// Generates `spec.n` Wald-simulated samples; sample `i` depends only on
/// `(seed, i)`.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<FusionSample>> {
    if spec.height < 2 || spec.width < 2 {
        return Err(Error::Domain("synthetic images must be at least 2x2".into()));
    }
    (0..spec.n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let gt = synthetic_gt(spec.bands, spec.height, spec.width, &mut rng);
            let mut s = wald_simulate(&gt, spec.ratio, default_blur_sigma(spec.ratio), spec.pan_bands)?;
            s.id = format!("s{i:04}");
            Ok(s)
        })
        .collect()
}

/// Train/val/test sizes for `n` samples (val and test each get `n / 8`,
/// test at least one when `n >= 2`).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = if n >= 2 { (n / 8).max(1) } else { 0 };
    let val = (n / 8).min(n - test);
    (n - val - test, val, test)
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Writes each sample as three LMT1 files plus `train.txt`, `val.txt` and
/// `test.txt` manifests of `<id> <lrms> <pan> <gt>` lines (paths relative to
/// `dir`).
pub fn write_dataset(dir: &Path, samples: &[FusionSample]) -> Result<()> {
    fs::create_dir_all(dir.join("samples"))?;
    let (tr, va, _) = split_sizes(samples.len());
    let bounds = [0, tr, tr + va, samples.len()];
    for (k, name) in SPLITS.iter().enumerate() {
        let mut f = fs::File::create(dir.join(format!("{name}.txt")))?;
        for s in &samples[bounds[k]..bounds[k + 1]] {
            let rel = |kind: &str| format!("samples/{}_{kind}.lmt", s.id);
            s.lrms.save(dir.join(rel("lrms")))?;
            s.pan.save(dir.join(rel("pan")))?;
            s.gt.save(dir.join(rel("gt")))?;
            writeln!(f, "{} {} {} {}", s.id, rel("lrms"), rel("pan"), rel("gt"))?;
        }
    }
    Ok(())
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub lrms: PathBuf,
    pub pan: PathBuf,
    pub gt: PathBuf,
}

/// Parses a manifest; relative paths resolve against the manifest's folder.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("{}:{}: expected 4 fields, got {}", path.display(), n + 1, parts.len())));
        }
        out.push(ManifestEntry {
            id: parts[0].to_string(),
            lrms: base.join(parts[1]),
            pan: base.join(parts[2]),
            gt: base.join(parts[3]),
        });
    }
    Ok(out)
}

pub fn load_sample(e: &ManifestEntry) -> Result<FusionSample> {
    let s = FusionSample {
        id: e.id.clone(),
        lrms: Tensor::load(&e.lrms)?,
        pan: Tensor::load(&e.pan)?,
        gt: Tensor::load(&e.gt)?,
    };
    s.ratio()?;
    Ok(s)
}

/// Loads every sample listed in `<dir>/<split>.txt`.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<FusionSample>> {
    read_manifest(&dir.join(format!("{split}.txt")))?.iter().map(load_sample).collect()
}
