//! Training loop, checkpoints and evaluation.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::backward;
use crate::config::RunConfig;
use crate::data::FusionSample;
use crate::error::{shape_err, Error, Result};
use crate::image::{bicubic_upsample, stack, to_band_first, to_channel_last, unstack};
use crate::metrics::{summarize, MetricReport};
use crate::net::{fusion_loss, LeMambaNet};
use crate::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"LMCK";
const PARAM_PREFIX: &str = "param/";

/// `LMCK`, u32 entry count, then per entry a u16 name length, the UTF-8 name
/// and an embedded LMT1 tensor.
pub fn write_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let count = u32::try_from(entries.len()).map_err(|_| Error::Format("too many checkpoint entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("entry name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        t.write_lmt1(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (magic {:?})", path.display(), magic)));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        out.push((name, Tensor::read_lmt1(&mut r)?));
    }
    Ok(out)
}

/// Everything needed to continue training bit-identically.
#[derive(Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    /// Optimizer steps taken so far.
    pub step: u64,
}

fn u64_tensor(v: u64) -> Tensor {
    let parts: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
    Tensor::new(&[4], parts).expect("4 halves")
}

fn tensor_u64(t: &Tensor) -> u64 {
    t.data().iter().enumerate().map(|(i, &p)| (p as u64) << (16 * i)).sum()
}

impl TrainState {
    pub fn fresh(net: &LeMambaNet, weight_decay: f64) -> Result<Self> {
        Ok(TrainState {
            params: net.init_params()?,
            opt: AdamW::new(weight_decay),
            step: 0,
        })
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| {
                let mut c = t.clone();
                c.grad = None;
                (format!("{PARAM_PREFIX}{n}"), c)
            })
            .collect();
        out.extend(self.opt.to_entries(&self.params));
        out.push(("train.step".into(), u64_tensor(self.step)));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.entries())
    }

    /// Restores a checkpoint onto the parameter layout of `net`. Missing or
    /// misshapen parameters are wiring errors.
    pub fn load(path: &Path, net: &LeMambaNet, weight_decay: f64) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let mut params = net.init_params()?;
        let mut seen = 0usize;
        let mut step = 0u64;
        for (name, t) in &entries {
            if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
                let slot = params
                    .get_mut(p)
                    .ok_or_else(|| Error::Wiring(format!("checkpoint parameter `{p}` not in this network")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Wiring(format!("`{p}`: checkpoint {:?} vs network {:?}", t.shape(), slot.shape())));
                }
                slot.data_mut().copy_from_slice(t.data());
                seen += 1;
            } else if name == "train.step" {
                step = tensor_u64(t);
            }
        }
        if seen != params.len() {
            return Err(Error::Wiring(format!("checkpoint holds {seen} of {} parameters", params.len())));
        }
        let opt = AdamW::from_entries(weight_decay, entries.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(TrainState { params, opt, step })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,lr,l1,ssim_loss,total";

pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for s in log {
        writeln!(w, "{},{},{:e},{:.8},{:.8},{:.8}", s.step, s.epoch, s.lr, s.l1, s.ssim_loss, s.total)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample order of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn crop_band_first(t: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if y + size > h || x + size > w {
        return Err(shape_err("crop", format!("{size} at ({y}, {x}) of {h}x{w}")));
    }
    Tensor::new(
        &[c, size, size],
        (0..c * size * size)
            .map(|i| t.data()[(i / (size * size) * h + y + i / size % size) * w + x + i % size])
            .collect(),
    )
}

/// A ratio-aligned random crop of `crop` high-resolution pixels.
pub fn random_crop(s: &FusionSample, crop: usize, rng: &mut impl Rng) -> Result<FusionSample> {
    let r = s.ratio()?;
    let (h, w) = (s.gt.shape()[1], s.gt.shape()[2]);
    if crop == 0 || (crop >= h && crop >= w) {
        return Ok(s.clone());
    }
    if crop > h || crop > w || crop % r != 0 {
        return Err(shape_err("crop", format!("{crop} from {h}x{w} at ratio {r}")));
    }
    let oy = rng.gen_range(0..=(h - crop) / r);
    let ox = rng.gen_range(0..=(w - crop) / r);
    Ok(FusionSample {
        id: s.id.clone(),
        lrms: crop_band_first(&s.lrms, oy, ox, crop / r)?,
        pan: crop_band_first(&s.pan, oy * r, ox * r, crop)?,
        gt: crop_band_first(&s.gt, oy * r, ox * r, crop)?,
    })
}

/// Channel-last `(lrms, pan, gt)` batch tensors.
pub fn make_batch(samples: &[&FusionSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let cl = |f: fn(&FusionSample) -> &Tensor| -> Result<Tensor> {
        let v: Vec<Tensor> = samples.iter().map(|s| to_channel_last(f(s))).collect::<Result<_>>()?;
        stack(&v.iter().collect::<Vec<_>>())
    };
    Ok((cl(|s| &s.lrms)?, cl(|s| &s.pan)?, cl(|s| &s.gt)?))
}

pub struct Trainer<'a> {
    pub net: &'a LeMambaNet,
    pub cfg: &'a RunConfig,
    pub data: &'a [FusionSample],
}

impl Trainer<'_> {
    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.train.batch)
    }

    pub fn total_steps(&self) -> u64 {
        let all = (self.cfg.train.epochs * self.steps_per_epoch()) as u64;
        match self.cfg.train.max_steps {
            0 => all,
            m => all.min(m as u64),
        }
    }

    /// The (cropped) samples consumed by optimizer step `step`.
    pub fn batch_for_step(&self, step: u64) -> Result<Vec<FusionSample>> {
        let spe = self.steps_per_epoch() as u64;
        let epoch = (step / spe) as usize;
        let bi = (step % spe) as usize;
        let b = self.cfg.train.batch;
        let order = epoch_order(self.cfg.net.seed, epoch, self.data.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.net.seed);
        rng.set_stream((1u64 << 48) | step);
        order[bi * b..((bi + 1) * b).min(order.len())]
            .iter()
            .map(|&i| random_crop(&self.data[i], self.cfg.train.crop, &mut rng))
            .collect()
    }

    /// Forward + backward on one batch; leaves gradients in `params`.
    pub fn loss_and_grads(&self, params: &mut ParamStore, batch: &[FusionSample]) -> Result<(f64, f64, f64)> {
        let refs: Vec<&FusionSample> = batch.iter().collect();
        let (lrms, pan, gt) = make_batch(&refs)?;
        let bound = params.bind(true);
        let fused = self.net.forward(&bound, &lrms, &pan)?;
        let parts = fusion_loss(&fused, &gt, self.cfg.net.lambda)?;
        let total = parts.total.value().item() as f64;
        if !total.is_finite() {
            return Err(Error::Numerical(format!("loss is {total} (l1 {}, ssim {})", parts.l1, parts.ssim_loss)));
        }
        let grads = backward(parts.total)?;
        params.zero_grads();
        params.accumulate(&bound, &grads);
        Ok((parts.l1, parts.ssim_loss, total))
    }

    /// Runs until `total_steps`, starting from `state`. With `out`, writes
    /// periodic and final checkpoints and `loss.csv` there; on divergence
    /// the last good state is saved as `last_good.lmck`.
    pub fn run(&self, mut state: TrainState, out: Option<&Path>) -> Result<(TrainState, Vec<StepLog>)> {
        if self.data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if let Some(o) = out {
            fs::create_dir_all(o)?;
        }
        let t = &self.cfg.train;
        let spe = self.steps_per_epoch() as u64;
        let total = self.total_steps();
        let mut log = Vec::new();
        while state.step < total {
            let epoch = (state.step / spe) as usize;
            let lr = lr_schedule(epoch, t.schedule_len(), t.lr);
            let batch = self.batch_for_step(state.step)?;
            let snapshot = out.map(|_| state.clone());
            let res = self.loss_and_grads(&mut state.params, &batch).and_then(|l| {
                clip_grad_norm(&mut state.params, t.clip_norm);
                state.opt.step(&mut state.params, lr)?;
                Ok(l)
            });
            let (l1, ssim_loss, tot) = match res {
                Ok(v) => v,
                Err(e) => {
                    if let (Some(o), Some(s)) = (out, snapshot) {
                        s.save(&o.join("last_good.lmck"))?;
                        write_loss_csv(&o.join("loss.csv"), &log)?;
                        log::error!("training aborted at step {}; last good state saved", state.step);
                    }
                    return Err(e);
                }
            };
            log.push(StepLog { step: state.step, epoch, lr, l1, ssim_loss, total: tot });
            log::info!("step {} epoch {epoch} lr {lr:.1e} l1 {l1:.5} ssim_loss {ssim_loss:.5} total {tot:.5}", state.step);
            state.step += 1;
            if let Some(o) = out {
                let done_epoch = state.step % spe == 0;
                if done_epoch && t.ckpt_every > 0 && (epoch + 1) % t.ckpt_every == 0 {
                    state.save(&o.join(format!("epoch_{:04}.lmck", epoch + 1)))?;
                }
            }
        }
        if let Some(o) = out {
            state.save(&o.join("final.lmck"))?;
            write_loss_csv(&o.join("loss.csv"), &log)?;
        }
        Ok((state, log))
    }
}

/// Runs the network on one sample; returns band-first `[S, H, W]`.
pub fn predict(net: &LeMambaNet, params: &ParamStore, s: &FusionSample) -> Result<Tensor> {
    let (lrms, pan, _) = make_batch(&[s])?;
    let y = net.forward(&params.bind(false), &lrms, &pan)?;
    to_band_first(&unstack(y.value(), 0)?)
}

/// Bicubic upsampling of a sample's LRMS, band-first.
pub fn bicubic_baseline(s: &FusionSample) -> Result<Tensor> {
    let r = s.ratio()?;
    let l = stack(&[&to_channel_last(&s.lrms)?])?;
    to_band_first(&unstack(&bicubic_upsample(&l, r)?, 0)?)
}

pub struct EvalSummary {
    pub ids: Vec<String>,
    pub model: Vec<MetricReport>,
    pub bicubic: Vec<MetricReport>,
    /// Mean absolute error of the model output over the split.
    pub l1: f64,
}

fn mean_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.numel() as f64
}

pub fn evaluate(net: &LeMambaNet, params: &ParamStore, samples: &[FusionSample]) -> Result<EvalSummary> {
    let mut out = EvalSummary { ids: vec![], model: vec![], bicubic: vec![], l1: 0.0 };
    for s in samples {
        let r = s.ratio()?;
        let fused = predict(net, params, s)?;
        out.l1 += mean_abs(&fused, &s.gt) / samples.len() as f64;
        out.model.push(MetricReport::compute(&fused, &s.gt, r, false)?);
        out.bicubic.push(MetricReport::compute(&bicubic_baseline(s)?, &s.gt, r, false)?);
        out.ids.push(s.id.clone());
    }
    Ok(out)
}

impl EvalSummary {
    /// `method,SAM,ERGAS,PSNR,SSIM,SCC` rows of `mean±std`.
    pub fn table(&self) -> String {
        let row = |name: &str, reports: &[MetricReport]| {
            let cells: Vec<String> = summarize(reports).iter().map(|(m, s)| format!("{m:.4}±{s:.4}")).collect();
            format!("{name},{}", cells.join(","))
        };
        format!(
            "method,{}\n{}\n{}\n",
            MetricReport::NAMES.join(","),
            row("bicubic", &self.bicubic),
            row("le-mamba", &self.model)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_dataset, SyntheticSpec};
    use crate::net::NetConfig;

    fn small_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.net = NetConfig {
            num_scales: 2,
            dims: vec![4, 8],
            blocks_per_scale: vec![1, 1],
            window: (4, 4),
            state_dim: 4,
            ..NetConfig::toy()
        };
        c.train.batch = 2;
        c.train.epochs = 1;
        c
    }

    fn data(n: usize) -> Vec<FusionSample> {
        gen_synthetic_dataset(&SyntheticSpec { n, bands: 4, height: 16, width: 16, ratio: 4, pan_bands: 1, seed: 3 }).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = small_cfg();
        let net = LeMambaNet::new(cfg.net.clone()).unwrap();
        let state = TrainState::fresh(&net, 1e-6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.lmck");
        state.save(&p).unwrap();
        let back = TrainState::load(&p, &net, 1e-6).unwrap();
        assert_eq!(back.entries(), state.entries());
        fs::write(&p, b"LMT1xxxx").unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Format(_))));
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(1, 2, 10);
        assert_eq!(a, epoch_order(1, 2, 10));
        assert_ne!(a, epoch_order(1, 3, 10));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn crops_stay_aligned() {
        let d = data(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_crop(&d[0], 12, &mut rng).unwrap();
        assert_eq!(c.gt.shape(), &[4, 12, 12]);
        assert_eq!(c.lrms.shape(), &[4, 3, 3]);
        assert_eq!(c.ratio().unwrap(), 4);
        assert!(random_crop(&d[0], 10, &mut rng).is_err());
    }

    #[test]
    fn one_step_reduces_loss() {
        let cfg = small_cfg();
        let net = LeMambaNet::new(cfg.net.clone()).unwrap();
        let d = data(1);
        let tr = Trainer { net: &net, cfg: &cfg, data: &d };
        let mut st = TrainState::fresh(&net, 1e-6).unwrap();
        let (_, _, before) = tr.loss_and_grads(&mut st.params, &d).unwrap();
        clip_grad_norm(&mut st.params, 1.0);
        st.opt.step(&mut st.params, 1e-3).unwrap();
        let (_, _, after) = tr.loss_and_grads(&mut st.params, &d).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn resume_is_bit_identical() {
        let mut cfg = small_cfg();
        cfg.train.epochs = 2;
        let net = LeMambaNet::new(cfg.net.clone()).unwrap();
        let d = data(4);
        let tr = Trainer { net: &net, cfg: &cfg, data: &d };
        let (full, log) = tr.run(TrainState::fresh(&net, 1e-6).unwrap(), None).unwrap();
        assert_eq!(log.len(), 4);

        let mut half_cfg = cfg.clone();
        half_cfg.train.max_steps = 2;
        let half = Trainer { net: &net, cfg: &half_cfg, data: &d };
        let dir = tempfile::tempdir().unwrap();
        let (_, first) = half.run(TrainState::fresh(&net, 1e-6).unwrap(), Some(dir.path())).unwrap();
        let resumed = TrainState::load(&dir.path().join("final.lmck"), &net, 1e-6).unwrap();
        assert_eq!(resumed.step, 2);
        let (end, rest) = tr.run(resumed, None).unwrap();
        let joined: Vec<StepLog> = first.into_iter().chain(rest).collect();
        assert_eq!(joined, log);
        assert_eq!(end.entries(), full.entries());
        let csv = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert!(csv.starts_with(LOSS_CSV_HEADER));
    }

    #[test]
    fn evaluation_of_zero_model_matches_bicubic() {
        let cfg = small_cfg();
        let net = LeMambaNet::new(cfg.net.clone()).unwrap();
        let mut p = net.init_params().unwrap();
        p.zero_all();
        let ev = evaluate(&net, &p, &data(2)).unwrap();
        assert_eq!(ev.model, ev.bicubic);
        assert!(ev.table().contains("bicubic,"));
    }
}
