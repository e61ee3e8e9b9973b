//! Multi-scale LEVM encoder–decoder with adjacent and skip-connected state
//! flows, and the fusion training loss.
//!
//! ```text
//! x⁰ = bicubic(lrms)
//! enc_s : concat(x, pan_s) → linear → LEVM blocks      s = 0..S-1 (down 2× between)
//! dec_s : concat(up(x), enc_s) → linear → LEVM blocks  s = S-2..0
//! fused = head(x) + bicubic(lrms)
//! ```

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::autograd::Var;
use crate::blocks::{init_block, levm_block, BlockShape, BlockWeights, HiddenState, LevmWeights, PrevStates};
use crate::error::{shape_err, Error, Result};
use crate::image::{area_downsample, bicubic_upsample, pad_to_multiple};
use crate::metrics::{ssim_window, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use crate::ops::PAD;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub num_scales: usize,
    pub dims: Vec<usize>,
    pub blocks_per_scale: Vec<usize>,
    pub window: (usize, usize),
    pub state_dim: usize,
    pub spectral_bands: usize,
    pub pan_bands: usize,
    pub ratio: usize,
    pub lambda: f32,
    pub seed: u64,
    /// Master switch for state sharing; when off, no state reaches any block.
    pub state_share: bool,
    pub adjacent_flow: bool,
    pub skip_flow: bool,
}

impl NetConfig {
    /// Three scales of widths 16/32/64, two LEVM blocks each, 4×4 windows,
    /// N = 16, four spectral bands at ratio 4.
    pub fn toy() -> Self {
        NetConfig {
            num_scales: 3,
            dims: vec![16, 32, 64],
            blocks_per_scale: vec![2, 2, 2],
            window: (4, 4),
            state_dim: 16,
            spectral_bands: 4,
            pan_bands: 1,
            ratio: 4,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            state_share: true,
            adjacent_flow: true,
            skip_flow: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_scales < 2 {
            return bad(format!("num_scales must be >= 2, got {}", self.num_scales));
        }
        if self.dims.len() != self.num_scales {
            return bad(format!("{} dims for {} scales", self.dims.len(), self.num_scales));
        }
        if self.blocks_per_scale.len() != self.num_scales {
            return bad(format!("{} block counts for {} scales", self.blocks_per_scale.len(), self.num_scales));
        }
        if self.dims.contains(&0) || self.blocks_per_scale.contains(&0) {
            return bad("dims and blocks_per_scale must be positive".into());
        }
        if self.window.0 == 0 || self.window.1 == 0 || self.state_dim == 0 {
            return bad("window and state_dim must be positive".into());
        }
        if self.spectral_bands == 0 || self.pan_bands == 0 || self.ratio == 0 {
            return bad("spectral_bands, pan_bands and ratio must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }

    /// Spatial extents are padded to a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.num_scales - 1)
    }

    fn adjacent_on(&self) -> bool {
        self.state_share && self.adjacent_flow
    }

    fn skip_on(&self) -> bool {
        self.state_share && self.skip_flow
    }
}

/// One LEVM block position in forward order.
#[derive(Debug, Clone)]
struct Slot {
    prefix: String,
    dim: usize,
    adjacent_dim: Option<usize>,
    skip: bool,
}

/// Hidden states in flight during one forward pass.
#[derive(Default)]
pub struct StateBus {
    /// Latest `(local, global)` states of the previous block.
    pub adjacent: Option<(HiddenState, HiddenState)>,
    skip: BTreeMap<usize, HiddenState>,
}

impl StateBus {
    pub fn put_skip(&mut self, scale: usize, s: HiddenState) -> Result<()> {
        if self.skip.insert(scale, s).is_some() {
            return Err(Error::Wiring(format!("skip state for scale {scale} written twice")));
        }
        Ok(())
    }

    pub fn take_skip(&mut self, scale: usize) -> Result<HiddenState> {
        self.skip
            .remove(&scale)
            .ok_or_else(|| Error::Wiring(format!("no skip state for scale {scale}")))
    }

    /// Fails if a stored skip state was never consumed.
    pub fn finish(&self) -> Result<()> {
        match self.skip.keys().next() {
            Some(s) => Err(Error::Wiring(format!("skip state for scale {s} never consumed"))),
            None => Ok(()),
        }
    }
}

pub struct LeMambaNet {
    pub config: NetConfig,
    slots: Vec<Slot>,
}

impl LeMambaNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut slots = Vec::new();
        let mut prev: Option<usize> = None;
        let mut push = |prefix: String, dim: usize, skip: bool, slots: &mut Vec<Slot>| {
            slots.push(Slot {
                prefix,
                dim,
                adjacent_dim: if c.adjacent_on() { prev } else { None },
                skip,
            });
            prev = Some(dim);
        };
        for s in 0..c.num_scales {
            for j in 0..c.blocks_per_scale[s] {
                push(format!("enc{s}.blk{j}"), c.dims[s], false, &mut slots);
            }
        }
        for s in (0..c.num_scales - 1).rev() {
            for j in 0..c.blocks_per_scale[s] {
                push(format!("dec{s}.blk{j}"), c.dims[s], j == 0 && c.skip_on(), &mut slots);
            }
        }
        Ok(LeMambaNet { config, slots })
    }

    /// Fresh parameters drawn from `config.seed`.
    pub fn init_params(&self) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = ParamStore::new();
        let mut init = Init::new(c.seed);
        let linear = |store: &mut ParamStore, name: &str, fan_in: usize, out: usize, init: &mut Init| -> Result<()> {
            store.insert(format!("{name}.w"), init.fan_in(&[fan_in, out], fan_in))?;
            store.insert(format!("{name}.b"), Tensor::zeros(&[out]))
        };
        for s in 0..c.num_scales {
            let d = c.dims[s];
            if s > 0 {
                linear(&mut store, &format!("down{s}"), 4 * c.dims[s - 1], d, &mut init)?;
            }
            let cin = if s == 0 { c.spectral_bands } else { d };
            linear(&mut store, &format!("enc{s}.in"), cin + c.pan_bands, d, &mut init)?;
        }
        for s in (0..c.num_scales - 1).rev() {
            let d = c.dims[s];
            linear(&mut store, &format!("up{s}"), c.dims[s + 1], d, &mut init)?;
            linear(&mut store, &format!("dec{s}.in"), 2 * d, d, &mut init)?;
        }
        for slot in &self.slots {
            for (scope, skip) in [("local", false), ("global", slot.skip)] {
                let shape = BlockShape {
                    dim: slot.dim,
                    state_dim: c.state_dim,
                    adjacent_dim: slot.adjacent_dim,
                    skip,
                    state_share: c.state_share,
                };
                init_block(&mut store, &format!("{}.{scope}", slot.prefix), &shape, &mut init)?;
            }
        }
        linear(&mut store, "head", c.dims[0], c.spectral_bands, &mut init)?;
        Ok(store)
    }

    fn lin(bound: &Bound, x: &Var, name: &str) -> Result<Var> {
        x.linear(&bound.get(&format!("{name}.w"))?, Some(&bound.get(&format!("{name}.b"))?))
    }

    fn run_blocks(&self, bound: &Bound, x: Var, layer: &str, bus: &mut StateBus, skip: Option<HiddenState>) -> Result<Var> {
        let mut x = x;
        let mut skip = skip;
        let c = &self.config;
        for (i, slot) in self.slots.iter().enumerate().filter(|(_, s)| s.prefix.starts_with(&format!("{layer}.blk"))) {
            let w = LevmWeights {
                local: BlockWeights::bind(bound, &format!("{}.local", slot.prefix))?,
                global: BlockWeights::bind(bound, &format!("{}.global", slot.prefix))?,
            };
            let adj = if slot.adjacent_dim.is_some() { bus.adjacent.take() } else { None };
            let sk = if slot.skip { skip.take() } else { None };
            if slot.skip && sk.is_none() {
                return Err(Error::Wiring(format!("{} expects a skip state", slot.prefix)));
            }
            let out = levm_block(
                &x,
                adj.as_ref().map(|a| &a.0),
                PrevStates {
                    adjacent: adj.as_ref().map(|a| &a.1),
                    skip: sk.as_ref(),
                },
                c.window,
                &w,
                i,
            )?;
            x = out.x;
            bus.adjacent = Some((out.local, out.global));
        }
        if skip.is_some() {
            return Err(Error::Wiring(format!("{layer} received a skip state it did not use")));
        }
        Ok(x)
    }

    /// Fuses channel-last `lrms: [B, h, w, S]` and `pan: [B, h·r, w·r, P]`
    /// into `[B, h·r, w·r, S]`.
    pub fn forward(&self, bound: &Bound, lrms: &Tensor, pan: &Tensor) -> Result<Var> {
        let c = &self.config;
        let (b, lh, lw, s) = match *lrms.shape() {
            [b, h, w, s] => (b, h, w, s),
            ref sh => return Err(shape_err("forward_fuse", format!("lrms {:?}", sh))),
        };
        let (h, w) = (lh * c.ratio, lw * c.ratio);
        if s != c.spectral_bands || pan.shape() != [b, h, w, c.pan_bands] {
            return Err(shape_err(
                "forward_fuse",
                format!("lrms {:?} / pan {:?} for {} bands, {} guide bands, ratio {}", lrms.shape(), pan.shape(), c.spectral_bands, c.pan_bands, c.ratio),
            ));
        }
        let up = bicubic_upsample(lrms, c.ratio)?;
        let m = c.spatial_multiple();
        let x0 = pad_to_multiple(&up, m)?;
        let pan0 = pad_to_multiple(pan, m)?;

        let mut bus = StateBus::default();
        let mut enc_out = Vec::with_capacity(c.num_scales);
        let mut x = Var::constant(x0);
        for sc in 0..c.num_scales {
            if sc > 0 {
                x = Self::lin(bound, &fold2x2(&x)?, &format!("down{sc}"))?;
            }
            let pan_s = Var::constant(area_downsample(&pan0, 1 << sc)?);
            x = Self::lin(bound, &Var::concat(&[&x, &pan_s], 3)?, &format!("enc{sc}.in"))?;
            x = self.run_blocks(bound, x, &format!("enc{sc}"), &mut bus, None)?;
            if sc + 1 < c.num_scales && c.skip_on() {
                let g = bus.adjacent.as_ref().map(|a| a.1.clone()).ok_or_else(|| Error::Wiring("no global state after encoder".into()))?;
                bus.put_skip(sc, g)?;
            }
            enc_out.push(x.clone());
        }
        for sc in (0..c.num_scales - 1).rev() {
            let u = Self::lin(bound, &nearest2x(&x)?, &format!("up{sc}"))?;
            x = Self::lin(bound, &Var::concat(&[&u, &enc_out[sc]], 3)?, &format!("dec{sc}.in"))?;
            let skip = if c.skip_on() { Some(bus.take_skip(sc)?) } else { None };
            x = self.run_blocks(bound, x, &format!("dec{sc}"), &mut bus, skip)?;
        }
        bus.finish()?;
        let mut y = Self::lin(bound, &x, "head")?;
        if y.shape()[1] != h {
            y = y.slice(1, 0, h)?;
        }
        if y.shape()[2] != w {
            y = y.slice(2, 0, w)?;
        }
        y.add(&Var::constant(up))
    }
}

/// `[B, H, W, D]` → `[B, ⌈H/2⌉, ⌈W/2⌉, 4D]`, zero-padding odd extents.
pub fn fold2x2(x: &Var) -> Result<Var> {
    let (b, h, w, d) = match *x.shape() {
        [b, h, w, d] => (b, h, w, d),
        ref s => return Err(shape_err("downsample", format!("{:?}", s))),
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut index = Vec::with_capacity(b * oh * ow * 4 * d);
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for q in 0..4 {
                    let (y, xx) = (2 * i + q / 2, 2 * j + q % 2);
                    for c in 0..d {
                        index.push(if y < h && xx < w { ((bi * h + y) * w + xx) * d + c } else { PAD });
                    }
                }
            }
        }
    }
    x.gather(Rc::new(index), &[b, oh, ow, 4 * d])
}

/// Nearest-neighbour 2× upsampling of `[B, H, W, D]`.
pub fn nearest2x(x: &Var) -> Result<Var> {
    let (b, h, w, d) = match *x.shape() {
        [b, h, w, d] => (b, h, w, d),
        ref s => return Err(shape_err("upsample", format!("{:?}", s))),
    };
    let mut index = Vec::with_capacity(b * 4 * h * w * d);
    for bi in 0..b {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let base = ((bi * h + y / 2) * w + xx / 2) * d;
                index.extend(base..base + d);
            }
        }
    }
    x.gather(Rc::new(index), &[b, 2 * h, 2 * w, d])
}

/// Loss value and its components.
pub struct LossParts {
    pub total: Var,
    pub l1: f64,
    /// `1 - SSIM`
    pub ssim_loss: f64,
}

/// Differentiable mean SSIM over `[B, H, W, C]` maps (11×11 Gaussian window,
/// valid region, data range 1).
pub fn ssim_var(x: &Var, y: &Var) -> Result<Var> {
    if x.shape() != y.shape() || x.shape().len() != 4 {
        return Err(shape_err("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let ch = x.shape()[3];
    let win = ssim_window();
    let kernel = Var::constant(Tensor::from_fn(&[SSIM_WINDOW, SSIM_WINDOW, ch], |i| win[i / ch] as f32));
    let blur = |v: &Var| v.conv2d_depthwise(&kernel, 0);
    let (c1, c2) = ((SSIM_K1 * SSIM_K1) as f32, (SSIM_K2 * SSIM_K2) as f32);
    let mx = blur(x)?;
    let my = blur(y)?;
    let sxx = blur(&x.square())?;
    let syy = blur(&y.square())?;
    let sxy = blur(&x.mul(y)?)?;
    let mx2 = mx.square();
    let my2 = my.square();
    let mxy = mx.mul(&my)?;
    let num = mxy.scale(2.0).add_scalar(c1).mul(&sxy.sub(&mxy)?.scale(2.0).add_scalar(c2))?;
    let var_sum = sxx.sub(&mx2)?.add(&syy.sub(&my2)?)?;
    let den = mx2.add(&my2)?.add_scalar(c1).mul(&var_sum.add_scalar(c2))?;
    Ok(num.div(&den)?.mean())
}

/// `mean |fused - gt| + λ (1 - SSIM(fused, gt))`.
pub fn fusion_loss(fused: &Var, gt: &Tensor, lambda: f32) -> Result<LossParts> {
    if fused.shape() != gt.shape() {
        return Err(shape_err("loss", format!("{:?} vs {:?}", fused.shape(), gt.shape())));
    }
    let g = Var::constant(gt.clone());
    let l1 = fused.sub(&g)?.abs().mean();
    let ssim_loss = ssim_var(fused, &g)?.neg().add_scalar(1.0);
    let total = l1.add(&ssim_loss.scale(lambda))?;
    Ok(LossParts {
        l1: l1.value().item() as f64,
        ssim_loss: ssim_loss.value().item() as f64,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::backward;

    fn tiny() -> NetConfig {
        NetConfig {
            num_scales: 2,
            dims: vec![4, 6],
            blocks_per_scale: vec![1, 1],
            window: (2, 2),
            state_dim: 2,
            spectral_bands: 3,
            ..NetConfig::toy()
        }
    }

    fn inputs(b: usize, lh: usize, lw: usize, cfg: &NetConfig) -> (Tensor, Tensor) {
        let r = cfg.ratio;
        let lrms = Tensor::from_fn(&[b, lh, lw, cfg.spectral_bands], |i| ((i * 13 % 29) as f32) / 29.0);
        let pan = Tensor::from_fn(&[b, lh * r, lw * r, cfg.pan_bands], |i| ((i * 7 % 31) as f32) / 31.0);
        (lrms, pan)
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::toy().validate().is_ok());
        let mut c = NetConfig::toy();
        c.dims.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = NetConfig { num_scales: 1, ..NetConfig::toy() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_and_padding() {
        let cfg = tiny();
        let net = LeMambaNet::new(cfg.clone()).unwrap();
        let store = net.init_params().unwrap();
        // 3x5 LRMS -> 12x20 at ratio 4, already even
        let (l, p) = inputs(2, 3, 5, &cfg);
        let y = net.forward(&store.bind(false), &l, &p).unwrap();
        assert_eq!(y.shape(), &[2, 12, 20, 3]);
        // odd extent: ratio 1 with a 3-scale ladder forces padding
        let cfg = NetConfig { ratio: 1, num_scales: 3, dims: vec![4, 4, 4], blocks_per_scale: vec![1, 1, 1], ..tiny() };
        let net = LeMambaNet::new(cfg.clone()).unwrap();
        let (l, p) = inputs(1, 5, 7, &cfg);
        let y = net.forward(&net.init_params().unwrap().bind(false), &l, &p).unwrap();
        assert_eq!(y.shape(), &[1, 5, 7, 3]);
    }

    #[test]
    fn zero_weights_give_bicubic() {
        let cfg = tiny();
        let net = LeMambaNet::new(cfg.clone()).unwrap();
        let mut store = net.init_params().unwrap();
        store.zero_all();
        let (l, p) = inputs(1, 2, 2, &cfg);
        let y = net.forward(&store.bind(false), &l, &p).unwrap();
        assert_eq!(y.value(), &bicubic_upsample(&l, 4).unwrap());
    }

    #[test]
    fn parameter_layout_follows_flags() {
        let count = |cfg: NetConfig| {
            let net = LeMambaNet::new(cfg).unwrap();
            let s = net.init_params().unwrap();
            (s.iter().filter(|(n, _)| n.contains(".share.adj")).count(), s.iter().filter(|(n, _)| n.contains(".share.skip")).count())
        };
        assert_eq!(count(NetConfig { state_share: false, ..tiny() }), (0, 0));
        let (adj, skip) = count(NetConfig { skip_flow: false, ..tiny() });
        assert!(adj > 0);
        assert_eq!(skip, 0);
        let (_, skip) = count(tiny());
        assert_eq!(skip, 1);
    }

    #[test]
    fn resamplers_keep_constants() {
        let x = Var::constant(Tensor::full(&[1, 4, 4, 2], 0.5));
        let f = fold2x2(&x).unwrap();
        assert_eq!(f.shape(), &[1, 2, 2, 8]);
        assert!(f.data().iter().all(|&v| v == 0.5));
        let u = nearest2x(&f).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4, 8]);
        assert!(u.data().iter().all(|&v| v == 0.5));
        let odd = fold2x2(&Var::constant(Tensor::full(&[1, 3, 3, 1], 1.0))).unwrap();
        assert_eq!(odd.data()[..8], [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn loss_of_identical_images_is_zero() {
        let gt = Tensor::from_fn(&[1, 12, 12, 2], |i| ((i * 17 % 23) as f32) / 23.0);
        let parts = fusion_loss(&Var::constant(gt.clone()), &gt, 0.1).unwrap();
        assert!(parts.total.value().item().abs() < 1e-6);
        let shifted = Tensor::full(&[1, 12, 12, 1], 0.6);
        let gtc = Tensor::full(&[1, 12, 12, 1], 0.5);
        let p = fusion_loss(&Var::constant(shifted), &gtc, 0.1).unwrap();
        assert!((p.l1 - 0.1).abs() < 1e-6);
    }

    #[test]
    fn backward_reaches_every_parameter_family() {
        let cfg = tiny();
        let net = LeMambaNet::new(cfg.clone()).unwrap();
        let store = net.init_params().unwrap();
        let bound = store.bind(true);
        let (l, p) = inputs(1, 3, 3, &cfg);
        let y = net.forward(&bound, &l, &p).unwrap();
        let gt = Tensor::full(y.shape(), 0.5);
        let loss = fusion_loss(&y, &gt, 0.1).unwrap();
        let g = backward(loss.total).unwrap();
        for name in ["head.w", "enc0.in.w", "down1.w", "up0.w", "dec0.blk0.global.share.skip.w_h", "enc1.blk0.local.share.adj.proj"] {
            let v = bound.get(name).unwrap();
            let gv = g.get(&v).unwrap_or_else(|| panic!("{name} unreached"));
            assert!(gv.data().iter().any(|&x| x != 0.0), "{name} has zero grad");
        }
    }
}
