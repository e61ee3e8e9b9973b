//! `key = value` run configuration files (`#` starts a comment).

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::optim::{BASE_LR, WEIGHT_DECAY};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Length the lr milestones are scaled against; defaults to `epochs`.
    pub schedule_epochs: Option<usize>,
    /// Square training crop in high-resolution pixels (0 = full image).
    pub crop: usize,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: BASE_LR,
            epochs: 1000,
            batch: 4,
            weight_decay: WEIGHT_DECAY,
            clip_norm: 1.0,
            schedule_epochs: None,
            crop: 0,
            max_steps: 0,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule_len(&self) -> usize {
        self.schedule_epochs.unwrap_or(self.epochs)
    }
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Synthetic dataset shape for `gen-data`.
    pub samples: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::toy(),
            train: TrainConfig::default(),
            samples: 64,
            height: 64,
            width: 64,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

/// Splits `key = value` lines; later duplicates are an error.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let kv = parse_kv(text)?;
        let mut blocks_given = false;
        for (k, v) in &kv {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "num_scales" => c.net.num_scales = parse(k, v)?,
                "dims" => c.net.dims = parse_list(k, v)?,
                "blocks_per_scale" => {
                    c.net.blocks_per_scale = parse_list(k, v)?;
                    blocks_given = true;
                }
                "window" => {
                    let p: Vec<usize> = v.split(['x', ',']).map(|p| parse(k, p.trim())).collect::<Result<_>>()?;
                    c.net.window = match p[..] {
                        [a] => (a, a),
                        [a, b] => (a, b),
                        _ => return Err(Error::Config(format!("`window`: expected `h x w`, got `{v}`"))),
                    };
                }
                "state_dim" => c.net.state_dim = parse(k, v)?,
                "spectral_bands" => c.net.spectral_bands = parse(k, v)?,
                "pan_bands" => c.net.pan_bands = parse(k, v)?,
                "ratio" => c.net.ratio = parse(k, v)?,
                "lambda" => c.net.lambda = parse(k, v)?,
                "seed" => c.net.seed = parse(k, v)?,
                "state_share" => c.net.state_share = parse_bool(k, v)?,
                "adjacent_flow" => c.net.adjacent_flow = parse_bool(k, v)?,
                "skip_flow" => c.net.skip_flow = parse_bool(k, v)?,
                "lr" => c.train.lr = parse(k, v)?,
                "epochs" => c.train.epochs = parse(k, v)?,
                "batch" => c.train.batch = parse(k, v)?,
                "weight_decay" => c.train.weight_decay = parse(k, v)?,
                "clip_norm" => c.train.clip_norm = parse(k, v)?,
                "schedule_epochs" => c.train.schedule_epochs = Some(parse(k, v)?),
                "crop" => c.train.crop = parse(k, v)?,
                "max_steps" => c.train.max_steps = parse(k, v)?,
                "ckpt_every" => c.train.ckpt_every = parse(k, v)?,
                "samples" => c.samples = parse(k, v)?,
                "height" => c.height = parse(k, v)?,
                "width" => c.width = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        // a single block count applies to every scale
        if blocks_given && c.net.blocks_per_scale.len() == 1 {
            c.net.blocks_per_scale = vec![c.net.blocks_per_scale[0]; c.net.num_scales];
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.epochs == 0 {
            return Err(Error::Config("batch and epochs must be positive".into()));
        }
        if !(t.lr > 0.0) || !(t.clip_norm > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("lr and clip_norm must be positive, weight_decay non-negative".into()));
        }
        if t.crop != 0 && t.crop % (self.net.ratio) != 0 {
            return Err(Error::Config(format!("crop {} must be a multiple of ratio {}", t.crop, self.net.ratio)));
        }
        if self.samples == 0 || self.height % self.net.ratio != 0 || self.width % self.net.ratio != 0 {
            return Err(Error::Config(format!(
                "dataset {}x{} with {} samples is incompatible with ratio {}",
                self.height, self.width, self.samples, self.net.ratio
            )));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.samples,
            bands: self.net.spectral_bands,
            height: self.height,
            width: self.width,
            ratio: self.net.ratio,
            pan_bands: self.net.pan_bands,
            seed: self.net.seed,
        }
    }

    /// Renders a file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = format!(
            "num_scales = {}\ndims = {}\nblocks_per_scale = {}\nwindow = {}x{}\nstate_dim = {}\nspectral_bands = {}\npan_bands = {}\nratio = {}\nlambda = {}\nseed = {}\nstate_share = {}\nadjacent_flow = {}\nskip_flow = {}\n",
            n.num_scales, list(&n.dims), list(&n.blocks_per_scale), n.window.0, n.window.1, n.state_dim,
            n.spectral_bands, n.pan_bands, n.ratio, n.lambda, n.seed, n.state_share, n.adjacent_flow, n.skip_flow
        );
        s += &format!(
            "lr = {}\nepochs = {}\nbatch = {}\nweight_decay = {}\nclip_norm = {}\ncrop = {}\nmax_steps = {}\nckpt_every = {}\n",
            t.lr, t.epochs, t.batch, t.weight_decay, t.clip_norm, t.crop, t.max_steps, t.ckpt_every
        );
        if let Some(se) = t.schedule_epochs {
            s += &format!("schedule_epochs = {se}\n");
        }
        s += &format!("samples = {}\nheight = {}\nwidth = {}\n", self.samples, self.height, self.width);
        s
    }
}
