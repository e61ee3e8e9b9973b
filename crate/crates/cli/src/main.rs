use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use lemamba_core::bench::{self, Operator};
use lemamba_core::config::RunConfig;
use lemamba_core::data::{gen_synthetic_dataset, load_split, write_dataset};
use lemamba_core::image::{stack, to_band_first, to_channel_last, unstack};
use lemamba_core::net::LeMambaNet;
use lemamba_core::train::{evaluate, TrainState, Trainer};
use lemamba_core::{selftest, Error, Tensor};

#[derive(Parser)]
#[command(name = "lemamba", version, about = "LE-Mamba multispectral image fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` run configuration (defaults to the toy setup)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic Wald-protocol dataset with train/val/test manifests
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Trains on the `train` split; writes checkpoints and loss.csv to --out
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Prints mean±std metrics of a checkpoint and the bicubic baseline
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Fuses one LRMS/PAN pair (band-first LMT1 files)
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lrms: PathBuf,
        #[arg(long)]
        pan: PathBuf,
    },
    /// Peak live activation floats of one forward pass per operator
    BenchMem {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Counted multiply-adds against the symbolic predictions
    BenchFlops {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sweep: Sweep,
    },
    /// Oracle-equivalence and gradient checks
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Sweep {
    /// Operator to run (repeatable): conv, attention, vmamba, levm
    #[arg(long = "op")]
    ops: Vec<Operator>,
    /// Sequence lengths: `256..4096` (doubling) or `64,256,1024`
    #[arg(long = "L")]
    lengths: Option<String>,
    #[arg(long = "B", default_value_t = 1)]
    batch: usize,
    /// Token width (default 32 for bench-mem, 8 for bench-flops)
    #[arg(long = "D")]
    dim: Option<usize>,
    /// State size (default 16 for bench-mem, 8 for bench-flops)
    #[arg(long = "N")]
    state: Option<usize>,
}

struct Resolved {
    ops: Vec<Operator>,
    lengths: Vec<usize>,
    b: usize,
    d: usize,
    n: usize,
}

impl Sweep {
    fn resolve(&self, lengths: &str, d: usize, n: usize) -> anyhow::Result<Resolved> {
        Ok(Resolved {
            ops: if self.ops.is_empty() { Operator::ALL.to_vec() } else { self.ops.clone() },
            lengths: bench::parse_lengths(self.lengths.as_deref().unwrap_or(lengths))?,
            b: self.batch,
            d: self.dim.unwrap_or(d),
            n: self.state.unwrap_or(n),
        })
    }
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.net.seed = s;
    }
    Ok(cfg)
}

fn require_out(c: &Common) -> anyhow::Result<&Path> {
    match &c.out {
        Some(p) => Ok(p),
        None => Err(Error::Config("--out is required".into()).into()),
    }
}

fn load_state(path: &Path, net: &LeMambaNet, cfg: &RunConfig) -> anyhow::Result<TrainState> {
    TrainState::load(path, net, cfg.train.weight_decay).with_context(|| format!("loading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<bool> {
    match cmd {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let samples = gen_synthetic_dataset(&cfg.synthetic_spec())?;
            write_dataset(out, &samples)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { common, data, resume } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let train = load_split(&data, "train")?;
            let net = LeMambaNet::new(cfg.net.clone())?;
            let state = match &resume {
                Some(p) => load_state(p, &net, &cfg)?,
                None => TrainState::fresh(&net, cfg.train.weight_decay)?,
            };
            fs::create_dir_all(out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let trainer = Trainer { net: &net, cfg: &cfg, data: &train };
            let (state, log) = trainer.run(state, Some(out))?;
            match (log.first(), log.last()) {
                (Some(a), Some(b)) => println!("steps {}..{}: loss {:.5} -> {:.5}", a.step, state.step, a.total, b.total),
                _ => println!("nothing to do: already at step {}", state.step),
            }
        }
        Command::Eval { common, data, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let samples = load_split(&data, &split)?;
            let net = LeMambaNet::new(cfg.net.clone())?;
            let state = load_state(&checkpoint, &net, &cfg)?;
            let summary = evaluate(&net, &state.params, &samples)?;
            let text = format!("{}l1,{:.6}\n", summary.table(), summary.l1);
            emit(common.out.as_deref(), &text)?;
        }
        Command::Fuse { common, checkpoint, lrms, pan } => {
            let cfg = load_config(&common)?;
            let out = require_out(&common)?;
            let net = LeMambaNet::new(cfg.net.clone())?;
            let state = load_state(&checkpoint, &net, &cfg)?;
            let lrms = Tensor::load(&lrms).with_context(|| format!("reading {}", lrms.display()))?;
            let pan = Tensor::load(&pan).with_context(|| format!("reading {}", pan.display()))?;
            let (ls, ps) = (lrms.shape(), pan.shape());
            let r = cfg.net.ratio;
            if ls.len() != 3 || ps.len() != 3 || ls[0] != cfg.net.spectral_bands || ps[0] != cfg.net.pan_bands || ps[1] != ls[1] * r || ps[2] != ls[2] * r {
                return Err(Error::Config(format!(
                    "LRMS {ls:?} and PAN {ps:?} do not match {} bands, {} PAN bands at ratio {r}",
                    cfg.net.spectral_bands, cfg.net.pan_bands
                ))
                .into());
            }
            let l = stack(&[&to_channel_last(&lrms)?])?;
            let p = stack(&[&to_channel_last(&pan)?])?;
            let fused = net.forward(&state.params.bind(false), &l, &p)?;
            let fused = to_band_first(&unstack(fused.value(), 0)?)?;
            fused.save(out)?;
            println!("wrote {:?} to {}", fused.shape(), out.display());
        }
        Command::BenchMem { common, sweep } => {
            let r = sweep.resolve("256..4096", 32, 16)?;
            let recs = bench::bench_mem(&r.ops, &r.lengths, r.b, r.d, r.n, common.seed.unwrap_or(0))?;
            emit(common.out.as_deref(), &bench::to_csv(&recs))?;
            for op in r.ops {
                let pts: Vec<(f64, f64)> = recs
                    .iter()
                    .filter(|r| r.operator == op)
                    .map(|r| (r.l as f64, r.peak_units as f64))
                    .collect();
                if pts.len() >= 2 {
                    eprintln!("{op}: memory slope {:.3}", bench::loglog_slope(&pts));
                }
            }
        }
        Command::BenchFlops { common, sweep } => {
            let r = sweep.resolve("64,256,1024", 8, 8)?;
            let recs = bench::bench_flops(&r.ops, &r.lengths, r.b, r.d, r.n, common.seed.unwrap_or(0))?;
            emit(common.out.as_deref(), &bench::to_csv(&recs))?;
            for op in r.ops {
                let sel: Vec<_> = recs.iter().filter(|r| r.operator == op).cloned().collect();
                let ratios: Vec<String> = sel.iter().map(|r| format!("{:.3}", r.flops_ratio())).collect();
                eprintln!("{op}: measured/formula {} (spread {:.1}%)", ratios.join(" "), 100.0 * bench::ratio_spread(&sel));
            }
        }
        Command::Selftest { common } => {
            let results = selftest::run_all(common.seed.unwrap_or(0));
            let mut text = String::new();
            for r in &results {
                text += &format!("{} {} {}\n", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            emit(common.out.as_deref(), &text)?;
            return Ok(results.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

/// Bad input (config, shapes, files that do not match) maps to exit code 2.
fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::Shape { .. } | Error::Domain(_) | Error::Format(_) | Error::Wiring(_))
        )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: self-test failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
