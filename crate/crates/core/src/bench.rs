//! Activation-memory and multiply-add benchmarks for the four operator
//! families compared in the complexity table: k×k convolution, global
//! self-attention, a VMamba block and an LEVM block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::Var;
use crate::blocks::{init_block, levm_block, vmamba_block, BlockShape, BlockWeights, HiddenState, LevmWeights, PrevStates, Scope};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{profile, Tensor};

pub const CONV_KERNEL: usize = 3;
pub const BENCH_WINDOW: (usize, usize) = (4, 4);
/// Largest attention score matrix (in floats) the bench will materialize.
pub const MAX_ATTENTION_SCORES: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Conv,
    SelfAttention,
    Vmamba,
    Levm,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Conv, Operator::SelfAttention, Operator::Vmamba, Operator::Levm];

    /// Multiply-add prediction of the complexity table.
    pub fn flops_formula(self, b: usize, l: usize, d: usize, n: usize) -> u64 {
        let (b, l, d, n) = (b as u64, l as u64, d as u64, n as u64);
        let k2 = (CONV_KERNEL * CONV_KERNEL) as u64;
        match self {
            Operator::Conv => b * l * k2 * d * n,
            Operator::SelfAttention => b * (l * l + 5 * l * d * n),
            Operator::Vmamba => 4 * b * l * d * n + 2 * l * d * n,
            Operator::Levm => 10 * b * l * n + 2 * l * d + 2 * d * n,
        }
    }

    /// Space prediction of the complexity table, in floats.
    pub fn space_formula(self, b: usize, l: usize, d: usize) -> u64 {
        let (b, l, d) = (b as u64, l as u64, d as u64);
        match self {
            Operator::SelfAttention => b * (l * l + l * d),
            _ => b * l * d,
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Conv => "conv",
            Operator::SelfAttention => "self_attention",
            Operator::Vmamba => "vmamba",
            Operator::Levm => "levm",
        })
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Operator::Conv),
            "attention" | "self_attention" => Ok(Operator::SelfAttention),
            "vmamba" => Ok(Operator::Vmamba),
            "levm" => Ok(Operator::Levm),
            _ => Err(Error::Config(format!("unknown operator `{s}` (conv, attention, vmamba, levm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub operator: Operator,
    pub b: usize,
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub peak_units: u64,
    pub flops_measured: u64,
    pub flops_formula: u64,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "operator,B,L,D,N,peak_units,flops_measured,flops_formula";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.operator, self.b, self.l, self.d, self.n, self.peak_units, self.flops_measured, self.flops_formula
        )
    }

    pub fn flops_ratio(&self) -> f64 {
        self.flops_measured as f64 / self.flops_formula as f64
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{}\n", BenchRecord::CSV_HEADER);
    for r in records {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}

/// The most square `h × w` with `h · w = l` and `h ≤ w`.
pub fn grid_for(l: usize) -> (usize, usize) {
    let mut h = (l as f64).sqrt() as usize;
    while h > 1 && l % h != 0 {
        h -= 1;
    }
    (h.max(1), l / h.max(1))
}

/// Weights for one operator; built before measurement so they are excluded.
enum Prepared {
    Conv(Var),
    Attention { wq: Var, wk: Var, wv: Var },
    Vmamba(BlockWeights),
    Levm { w: LevmWeights, local: HiddenState, global: HiddenState },
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn prepare(op: Operator, b: usize, d: usize, n: usize, seed: u64) -> Result<Prepared> {
    let mut init = Init::new(seed);
    let bind = |store: &ParamStore| -> Bound { store.bind(false) };
    Ok(match op {
        Operator::Conv => Prepared::Conv(Var::constant(init.fan_in(&[CONV_KERNEL, CONV_KERNEL, d, n], CONV_KERNEL * CONV_KERNEL * d))),
        Operator::SelfAttention => Prepared::Attention {
            wq: Var::constant(init.fan_in(&[d, n], d)),
            wk: Var::constant(init.fan_in(&[d, n], d)),
            wv: Var::constant(init.fan_in(&[d, n], d)),
        },
        Operator::Vmamba => {
            let mut s = ParamStore::new();
            let shape = BlockShape { dim: d, state_dim: n, adjacent_dim: None, skip: false, state_share: false };
            init_block(&mut s, "b", &shape, &mut init)?;
            Prepared::Vmamba(BlockWeights::bind(&bind(&s), "b")?)
        }
        Operator::Levm => {
            let mut s = ParamStore::new();
            let shape = BlockShape { dim: d, state_dim: n, adjacent_dim: Some(d), skip: false, state_share: true };
            init_block(&mut s, "l", &shape, &mut init)?;
            init_block(&mut s, "g", &shape, &mut init)?;
            let bound = bind(&s);
            let st = |scope, rng: &mut _| HiddenState { h: Var::constant(random_tensor(&[b, 4, d, n], rng)), scope, layer_index: 0 };
            Prepared::Levm {
                w: LevmWeights { local: BlockWeights::bind(&bound, "l")?, global: BlockWeights::bind(&bound, "g")? },
                local: st(Scope::Local, init.rng()),
                global: st(Scope::Global, init.rng()),
            }
        }
    })
}

/// One inference forward of `op` on `x: [B, H, W, D]`.
fn run(p: &Prepared, x: Var) -> Result<Var> {
    match p {
        Prepared::Conv(k) => x.conv2d(k, CONV_KERNEL / 2),
        Prepared::Attention { wq, wk, wv } => {
            let s = x.shape().to_vec();
            let seq = x.reshape(&[s[0], s[1] * s[2], s[3]])?;
            let q = seq.matmul(wq)?;
            let k = seq.matmul(wk)?;
            let v = seq.matmul(wv)?;
            let n = q.shape()[2] as f32;
            let att = q.matmul(&k.transpose()?)?.scale(1.0 / n.sqrt()).softmax()?;
            att.matmul(&v)
        }
        Prepared::Vmamba(w) => Ok(vmamba_block(&x, PrevStates::default(), w)?.0),
        Prepared::Levm { w, local, global } => {
            let adj = PrevStates { adjacent: Some(global), skip: None };
            Ok(levm_block(&x, Some(local), adj, BENCH_WINDOW, w, 0)?.x)
        }
    }
}

/// Measures one forward pass at sequence length `l` (laid out as the most
/// square grid). Weights are allocated before the counters are reset.
pub fn measure(op: Operator, b: usize, l: usize, d: usize, n: usize, seed: u64) -> Result<BenchRecord> {
    if op == Operator::SelfAttention && b.saturating_mul(l).saturating_mul(l) > MAX_ATTENTION_SCORES {
        return Err(Error::Domain(format!("attention score matrix {b}x{l}x{l} exceeds {MAX_ATTENTION_SCORES} floats")));
    }
    let (h, w) = grid_for(l);
    let prepared = prepare(op, b, d, n, seed)?;
    let mut rng = Init::new(seed ^ 0xB3);
    // the input is created after the reset so it counts toward the peak
    let base = profile::live_floats();
    profile::reset_peak();
    let input = random_tensor(&[b, h, w, d], rng.rng());
    profile::reset_flops();
    let out = run(&prepared, Var::constant(input))?;
    drop(out);
    let peak = (profile::peak_floats() - base).max(0) as u64;
    Ok(BenchRecord {
        operator: op,
        b,
        l,
        d,
        n,
        peak_units: peak,
        flops_measured: profile::flops(),
        flops_formula: op.flops_formula(b, l, d, n),
    })
}

pub fn bench_mem(ops: &[Operator], ls: &[usize], b: usize, d: usize, n: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    let mut out = Vec::new();
    for &op in ops {
        for &l in ls {
            out.push(measure(op, b, l, d, n, seed)?);
        }
    }
    Ok(out)
}

/// Same sweep as [`bench_mem`]; both counters are recorded on every run.
pub fn bench_flops(ops: &[Operator], ls: &[usize], b: usize, d: usize, n: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    bench_mem(ops, ls, b, d, n, seed)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Largest relative deviation of any measured/formula ratio from their
/// median.
pub fn ratio_spread(records: &[BenchRecord]) -> f64 {
    let mut r: Vec<f64> = records.iter().map(BenchRecord::flops_ratio).collect();
    r.sort_by(|a, b| a.total_cmp(b));
    let med = r[r.len() / 2];
    r.iter().map(|v| (v / med - 1.0).abs()).fold(0.0, f64::max)
}

/// Parses `256..4096` (powers of two), `64,256,1024` or a single length.
pub fn parse_lengths(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("bad length list `{spec}`"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || lo > hi {
            return Err(bad());
        }
        let mut v = vec![];
        let mut l = lo;
        while l <= hi {
            v.push(l);
            l *= 2;
        }
        return Ok(v);
    }
    spec.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}
