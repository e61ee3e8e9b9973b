//! Built-in numerical checks: scan against its convolution-kernel oracle,
//! analytic gradients against finite differences, and the scan geometry
//! bijections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::geometry::{cross_merge, cross_scan, window_merge, window_partition};
use crate::gradcheck::finite_diff_check;
use crate::ssm::{kernel_scan, selective_scan, SsmParams};
use crate::tensor::Tensor;

pub const SCAN_ORACLE_TOL: f32 = 1e-5;
pub const OP_GRAD_TOL: f32 = 1e-3;
pub const SCAN_GRAD_TOL: f32 = 1e-2;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, value: f32, tol: f32) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: value.is_finite() && value <= tol,
        detail: format!("{value:.3e} (tol {tol:.0e})"),
    }
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Time-invariant scan inputs: Δ, B, C constant along the sequence.
pub fn random_lti(b: usize, l: usize, d: usize, n: usize, rng: &mut impl Rng) -> (Tensor, SsmParams) {
    let k = 4;
    let x = uniform(&[b, k, l, d], -1.0, 1.0, rng);
    let dt: Vec<f32> = (0..b * k * d).map(|_| rng.gen_range(0.01..0.5)).collect();
    let delta = Tensor::from_fn(&[b, k, l, d], |i| {
        let (bk, ch) = (i / (l * d), i % d);
        dt[bk * d + ch]
    });
    let a = uniform(&[k, d, n], -2.0, -0.1, rng);
    let per_seq = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..b * k * n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    let (bv, cv) = (per_seq(&mut r), per_seq(&mut r));
    let spread = |v: &[f32]| Tensor::from_fn(&[b, k, l, n], |i| v[(i / (l * n)) * n + i % n]);
    let p = SsmParams {
        a: Var::constant(a),
        b: Var::constant(spread(&bv)),
        c: Var::constant(spread(&cv)),
        delta: Var::constant(delta),
    };
    (x, p)
}

/// Largest scan/oracle disagreement over `trials` random instances.
pub fn scan_oracle_error(trials: usize, seed: u64) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f32;
    for _ in 0..trials {
        let (l, d, n) = (rng.gen_range(1..=128), rng.gen_range(1..=8), rng.gen_range(1..=32));
        let (x, p) = random_lti(1, l, d, n, &mut rng);
        let y = selective_scan(&Var::constant(x.clone()), &p, None)?.y;
        let oracle = kernel_scan(&x, p.delta.value(), p.a.value(), p.b.value(), p.c.value())?;
        worst = worst.max(y.value().max_abs_diff(&oracle));
    }
    Ok(worst)
}

/// Scalar test: A = −1, B = C = 1, Δ = ln 2 and a unit input give
/// `y = 0.5, 0.75, 0.875`.
pub fn scan_unrolled_error() -> Result<f32> {
    let l = 3;
    let x = Var::constant(Tensor::full(&[1, 4, l, 1], 1.0));
    let p = SsmParams {
        a: Var::constant(Tensor::full(&[4, 1, 1], -1.0)),
        b: Var::constant(Tensor::full(&[1, 4, l, 1], 1.0)),
        c: Var::constant(Tensor::full(&[1, 4, l, 1], 1.0)),
        delta: Var::constant(Tensor::full(&[1, 4, l, 1], std::f32::consts::LN_2)),
    };
    let y = selective_scan(&x, &p, None)?.y;
    let want = [0.5f32, 0.75, 0.875];
    Ok(y.data().iter().enumerate().map(|(i, v)| (v - want[i % l]).abs()).fold(0.0, f32::max))
}

fn weighted_sum(y: &Var, w: &Tensor) -> Result<Var> {
    Ok(y.mul(&Var::constant(w.clone()))?.sum())
}

type OpFn = Box<dyn Fn(&Var) -> Result<Var>>;

/// Finite-difference errors for each primitive op.
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f32)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let pos = uniform(&[2, 3, 4], 0.5, 2.0, &mut rng);
    let w = uniform(&[2, 3, 4], 0.5, 1.5, &mut rng);
    let m = uniform(&[4, 5], -1.0, 1.0, &mut rng);
    let wm = uniform(&[2, 3, 5], 0.5, 1.5, &mut rng);
    let g = uniform(&[4], 0.5, 1.5, &mut rng);
    let bta = uniform(&[4], -0.5, 0.5, &mut rng);
    let ker = uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
    let img = uniform(&[1, 5, 5, 4], -1.0, 1.0, &mut rng);
    let wimg = uniform(&[1, 5, 5, 4], 0.5, 1.5, &mut rng);

    let ws = |w: Tensor| move |y: Var| weighted_sum(&y, &w);
    // normalizing ops are blind to a constant readout; a one-hot one keeps
    // every gradient away from zero
    let one_hot = Tensor::from_fn(&[2, 3, 4], |i| if i % 4 == 0 { 3.0 } else { 0.0 });
    let cases: Vec<(&'static str, Tensor, OpFn)> = vec![
        ("add", x.clone(), { let (f, o) = (ws(w.clone()), pos.clone()); Box::new(move |v: &Var| f(v.add(&Var::constant(o.clone()))?)) }),
        ("mul", x.clone(), { let (f, o) = (ws(w.clone()), pos.clone()); Box::new(move |v: &Var| f(v.mul(&Var::constant(o.clone()))?)) }),
        ("div", pos.clone(), { let (f, o) = (ws(w.clone()), x.clone()); Box::new(move |v: &Var| f(Var::constant(o.clone()).div(v)?)) }),
        ("exp", x.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.exp())) }),
        ("log", pos.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.log())) }),
        ("softplus", x.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.softplus())) }),
        ("sigmoid", x.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.sigmoid())) }),
        ("silu", x.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.silu())) }),
        ("gelu", x.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.gelu())) }),
        ("sqrt", pos.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.sqrt())) }),
        ("square", x.clone(), { let f = ws(w.clone()); Box::new(move |v: &Var| f(v.square())) }),
        ("matmul", x.clone(), { let (f, o) = (ws(wm.clone()), m.clone()); Box::new(move |v: &Var| f(v.matmul(&Var::constant(o.clone()))?)) }),
        ("softmax", x.clone(), { let f = ws(one_hot.clone()); Box::new(move |v: &Var| f(v.softmax()?)) }),
        ("layernorm", x.clone(), {
            let (f, g, b) = (ws(one_hot.clone()), g.clone(), bta.clone());
            Box::new(move |v: &Var| f(v.layernorm(&Var::constant(g.clone()), &Var::constant(b.clone()))?))
        }),
        ("mean_axis", x.clone(), {
            let wr = w.reshaped(&[2, 3, 4]).expect("shape").data()[..8].to_vec();
            let wr = Tensor::new(&[2, 4], wr).expect("shape");
            Box::new(move |v: &Var| weighted_sum(&v.mean_axis(1)?, &wr))
        }),
        ("permute", x.clone(), {
            let wp = Tensor::new(&[4, 2, 3], w.data().to_vec()).expect("shape");
            Box::new(move |v: &Var| weighted_sum(&v.permute(&[2, 0, 1])?, &wp))
        }),
        ("conv2d_depthwise", img.clone(), {
            let (f, k) = (ws(wimg.clone()), ker.clone());
            Box::new(move |v: &Var| f(v.conv2d_depthwise(&Var::constant(k.clone()), 1)?))
        }),
    ];
    cases
        .into_iter()
        .map(|(name, input, f)| Ok((name, finite_diff_check(f, &input, 1e-2)?)))
        .collect()
}

/// Finite-difference error of a loss through the scan, taken w.r.t. the
/// input, Δ, B and C in turn.
pub fn scan_gradient_error(seed: u64) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, k, l, d, n) = (1, 4, 5, 2, 3);
    let x = uniform(&[b, k, l, d], -1.0, 1.0, &mut rng);
    let delta = uniform(&[b, k, l, d], 0.05, 0.5, &mut rng);
    let a = uniform(&[k, d, n], -1.5, -0.2, &mut rng);
    let bm = uniform(&[b, k, l, n], -1.0, 1.0, &mut rng);
    let cm = uniform(&[b, k, l, n], -1.0, 1.0, &mut rng);
    let h0 = uniform(&[b, k, d, n], -0.5, 0.5, &mut rng);
    let wy = uniform(&[b, k, l, d], -1.0, 1.0, &mut rng);
    let wh = uniform(&[b, k, d, n], -1.0, 1.0, &mut rng);
    let c = |t: &Tensor| Var::constant(t.clone());
    let loss = |x: &Var, p: &SsmParams, h: &Var| -> Result<Var> {
        let out = selective_scan(x, p, Some(h))?;
        weighted_sum(&out.y, &wy)?.add(&weighted_sum(&out.h_final, &wh)?)
    };
    let params = |dl: Var, bv: Var, cv: Var| SsmParams { a: c(&a), b: bv, c: cv, delta: dl };
    let errs = [
        finite_diff_check(|v| loss(v, &params(c(&delta), c(&bm), c(&cm)), &c(&h0)), &x, 1e-3)?,
        finite_diff_check(|v| loss(&c(&x), &params(v.clone(), c(&bm), c(&cm)), &c(&h0)), &delta, 1e-3)?,
        finite_diff_check(|v| loss(&c(&x), &params(c(&delta), v.clone(), c(&cm)), &c(&h0)), &bm, 1e-3)?,
        finite_diff_check(|v| loss(&c(&x), &params(c(&delta), c(&bm), v.clone()), &c(&h0)), &cm, 1e-3)?,
        finite_diff_check(|v| loss(&c(&x), &params(c(&delta), c(&bm), c(&cm)), v), &h0, 1e-3)?,
    ];
    Ok(errs.into_iter().fold(0.0, f32::max))
}

/// `|⟨scan(x), y⟩ − ⟨x, merge(y)⟩|` plus the window round-trip error.
pub fn geometry_error(seed: u64) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f32;
    for _ in 0..10 {
        let (h, w, d) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..4));
        let x = uniform(&[1, h, w, d], -1.0, 1.0, &mut rng);
        let y = uniform(&[1, 4, h * w, d], -1.0, 1.0, &mut rng);
        let xv = Var::constant(x.clone());
        let sx = cross_scan(&xv)?;
        let my = cross_merge(&Var::constant(y.clone()), h, w)?;
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
        worst = worst.max((dot(sx.data(), y.data()) - dot(x.data(), my.data())).abs() as f32);
        let win = (rng.gen_range(1..5), rng.gen_range(1..5));
        let back = window_merge(&window_partition(&xv, win)?)?;
        worst = worst.max(back.value().max_abs_diff(&x));
    }
    Ok(worst)
}

/// Runs every check; never panics on a failing check.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<f32>, tol: f32| {
        out.push(match r {
            Ok(v) => check(name, v, tol),
            Err(e) => CheckResult { name: name.into(), passed: false, detail: e.to_string() },
        })
    };
    push("scan_vs_kernel_oracle", scan_oracle_error(100, seed), SCAN_ORACLE_TOL);
    push("scan_unrolled", scan_unrolled_error(), 1e-6);
    push("scan_gradient", scan_gradient_error(seed), SCAN_GRAD_TOL);
    push("geometry_bijections", geometry_error(seed), 1e-5);
    match op_gradient_errors(seed) {
        Ok(v) => {
            for (name, e) in v {
                push(&format!("grad_{name}"), Ok(e), OP_GRAD_TOL);
            }
        }
        Err(e) => push("grad_ops", Err(e), OP_GRAD_TOL),
    }
    out
}
