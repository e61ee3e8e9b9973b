//! Selective state-space scan.
//!
//! The continuous system `h' = A h + B x, y = C h` is discretized with a
//! zero-order hold per time step:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) · ΔB
//! ```
//!
//! and evaluated as the recurrence `h_t = Ā_t ∘ h_{t−1} + B̄_t x_t`,
//! `y_t = ⟨C_t, h_t⟩`, independently for every `(batch, direction, channel)`
//! fiber. [`kernel_scan`] evaluates the same model as a causal convolution
//! and only accepts time-invariant parameters; it exists to cross-check the
//! recurrence.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::parallel::par_chunks_mut;
use crate::tensor::{profile, Tensor};

/// Below this |ΔA| the ZOH input factor uses its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-4;

/// Branch-free `exp` for the scan's inner loops, so they vectorize:
/// Cody–Waite reduction to `r ∈ [−ln2/2, ln2/2]`, a degree-13 Taylor
/// polynomial, and the exponent added to the result's bits. Within 1 ulp of
/// libm on [−708, 709]; results below that range come out as `exp(−708)`
/// rather than zero. NaN propagates.
#[inline(always)]
pub fn exp_fast(z: f64) -> f64 {
    // 1.5 · 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFT: f64 = 6755399441055744.0;
    const LN2_HI: f64 = 0.693_147_180_369_123_8;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_FACT: [f64; 14] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
    ];
    let z = z.clamp(-708.0, 709.0);
    let kd = z * std::f64::consts::LOG2_E + SHIFT;
    let bits = kd.to_bits();
    let k = kd - SHIFT;
    let r = (z - k * LN2_HI) - k * LN2_LO;
    let mut p = INV_FACT[13];
    for c in INV_FACT[..13].iter().rev() {
        p = p * r + c;
    }
    f64::from_bits(p.to_bits().wrapping_add(bits << 52))
}

/// `(exp(z), (exp(z) − 1)/z)`.
#[inline(always)]
pub fn zoh_factors(z: f64) -> (f64, f64) {
    let e = exp_fast(z);
    let phi = if z.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + z * (0.5 + z / 6.0)
    } else {
        (e - 1.0) / z
    };
    (e, phi)
}

/// d/dz of `(exp(z) − 1)/z`, given `e = exp(z)` and `phi = (e − 1)/z`.
#[inline(always)]
fn zoh_phi_prime(z: f64, e: f64, phi: f64) -> f64 {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        0.5 + z * (1.0 / 3.0 + z / 8.0)
    } else {
        (e - phi) / z
    }
}

/// Discretized transition and input matrices for one time step.
#[derive(Debug, Clone)]
pub struct DiscretizedPair {
    /// `[D, N]`, every entry in (0, 1).
    pub abar: Tensor,
    /// `[D, N]`
    pub bbar: Tensor,
}

/// Zero-order-hold discretization of `A: [D, N]` with step `delta: [D]` and
/// input vector `b: [N]`.
pub fn discretize_zoh(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<DiscretizedPair> {
    let (d, n) = match a.shape() {
        &[d, n] => (d, n),
        s => return Err(shape_err("discretize_zoh", format!("A {:?}", s))),
    };
    if b.shape() != [n] || delta.shape() != [d] {
        return Err(shape_err(
            "discretize_zoh",
            format!("A {:?}, B {:?}, delta {:?}", a.shape(), b.shape(), delta.shape()),
        ));
    }
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("time step must be positive, got {bad}")));
    }
    if let Some(bad) = a.data().iter().find(|&&v| !(v < 0.0)) {
        return Err(Error::Domain(format!("A must be strictly negative, got {bad}")));
    }
    let mut abar = Vec::with_capacity(d * n);
    let mut bbar = Vec::with_capacity(d * n);
    for i in 0..d {
        let dt = delta.data()[i] as f64;
        for j in 0..n {
            let (e, phi) = zoh_factors(dt * a.data()[i * n + j] as f64);
            abar.push(e as f32);
            bbar.push((phi * dt * b.data()[j] as f64) as f32);
        }
    }
    Ok(DiscretizedPair {
        abar: Tensor::new(&[d, n], abar)?,
        bbar: Tensor::new(&[d, n], bbar)?,
    })
}

/// Learnable weights of the parametrization function for `K` directions.
#[derive(Clone)]
pub struct ParamFnWeights {
    /// `[K, D, N]`
    pub w_b: Var,
    /// `[K, D, N]`
    pub w_c: Var,
    /// `[K, D, D]`
    pub w_delta: Var,
    /// `[K, D, N]`; `A = −exp(param_a)`
    pub param_a: Var,
    /// `[K, D]`; bias of the time-step projection
    pub param_delta: Var,
}

/// Per-step system matrices for a batch of scans.
#[derive(Clone)]
pub struct SsmParams {
    /// `[K, D, N]`, strictly negative.
    pub a: Var,
    /// `[B, K, L, N]`
    pub b: Var,
    /// `[B, K, L, N]`
    pub c: Var,
    /// `[B, K, L, D]`, strictly positive.
    pub delta: Var,
}

/// `A_n = −n` for every channel, stored as `ln n`.
pub fn init_param_a(k: usize, d: usize, n: usize) -> Tensor {
    Tensor::from_fn(&[k, d, n], |i| ((i % n) as f32 + 1.0).ln())
}

/// Biases whose softplus lands log-uniformly in `[1e-3, 0.1]`.
pub fn init_param_delta(k: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
    Tensor::from_fn(&[k, d], |_| {
        let dt = rng.gen_range(lo..hi).exp();
        // inverse softplus
        (dt + (-(-dt).exp_m1()).ln()) as f32
    })
}

/// Computes `(A, B, C, Δ)` from scan tokens `x: [B, K, L, D]`. Direction `k`
/// uses only slice `k` of every weight.
pub fn param_fn(x: &Var, w: &ParamFnWeights) -> Result<SsmParams> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(shape_err("param_fn", format!("tokens {:?}", xs)));
    }
    let (k, l, d) = (xs[1], xs[2], xs[3]);
    let wd = w.w_delta.shape();
    if w.w_b.shape()[..2] != [k, d] || w.w_c.shape() != w.w_b.shape() || wd != [k, d, d] {
        return Err(shape_err(
            "param_fn",
            format!(
                "tokens {:?} vs weights B {:?}, C {:?}, delta {:?}",
                xs,
                w.w_b.shape(),
                w.w_c.shape(),
                wd
            ),
        ));
    }
    if w.param_a.shape() != w.w_b.shape() || w.param_delta.shape() != [k, d] {
        return Err(shape_err(
            "param_fn",
            format!("param_a {:?}, param_delta {:?}", w.param_a.shape(), w.param_delta.shape()),
        ));
    }
    let b = x.matmul(&w.w_b)?;
    let c = x.matmul(&w.w_c)?;
    let bias = w.param_delta.expand_axis(1, l)?;
    let delta = x.matmul(&w.w_delta)?.add(&bias)?.softplus();
    let a = w.param_a.exp().neg();
    Ok(SsmParams { a, b, c, delta })
}

/// Scan result: outputs for every step and the state after the last one.
pub struct ScanOutput {
    /// `[B, K, L, D]`
    pub y: Var,
    /// `[B, K, D, N]`
    pub h_final: Var,
}

struct Dims {
    bk: usize,
    k: usize,
    l: usize,
    d: usize,
    n: usize,
}

fn scan_dims(u: &[usize], p: &SsmParams, h0: Option<&Var>) -> Result<Dims> {
    let bad = || {
        shape_err(
            "selective_scan",
            format!(
                "x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, h0 {:?}",
                u,
                p.delta.shape(),
                p.a.shape(),
                p.b.shape(),
                p.c.shape(),
                h0.map(|h| h.shape().to_vec())
            ),
        )
    };
    let &[b, k, l, d] = u else { return Err(bad()) };
    let n = *p.a.shape().last().ok_or_else(bad)?;
    let ok = p.delta.shape() == u
        && p.a.shape() == [k, d, n]
        && p.b.shape() == [b, k, l, n]
        && p.c.shape() == [b, k, l, n]
        && h0.map_or(true, |h| h.shape() == [b, k, d, n]);
    if !ok {
        return Err(bad());
    }
    Ok(Dims { bk: b * k, k, l, d, n })
}

/// Runs the recurrence over one `(batch, direction)` block, writing `y` as
/// `[L, D]` and the final state as `[D, N]`.
#[allow(clippy::too_many_arguments)]
fn scan_block(
    u: &[f32],
    delta: &[f32],
    a: &[f32],
    bm: &[f32],
    cm: &[f32],
    h0: Option<&[f32]>,
    dims: (usize, usize, usize),
    y: &mut [f32],
    h_out: &mut [f32],
) {
    let (l, d, n) = dims;
    let mut h = vec![0f64; n];
    let mut e = vec![0f64; n];
    let mut drive = vec![0f64; n];
    for ch in 0..d {
        match h0 {
            Some(h0) => h.iter_mut().zip(&h0[ch * n..(ch + 1) * n]).for_each(|(s, &v)| *s = v as f64),
            None => h.fill(0.0),
        }
        let arow = &a[ch * n..(ch + 1) * n];
        for t in 0..l {
            let dt = delta[t * d + ch] as f64;
            let x = u[t * d + ch] as f64;
            let step = t * n..(t + 1) * n;
            discretize_row(dt, x, arow, &bm[step.clone()], &mut e, &mut drive);
            for ((hj, &ej), &bj) in h.iter_mut().zip(&e).zip(&drive) {
                *hj = ej * *hj + bj;
            }
            let acc = h.iter().zip(&cm[step]).fold(0f64, |acc, (&hj, &cj)| acc + cj as f64 * hj);
            y[t * d + ch] = acc as f32;
        }
        for (o, &s) in h_out[ch * n..(ch + 1) * n].iter_mut().zip(&h) {
            *o = s as f32;
        }
    }
}

/// One step's `Ā` row into `e` and `B̄ x` into `drive`.
#[inline(always)]
fn discretize_row(dt: f64, x: f64, arow: &[f32], brow: &[f32], e: &mut [f64], drive: &mut [f64]) {
    for (((ej, dj), &aj), &bj) in e.iter_mut().zip(drive.iter_mut()).zip(arow).zip(brow) {
        let (ee, phi) = zoh_factors(dt * aj as f64);
        *ej = ee;
        *dj = dt * bj as f64 * phi * x;
    }
}

/// Gradient buffers for one `(batch, direction)` block, laid out as
/// `[gu (L·D) | gdelta (L·D) | gb (L·N) | gc (L·N) | ga (D·N) | gh0 (D·N)]`.
#[allow(clippy::too_many_arguments)]
fn scan_block_backward(
    u: &[f32],
    delta: &[f32],
    a: &[f32],
    bm: &[f32],
    cm: &[f32],
    h0: Option<&[f32]>,
    gy: &[f32],
    gh_final: &[f32],
    dims: (usize, usize, usize),
    out: &mut [f32],
) {
    let (l, d, n) = dims;
    let (gu, rest) = out.split_at_mut(l * d);
    let (gdelta, rest) = rest.split_at_mut(l * d);
    let (gb, rest) = rest.split_at_mut(l * n);
    let (gc, rest) = rest.split_at_mut(l * n);
    let (ga, gh0) = rest.split_at_mut(d * n);
    let mut gb_acc = vec![0f64; l * n];
    let mut gc_acc = vec![0f64; l * n];
    // states h_0..h_L and per-step factors, reused for every channel
    let mut hs = vec![0f64; (l + 1) * n];
    let mut es = vec![0f64; l * n];
    let mut phis = vec![0f64; l * n];
    let mut gh = vec![0f64; n];
    let mut ga_row = vec![0f64; n];
    // per-state terms of the input and step gradients, summed in order of j
    let mut tx = vec![0f64; n];
    let mut tdt = vec![0f64; n];
    for ch in 0..d {
        let arow = &a[ch * n..(ch + 1) * n];
        match h0 {
            Some(h0) => hs[..n].iter_mut().zip(&h0[ch * n..(ch + 1) * n]).for_each(|(s, &v)| *s = v as f64),
            None => hs[..n].fill(0.0),
        }
        for t in 0..l {
            let dt = delta[t * d + ch] as f64;
            let x = u[t * d + ch] as f64;
            let step = t * n..(t + 1) * n;
            let (done, next) = hs[t * n..(t + 2) * n].split_at_mut(n);
            let rows = es[step.clone()].iter_mut().zip(&mut phis[step.clone()]).zip(arow).zip(&bm[step]);
            for ((((ej, pj), &aj), &bj), (hn, &hp)) in rows.zip(next.iter_mut().zip(done.iter())) {
                let (e, phi) = zoh_factors(dt * aj as f64);
                *ej = e;
                *pj = phi;
                *hn = e * hp + dt * bj as f64 * phi * x;
            }
        }
        for (g, &v) in gh.iter_mut().zip(&gh_final[ch * n..(ch + 1) * n]) {
            *g = v as f64;
        }
        ga_row.fill(0.0);
        for t in (0..l).rev() {
            let gyt = gy[t * d + ch] as f64;
            let dt = delta[t * d + ch] as f64;
            let x = u[t * d + ch] as f64;
            let step = t * n..(t + 1) * n;
            let (h_prev, h_cur) = hs[t * n..(t + 2) * n].split_at(n);
            let state = gh.iter_mut().zip(&mut ga_row).zip(&mut gc_acc[step.clone()]).zip(&mut gb_acc[step.clone()]);
            let inputs = cm[step.clone()].iter().zip(&bm[step.clone()]).zip(arow);
            let factors = es[step.clone()].iter().zip(&phis[step]).zip(h_prev.iter().zip(h_cur));
            let terms = tx.iter_mut().zip(tdt.iter_mut());
            for (((((g, ga_j), gc_j), gb_j), ((&cj, &bj), &aj)), (((&e, &phi), (&hp, &hc)), (tx_j, tdt_j))) in
                state.zip(inputs).zip(factors.zip(terms))
            {
                let (cj, bj, aj) = (cj as f64, bj as f64, aj as f64);
                let gv = *g + gyt * cj;
                *gc_j += gyt * hc;
                let dphi = zoh_phi_prime(dt * aj, e, phi);
                *tx_j = gv * dt * bj * phi;
                *gb_j += gv * dt * phi * x;
                *tdt_j = gv * (e * aj * hp + bj * x * (phi + dt * dphi * aj));
                *ga_j += gv * (e * dt * hp + bj * x * dt * dt * dphi);
                *g = gv * e;
            }
            gu[t * d + ch] = tx.iter().sum::<f64>() as f32;
            gdelta[t * d + ch] = tdt.iter().sum::<f64>() as f32;
        }
        for j in 0..n {
            ga[ch * n + j] = ga_row[j] as f32;
            gh0[ch * n + j] = gh[j] as f32;
        }
    }
    for (o, v) in gb.iter_mut().zip(&gb_acc) {
        *o = *v as f32;
    }
    for (o, v) in gc.iter_mut().zip(&gc_acc) {
        *o = *v as f32;
    }
}

/// Selective scan over `x: [B, K, L, D]`. Every fiber starts from `h0`
/// (zeros when absent) and is processed strictly left to right.
pub fn selective_scan(x: &Var, p: &SsmParams, h0: Option<&Var>) -> Result<ScanOutput> {
    let dims = scan_dims(x.shape(), p, h0)?;
    let Dims { bk, k, l, d, n } = dims;
    let block = l * d + d * n;
    let mut work = vec![0f32; bk * block];
    {
        let (u, dl, a, bm, cm) = (x.data(), p.delta.data(), p.a.data(), p.b.data(), p.c.data());
        let h0d = h0.map(|h| h.data());
        par_chunks_mut(&mut work, block, |i, chunk| {
            let kk = i % k;
            let (y, h) = chunk.split_at_mut(l * d);
            scan_block(
                &u[i * l * d..(i + 1) * l * d],
                &dl[i * l * d..(i + 1) * l * d],
                &a[kk * d * n..(kk + 1) * d * n],
                &bm[i * l * n..(i + 1) * l * n],
                &cm[i * l * n..(i + 1) * l * n],
                h0d.map(|h| &h[i * d * n..(i + 1) * d * n]),
                (l, d, n),
                y,
                h,
            );
        });
    }
    profile::add_flops((3 * bk * l * d * n) as u64);
    let (ny, nh) = (bk * l * d, bk * d * n);
    let mut flat = Vec::with_capacity(ny + nh);
    for c in work.chunks(block) {
        flat.extend_from_slice(&c[..l * d]);
    }
    for c in work.chunks(block) {
        flat.extend_from_slice(&c[l * d..]);
    }
    drop(work);
    let out = Tensor::from_parts(vec![ny + nh], flat);

    let mut parents: Vec<&Var> = vec![x, &p.delta, &p.a, &p.b, &p.c];
    if let Some(h) = h0 {
        parents.push(h);
    }
    let has_h0 = h0.is_some();
    let joint = Var::record("selective_scan", out, &parents, move |g, ins, _| {
        let (u, dl, a, bm, cm) = (ins[0].data(), ins[1].data(), ins[2].data(), ins[3].data(), ins[4].data());
        let h0d = if has_h0 { Some(ins[5].data()) } else { None };
        let (gy_all, gh_all) = g.data().split_at(ny);
        let gblock = 2 * l * d + 2 * l * n + 2 * d * n;
        let mut gwork = vec![0f32; bk * gblock];
        par_chunks_mut(&mut gwork, gblock, |i, chunk| {
            let kk = i % k;
            scan_block_backward(
                &u[i * l * d..(i + 1) * l * d],
                &dl[i * l * d..(i + 1) * l * d],
                &a[kk * d * n..(kk + 1) * d * n],
                &bm[i * l * n..(i + 1) * l * n],
                &cm[i * l * n..(i + 1) * l * n],
                h0d.map(|h| &h[i * d * n..(i + 1) * d * n]),
                &gy_all[i * l * d..(i + 1) * l * d],
                &gh_all[i * d * n..(i + 1) * d * n],
                (l, d, n),
                chunk,
            );
        });
        let mut gu = Vec::with_capacity(bk * l * d);
        let mut gdelta = Vec::with_capacity(bk * l * d);
        let mut gb = Vec::with_capacity(bk * l * n);
        let mut gc = Vec::with_capacity(bk * l * n);
        let mut ga = vec![0f64; k * d * n];
        let mut gh0 = Vec::with_capacity(bk * d * n);
        for (i, c) in gwork.chunks(gblock).enumerate() {
            let (s1, r) = c.split_at(l * d);
            let (s2, r) = r.split_at(l * d);
            let (s3, r) = r.split_at(l * n);
            let (s4, r) = r.split_at(l * n);
            let (s5, s6) = r.split_at(d * n);
            gu.extend_from_slice(s1);
            gdelta.extend_from_slice(s2);
            gb.extend_from_slice(s3);
            gc.extend_from_slice(s4);
            let kk = i % k;
            for (acc, &v) in ga[kk * d * n..(kk + 1) * d * n].iter_mut().zip(s5) {
                *acc += v as f64;
            }
            gh0.extend_from_slice(s6);
        }
        let mut grads = vec![
            Some(Tensor::from_parts(ins[0].shape().to_vec(), gu)),
            Some(Tensor::from_parts(ins[1].shape().to_vec(), gdelta)),
            Some(Tensor::from_parts(ins[2].shape().to_vec(), ga.into_iter().map(|v| v as f32).collect())),
            Some(Tensor::from_parts(ins[3].shape().to_vec(), gb)),
            Some(Tensor::from_parts(ins[4].shape().to_vec(), gc)),
        ];
        if has_h0 {
            grads.push(Some(Tensor::from_parts(ins[5].shape().to_vec(), gh0)));
        }
        grads
    });
    let bsz = x.shape()[0];
    let y = joint.slice(0, 0, ny)?.reshape(&[bsz, k, l, d])?;
    let h_final = joint.slice(0, ny, nh)?.reshape(&[bsz, k, d, n])?;
    Ok(ScanOutput { y, h_final })
}

fn constant_over_steps(t: &Tensor, l: usize) -> bool {
    let s = t.shape();
    let inner = s[s.len() - 1];
    t.data()
        .chunks(l * inner)
        .all(|blk| blk.chunks(inner).all(|row| row == &blk[..inner]))
}

/// Convolutional evaluation `y = x ⊛ K̄` with
/// `K̄ = (C B̄, C Ā B̄, …, C Ā^{L−1} B̄)` per channel.
///
/// Accepts the same inputs as [`selective_scan`] but rejects parameters that
/// change along the sequence.
pub fn kernel_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Tensor> {
    let &[bs, k, l, d] = x.shape() else {
        return Err(shape_err("kernel_scan", format!("x {:?}", x.shape())));
    };
    let n = *a.shape().last().unwrap_or(&0);
    if delta.shape() != x.shape() || a.shape() != [k, d, n] || b.shape() != [bs, k, l, n] || c.shape() != b.shape() {
        return Err(shape_err(
            "kernel_scan",
            format!("x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}", x.shape(), delta.shape(), a.shape(), b.shape(), c.shape()),
        ));
    }
    if !(constant_over_steps(delta, l) && constant_over_steps(b, l) && constant_over_steps(c, l)) {
        return Err(Error::Contract(
            "kernel_scan needs time-invariant delta, B and C".into(),
        ));
    }
    let mut y = vec![0f32; x.numel()];
    let mut kernel = vec![0f64; l];
    for i in 0..bs * k {
        let kk = i % k;
        let brow = &b.data()[i * l * n..i * l * n + n];
        let crow = &c.data()[i * l * n..i * l * n + n];
        for ch in 0..d {
            let dt = delta.data()[i * l * d + ch] as f64;
            kernel.fill(0.0);
            for j in 0..n {
                let (abar, phi) = zoh_factors(dt * a.data()[(kk * d + ch) * n + j] as f64);
                let bbar = phi * dt * brow[j] as f64;
                let mut pow = 1.0;
                for kv in kernel.iter_mut() {
                    *kv += crow[j] as f64 * pow * bbar;
                    pow *= abar;
                }
            }
            for t in 0..l {
                let mut acc = 0f64;
                for (j, kv) in kernel.iter().enumerate().take(t + 1) {
                    acc += kv * x.data()[i * l * d + (t - j) * d + ch] as f64;
                }
                y[i * l * d + t * d + ch] = acc as f32;
            }
        }
    }
    Tensor::new(x.shape(), y)
}
