//! VMamba and local-enhanced VMamba (LEVM) blocks with state sharing.
//!
//! ```text
//! vmamba_block(x, h_prev):
//!   s        = cross_scan(norm1(x))              [B, 4, L, D]
//!   s        = s + α ∘ (g(s) · h(h_prev)ᵀ)       (state sharing, when h_prev given)
//!   A,B,C,Δ  = param_fn(s)
//!   y, h     = selective_scan(s; A, B, C, Δ)     per direction, h₀ = 0
//!   r        = cross_merge(y) + x
//!   out      = ffn(norm2(r)) + r
//!
//! levm_block(x):
//!   W'       = vmamba_block(window_partition(x), h_local_prev)
//!   x'       = window_merge(W') + x
//!   out      = vmamba_block(x', h_global_prev)
//! ```

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{cross_merge, cross_scan, window_merge, window_partition, WindowGrid, DIRECTIONS};
use crate::params::{Bound, Init, ParamStore};
use crate::ssm::{init_param_a, init_param_delta, param_fn, selective_scan, ParamFnWeights};
use crate::tensor::Tensor;

/// Initial value of every entry of the state-sharing gate `α`.
pub const ALPHA_INIT: f32 = 1e-2;
pub const FFN_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Local,
    Global,
}

/// Final scan states of one VMamba pass, `[B, 4, D, N]`.
#[derive(Clone, Debug)]
pub struct HiddenState {
    pub h: Var,
    pub scope: Scope,
    pub layer_index: usize,
}

impl HiddenState {
    pub fn dim(&self) -> usize {
        self.h.shape()[2]
    }

    pub fn state_dim(&self) -> usize {
        self.h.shape()[3]
    }
}

/// States entering a block through the adjacent and skip-connected flows.
#[derive(Clone, Copy, Default)]
pub struct PrevStates<'a> {
    pub adjacent: Option<&'a HiddenState>,
    pub skip: Option<&'a HiddenState>,
}

impl PrevStates<'_> {
    pub fn is_empty(&self) -> bool {
        self.adjacent.is_none() && self.skip.is_none()
    }
}

/// Maps an incoming state onto this block's width and state basis.
#[derive(Clone)]
pub struct StateProj {
    /// `[4, D', D]`, present when the incoming width differs.
    pub proj: Option<Var>,
    /// `[4, N, N]`, grouped per direction.
    pub w_h: Var,
}

#[derive(Clone)]
pub struct ShareWeights {
    /// `[4, D, N]`: tokens to the feature space `g`.
    pub w_g: Var,
    /// `[D]`
    pub alpha: Var,
    pub adjacent: Option<StateProj>,
    pub skip: Option<StateProj>,
}

#[derive(Clone)]
pub struct Ffn {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone)]
pub struct BlockWeights {
    pub param_fn: ParamFnWeights,
    pub share: Option<ShareWeights>,
    pub norm1: (Var, Var),
    pub norm2: (Var, Var),
    pub ffn: Ffn,
}

/// Structural description of one VMamba block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub dim: usize,
    pub state_dim: usize,
    /// Width of the state arriving through the adjacent flow, if any.
    pub adjacent_dim: Option<usize>,
    /// Whether a skip-connected state arrives.
    pub skip: bool,
    pub state_share: bool,
}

fn init_state_proj(store: &mut ParamStore, prefix: &str, from: usize, d: usize, n: usize, init: &mut Init) -> Result<()> {
    if from != d {
        store.insert(format!("{prefix}.proj"), init.fan_in(&[DIRECTIONS, from, d], from))?;
    }
    store.insert(format!("{prefix}.w_h"), init.fan_in(&[DIRECTIONS, n, n], n))
}

/// Adds freshly initialized parameters for one block under `prefix`.
pub fn init_block(store: &mut ParamStore, prefix: &str, s: &BlockShape, init: &mut Init) -> Result<()> {
    let (d, n, k) = (s.dim, s.state_dim, DIRECTIONS);
    store.insert(format!("{prefix}.w_b"), init.fan_in(&[k, d, n], d))?;
    store.insert(format!("{prefix}.w_c"), init.fan_in(&[k, d, n], d))?;
    store.insert(format!("{prefix}.w_delta"), init.fan_in(&[k, d, d], d))?;
    store.insert(format!("{prefix}.param_a"), init_param_a(k, d, n))?;
    let pd = init_param_delta(k, d, init.rng());
    store.insert(format!("{prefix}.param_delta"), pd)?;
    if s.state_share && (s.adjacent_dim.is_some() || s.skip) {
        store.insert(format!("{prefix}.share.w_g"), init.fan_in(&[k, d, n], d))?;
        store.insert(format!("{prefix}.share.alpha"), Tensor::full(&[d], ALPHA_INIT))?;
        if let Some(from) = s.adjacent_dim {
            init_state_proj(store, &format!("{prefix}.share.adj"), from, d, n, init)?;
        }
        if s.skip {
            init_state_proj(store, &format!("{prefix}.share.skip"), d, d, n, init)?;
        }
    }
    for norm in ["norm1", "norm2"] {
        store.insert(format!("{prefix}.{norm}.gamma"), Tensor::full(&[d], 1.0))?;
        store.insert(format!("{prefix}.{norm}.beta"), Tensor::zeros(&[d]))?;
    }
    let hidden = FFN_EXPANSION * d;
    store.insert(format!("{prefix}.ffn.w1"), init.fan_in(&[d, hidden], d))?;
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]))?;
    store.insert(format!("{prefix}.ffn.w2"), init.fan_in(&[hidden, d], hidden))?;
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]))?;
    Ok(())
}

fn bind_state_proj(bound: &Bound, prefix: &str) -> Option<Result<StateProj>> {
    let w_h = bound.get_opt(&format!("{prefix}.w_h"))?;
    Some(Ok(StateProj {
        proj: bound.get_opt(&format!("{prefix}.proj")),
        w_h,
    }))
}

impl BlockWeights {
    /// Looks up the parameters created by [`init_block`] under `prefix`.
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let g = |name: &str| bound.get(&format!("{prefix}.{name}"));
        let share = match bound.get_opt(&format!("{prefix}.share.w_g")) {
            Some(w_g) => Some(ShareWeights {
                w_g,
                alpha: g("share.alpha")?,
                adjacent: bind_state_proj(bound, &format!("{prefix}.share.adj")).transpose()?,
                skip: bind_state_proj(bound, &format!("{prefix}.share.skip")).transpose()?,
            }),
            None => None,
        };
        Ok(BlockWeights {
            param_fn: ParamFnWeights {
                w_b: g("w_b")?,
                w_c: g("w_c")?,
                w_delta: g("w_delta")?,
                param_a: g("param_a")?,
                param_delta: g("param_delta")?,
            },
            share,
            norm1: (g("norm1.gamma")?, g("norm1.beta")?),
            norm2: (g("norm2.gamma")?, g("norm2.beta")?),
            ffn: Ffn {
                w1: g("ffn.w1")?,
                b1: g("ffn.b1")?,
                w2: g("ffn.w2")?,
                b2: g("ffn.b2")?,
            },
        })
    }
}

fn project_state(state: &HiddenState, p: &StateProj) -> Result<Var> {
    let n = p.w_h.shape()[1];
    if state.state_dim() != n {
        return Err(shape_err(
            "s2l_state_share",
            format!("state {:?} has N = {}, weights expect N = {n}", state.h.shape(), state.state_dim()),
        ));
    }
    let h = match &p.proj {
        // [B, 4, D', N] -> [B, 4, N, D'] · [4, D', D] -> [B, 4, D, N]
        Some(w) => state.h.transpose()?.matmul(w)?.transpose()?,
        None => state.h.clone(),
    };
    h.matmul(&p.w_h)
}

/// State sharing on scan tokens `x: [B, 4, L, D]`:
/// `x + α ∘ (g · hᵀ)` with `h = Linear(h_prev)` (`[B, 4, D, N]`, adjacent and
/// skip contributions summed) and `g = Linear(x)` (`[B, 4, L, N]`).
pub fn s2l_state_share(x: &Var, prev: PrevStates, w: &ShareWeights) -> Result<Var> {
    let mut h: Option<Var> = None;
    for (state, proj, flow) in [(prev.adjacent, &w.adjacent, "adjacent"), (prev.skip, &w.skip, "skip")] {
        let Some(state) = state else { continue };
        let proj = proj
            .as_ref()
            .ok_or_else(|| Error::Wiring(format!("{flow} state supplied to a block without {flow} weights")))?;
        let ph = project_state(state, proj)?;
        h = Some(match h {
            Some(acc) => acc.add(&ph)?,
            None => ph,
        });
    }
    let Some(h) = h else { return Ok(x.clone()) };
    let g = x.matmul(&w.w_g)?;
    let hg = g.matmul(&h.transpose()?)?;
    x.add(&hg.mul(&w.alpha)?)
}

fn ffn(x: &Var, w: &Ffn) -> Result<Var> {
    x.linear(&w.w1, Some(&w.b1))?.gelu().linear(&w.w2, Some(&w.b2))
}

/// One VMamba pass over `x: [B, H, W, D]`. Returns the output map and the
/// final scan states `[B, 4, D, N]`.
pub fn vmamba_block(x: &Var, prev: PrevStates, w: &BlockWeights) -> Result<(Var, Var)> {
    let (h, wd) = match *x.shape() {
        [_, h, w, _] => (h, w),
        ref s => return Err(shape_err("vmamba_block", format!("expected [B, H, W, D], got {:?}", s))),
    };
    x.value().check_finite("vmamba_block input")?;
    let xn = x.layernorm(&w.norm1.0, &w.norm1.1)?;
    let mut s = cross_scan(&xn)?;
    if let Some(share) = &w.share {
        if !prev.is_empty() {
            s = s2l_state_share(&s, prev, share)?;
        }
    }
    let p = param_fn(&s, &w.param_fn)?;
    let scan = selective_scan(&s, &p, None)?;
    let r = cross_merge(&scan.y, h, wd)?.add(x)?;
    let out = ffn(&r.layernorm(&w.norm2.0, &w.norm2.1)?, &w.ffn)?.add(&r)?;
    Ok((out, scan.h_final))
}

#[derive(Clone)]
pub struct LevmWeights {
    pub local: BlockWeights,
    pub global: BlockWeights,
}

pub struct LevmOutput {
    pub x: Var,
    /// Window states averaged over windows.
    pub local: HiddenState,
    pub global: HiddenState,
}

/// Repeats a `[B, 4, D, N]` state for each of `windows` windows per image.
fn expand_over_windows(s: &HiddenState, windows: usize) -> Result<HiddenState> {
    let sh = s.h.shape().to_vec();
    let h = s
        .h
        .expand_axis(1, windows)?
        .reshape(&[sh[0] * windows, sh[1], sh[2], sh[3]])?;
    Ok(HiddenState { h, ..s.clone() })
}

/// Local (windowed) pass, merge residual, then global pass.
pub fn levm_block(
    x: &Var,
    local_prev: Option<&HiddenState>,
    global_prev: PrevStates,
    window: (usize, usize),
    w: &LevmWeights,
    layer_index: usize,
) -> Result<LevmOutput> {
    let grid = window_partition(x, window)?;
    let windows = grid.num_windows();
    let expanded = local_prev.map(|s| expand_over_windows(s, windows)).transpose()?;
    let (local_out, h_local) = vmamba_block(
        &grid.windows,
        PrevStates {
            adjacent: expanded.as_ref(),
            skip: None,
        },
        &w.local,
    )?;
    let merged = window_merge(&WindowGrid {
        windows: local_out,
        ..grid
    })?;
    let x_mid = merged.add(x)?;
    let (out, h_global) = vmamba_block(&x_mid, global_prev, &w.global)?;

    let hs = h_local.shape().to_vec();
    let batch = x.shape()[0];
    let h_local = h_local
        .reshape(&[batch, windows, hs[1], hs[2], hs[3]])?
        .mean_axis(1)?;
    Ok(LevmOutput {
        x: out,
        local: HiddenState {
            h: h_local,
            scope: Scope::Local,
            layer_index,
        },
        global: HiddenState {
            h: h_global,
            scope: Scope::Global,
            layer_index,
        },
    })
}
