use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::parallel::par_chunks_mut;
use crate::tensor::{profile, Tensor};

/// Rows of `out` handled per work item; bounds the f64 scratch buffer.
const GEMM_ROWS: usize = 64;

/// `out = a · b` for row-major `a: m×k`, `b: k×n` (already widened to f64),
/// accumulating in f64. Every output element sums its `k` products in order of `p`.
pub(crate) fn gemm(a: &[f32], bd: &[f64], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bd.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    par_chunks_mut(out, GEMM_ROWS * n, |blk, block_out| {
        let rows = block_out.len() / n;
        let mut acc = vec![0f64; rows * n];
        // four rows at a time share each row of `b`
        for (g, acc4) in acc.chunks_mut(4 * n).enumerate() {
            let i0 = blk * GEMM_ROWS + 4 * g;
            if acc4.len() == 4 * n {
                let (c0, rest) = acc4.split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                let ar = |r: usize| &a[(i0 + r) * k..(i0 + r + 1) * k];
                let (a0, a1, a2, a3) = (ar(0), ar(1), ar(2), ar(3));
                for (p, brow) in bd.chunks_exact(n).enumerate() {
                    let (x0, x1, x2, x3) = (a0[p] as f64, a1[p] as f64, a2[p] as f64, a3[p] as f64);
                    let cols = c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut()).zip(brow);
                    for ((((s0, s1), s2), s3), &bv) in cols {
                        *s0 += x0 * bv;
                        *s1 += x1 * bv;
                        *s2 += x2 * bv;
                        *s3 += x3 * bv;
                    }
                }
            } else {
                for (r, acc_row) in acc4.chunks_mut(n).enumerate() {
                    let i = i0 + r;
                    for (&av, brow) in a[i * k..(i + 1) * k].iter().zip(bd.chunks_exact(n)) {
                        let av = av as f64;
                        for (s, &bv) in acc_row.iter_mut().zip(brow) {
                            *s += av * bv;
                        }
                    }
                }
            }
        }
        for (o, s) in block_out.iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    });
}

pub(crate) fn widen(a: &[f32]) -> Vec<f64> {
    a.iter().map(|&v| v as f64).collect()
}

pub(crate) fn transpose2(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0f32; a.len()];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// `transpose2` widened to f64, for use as the right operand of `gemm`.
fn transpose2_wide(a: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0f64; a.len()];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * rows + r] = v as f64;
        }
    }
    t
}

struct Plan {
    m: usize,
    k: usize,
    n: usize,
    batches: usize,
    a_batches: usize,
    b_batches: usize,
    out_shape: Vec<usize>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", format!("{:?} x {:?}: need rank >= 2", a, b)));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let suffix = |big: &[usize], small: &[usize]| big.len() >= small.len() && big[big.len() - small.len()..] == *small;
    if k != k2 || !(suffix(ab, bb) || suffix(bb, ab)) {
        return Err(shape_err("matmul", format!("{:?} x {:?}", a, b)));
    }
    let batch = if ab.len() >= bb.len() { ab } else { bb };
    let mut out_shape = batch.to_vec();
    out_shape.extend([m, n]);
    Ok(Plan {
        m,
        k,
        n,
        batches: batch.iter().product(),
        a_batches: ab.iter().product(),
        b_batches: bb.iter().product(),
        out_shape,
    })
}

impl Var {
    /// Batched matrix product over the last two axes. Leading batch axes must
    /// match, or one operand's batch axes must be a trailing suffix of the
    /// other's (that operand is reused across the remaining leading axes).
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let p = plan(self.shape(), other.shape())?;
        let (m, k, n) = (p.m, p.k, p.n);
        let mut out = vec![0f32; p.batches * m * n];
        let bd = widen(other.data());
        // a right operand without batch axes turns the batch into one tall product
        if p.b_batches == 1 {
            gemm(self.data(), &bd, p.batches * m, k, n, &mut out);
        } else {
            for bi in 0..p.batches {
                let ai = bi % p.a_batches;
                let bj = bi % p.b_batches;
                gemm(
                    &self.data()[ai * m * k..(ai + 1) * m * k],
                    &bd[bj * k * n..(bj + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        profile::add_flops((p.batches * m * k * n) as u64);
        let out = Tensor::from_parts(p.out_shape.clone(), out);
        let (batches, a_batches, b_batches) = (p.batches, p.a_batches, p.b_batches);
        Ok(Var::record("matmul", out, &[self, other], move |g, ins, _| {
            let (a, b) = (ins[0], ins[1]);
            let mut ga = vec![0f32; a.numel()];
            let mut gb = vec![0f32; b.numel()];
            let gd = widen(g.data());
            if b_batches == 1 {
                let rows = batches * m;
                // dA = dC · Bᵀ
                gemm(g.data(), &transpose2_wide(b.data(), k, n), rows, n, k, &mut ga);
                // dB = Aᵀ · dC
                gemm(&transpose2(a.data(), rows, k), &gd, k, rows, n, &mut gb);
            } else {
                let bt: Vec<Vec<f64>> = b.data().chunks_exact(k * n).map(|blk| transpose2_wide(blk, k, n)).collect();
                let at: Vec<Vec<f32>> = a.data().chunks_exact(m * k).map(|blk| transpose2(blk, m, k)).collect();
                let mut tmp_a = vec![0f32; m * k];
                let mut tmp_b = vec![0f32; k * n];
                for bi in 0..batches {
                    let ai = bi % a_batches;
                    let bj = bi % b_batches;
                    // dA = dC · Bᵀ
                    gemm(&g.data()[bi * m * n..(bi + 1) * m * n], &bt[bj], m, n, k, &mut tmp_a);
                    for (d, s) in ga[ai * m * k..(ai + 1) * m * k].iter_mut().zip(&tmp_a) {
                        *d += s;
                    }
                    // dB = Aᵀ · dC
                    gemm(&at[ai], &gd[bi * m * n..(bi + 1) * m * n], k, m, n, &mut tmp_b);
                    for (d, s) in gb[bj * k * n..(bj + 1) * k * n].iter_mut().zip(&tmp_b) {
                        *d += s;
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                Some(Tensor::from_parts(b.shape().to_vec(), gb)),
            ]
        }))
    }

    /// `x · w (+ bias)` along the last axis. `w` is `[.., in, out]` with its
    /// batch axes (if any) trailing-aligned to `x`'s leading axes.
    pub fn linear(&self, w: &Var, bias: Option<&Var>) -> Result<Var> {
        let y = self.matmul(w)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::backward;

    #[test]
    fn identity_product() {
        let eye = Var::constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let m = Var::constant(Tensor::from_fn(&[3, 3], |i| i as f32 * 0.5 - 1.0));
        assert_eq!(eye.matmul(&m).unwrap().value(), m.value());
    }

    #[test]
    fn shared_weight_over_batch() {
        // x: [2, 2, 3], w: [3, 1] applied to both batch entries
        let x = Var::param(Tensor::from_fn(&[2, 2, 3], |i| i as f32));
        let w = Var::param(Tensor::new(&[3, 1], vec![1.0, 0.0, -1.0]).unwrap());
        let y = x.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1]);
        assert_eq!(y.data(), &[-2.0, -2.0, -2.0, -2.0]);
        let g = backward(y.sum()).unwrap();
        // dw = sum of all rows of x
        assert_eq!(g.get(&w).unwrap().data(), &[18.0, 22.0, 26.0]);
    }

    #[test]
    fn grouped_weight_per_direction() {
        // x: [B=1, K=2, L=1, D=2], w: [K=2, D=2, N=1]
        let x = Var::constant(Tensor::new(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let w = Var::constant(Tensor::new(&[2, 2, 1], vec![1., 1., 1., -1.]).unwrap());
        let y = x.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn inner_dim_mismatch() {
        let a = Var::constant(Tensor::zeros(&[2, 3]));
        let b = Var::constant(Tensor::zeros(&[2, 3]));
        let e = a.matmul(&b).unwrap_err().to_string();
        assert!(e.contains("matmul") && e.contains("[2, 3] x [2, 3]"), "{e}");
    }
}
