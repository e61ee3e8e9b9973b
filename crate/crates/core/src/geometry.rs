//! Bijections between 2D feature maps and token sequences.
//!
//! Maps are channel-last `[B, H, W, D]`; scanned sequences are
//! `[B, 4, L, D]` with `L = H·W`. The four scan directions are fixed:
//!
//! | k | order                        |
//! |---|------------------------------|
//! | 0 | row-major                    |
//! | 1 | column-major                 |
//! | 2 | row-major, reversed          |
//! | 3 | column-major, reversed       |

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::ops::PAD;

pub const DIRECTIONS: usize = 4;

fn map_dims(op: &'static str, x: &Var) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, d] => Ok((b, h, w, d)),
        ref s => Err(shape_err(op, format!("expected [B, H, W, D], got {:?}", s))),
    }
}

/// Pixel (row-major flat index) visited at step `t` of direction `k`.
pub fn scan_pixel(k: usize, t: usize, h: usize, w: usize) -> usize {
    let l = h * w;
    let t = if k >= 2 { l - 1 - t } else { t };
    if k % 2 == 0 {
        t
    } else {
        (t % h) * w + t / h
    }
}

fn scan_index(b: usize, h: usize, w: usize, d: usize) -> Rc<Vec<usize>> {
    let l = h * w;
    let mut idx = Vec::with_capacity(b * DIRECTIONS * l * d);
    for bi in 0..b {
        for k in 0..DIRECTIONS {
            for t in 0..l {
                let p = scan_pixel(k, t, h, w);
                idx.extend((0..d).map(|c| (bi * l + p) * d + c));
            }
        }
    }
    Rc::new(idx)
}

/// `[B, H, W, D]` → `[B, 4, H·W, D]`.
pub fn cross_scan(x: &Var) -> Result<Var> {
    let (b, h, w, d) = map_dims("cross_scan", x)?;
    x.gather(scan_index(b, h, w, d), &[b, DIRECTIONS, h * w, d])
}

/// `[B, 4, H·W, D]` → `[B, H, W, D]`: undoes each direction's ordering and
/// sums the four maps.
pub fn cross_merge(y: &Var, h: usize, w: usize) -> Result<Var> {
    let (b, l, d) = match *y.shape() {
        [b, DIRECTIONS, l, d] => (b, l, d),
        ref s => return Err(shape_err("cross_merge", format!("expected [B, 4, L, D], got {:?}", s))),
    };
    if l != h * w {
        return Err(shape_err("cross_merge", format!("L = {l} but H x W = {h} x {w}")));
    }
    y.scatter_add(scan_index(b, h, w, d), &[b, h, w, d])
}

/// Non-overlapping windows of a (zero-padded) feature map, folded into the
/// batch axis.
#[derive(Clone)]
pub struct WindowGrid {
    /// `[B·p_h·p_w, h, w, D]`, windows in row-major order per image.
    pub windows: Var,
    pub batch: usize,
    /// Unpadded `(H, W)`.
    pub origin_shape: (usize, usize),
    pub window_shape: (usize, usize),
    /// `(p_h, p_w)`
    pub grid: (usize, usize),
}

impl WindowGrid {
    pub fn num_windows(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Index of source element for each window slot (`PAD` in the padding).
fn window_index(b: usize, (hh, ww): (usize, usize), (wh, wwid): (usize, usize), d: usize) -> (Rc<Vec<usize>>, usize, usize) {
    let ph = hh.div_ceil(wh);
    let pw = ww.div_ceil(wwid);
    let mut idx = Vec::with_capacity(b * ph * pw * wh * wwid * d);
    for bi in 0..b {
        for gi in 0..ph {
            for gj in 0..pw {
                for y in 0..wh {
                    for x in 0..wwid {
                        let (r, c) = (gi * wh + y, gj * wwid + x);
                        if r < hh && c < ww {
                            idx.extend((0..d).map(|ch| ((bi * hh + r) * ww + c) * d + ch));
                        } else {
                            idx.extend(std::iter::repeat(PAD).take(d));
                        }
                    }
                }
            }
        }
    }
    (Rc::new(idx), ph, pw)
}

pub fn window_partition(x: &Var, window: (usize, usize)) -> Result<WindowGrid> {
    let (b, h, w, d) = map_dims("window_partition", x)?;
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::Domain(format!("window dims must be positive, got {:?}", window)));
    }
    let (idx, ph, pw) = window_index(b, (h, w), window, d);
    let windows = x.gather(idx, &[b * ph * pw, window.0, window.1, d])?;
    Ok(WindowGrid {
        windows,
        batch: b,
        origin_shape: (h, w),
        window_shape: window,
        grid: (ph, pw),
    })
}

/// Reassembles windows into `[B, H, W, D]`, dropping the padding.
pub fn window_merge(grid: &WindowGrid) -> Result<Var> {
    let (h, w) = grid.origin_shape;
    let (wh, ww) = grid.window_shape;
    let (ph, pw) = grid.grid;
    let s = grid.windows.shape();
    let consistent = s.len() == 4
        && wh > 0
        && ww > 0
        && ph == h.div_ceil(wh)
        && pw == w.div_ceil(ww)
        && s[..3] == [grid.batch * ph * pw, wh, ww];
    if !consistent {
        return Err(shape_err(
            "window_merge",
            format!(
                "windows {:?} vs batch {}, origin {:?}, window {:?}, grid {:?}",
                s, grid.batch, grid.origin_shape, grid.window_shape, grid.grid
            ),
        ));
    }
    let d = s[3];
    let b = grid.batch;
    let mut idx = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for r in 0..h {
            for c in 0..w {
                let win = (bi * ph + r / wh) * pw + c / ww;
                let slot = (win * wh + r % wh) * ww + c % ww;
                idx.extend((0..d).map(|ch| slot * d + ch));
            }
        }
    }
    grid.windows.gather(Rc::new(idx), &[b, h, w, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn map(h: usize, w: usize) -> Var {
        Var::constant(Tensor::from_fn(&[1, h, w, 1], |i| i as f32))
    }

    #[test]
    fn two_by_two_directions() {
        // [[a, b], [c, d]] = [[0, 1], [2, 3]]
        let s = cross_scan(&map(2, 2)).unwrap();
        assert_eq!(s.shape(), &[1, 4, 4, 1]);
        assert_eq!(
            s.data(),
            &[0., 1., 2., 3., 0., 2., 1., 3., 3., 2., 1., 0., 3., 1., 2., 0.]
        );
    }

    #[test]
    fn single_row_map() {
        let s = cross_scan(&map(1, 5)).unwrap();
        let d = s.data();
        assert_eq!(&d[0..5], &d[5..10]);
        assert_eq!(&d[10..15], &[4., 3., 2., 1., 0.]);
        assert_eq!(&d[10..15], &d[15..20]);
    }

    #[test]
    fn merge_of_single_direction() {
        let x = map(3, 2);
        let s = cross_scan(&x).unwrap();
        let mut only_k1 = vec![0f32; s.numel()];
        only_k1[6..12].copy_from_slice(&s.data()[6..12]);
        let y = Var::constant(Tensor::new(s.shape(), only_k1).unwrap());
        assert_eq!(cross_merge(&y, 3, 2).unwrap().value(), x.value());
    }

    #[test]
    fn cross_merge_checks_length() {
        let y = Var::constant(Tensor::zeros(&[1, 4, 6, 1]));
        assert!(cross_merge(&y, 2, 2).is_err());
    }

    #[test]
    fn four_by_four_tiling() {
        let x = map(4, 4);
        let g = window_partition(&x, (2, 2)).unwrap();
        assert_eq!(g.windows.shape(), &[4, 2, 2, 1]);
        assert_eq!(&g.windows.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&g.windows.data()[12..], &[10., 11., 14., 15.]);
    }

    #[test]
    fn padded_partition_layout() {
        let x = Var::constant(Tensor::from_fn(&[1, 3, 3, 1], |i| i as f32 + 1.0));
        let g = window_partition(&x, (2, 2)).unwrap();
        assert_eq!(g.grid, (2, 2));
        // window 1 covers columns 2..4 of rows 0..2; column 3 is padding
        assert_eq!(&g.windows.data()[4..8], &[3., 0., 6., 0.]);
        assert_eq!(&g.windows.data()[12..16], &[9., 0., 0., 0.]);
        assert_eq!(window_merge(&g).unwrap().value(), x.value());
    }

    #[test]
    fn zero_window_is_rejected() {
        assert!(matches!(window_partition(&map(2, 2), (0, 2)), Err(Error::Domain(_))));
    }

    #[test]
    fn inconsistent_grid_is_rejected() {
        let mut g = window_partition(&map(4, 4), (2, 2)).unwrap();
        g.grid = (1, 4);
        assert!(window_merge(&g).is_err());
    }
}
