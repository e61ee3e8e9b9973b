use lemamba_core::geometry::{cross_merge, cross_scan, scan_pixel, window_merge, window_partition, DIRECTIONS};
use lemamba_core::{Tensor, Var};
use proptest::prelude::*;

fn map(b: usize, h: usize, w: usize, d: usize, seed: u32) -> Tensor {
    Tensor::from_fn(&[b, h, w, d], |i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / u32::MAX as f32 - 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn windows_roundtrip_bit_exact(b in 1usize..3, h in 1usize..13, w in 1usize..13, d in 1usize..4,
                                   wh in 1usize..6, ww in 1usize..6, seed in any::<u32>()) {
        let x = map(b, h, w, d, seed);
        let grid = window_partition(&Var::constant(x.clone()), (wh, ww)).unwrap();
        prop_assert_eq!(grid.grid, (h.div_ceil(wh), w.div_ceil(ww)));
        prop_assert_eq!(grid.windows.numel(), b * grid.num_windows() * wh * ww * d);
        // padding slots are zero, so the windows hold exactly the input mass
        let sum = |v: &[f32]| v.iter().map(|&a| a as f64).sum::<f64>();
        prop_assert!((sum(grid.windows.data()) - sum(x.data())).abs() < 1e-9);
        let back = window_merge(&grid).unwrap();
        prop_assert_eq!(back.value(), &x);
    }

    #[test]
    fn cross_scan_roundtrip_is_four_times_identity(b in 1usize..3, h in 1usize..11, w in 1usize..11,
                                                   d in 1usize..4, seed in any::<u32>()) {
        let x = map(b, h, w, d, seed);
        let s = cross_scan(&Var::constant(x.clone())).unwrap();
        prop_assert_eq!(s.shape(), &[b, DIRECTIONS, h * w, d][..]);
        let back = cross_merge(&s, h, w).unwrap();
        let four: Vec<f32> = x.data().iter().map(|v| 4.0 * v).collect();
        prop_assert_eq!(back.data(), &four[..]);
    }

    #[test]
    fn each_direction_is_a_permutation(h in 1usize..12, w in 1usize..12) {
        for k in 0..DIRECTIONS {
            let mut seen = vec![false; h * w];
            for t in 0..h * w {
                let p = scan_pixel(k, t, h, w);
                prop_assert!(!seen[p]);
                seen[p] = true;
            }
        }
    }

    #[test]
    fn merge_is_the_adjoint_of_scan(h in 1usize..8, w in 1usize..8, d in 1usize..3, seed in any::<u32>()) {
        let x = map(1, h, w, d, seed);
        let y = Tensor::from_fn(&[1, DIRECTIONS, h * w, d], |i| ((i * 7 + seed as usize) % 13) as f32 - 6.0);
        let sx = cross_scan(&Var::constant(x.clone())).unwrap();
        let my = cross_merge(&Var::constant(y.clone()), h, w).unwrap();
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>();
        prop_assert!((dot(sx.data(), y.data()) - dot(x.data(), my.data())).abs() < 1e-9);
    }
}

#[test]
fn direction_orders() {
    // 2×3 map, pixels numbered row-major
    let order = |k| (0..6).map(|t| scan_pixel(k, t, 2, 3)).collect::<Vec<_>>();
    assert_eq!(order(0), vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(order(1), vec![0, 3, 1, 4, 2, 5]);
    assert_eq!(order(2), vec![5, 4, 3, 2, 1, 0]);
    assert_eq!(order(3), vec![5, 2, 4, 1, 3, 0]);
}

#[test]
fn eight_by_eight_with_four_by_four_windows() {
    let x = Var::constant(map(1, 8, 8, 2, 1));
    let grid = window_partition(&x, (4, 4)).unwrap();
    assert_eq!(grid.windows.shape(), &[4, 4, 4, 2]);
    assert_eq!(cross_scan(&grid.windows).unwrap().shape()[2], 16);
    assert_eq!(cross_scan(&x).unwrap().shape()[2], 64);
}
