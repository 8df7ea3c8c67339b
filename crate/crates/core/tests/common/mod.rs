//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use irg_core::kernel::{Kernel, TypeSpace};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

/// Plain bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let flo = f(lo);
    if flo == 0.0 {
        return lo;
    }
    if f(hi) == 0.0 {
        return hi;
    }
    assert!(flo * f(hi) <= 0.0, "no sign change on [{lo}, {hi}]");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Smaller root of `g = z e^{c(g-1)}` for `z` below the scalar radius.
pub fn scalar_gf(c: f64, z: f64) -> f64 {
    bisect(|g| z * (c * (g - 1.0)).exp() - g, 1.0, 1.0 / c)
}

/// Larger root of `g = e^{c(g-1)}` for `0 < c < 1`.
pub fn scalar_upper_root(c: f64) -> f64 {
    let f = |g: f64| (c * (g - 1.0)).exp() - g;
    let mut hi = 2.0 / c;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    bisect(f, 1.0 / c, hi)
}

/// Positive root of `ρ = 1 - e^{-cρ}` for `c > 1`.
pub fn scalar_survival(c: f64) -> f64 {
    bisect(|r| 1.0 - (-c * r).exp() - r, 1e-9, 1.0)
}

/// `e^{c-1}/c`, the scalar radius for `c ≤ 1`.
pub fn scalar_radius(c: f64) -> f64 {
    (c - 1.0).exp() / c
}

/// Largest eigenvalue of `√μ κ √μ` from a dense symmetric eigensolver.
pub fn eigen_norm(kernel: &Kernel) -> f64 {
    let d = kernel.dim();
    let w = kernel.space().weights();
    let m = DMatrix::from_fn(d, d, |i, j| w[i].sqrt() * kernel.entry(i, j) * w[j].sqrt());
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `m = (I - K)^{-1} 1` for a 2×2 intensity matrix, by Cramer's rule.
pub fn mean_2x2(k: [[f64; 2]; 2]) -> [f64; 2] {
    let a = 1.0 - k[0][0];
    let b = -k[0][1];
    let c = -k[1][0];
    let d = 1.0 - k[1][1];
    let det = a * d - b * c;
    [(d - b) / det, (a - c) / det]
}

/// Component size of every vertex by bitset transitive closure (`n ≤ 64`).
pub fn reachability_sizes(n: usize, edges: &[(u32, u32)]) -> Vec<u64> {
    assert!(n <= 64);
    let mut reach: Vec<u64> = (0..n).map(|i| 1u64 << i).collect();
    for &(u, v) in edges {
        reach[u as usize] |= 1 << v;
        reach[v as usize] |= 1 << u;
    }
    loop {
        let mut changed = false;
        for i in 0..n {
            let mut acc = reach[i];
            for j in 0..n {
                if reach[i] >> j & 1 == 1 {
                    acc |= reach[j];
                }
            }
            if acc != reach[i] {
                reach[i] = acc;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    reach.iter().map(|r| u64::from(r.count_ones())).collect()
}

/// Random kernel on `dim` types with labels `0..dim`, rescaled so that
/// `max_x T[1](x)` equals `target_row_sum`.
#[allow(clippy::needless_range_loop)]
pub fn random_kernel(weights: &[f64], entries: &[f64], target_row_sum: f64) -> Kernel {
    let d = weights.len();
    let total: f64 = weights.iter().sum();
    let mu: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut m = vec![vec![0.0; d]; d];
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            m[i][j] = entries[k];
            m[j][i] = entries[k];
            k += 1;
        }
    }
    let row_max = (0..d)
        .map(|i| (0..d).map(|j| m[i][j] * mu[j]).sum::<f64>())
        .fold(0.0, f64::max);
    let s = target_row_sum / row_max;
    for row in &mut m {
        for v in row {
            *v *= s;
        }
    }
    let space = TypeSpace::new((0..d as u32).collect(), mu).unwrap();
    Kernel::explicit(space, m).unwrap()
}

/// `(weights, upper-triangle entries)` for a kernel of dimension `1..=max_dim`.
pub fn kernel_parts(max_dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_dim).prop_flat_map(|d| {
        (
            prop::collection::vec(0.05f64..1.0, d),
            prop::collection::vec(0.05f64..1.0, d * (d + 1) / 2),
        )
    })
}

/// Kernel with `‖T‖ ≤ max_x T[1](x) = row_sum`, subcritical whenever `row_sum < 1`.
pub fn arb_kernel(max_dim: usize, row_sum: std::ops::Range<f64>) -> impl Strategy<Value = Kernel> {
    (kernel_parts(max_dim), row_sum).prop_map(|((w, e), s)| random_kernel(&w, &e, s))
}
