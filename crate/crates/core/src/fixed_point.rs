//! Fixed points of the progeny and survival maps.
//!
//! `h_z(x) = E z^{X(x)}` is the minimal solution `≥ 1` of `h = z e^{T[h-1]}` and
//! is reached by monotone iteration from `h ≡ 1`. The radius `r_κ` is the
//! largest `z` for which that iteration stays finite; it is located by
//! bisection on the convergence status.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{operator_norm, Kernel, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationConfig {
    /// Sup-norm threshold on `|h - Φ[h]|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Any entry above this bound is treated as divergence.
    pub diverge_threshold: f64,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            tol: 1e-12,
            max_iter: 1_000_000,
            diverge_threshold: 1e12,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be ≥ 1".into()));
        }
        if self.diverge_threshold.is_nan() || self.diverge_threshold <= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "diverge_threshold must exceed 1, got {}",
                self.diverge_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GfStatus {
    Converged,
    Diverged,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfOutcome {
    pub status: GfStatus,
    /// `h_z`, present only when converged.
    pub h: Option<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    /// Every iterate was entrywise `≥` its predecessor (up to rounding).
    pub monotone: bool,
}

#[inline]
fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One application of `Φ_{z,κ}[f] = z e^{T[f - 1]}`.
pub fn phi_step(kernel: &Kernel, z: f64, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != kernel.dim() {
        return Err(Error::DimensionMismatch {
            expected: kernel.dim(),
            got: f.len(),
        });
    }
    Ok(phi(kernel, z, f))
}

fn phi(kernel: &Kernel, z: f64, f: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = f.iter().map(|v| v - 1.0).collect();
    kernel
        .apply_t_unchecked(&shifted)
        .into_iter()
        .map(|t| z * t.exp())
        .collect()
}

/// Iterates `Φ_{z,κ}` from `1` and classifies the outcome.
pub fn progeny_gf(kernel: &Kernel, z: f64, cfg: &IterationConfig) -> Result<GfOutcome> {
    cfg.validate()?;
    if !(z >= 1.0 && z.is_finite()) {
        return Err(Error::InvalidArgument(format!("z must be ≥ 1, got {z}")));
    }
    let mut f = vec![1.0; kernel.dim()];
    let mut monotone = true;
    let mut step = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let next = phi(kernel, z, &f);
        if next
            .iter()
            .any(|v| !v.is_finite() || *v > cfg.diverge_threshold)
        {
            return Ok(GfOutcome {
                status: GfStatus::Diverged,
                h: None,
                iterations: it,
                residual: f64::INFINITY,
                monotone,
            });
        }
        if next
            .iter()
            .zip(&f)
            .any(|(n, o)| *n < o - 4.0 * f64::EPSILON * o.abs())
        {
            monotone = false;
        }
        step = sup_dist(&next, &f);
        if step <= cfg.tol {
            let residual = sup_dist(&phi(kernel, z, &next), &next);
            if residual <= cfg.tol {
                return Ok(GfOutcome {
                    status: GfStatus::Converged,
                    h: Some(next),
                    iterations: it,
                    residual,
                    monotone,
                });
            }
        }
        f = next;
    }
    Ok(GfOutcome {
        status: GfStatus::Undetermined,
        h: None,
        iterations: cfg.max_iter,
        residual: step,
        monotone,
    })
}

/// Bracket `[lo, hi]` around `r_κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RKappaEstimate {
    /// Largest probed `z` whose iteration converged.
    pub lo: f64,
    /// Smallest probed `z` whose iteration diverged or hit the cap.
    pub hi: f64,
    pub undetermined_hits: usize,
    /// No divergence was found up to [`R_SEARCH_CEILING`]; `hi` is the ceiling.
    pub saturated: bool,
}

impl RKappaEstimate {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// The bracket certifies `r_κ > 1` by more than `margin`.
    pub fn excludes_one(&self, margin: f64) -> bool {
        self.lo > 1.0 + margin
    }
}

pub const R_SEARCH_CEILING: f64 = 64.0;
const R_SEARCH_FIRST_STEP: f64 = 1e-3;

/// Bisection for `r_κ` on the convergence status of [`progeny_gf`].
///
/// Undetermined probes count as divergent, so `lo` always carries a
/// converged iteration.
pub fn r_kappa(kernel: &Kernel, cfg: &IterationConfig, bis_tol: f64) -> Result<RKappaEstimate> {
    if bis_tol.is_nan() || bis_tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bisection tolerance must be > 0, got {bis_tol}"
        )));
    }
    let mut undetermined_hits = 0;
    let mut converges = |z: f64| -> Result<bool> {
        let out = progeny_gf(kernel, z, cfg)?;
        if out.status == GfStatus::Undetermined {
            undetermined_hits += 1;
        }
        Ok(out.status == GfStatus::Converged)
    };

    let mut lo = 1.0;
    let mut hi = None;
    let mut gap = R_SEARCH_FIRST_STEP;
    loop {
        let z = (1.0 + gap).min(R_SEARCH_CEILING);
        if converges(z)? {
            lo = z;
        } else {
            hi = Some(z);
            break;
        }
        if z >= R_SEARCH_CEILING {
            break;
        }
        gap *= 2.0;
    }
    let Some(mut hi) = hi else {
        return Ok(RKappaEstimate {
            lo,
            hi: R_SEARCH_CEILING,
            undetermined_hits,
            saturated: true,
        });
    };

    while hi - lo > bis_tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if converges(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(RKappaEstimate {
        lo,
        hi,
        undetermined_hits,
        saturated: false,
    })
}

/// Radius for the one-type kernel `κ ≡ c`: `e^{c-1}/c` for `c ≤ 1`, else 1.
///
/// Nonpositive `c` gives `+∞` (no offspring, every `z` is admissible).
pub fn scalar_r_closed_form(c: f64) -> f64 {
    if c <= 0.0 {
        f64::INFINITY
    } else if c <= 1.0 {
        (c - 1.0).exp() / c
    } else {
        1.0
    }
}

/// Radius of the tilted or truncated comparison process.
pub fn r_transformed(
    kernel: &Kernel,
    transform: Transform,
    cfg: &IterationConfig,
    bis_tol: f64,
) -> Result<RKappaEstimate> {
    r_kappa(&kernel.transformed(transform)?, cfg, bis_tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalResult {
    /// `ρ_κ(x)` per type.
    pub rho: Vec<f64>,
    /// `Σ_x ρ_κ(x) μ(x)`.
    pub rho_aggregate: f64,
    pub residual: f64,
    pub iterations: usize,
    pub monotone: bool,
}

/// Slack on `‖T_κ‖ ≤ 1` below which the zero solution is returned directly.
const CRITICAL_SLACK: f64 = 1e-12;

/// Maximum solution of `f = 1 - e^{-T f}` by iteration downward from `f ≡ 1`.
///
/// When `‖T_κ‖ ≤ 1` the maximum solution is identically zero; returning it
/// directly avoids the `O(1/k)` crawl of the iteration at criticality.
pub fn survival_prob(kernel: &Kernel, cfg: &IterationConfig) -> Result<SurvivalResult> {
    cfg.validate()?;
    let d = kernel.dim();
    if operator_norm(kernel)? <= 1.0 + CRITICAL_SLACK {
        return Ok(SurvivalResult {
            rho: vec![0.0; d],
            rho_aggregate: 0.0,
            residual: 0.0,
            iterations: 0,
            monotone: true,
        });
    }
    let survival_map = |f: &[f64]| -> Vec<f64> {
        kernel
            .apply_t_unchecked(f)
            .into_iter()
            .map(|t| 1.0 - (-t).exp())
            .collect()
    };

    let mut f = vec![1.0; d];
    let mut monotone = true;
    let mut step = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let next = survival_map(&f);
        if next
            .iter()
            .zip(&f)
            .any(|(n, o)| *n > o + 4.0 * f64::EPSILON)
        {
            monotone = false;
        }
        step = sup_dist(&next, &f);
        if step <= cfg.tol {
            let residual = sup_dist(&survival_map(&next), &next);
            if residual <= cfg.tol {
                let rho_aggregate = next
                    .iter()
                    .zip(kernel.space().weights())
                    .map(|(r, w)| r * w)
                    .sum();
                return Ok(SurvivalResult {
                    rho: next,
                    rho_aggregate,
                    residual,
                    iterations: it,
                    monotone,
                });
            }
        }
        f = next;
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iter,
        residual: step,
    })
}

/// A strictly negative solution of `f = 1 - e^{-T f}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSolution {
    pub f: Vec<f64>,
    pub residual: f64,
    /// Seed scale `s` of the start `f₀ ≡ -s` that reached the root.
    pub seed: f64,
    pub newton_steps: usize,
}

pub const NEGATIVE_SEEDS: [f64; 7] = [0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
const NEGATIVE_RESIDUAL: f64 = 1e-10;
const NEGATIVE_MARGIN: f64 = -1e-6;
const NEWTON_MAX_STEPS: usize = 200;
const MAX_HALVINGS: usize = 40;

fn residual_vec(kernel: &Kernel, f: &[f64]) -> Vec<f64> {
    kernel
        .apply_t_unchecked(f)
        .into_iter()
        .zip(f)
        .map(|(t, v)| v - 1.0 + (-t).exp())
        .collect()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Damped Newton search for a solution with `sup f < 0`, over a fixed seed grid.
///
/// `None` means no seed reached such a root; it is not a proof that none exists.
pub fn negative_solution(
    kernel: &Kernel,
    cfg: &IterationConfig,
) -> Result<Option<NegativeSolution>> {
    cfg.validate()?;
    let d = kernel.dim();
    let k = DMatrix::from_fn(d, d, |x, y| kernel.intensity(x, y));

    for seed in NEGATIVE_SEEDS {
        let mut f = vec![-seed; d];
        let mut res = residual_vec(kernel, &f);
        let mut norm = sup_norm(&res);
        if !norm.is_finite() {
            continue;
        }
        let mut steps = 0;
        // Run to stagnation: a double root at 0 converges only linearly, and
        // stopping early would leave a spurious slightly negative candidate.
        while steps < NEWTON_MAX_STEPS && norm > 0.0 {
            steps += 1;
            // J = I - diag(e^{-T f}) K
            let decay: Vec<f64> = kernel
                .apply_t_unchecked(&f)
                .iter()
                .map(|t| (-t).exp())
                .collect();
            let jac = DMatrix::from_fn(d, d, |x, y| {
                let id = if x == y { 1.0 } else { 0.0 };
                id - decay[x] * k[(x, y)]
            });
            let rhs = DVector::from_iterator(d, res.iter().map(|r| -r));
            // A singular Jacobian falls back to the plain residual direction.
            let delta: Vec<f64> = match jac.lu().solve(&rhs) {
                Some(sol) if sol.iter().all(|v| v.is_finite()) => sol.iter().copied().collect(),
                _ => rhs.iter().copied().collect(),
            };

            let mut lambda = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = f.iter().zip(&delta).map(|(a, b)| a + lambda * b).collect();
                let trial_res = residual_vec(kernel, &trial);
                let trial_norm = sup_norm(&trial_res);
                if trial_norm.is_finite() && trial_norm < norm {
                    accepted = Some((trial, trial_res, trial_norm));
                    break;
                }
                lambda *= 0.5;
            }
            match accepted {
                Some((nf, nr, nn)) => {
                    f = nf;
                    res = nr;
                    norm = nn;
                }
                None => break,
            }
        }
        let top = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if norm <= NEGATIVE_RESIDUAL && top <= NEGATIVE_MARGIN {
            return Ok(Some(NegativeSolution {
                f,
                residual: norm,
                seed,
                newton_steps: steps,
            }));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, KernelSpec, TypeSpace};

    fn cfg() -> IterationConfig {
        IterationConfig::default()
    }

    #[test]
    fn phi_step_examples() {
        let k = Kernel::scalar(0.5).unwrap();
        assert_eq!(phi_step(&k, 1.7, &[1.0]).unwrap(), vec![1.7]);
        assert_eq!(phi_step(&k, 1.0, &[1.0]).unwrap(), vec![1.0]);
        let v = phi_step(&k, 1.2, &[1.2]).unwrap()[0];
        assert!((v - 1.2 * 0.1_f64.exp()).abs() < 1e-15);
        assert!(phi_step(&k, 1.2, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn z_one_converges_immediately() {
        let s = TypeSpace::uniform(2).unwrap();
        let k = build_kernel(
            &KernelSpec::Rank1 {
                phi: vec![1.0, 2.0],
            },
            &s,
        )
        .unwrap();
        let out = progeny_gf(&k, 1.0, &cfg()).unwrap();
        assert_eq!(out.status, GfStatus::Converged);
        assert_eq!(out.h.unwrap(), vec![1.0, 1.0]);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn scalar_above_radius_diverges() {
        let k = Kernel::scalar(0.5).unwrap();
        let out = progeny_gf(&k, 1.3, &cfg()).unwrap();
        assert_eq!(out.status, GfStatus::Diverged);
        assert!(out.h.is_none());
    }

    #[test]
    fn tiny_iteration_cap_is_undetermined() {
        let k = Kernel::scalar(0.5).unwrap();
        let c = IterationConfig {
            max_iter: 3,
            ..cfg()
        };
        assert_eq!(
            progeny_gf(&k, 1.2, &c).unwrap().status,
            GfStatus::Undetermined
        );
    }

    #[test]
    fn invalid_inputs() {
        let k = Kernel::scalar(0.5).unwrap();
        assert!(progeny_gf(&k, 0.9, &cfg()).is_err());
        assert!(r_kappa(&k, &cfg(), 0.0).is_err());
        let bad = IterationConfig { tol: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = IterationConfig {
            diverge_threshold: 1.0,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn closed_form_values() {
        assert_eq!(scalar_r_closed_form(1.0), 1.0);
        assert_eq!(scalar_r_closed_form(2.0), 1.0);
        assert!((scalar_r_closed_form(0.5) - 2.0 * (-0.5_f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn supercritical_radius_is_one() {
        let s = TypeSpace::uniform(2).unwrap();
        let k = build_kernel(
            &KernelSpec::Rank1 {
                phi: vec![1.0, 2.0],
            },
            &s,
        )
        .unwrap();
        let est = r_kappa(&k, &cfg(), 1e-6).unwrap();
        assert_eq!(est.lo, 1.0);
        assert!(est.hi <= 1.0 + 1e-6);
    }

    #[test]
    fn saturation_for_tiny_kernels() {
        let k = Kernel::scalar(1e-3).unwrap();
        let est = r_kappa(&k, &cfg(), 1e-3).unwrap();
        assert!(est.saturated);
        assert_eq!(est.hi, R_SEARCH_CEILING);
    }

    #[test]
    fn survival_subcritical_and_critical_are_zero() {
        for c in [0.5, 1.0] {
            let s = survival_prob(&Kernel::scalar(c).unwrap(), &cfg()).unwrap();
            assert_eq!(s.rho, vec![0.0]);
            assert_eq!(s.rho_aggregate, 0.0);
        }
    }

    #[test]
    fn survival_is_a_fixed_point() {
        let s = TypeSpace::uniform(2).unwrap();
        let k = build_kernel(
            &KernelSpec::Rank1 {
                phi: vec![1.0, 2.0],
            },
            &s,
        )
        .unwrap();
        let out = survival_prob(&k, &cfg()).unwrap();
        assert!(out.monotone);
        assert!(out.residual <= 1e-12);
        assert!(out.rho.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(out.rho[0] < out.rho[1]);
    }

    #[test]
    fn negative_solution_absent_at_and_above_criticality() {
        for c in [1.0, 2.0] {
            assert!(negative_solution(&Kernel::scalar(c).unwrap(), &cfg())
                .unwrap()
                .is_none());
        }
    }

    #[test]
    fn transform_identities() {
        let s = TypeSpace::uniform(2).unwrap();
        let k = Kernel::explicit(s, vec![vec![0.3, 0.5], vec![0.5, 0.7]]).unwrap();
        let base = r_kappa(&k, &cfg(), 1e-6).unwrap();
        let tilt = r_transformed(&k, Transform::Tilt { q: 0.0, c: 1.0 }, &cfg(), 1e-6).unwrap();
        let trunc = r_transformed(&k, Transform::Truncate { d: 2, c: 1.0 }, &cfg(), 1e-6).unwrap();
        assert_eq!(base, tilt);
        assert_eq!(base, trunc);
    }
}
