//! Monte Carlo of the multi-type Poisson branching process.
//!
//! A particle of type `x` begets `Poisson(κ(x, y) μ(y))` children of each type
//! `y`. Particles of one type within a generation are exchangeable, so a
//! generation is advanced by drawing one `Poisson(Σ_x n_x κ(x, y) μ(y))` per
//! child type, which has the same law as summing the per-particle draws.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{operator_norm, Kernel};
use crate::rng::{stream, tag};
use crate::stats::{least_squares, weighted_least_squares, Z95};

pub const DEFAULT_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgenyOutcome {
    /// Total particles including the root; equals the cap when censored.
    pub size: u64,
    pub censored: bool,
    /// Index of the deepest generation reached (the root is generation 0).
    pub generations: u32,
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    // rand_distr switches between inversion and transformed rejection by λ.
    Poisson::new(lambda).map_or(0, |p| p.sample(rng) as u64)
}

/// One realisation of the total progeny `X(x)` started from the type `root`.
pub fn sample_progeny<R: Rng + ?Sized>(
    kernel: &Kernel,
    root: u32,
    cap: u64,
    rng: &mut R,
) -> Result<ProgenyOutcome> {
    if cap == 0 {
        return Err(Error::InvalidArgument("cap must be ≥ 1".into()));
    }
    let x0 = kernel
        .space()
        .index_of(root)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown root type {root}")))?;
    let d = kernel.dim();
    let mut current = vec![0u64; d];
    current[x0] = 1;
    let mut total = 1u64;
    let mut generations = 0u32;
    if total >= cap {
        return Ok(ProgenyOutcome {
            size: cap,
            censored: true,
            generations,
        });
    }
    let mut next = vec![0u64; d];
    loop {
        let mut born = 0u64;
        for (y, slot) in next.iter_mut().enumerate() {
            let lambda: f64 = current
                .iter()
                .enumerate()
                .filter(|(_, n)| **n > 0)
                .map(|(x, n)| *n as f64 * kernel.intensity(x, y))
                .sum();
            *slot = poisson(lambda, rng);
            born += *slot;
        }
        if born == 0 {
            return Ok(ProgenyOutcome {
                size: total,
                censored: false,
                generations,
            });
        }
        generations += 1;
        total = total.saturating_add(born);
        if total >= cap {
            return Ok(ProgenyOutcome {
                size: cap,
                censored: true,
                generations,
            });
        }
        std::mem::swap(&mut current, &mut next);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub root_type: u32,
    pub outcomes: Vec<ProgenyOutcome>,
    pub seed: u64,
    pub cap: u64,
}

/// `samples` independent progenies; sample `i` uses the stream `(seed, root, i)`.
pub fn sample_batch(
    kernel: &Kernel,
    root: u32,
    samples: usize,
    cap: u64,
    seed: u64,
) -> Result<SampleBatch> {
    let outcomes = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[tag::BRANCHING, u64::from(root), i as u64]);
            sample_progeny(kernel, root, cap, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleBatch {
        root_type: root,
        outcomes,
        seed,
        cap,
    })
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn censored_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.censored).count()
    }

    pub fn censored_fraction(&self) -> f64 {
        self.censored_count() as f64 / self.len().max(1) as f64
    }

    /// Sample mean and standard error of the size, censored outcomes counted at the cap.
    pub fn size_mean(&self) -> (f64, f64) {
        let n = self.len() as f64;
        let mean = self.outcomes.iter().map(|o| o.size as f64).sum::<f64>() / n;
        let var = self
            .outcomes
            .iter()
            .map(|o| (o.size as f64 - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        (mean, (var / n).sqrt())
    }

    /// CSV with header `root_type,size,censored,generations`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["root_type", "size", "censored", "generations"])?;
        for o in &self.outcomes {
            w.write_record([
                self.root_type.to_string(),
                o.size.to_string(),
                o.censored.to_string(),
                o.generations.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Exact mean progeny `m = (I - K)⁻¹ 1` with `K(x, y) = κ(x, y) μ(y)`.
pub fn mean_progeny(kernel: &Kernel) -> Result<Vec<f64>> {
    let norm = operator_norm(kernel)?;
    if norm >= 1.0 {
        return Err(Error::Refused(format!(
            "mean progeny is infinite for ‖T‖ = {norm} ≥ 1"
        )));
    }
    let d = kernel.dim();
    let a = DMatrix::from_fn(d, d, |x, y| {
        let id = if x == y { 1.0 } else { 0.0 };
        id - kernel.intensity(x, y)
    });
    let m = a
        .lu()
        .solve(&DVector::from_element(d, 1.0))
        .ok_or_else(|| Error::Refused("I - K is singular".into()))?;
    Ok(m.iter().copied().collect())
}

/// Monte Carlo estimate of `E z^X` with a normal-approximation interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GfEstimate {
    pub z: f64,
    /// Mean of `z^size` over uncensored outcomes.
    pub mean: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub used: usize,
    pub censored: usize,
    /// Whole-batch mean with censored outcomes at `z^cap`; present only when
    /// censoring occurred, and then only a lower bound.
    pub lower_bound: Option<f64>,
}

pub fn empirical_gf(batch: &SampleBatch, z: f64) -> Result<GfEstimate> {
    if !(z >= 1.0 && z.is_finite()) {
        return Err(Error::InvalidArgument(format!("z must be ≥ 1, got {z}")));
    }
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let values: Vec<f64> = batch
        .outcomes
        .iter()
        .filter(|o| !o.censored)
        .map(|o| z.powf(o.size as f64))
        .collect();
    let censored = batch.len() - values.len();
    if values.is_empty() {
        return Err(Error::InsufficientData("every outcome is censored".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let stderr = (var / n).sqrt();
    let lower_bound = (censored > 0).then(|| {
        (values.iter().sum::<f64>() + censored as f64 * z.powf(batch.cap as f64))
            / batch.len() as f64
    });
    Ok(GfEstimate {
        z,
        mean,
        stderr,
        ci_low: mean - Z95 * stderr,
        ci_high: mean + Z95 * stderr,
        used: values.len(),
        censored,
        lower_bound,
    })
}

/// Exponential decay rate of the total-progeny law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// `-slope` of `ln P(X = k) + (3/2) ln k` against `k`.
    pub rate: f64,
    pub stderr: f64,
    pub window: [u64; 2],
    /// Quadratic coefficient of the same regression; large values flag a
    /// window where the exponential regime has not set in.
    pub curvature: f64,
    /// `-slope` of the plain `ln P(X ≥ k)` regression over the window,
    /// without the polynomial correction.
    pub raw_tail_rate: f64,
    /// Outcomes with size `≥ k_max`.
    pub exceedances: usize,
    pub censored_fraction: f64,
}

pub const MIN_EXCEEDANCES: usize = 200;
/// Above this censored fraction the size law has an atom at infinity and no
/// exponential rate is fitted.
pub const MAX_CENSORED_FRACTION: f64 = 1e-3;
const PREFACTOR_EXPONENT: f64 = 1.5;

/// Maximum-likelihood decay rate over an open-ended tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailMle {
    pub rate: f64,
    /// From the Fisher information; assumes independent outcomes.
    pub stderr: f64,
    pub k_min: u64,
    /// Largest observed uncensored size.
    pub k_top: u64,
    /// Uncensored outcomes of size `≥ k_min`.
    pub tail_outcomes: usize,
    pub censored_fraction: f64,
}

/// Fewest tail outcomes accepted by the likelihood fit.
pub const MIN_TAIL_OUTCOMES: u64 = 50;
const MLE_MAX_STEPS: usize = 100;

/// Histogram of sizes: `counts[k]` outcomes of size `k`.
#[derive(Debug, Clone)]
pub(crate) struct SizeCounts {
    pub counts: Vec<u64>,
    pub total: u64,
    pub censored: u64,
}

impl SizeCounts {
    pub(crate) fn from_sizes<I: IntoIterator<Item = (u64, bool)>>(it: I) -> Self {
        let mut counts = Vec::new();
        let mut total = 0;
        let mut censored = 0;
        for (size, cens) in it {
            total += 1;
            if cens {
                censored += 1;
                continue;
            }
            let k = size as usize;
            if counts.len() <= k {
                counts.resize(k + 1, 0);
            }
            counts[k] += 1;
        }
        SizeCounts {
            counts,
            total,
            censored,
        }
    }

    /// `#{size ≥ k}` for every `k`, censored outcomes included.
    fn exceedances(&self) -> Vec<u64> {
        let mut ex = vec![0u64; self.counts.len() + 1];
        let mut acc = self.censored;
        for k in (0..self.counts.len()).rev() {
            acc += self.counts[k];
            ex[k] = acc;
        }
        ex[self.counts.len()] = self.censored;
        ex
    }

    pub(crate) fn fit(&self, window: Option<(u64, u64)>) -> Result<TailFit> {
        if self.total == 0 {
            return Err(Error::InsufficientData("no samples".into()));
        }
        let censored_fraction = self.censored as f64 / self.total as f64;
        if censored_fraction > MAX_CENSORED_FRACTION {
            return Err(Error::Refused(format!(
                "censored fraction {censored_fraction:.4} exceeds {MAX_CENSORED_FRACTION}: \
                 the size law is not exponentially tailed"
            )));
        }
        let ex = self.exceedances();
        let exceed_at = |k: u64| ex.get(k as usize).copied().unwrap_or(self.censored) as usize;

        let (k_min, k_max) = match window {
            Some((lo, hi)) => (lo.max(1), hi),
            None => {
                // 0.99 quantile of the size law.
                let target = (0.01 * self.total as f64).ceil() as u64;
                let q99 = (1..ex.len() as u64)
                    .take_while(|k| ex[*k as usize] > target)
                    .last()
                    .map_or(1, |k| k + 1);
                let top = (1..ex.len() as u64)
                    .rfind(|k| ex[*k as usize] as usize >= MIN_EXCEEDANCES)
                    .unwrap_or(0);
                (q99.max(2), top)
            }
        };
        if k_min >= k_max {
            return Err(Error::InsufficientData(format!(
                "tail window [{k_min}, {k_max}] is empty"
            )));
        }
        let exceedances = exceed_at(k_max);
        if exceedances < MIN_EXCEEDANCES {
            return Err(Error::InsufficientData(format!(
                "only {exceedances} outcomes reach k_max = {k_max} (need {MIN_EXCEEDANCES})"
            )));
        }

        let n = self.total as f64;
        let mut rows = Vec::new();
        let mut rows2 = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for k in k_min..=k_max {
            let c = self.counts.get(k as usize).copied().unwrap_or(0);
            if c == 0 {
                continue;
            }
            let kf = k as f64;
            rows.push(vec![1.0, kf]);
            rows2.push(vec![1.0, kf, kf * kf]);
            ys.push((c as f64 / n).ln() + PREFACTOR_EXPONENT * kf.ln());
            ws.push(c as f64);
        }
        if rows.len() < 3 {
            return Err(Error::InsufficientData(
                "fewer than three populated sizes in the window".into(),
            ));
        }
        let lin = weighted_least_squares(&rows, &ys, &ws)
            .ok_or_else(|| Error::InsufficientData("degenerate tail regression".into()))?;
        let curvature = weighted_least_squares(&rows2, &ys, &ws).map_or(f64::NAN, |f| f.coef[2]);

        let tail_rows: Vec<Vec<f64>> = (k_min..=k_max).map(|k| vec![1.0, k as f64]).collect();
        let tail_y: Vec<f64> = (k_min..=k_max)
            .map(|k| (exceed_at(k) as f64 / n).ln())
            .collect();
        let raw_tail_rate = least_squares(&tail_rows, &tail_y).map_or(f64::NAN, |f| -f.coef[1]);

        Ok(TailFit {
            rate: -lin.coef[1],
            stderr: lin.known_variance_se(1),
            window: [k_min, k_max],
            curvature,
            raw_tail_rate,
            exceedances,
            censored_fraction,
        })
    }

    /// Poisson maximum likelihood for `N_k ~ Poisson(e^{a - rk} k^{-3/2})` over
    /// every `k` from `k_min` to the largest observed size, empty bins included.
    pub(crate) fn fit_mle(&self, k_min: Option<u64>) -> Result<TailMle> {
        if self.total == 0 {
            return Err(Error::InsufficientData("no samples".into()));
        }
        let censored_fraction = self.censored as f64 / self.total as f64;
        if censored_fraction > MAX_CENSORED_FRACTION {
            return Err(Error::Refused(format!(
                "censored fraction {censored_fraction:.4} exceeds {MAX_CENSORED_FRACTION}: \
                 the size law is not exponentially tailed"
            )));
        }
        let ex = self.exceedances();
        let k_min = match k_min {
            Some(k) => k.max(1),
            None => {
                let target = (0.01 * self.total as f64).ceil() as u64;
                (1..ex.len() as u64)
                    .take_while(|k| ex[*k as usize] > target)
                    .last()
                    .map_or(1, |k| k + 1)
                    .max(2)
            }
        };
        let k_top = self.counts.len().saturating_sub(1) as u64;
        let tail_count = ex.get(k_min as usize).copied().unwrap_or(0) - self.censored;
        if k_top < k_min + 2 || tail_count < MIN_TAIL_OUTCOMES {
            return Err(Error::InsufficientData(format!(
                "{tail_count} outcomes at or above k_min = {k_min}"
            )));
        }

        let ks: Vec<f64> = (k_min..=k_top).map(|k| k as f64).collect();
        let obs: Vec<f64> = (k_min..=k_top)
            .map(|k| self.counts[k as usize] as f64)
            .collect();
        let offset: Vec<f64> = ks.iter().map(|k| -PREFACTOR_EXPONENT * k.ln()).collect();
        let centre = ks[0];
        let loglik = |a: f64, b: f64| -> f64 {
            ks.iter()
                .zip(&obs)
                .zip(&offset)
                .map(|((k, n), o)| {
                    let eta = a + b * (k - centre) + o;
                    n * eta - eta.exp()
                })
                .sum()
        };
        // Start at a geometric tail with the empirical mean excess.
        let mean_excess = ks
            .iter()
            .zip(&obs)
            .map(|(k, n)| (k - centre) * n)
            .sum::<f64>()
            / tail_count as f64;
        let mut b = -1.0 / (mean_excess + 1.0);
        let mut a = (obs[0].max(0.5)).ln() - offset[0];
        let mut ll = loglik(a, b);
        let mut info = [[0.0; 2]; 2];
        for _ in 0..MLE_MAX_STEPS {
            let (mut g0, mut g1) = (0.0, 0.0);
            info = [[0.0; 2]; 2];
            for ((k, n), o) in ks.iter().zip(&obs).zip(&offset) {
                let x = k - centre;
                let mu = (a + b * x + o).exp();
                g0 += n - mu;
                g1 += (n - mu) * x;
                info[0][0] += mu;
                info[0][1] += mu * x;
                info[1][1] += mu * x * x;
            }
            info[1][0] = info[0][1];
            let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
            if det.is_nan() || det <= 0.0 {
                return Err(Error::InsufficientData("singular tail likelihood".into()));
            }
            let da = (info[1][1] * g0 - info[0][1] * g1) / det;
            let db = (info[0][0] * g1 - info[1][0] * g0) / det;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = loglik(a + t * da, b + t * db);
                if cand >= ll {
                    a += t * da;
                    b += t * db;
                    ll = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || (t * db).abs() < 1e-12 * b.abs().max(1e-3) {
                break;
            }
        }
        let det = info[0][0] * info[1][1] - info[0][1] * info[1][0];
        Ok(TailMle {
            rate: -b,
            stderr: (info[0][0] / det).sqrt(),
            k_min,
            k_top,
            tail_outcomes: tail_count as usize,
            censored_fraction,
        })
    }
}

/// Fits the exponential decay rate of the size law of a batch.
///
/// Regresses `ln(N_k / N) + (3/2) ln k` on `k` with weights `N_k`, where
/// `N_k` counts outcomes of size exactly `k`. Subtracting the `k^{-3/2}`
/// prefactor of the local law of a non-critical total progeny leaves a
/// straight line of slope `-ln r_κ`. The default window runs from the 0.99
/// quantile to the largest `k` with at least [`MIN_EXCEEDANCES`] outcomes
/// reaching it.
pub fn tail_fit(batch: &SampleBatch, window: Option<(u64, u64)>) -> Result<TailFit> {
    SizeCounts::from_sizes(batch.outcomes.iter().map(|o| (o.size, o.censored))).fit(window)
}

/// Likelihood counterpart of [`tail_fit`]: same model, but every size from
/// `k_min` (default: the 0.99 quantile) up to the largest observation
/// contributes, including sizes never observed. Suited to sparse tails where
/// the regression would drop empty bins.
pub fn tail_mle(batch: &SampleBatch, k_min: Option<u64>) -> Result<TailMle> {
    SizeCounts::from_sizes(batch.outcomes.iter().map(|o| (o.size, o.censored))).fit_mle(k_min)
}

/// Result of testing whether batch A is stochastically larger than batch B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// `max_k (F_A(k) - F_B(k))`, clipped at zero.
    pub max_violation: f64,
    /// One-sided two-sample DKW bound at the stated confidence.
    pub tolerance: f64,
    pub confidence: f64,
    pub passed: bool,
    pub n_a: usize,
    pub n_b: usize,
}

pub const DOMINANCE_CONFIDENCE: f64 = 0.999;

/// Checks `F_A(k) ≤ F_B(k) + ε` for every `k`, i.e. A dominates B.
pub fn dominance_check(a: &SampleBatch, b: &SampleBatch) -> Result<DominanceReport> {
    if a.root_type != b.root_type || a.cap != b.cap {
        return Err(Error::InvalidArgument(
            "batches must share root type and cap".into(),
        ));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut sa: Vec<u64> = a.outcomes.iter().map(|o| o.size).collect();
    let mut sb: Vec<u64> = b.outcomes.iter().map(|o| o.size).collect();
    sa.sort_unstable();
    sb.sort_unstable();
    let (na, nb) = (sa.len() as f64, sb.len() as f64);

    let mut violation = 0.0_f64;
    let (mut i, mut j) = (0, 0);
    while i < sa.len() || j < sb.len() {
        let k = match (sa.get(i), sb.get(j)) {
            (Some(x), Some(y)) => *x.min(y),
            (Some(x), None) => *x,
            (None, Some(y)) => *y,
            (None, None) => unreachable!(),
        };
        while i < sa.len() && sa[i] == k {
            i += 1;
        }
        while j < sb.len() && sb[j] == k {
            j += 1;
        }
        violation = violation.max(i as f64 / na - j as f64 / nb);
    }
    let alpha = 1.0 - DOMINANCE_CONFIDENCE;
    let tolerance = ((1.0 / alpha).ln() * (na + nb) / (2.0 * na * nb)).sqrt();
    Ok(DominanceReport {
        max_violation: violation,
        tolerance,
        confidence: DOMINANCE_CONFIDENCE,
        passed: violation <= tolerance,
        n_a: sa.len(),
        n_b: sb.len(),
    })
}
