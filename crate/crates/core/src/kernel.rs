//! Finite type spaces, kernels and the integral operator they induce.
//!
//! A [`Kernel`] pairs a symmetric nonnegative matrix `κ(x, y)` with a
//! [`TypeSpace`] carrying the type weights `μ`. The induced operator is
//! `(T f)(x) = Σ_y κ(x, y) f(y) μ(y)`; its norm decides the phase of both the
//! random graph and the branching process attached to it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Finite ordered set of integer type labels with a probability weight each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct TypeSpace {
    labels: Vec<u32>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSpace {
    labels: Vec<u32>,
    weights: Vec<f64>,
}

impl TryFrom<RawSpace> for TypeSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        TypeSpace::new(raw.labels, raw.weights)
    }
}

impl TypeSpace {
    pub fn new(labels: Vec<u32>, weights: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidSpace("no types".into()));
        }
        if labels.len() != weights.len() {
            return Err(Error::InvalidSpace(format!(
                "{} labels but {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpace(
                "labels must be strictly increasing".into(),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidSpace(format!(
                "weights must be strictly positive, found {w}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidSpace(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(TypeSpace { labels, weights })
    }

    /// `k` types labelled `1..=k` with equal weight.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidSpace("no types".into()));
        }
        // Normalise by the actual sum so the tolerance check always holds.
        let raw = vec![1.0 / k as f64; k];
        let total: f64 = raw.iter().sum();
        Self::new(
            (1..=k as u32).collect(),
            raw.into_iter().map(|w| w / total).collect(),
        )
    }

    /// The one-type space `{1}` with weight 1.
    pub fn single() -> Self {
        TypeSpace {
            labels: vec![1],
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index_of(&self, label: u32) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    /// `M_D = Σ_{y ≤ D} μ(y)`.
    pub fn mass_up_to(&self, d: u32) -> f64 {
        self.labels
            .iter()
            .zip(&self.weights)
            .filter(|(l, _)| **l <= d)
            .map(|(_, w)| w)
            .sum()
    }

    /// Build a space from unnormalised positive masses.
    fn normalized(labels: Vec<u32>, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidSpace(format!("total mass {total}")));
        }
        Self::new(labels, masses.into_iter().map(|m| m / total).collect())
    }
}

/// Which constructor produced a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builder {
    Constant,
    Rank1,
    Max,
    Explicit,
}

/// Builder descriptor as it appears in kernel JSON documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `κ ≡ c`.
    Constant { c: f64 },
    /// `κ(x, y) = φ(x) φ(y)`.
    Rank1 { phi: Vec<f64> },
    /// `κ(x, y) = κ̃(max(x, y))`, `κ̃` positive and nondecreasing in label order.
    Max { kappa_tilde: Vec<f64> },
    /// A full symmetric matrix, row-major by label order.
    Explicit { matrix: Vec<Vec<f64>> },
}

/// `{"space": {...}, "kernel": {"builder": ..., ...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDoc {
    pub space: TypeSpace,
    pub kernel: KernelSpec,
}

impl KernelDoc {
    pub fn build(&self) -> Result<Kernel> {
        build_kernel(&self.kernel, &self.space)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Symmetric nonnegative kernel over a finite type space.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    space: TypeSpace,
    matrix: Vec<f64>,
    builder: Builder,
}

pub fn build_kernel(spec: &KernelSpec, space: &TypeSpace) -> Result<Kernel> {
    let d = space.dim();
    let check_len = |v: &[f64]| {
        if v.len() == d {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            })
        }
    };
    let positive = |v: &[f64], what: &str| {
        if v.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidKernel(format!("{what} must be positive")))
        }
    };

    let (matrix, builder) = match spec {
        KernelSpec::Constant { c } => {
            positive(&[*c], "constant")?;
            (vec![*c; d * d], Builder::Constant)
        }
        KernelSpec::Rank1 { phi } => {
            check_len(phi)?;
            positive(phi, "phi")?;
            let m = (0..d * d).map(|i| phi[i / d] * phi[i % d]).collect();
            (m, Builder::Rank1)
        }
        KernelSpec::Max { kappa_tilde } => {
            check_len(kappa_tilde)?;
            positive(kappa_tilde, "kappa_tilde")?;
            if kappa_tilde.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::InvalidKernel(
                    "kappa_tilde must be nondecreasing".into(),
                ));
            }
            let m = (0..d * d)
                .map(|i| kappa_tilde[(i / d).max(i % d)])
                .collect();
            (m, Builder::Max)
        }
        KernelSpec::Explicit { matrix } => {
            if matrix.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: matrix.len(),
                });
            }
            for row in matrix {
                check_len(row)?;
            }
            let flat: Vec<f64> = matrix.iter().flatten().copied().collect();
            (flat, Builder::Explicit)
        }
    };
    Kernel::from_parts(space.clone(), matrix, builder)
}

impl Kernel {
    fn from_parts(space: TypeSpace, matrix: Vec<f64>, builder: Builder) -> Result<Self> {
        let d = space.dim();
        if matrix.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                got: matrix.len(),
            });
        }
        if let Some(v) = matrix.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidKernel(format!(
                "entries must be finite and nonnegative, found {v}"
            )));
        }
        for x in 0..d {
            for y in (x + 1)..d {
                if matrix[x * d + y] != matrix[y * d + x] {
                    return Err(Error::InvalidKernel(format!(
                        "matrix is not symmetric at ({x}, {y})"
                    )));
                }
            }
        }
        Ok(Kernel {
            space,
            matrix,
            builder,
        })
    }

    /// One-type kernel `κ ≡ c`; `c = 0` is accepted as a degenerate case.
    pub fn scalar(c: f64) -> Result<Self> {
        if c == 0.0 {
            return Self::explicit(TypeSpace::single(), vec![vec![0.0]]);
        }
        build_kernel(&KernelSpec::Constant { c }, &TypeSpace::single())
    }

    pub fn explicit(space: TypeSpace, matrix: Vec<Vec<f64>>) -> Result<Self> {
        build_kernel(&KernelSpec::Explicit { matrix }, &space)
    }

    pub fn space(&self) -> &TypeSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn builder(&self) -> Builder {
        self.builder
    }

    #[inline]
    pub fn entry(&self, x: usize, y: usize) -> f64 {
        self.matrix[x * self.dim() + y]
    }

    /// Row-major copy of the matrix.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix
            .chunks(self.dim())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Poisson intensity `κ(x, y) μ(y)` of type-`y` children of a type-`x` parent.
    #[inline]
    pub fn intensity(&self, x: usize, y: usize) -> f64 {
        self.entry(x, y) * self.space.weights[y]
    }

    /// `(T f)(x) = Σ_y κ(x, y) f(y) μ(y)`.
    pub fn apply_t(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: f.len(),
            });
        }
        Ok(self.apply_t_unchecked(f))
    }

    pub(crate) fn apply_t_unchecked(&self, f: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let w = &self.space.weights;
        self.matrix
            .chunks(d)
            .map(|row| row.iter().zip(f).zip(w).map(|((k, f), w)| k * f * w).sum())
            .collect()
    }

    /// `T[1]`.
    pub fn t_one(&self) -> Vec<f64> {
        self.apply_t_unchecked(&vec![1.0; self.dim()])
    }

    /// `c · κ` over the same space.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidArgument(format!("scale {c}")));
        }
        Ok(Kernel {
            space: self.space.clone(),
            matrix: self.matrix.iter().map(|k| k * c).collect(),
            builder: self.builder,
        })
    }

    /// Same matrix against a different measure on the same labels.
    pub fn with_space(&self, space: TypeSpace) -> Result<Self> {
        if space.labels != self.space.labels {
            return Err(Error::InvalidArgument(
                "replacement space must carry the same labels".into(),
            ));
        }
        Ok(Kernel {
            space,
            matrix: self.matrix.clone(),
            builder: self.builder,
        })
    }

    /// Restriction of the kernel to labels `≤ d` against `μ̂_D`.
    pub fn truncated(&self, d: u32) -> Result<Self> {
        let space = truncate_measure(&self.space, d)?;
        let keep = space.dim();
        let n = self.dim();
        let matrix = (0..keep * keep)
            .map(|i| self.matrix[(i / keep) * n + i % keep])
            .collect();
        Ok(Kernel {
            space,
            matrix,
            builder: self.builder,
        })
    }

    /// Kernel of the tilted or truncated comparison process.
    pub fn transformed(&self, transform: Transform) -> Result<Self> {
        match transform {
            Transform::Tilt { q, c } => {
                let m_q = tilt_normalizer(self, q)?;
                if c * m_q < 1.0 - 1e-12 {
                    return Err(Error::Refused(format!(
                        "tilt needs c·m_q ≥ 1, got c = {c}, m_q = {m_q}"
                    )));
                }
                self.with_space(tilt_measure(self, q)?)?.scaled(c)
            }
            Transform::Truncate { d, c } => self.truncated(d)?.scaled(c),
        }
    }

    pub fn max_entry(&self) -> f64 {
        self.matrix.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.matrix.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Measure change used to build a comparison branching process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform {
    /// Intensities `c κ(x, y) μ_q(y)`; dominates the base process when `c m_q ≥ 1`.
    Tilt { q: f64, c: f64 },
    /// Intensities `c κ(x, y) μ̂_D(y)`; with `c ≤ M_D` it is dominated by the base process.
    Truncate { d: u32, c: f64 },
}

/// Symmetrised matrix `√μ(x) κ(x, y) √μ(y)`, row-major.
fn symmetrized(kernel: &Kernel) -> Vec<f64> {
    let d = kernel.dim();
    let s: Vec<f64> = kernel.space.weights.iter().map(|w| w.sqrt()).collect();
    (0..d * d)
        .map(|i| s[i / d] * kernel.matrix[i] * s[i % d])
        .collect()
}

const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITER: usize = 100_000;

/// `‖T_κ‖`, the dominant eigenvalue of the symmetrised matrix, by power iteration.
///
/// The iteration runs on `M + σI` with `σ` one percent of the largest row sum
/// so that a bipartite kernel (eigenvalues `±λ`) cannot stall the Rayleigh
/// quotient; the quotient itself is taken against `M`.
pub fn operator_norm(kernel: &Kernel) -> Result<f64> {
    let d = kernel.dim();
    let m = symmetrized(kernel);
    let row_max = m
        .chunks(d)
        .map(|r| r.iter().sum::<f64>())
        .fold(0.0, f64::max);
    if row_max == 0.0 {
        return Ok(0.0);
    }
    let shift = 0.01 * row_max;

    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut mv = vec![0.0; d];
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITER {
        for (x, out) in mv.iter_mut().enumerate() {
            *out = m[x * d..(x + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
        }
        let rayleigh: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        if (rayleigh - prev).abs() < POWER_TOL * rayleigh.abs().max(1.0) {
            return Ok(rayleigh);
        }
        prev = rayleigh;
        let mut next: Vec<f64> = mv.iter().zip(&v).map(|(a, b)| a + shift * b).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        next.iter_mut().for_each(|x| *x /= norm);
        v = next;
    }

    // Collatz–Wielandt bracket around the last quotient.
    let ratios = mv
        .iter()
        .zip(&v)
        .filter(|(_, b)| **b > 0.0)
        .map(|(a, b)| a / b);
    let (lower, upper) = ratios.fold((f64::INFINITY, 0.0_f64), |(lo, hi), r| {
        (lo.min(r), hi.max(r))
    });
    Err(Error::PowerIteration {
        iterations: POWER_MAX_ITER,
        lower: lower.min(prev),
        upper: upper.max(prev),
    })
}

/// `‖T_κ‖_HS = (Σ_x Σ_y κ(x, y)² μ(x) μ(y))^{1/2}`.
pub fn hs_norm(kernel: &Kernel) -> f64 {
    symmetrized(kernel)
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// `ψ(x) = (Σ_y κ(x, y)² μ(y))^{1/2}`.
pub fn psi(kernel: &Kernel) -> Vec<f64> {
    let d = kernel.dim();
    let w = kernel.space.weights();
    (0..d)
        .map(|x| {
            (0..d)
                .map(|y| kernel.entry(x, y).powi(2) * w[y])
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Grid of exponents `a ∈ {2⁻⁴, …, 2⁴}` tried for the exponential-moment check.
pub const AS1_GRID: [f64; 9] = [0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Largest grid value `a` for which `Σ_x e^{a ψ(x)} μ(x)` is finite in `f64`.
pub fn as1_margin(kernel: &Kernel) -> Option<f64> {
    let psi = psi(kernel);
    let w = kernel.space.weights();
    AS1_GRID.iter().copied().rfind(|a| {
        psi.iter()
            .zip(w)
            .map(|(p, w)| (a * p).exp() * w)
            .sum::<f64>()
            .is_finite()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub op_norm: f64,
    pub hs_norm: f64,
    pub t_one: Vec<f64>,
    pub psi: Vec<f64>,
    pub as1_margin: Option<f64>,
}

pub fn operator_stats(kernel: &Kernel) -> Result<OperatorStats> {
    Ok(OperatorStats {
        op_norm: operator_norm(kernel)?,
        hs_norm: hs_norm(kernel),
        t_one: kernel.t_one(),
        psi: psi(kernel),
        as1_margin: as1_margin(kernel),
    })
}

/// Which of the structural hypotheses a kernel satisfies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub inf_value: f64,
    pub inf_positive: bool,
    pub sup_value: f64,
    /// (C1): bounded kernel.
    pub c1_bounded: bool,
    pub hs_norm: f64,
    /// (C2): Hilbert–Schmidt norm below one. Reported only.
    pub c2_hs_below_one: bool,
    /// κ nondecreasing in each argument along label order.
    pub c3_monotone: bool,
    /// Smallest `c₁` with `κ(x, y) ≤ c₁ T[1](x) T[1](y)`; absent if `T[1]` vanishes somewhere.
    pub c3_constant: Option<f64>,
    pub as1: bool,
    pub as1_margin: Option<f64>,
}

impl ConditionReport {
    /// (C3) holds: monotone with a finite product bound.
    pub fn c3(&self) -> bool {
        self.c3_monotone && self.c3_constant.is_some()
    }

    /// Hypotheses under which the log-scaling law of `C₁` is proven.
    pub fn scaling_hypotheses(&self) -> bool {
        self.inf_positive && self.as1 && (self.c1_bounded || self.c3())
    }
}

pub fn check_conditions(kernel: &Kernel) -> ConditionReport {
    let d = kernel.dim();
    let inf_value = kernel.min_entry();
    let sup_value = kernel.max_entry();
    let hs = hs_norm(kernel);

    let c3_monotone = (0..d).all(|x| (1..d).all(|y| kernel.entry(x, y - 1) <= kernel.entry(x, y)));

    let t1 = kernel.t_one();
    let c3_constant = if t1.iter().all(|t| *t > 0.0) {
        let mut best = 0.0_f64;
        for x in 0..d {
            for y in 0..d {
                best = best.max(kernel.entry(x, y) / (t1[x] * t1[y]));
            }
        }
        Some(best)
    } else {
        None
    };

    let margin = as1_margin(kernel);
    ConditionReport {
        inf_value,
        inf_positive: inf_value > 0.0,
        sup_value,
        c1_bounded: sup_value.is_finite(),
        hs_norm: hs,
        c2_hs_below_one: hs < 1.0,
        c3_monotone,
        c3_constant,
        as1: margin.is_some(),
        as1_margin: margin,
    }
}

/// `m_q = (Σ_x e^{q T[1](x)} μ(x))^{-1}`.
pub fn tilt_normalizer(kernel: &Kernel, q: f64) -> Result<f64> {
    if !(q.is_finite() && q >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tilt q must be ≥ 0, got {q}"
        )));
    }
    let t1 = kernel.t_one();
    let top = t1.iter().copied().fold(0.0, f64::max);
    let shifted: f64 = t1
        .iter()
        .zip(kernel.space.weights())
        .map(|(t, w)| (q * (t - top)).exp() * w)
        .sum();
    Ok((-q * top).exp() / shifted)
}

/// `μ_q(x) = m_q e^{q T[1](x)} μ(x)`.
pub fn tilt_measure(kernel: &Kernel, q: f64) -> Result<TypeSpace> {
    if !(q.is_finite() && q >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tilt q must be ≥ 0, got {q}"
        )));
    }
    if q == 0.0 {
        return Ok(kernel.space.clone());
    }
    let t1 = kernel.t_one();
    let top = t1.iter().copied().fold(0.0, f64::max);
    let masses = t1
        .iter()
        .zip(kernel.space.weights())
        .map(|(t, w)| (q * (t - top)).exp() * w)
        .collect();
    TypeSpace::normalized(kernel.space.labels.clone(), masses)
}

/// `μ̂_D(y) = μ(y) / M_D` for `y ≤ D`; types above `D` are removed.
pub fn truncate_measure(space: &TypeSpace, d: u32) -> Result<TypeSpace> {
    let keep = space.labels.partition_point(|l| *l <= d);
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "truncation level {d} is below the smallest label {}",
            space.labels[0]
        )));
    }
    if keep == space.dim() {
        return Ok(space.clone());
    }
    TypeSpace::normalized(
        space.labels[..keep].to_vec(),
        space.weights[..keep].to_vec(),
    )
}
