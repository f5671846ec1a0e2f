//! The von Mises-Fisher density, its concentration MLE, and the
//! strength-dependent concentration table κ(l) of the revised vMF.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{cosine, norm};
use crate::numutil::{log_vmf_norm_const, vmf_mean_resultant, RngState};

/// Concentration returned when the sample mean resultant is (numerically) 1.
pub const KAPPA_MAX: f64 = 1e6;
/// Number of grid points in the default strength grid.
pub const DEFAULT_GRID_POINTS: usize = 64;
/// Lower end of the default strength grid.
pub const DEFAULT_GRID_MIN: f64 = 1e-3;

/// Mean direction and concentration of a vMF distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    pub fn new(mu: Vec<f64>, kappa: f64) -> Result<Self> {
        if mu.len() < 2 {
            return domain("vMF mean direction needs dimension ≥ 2");
        }
        if (norm(&mu) - 1.0).abs() > 1e-9 {
            return domain(format!("vMF mean direction has norm {}", norm(&mu)));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return domain(format!("vMF concentration must be finite and ≥ 0, got {kappa}"));
        }
        Ok(VmfParams { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `ln C_d(κ) + κ cos(μ, f)`; depends on `f` only through its direction.
pub fn vmf_log_pdf(f: &[f64], params: &VmfParams) -> Result<f64> {
    if f.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "vmf_log_pdf",
            expected: params.dim(),
            found: f.len(),
        });
    }
    if norm(f) == 0.0 {
        return domain("vmf_log_pdf: zero-norm feature");
    }
    Ok(log_vmf_norm_const(params.dim(), params.kappa)? + params.kappa * cosine(&params.mu, f))
}

/// Solves `A_d(κ) = R` for mean resultant `R`.
///
/// Starts from the closed form `R(d − R²) / (1 − R²)`, which overshoots by a
/// few percent in low dimension, and polishes it with Newton steps using
/// `A'(κ) = 1 − A² − (d − 1)A/κ`.
pub fn kappa_from_resultant(resultant: f64, dim: usize) -> f64 {
    if resultant <= 0.0 {
        return 0.0;
    }
    if resultant >= 1.0 - 1e-9 {
        return KAPPA_MAX;
    }
    let r2 = resultant * resultant;
    let mut kappa = (resultant * (dim as f64 - r2) / (1.0 - r2)).min(KAPPA_MAX);
    let d1 = dim as f64 - 1.0;
    for _ in 0..50 {
        let Ok(a) = vmf_mean_resultant(dim, kappa) else {
            break;
        };
        let slope = 1.0 - a * a - d1 * a / kappa;
        if !(slope > 0.0) {
            break;
        }
        let mut next = kappa - (a - resultant) / slope;
        if !(next > 0.0) {
            next = 0.5 * kappa;
        }
        let done = (next - kappa).abs() <= 1e-12 * kappa;
        kappa = next.min(KAPPA_MAX);
        if done {
            break;
        }
    }
    kappa
}

/// Estimates κ from the mean of the normalized samples.
pub fn estimate_kappa_mle(samples: &[Vec<f64>], dim: usize) -> Result<f64> {
    if samples.len() < 2 {
        return domain(format!(
            "estimate_kappa_mle needs at least 2 samples, got {}",
            samples.len()
        ));
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "estimate_kappa_mle",
                expected: dim,
                found: s.len(),
            });
        }
        let n = norm(s);
        if n == 0.0 {
            return domain("estimate_kappa_mle: zero-norm sample");
        }
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let count = samples.len() as f64;
    let resultant = norm(&mean) / count;
    Ok(kappa_from_resultant(resultant, dim))
}

/// Pool-adjacent-violators: least-squares non-decreasing fit with unit weights.
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    // (block mean, block size)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let n = n1 + n2;
            *blocks.last_mut().unwrap() = ((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// 64 log-spaced strengths on `[1e-3, 2 · max_strength]`.
pub fn default_strength_grid(max_strength: f64) -> Vec<f64> {
    let hi = (2.0 * max_strength).max(2.0 * DEFAULT_GRID_MIN);
    let (lo_ln, hi_ln) = (DEFAULT_GRID_MIN.ln(), hi.ln());
    let steps = (DEFAULT_GRID_POINTS - 1) as f64;
    (0..DEFAULT_GRID_POINTS)
        .map(|i| (lo_ln + (hi_ln - lo_ln) * i as f64 / steps).exp())
        .collect()
}

/// Strength → concentration map κ(l) for features in R^dim with noise scale σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaTable {
    dim: usize,
    sigma: f64,
    sample_count: usize,
    strengths: Vec<f64>,
    kappas: Vec<f64>,
}

impl KappaTable {
    /// Validates and wraps precomputed grid values.
    pub fn from_parts(
        dim: usize,
        sigma: f64,
        sample_count: usize,
        strengths: Vec<f64>,
        kappas: Vec<f64>,
    ) -> Result<Self> {
        if dim < 2 {
            return domain(format!("kappa table dimension must be ≥ 2, got {dim}"));
        }
        if strengths.is_empty() {
            return domain("kappa table needs a nonempty strength grid");
        }
        if strengths.len() != kappas.len() {
            return Err(Error::DimensionMismatch {
                context: "kappa table arrays",
                expected: strengths.len(),
                found: kappas.len(),
            });
        }
        if strengths.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return domain("kappa table strengths must be finite and ≥ 0");
        }
        if strengths.windows(2).any(|w| w[1] <= w[0]) {
            return domain("kappa table strengths must be strictly ascending");
        }
        if kappas.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return domain("kappa table concentrations must be finite and ≥ 0");
        }
        if kappas.windows(2).any(|w| w[1] < w[0]) {
            return domain("kappa table concentrations must be non-decreasing");
        }
        Ok(KappaTable {
            dim,
            sigma,
            sample_count,
            strengths,
            kappas,
        })
    }

    /// A table with the same κ at every strength.
    pub fn constant(dim: usize, kappa: f64) -> Result<Self> {
        KappaTable::from_parts(dim, 0.0, 0, vec![0.0, 1.0], vec![kappa, kappa])
    }

    /// Monte-Carlo construction of κ(l).
    ///
    /// For each grid strength `l`, draws `f_i = l·μ + ε_i` with
    /// `ε_i ~ N(0, σ² I)`, estimates κ̂ from the normalized samples, and
    /// finally enforces monotonicity with an isotonic pass.
    pub fn build(
        dim: usize,
        sigma: f64,
        strengths: &[f64],
        sample_count: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if strengths.is_empty() {
            return domain("build_kappa_table: empty strength grid");
        }
        if sample_count < 100 {
            return domain(format!(
                "build_kappa_table: sample_count must be ≥ 100, got {sample_count}"
            ));
        }
        if dim < 2 {
            return domain(format!("build_kappa_table: dim must be ≥ 2, got {dim}"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return domain(format!("build_kappa_table: sigma must be positive, got {sigma}"));
        }
        if strengths.windows(2).any(|w| w[1] <= w[0]) || strengths.iter().any(|s| *s < 0.0) {
            return domain("build_kappa_table: grid must be nonnegative and strictly ascending");
        }
        let mut raw = Vec::with_capacity(strengths.len());
        let mut mean = vec![0.0; dim];
        let mut f = vec![0.0; dim];
        for &l in strengths {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for _ in 0..sample_count {
                for (k, fk) in f.iter_mut().enumerate() {
                    let pole = if k == 0 { l } else { 0.0 };
                    *fk = pole + sigma * rng.normal();
                }
                let n = norm(&f);
                if n == 0.0 {
                    continue;
                }
                for (m, x) in mean.iter_mut().zip(&f) {
                    *m += x / n;
                }
            }
            let resultant = norm(&mean) / sample_count as f64;
            raw.push(kappa_from_resultant(resultant, dim));
        }
        let kappas = isotonic_non_decreasing(&raw);
        KappaTable::from_parts(dim, sigma, sample_count, strengths.to_vec(), kappas)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn strengths(&self) -> &[f64] {
        &self.strengths
    }

    pub fn kappas(&self) -> &[f64] {
        &self.kappas
    }

    /// Piecewise-linear κ(l), clamped to the end values outside the grid.
    pub fn lookup(&self, l: f64) -> f64 {
        self.lookup_with_slope(l).0
    }

    /// κ(l) and dκ/dl. At a knot the right-hand segment's slope is used;
    /// outside the grid the slope is 0.
    pub fn lookup_with_slope(&self, l: f64) -> (f64, f64) {
        let s = &self.strengths;
        let k = &self.kappas;
        let last = s.len() - 1;
        if l <= s[0] {
            return (k[0], if l == s[0] && last > 0 { self.slope(0) } else { 0.0 });
        }
        if l >= s[last] {
            return (k[last], 0.0);
        }
        // s[i] <= l < s[i + 1]
        let i = s.partition_point(|&x| x <= l) - 1;
        let slope = self.slope(i);
        (k[i] + slope * (l - s[i]), slope)
    }

    fn slope(&self, i: usize) -> f64 {
        (self.kappas[i + 1] - self.kappas[i]) / (self.strengths[i + 1] - self.strengths[i])
    }
}

/// Revised-vMF log-likelihood of `f` for mean direction `mu`: the vMF log
/// density of `f/|f|` with concentration `κ(|f|)`.
pub fn revised_log_likelihood(f: &[f64], mu: &[f64], table: &KappaTable) -> Result<f64> {
    let l = norm(f);
    if l == 0.0 {
        return domain("revised_log_likelihood: zero-norm feature");
    }
    let params = VmfParams::new(mu.to_vec(), table.lookup(l))?;
    vmf_log_pdf(f, &params)
}
