//! Special functions, log-space arithmetic, samplers and a finite-difference
//! gradient checker.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Error, Result};
use crate::linalg::{dot, norm};

/// Below this argument `ln I_ν` is evaluated by its power series.
pub const SERIES_CROSSOVER: f64 = 30.0;
/// Orders at or above this use the Debye uniform expansion for large arguments.
const DEBYE_MIN_ORDER: f64 = 40.0;
/// The Hankel large-argument expansion is used while `ν² < HANKEL_RATIO · x`.
const HANKEL_RATIO: f64 = 16.0;

/// Seeded, reproducible random stream.
///
/// Identical seeds and identical call sequences give identical samples.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed so far.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Independent child stream, e.g. one per worker.
    pub fn fork(&mut self, stream: u64) -> RngState {
        let base = self.inner.next_u64();
        RngState::new(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn uniform(&mut self) -> f64 {
        // 53 random bits into [0, 1)
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn check_bessel_args(order: f64, x: f64) -> Result<()> {
    if !order.is_finite() || !x.is_finite() {
        return domain(format!("log_bessel_i: non-finite input (order={order}, x={x})"));
    }
    if order < 0.0 || x < 0.0 {
        return domain(format!("log_bessel_i: negative input (order={order}, x={x})"));
    }
    Ok(())
}

/// `ln Σ_k t_k` with `t_0 = 1`, `t_k = t_{k-1} (x²/4) / (k (k + ν))`.
///
/// This is `ln I_ν(x) − ν ln(x/2) + ln Γ(ν+1)`. All terms are positive, so the
/// sum is accumulated with periodic rescaling instead of in log space.
fn log_series_sum(order: f64, x: f64) -> f64 {
    const RESCALE: f64 = 1e250;
    let q = 0.25 * x * x;
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut offset = 0.0;
    let mut k = 0.0_f64;
    loop {
        k += 1.0;
        let ratio = q / (k * (k + order));
        term *= ratio;
        sum += term;
        if sum > RESCALE {
            sum /= RESCALE;
            term /= RESCALE;
            offset += RESCALE.ln();
        }
        if ratio < 1.0 && term <= sum * 1e-17 {
            break;
        }
    }
    offset + sum.ln()
}

fn log_bessel_series(order: f64, x: f64) -> f64 {
    order * (0.5 * x).ln() - ln_gamma(order + 1.0) + log_series_sum(order, x)
}

fn log_bessel_hankel(order: f64, x: f64) -> f64 {
    let mu = 4.0 * order * order;
    let mut sum = 1.0;
    let mut term = 1.0_f64;
    for k in 1..2000 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        let next = -term * (mu - odd * odd) / (8.0 * kf * x);
        if kf > order + 1.0 && next.abs() > term.abs() {
            break;
        }
        sum += next;
        term = next;
        if next.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

fn debye_polynomials(t: f64) -> [f64; 6] {
    let t2 = t * t;
    let p = |c: &[f64]| c.iter().rev().fold(0.0, |acc, &ci| acc * t2 + ci);
    [
        1.0,
        t * p(&[3.0, -5.0]) / 24.0,
        t2 * p(&[81.0, -462.0, 385.0]) / 1152.0,
        t * t2 * p(&[30375.0, -369603.0, 765765.0, -425425.0]) / 414720.0,
        t2 * t2
            * p(&[
                4465125.0,
                -94121676.0,
                349922430.0,
                -446185740.0,
                185910725.0,
            ])
            / 39813120.0,
        t * t2 * t2
            * p(&[
                1519035525.0,
                -49286948607.0,
                284499769554.0,
                -614135872350.0,
                566098157625.0,
                -188699385875.0,
            ])
            / 6688604160.0,
    ]
}

fn log_bessel_debye(order: f64, x: f64) -> f64 {
    let z = x / order;
    let sq = (1.0 + z * z).sqrt();
    let t = 1.0 / sq;
    let eta = sq + (z / (1.0 + sq)).ln();
    let mut sum = 0.0;
    let mut scale = 1.0;
    for u in debye_polynomials(t) {
        sum += u * scale;
        scale /= order;
    }
    order * eta - 0.5 * (2.0 * std::f64::consts::PI * order).ln() - 0.5 * sq.ln() + sum.ln()
}

/// Natural log of the modified Bessel function of the first kind, `ln I_ν(x)`.
///
/// Power series below x = 30; above it the Hankel large-argument expansion
/// for moderate orders and the Debye uniform expansion for ν ≥ 40, with the
/// (scaled, always convergent) series filling the remaining corner.
pub fn log_bessel_i(order: f64, x: f64) -> Result<f64> {
    check_bessel_args(order, x)?;
    if x == 0.0 {
        return Ok(if order == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let v = if x < SERIES_CROSSOVER {
        log_bessel_series(order, x)
    } else if order * order < HANKEL_RATIO * x {
        log_bessel_hankel(order, x)
    } else if order >= DEBYE_MIN_ORDER {
        log_bessel_debye(order, x)
    } else {
        log_bessel_series(order, x)
    };
    Ok(v)
}

/// `ln C_d(κ)` for the vMF density on the unit sphere in R^d.
///
/// At κ = 0 this is minus the log surface area of the sphere; small κ goes
/// through the series form so the limit is smooth.
pub fn log_vmf_norm_const(dim: usize, kappa: f64) -> Result<f64> {
    if dim < 2 {
        return domain(format!("log_vmf_norm_const: dim must be ≥ 2, got {dim}"));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return domain(format!("log_vmf_norm_const: invalid kappa {kappa}"));
    }
    let half = 0.5 * dim as f64;
    let order = half - 1.0;
    let log_two_pi = (2.0 * std::f64::consts::PI).ln();
    if kappa < SERIES_CROSSOVER {
        Ok(order * std::f64::consts::LN_2 + ln_gamma(order + 1.0)
            - half * log_two_pi
            - log_series_sum(order, kappa))
    } else {
        Ok(order * kappa.ln() - half * log_two_pi - log_bessel_i(order, kappa)?)
    }
}

/// Mean resultant length of the vMF, `A_d(κ) = I_{d/2}(κ) / I_{d/2−1}(κ)`.
///
/// Equals `−d/dκ ln C_d(κ)`.
pub fn vmf_mean_resultant(dim: usize, kappa: f64) -> Result<f64> {
    if dim < 2 {
        return domain(format!("vmf_mean_resultant: dim must be ≥ 2, got {dim}"));
    }
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let order = 0.5 * dim as f64 - 1.0;
    Ok((log_bessel_i(order + 1.0, kappa)? - log_bessel_i(order, kappa)?).exp())
}

/// Overflow-safe `ln Σ exp(x_i)`. `-∞` entries are allowed.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return domain("logsumexp of an empty list");
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max.is_infinite() {
        return Ok(max);
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    Ok(max + s.ln())
}

/// Normalizes log-scores into a probability vector.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(xs)?;
    Ok(xs.iter().map(|x| (x - lse).exp()).collect())
}

/// Log-probabilities `x_i − lse(x)`.
pub fn log_softmax(xs: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(xs)?;
    Ok(xs.iter().map(|x| x - lse).collect())
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "pearson",
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 points, got {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return domain("entropy: negative or non-finite probability");
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return domain(format!("entropy: probabilities sum to {total}"));
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// Uniform sample on the unit sphere in R^dim.
pub fn sample_unit_sphere(dim: usize, rng: &mut RngState) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws one unit vector from vMF(mu, kappa).
///
/// Wood's rejection sampler for the cosine `w = μ·x`, a uniform tangent
/// direction, and a Householder reflection taking e₁ onto μ. `kappa = ∞`
/// returns μ itself.
pub fn sample_vmf(mu: &[f64], kappa: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    let dim = mu.len();
    if dim < 2 {
        return domain("sample_vmf: dimension must be ≥ 2");
    }
    if ((norm(mu)) - 1.0).abs() > 1e-9 {
        return domain(format!("sample_vmf: mean direction has norm {}", norm(mu)));
    }
    if kappa.is_nan() || kappa < 0.0 {
        return domain(format!("sample_vmf: invalid kappa {kappa}"));
    }
    if kappa == f64::INFINITY {
        return Ok(mu.to_vec());
    }
    let w = sample_vmf_cosine(dim, kappa, rng);
    let tangent = sample_unit_sphere(dim - 1, rng);
    let r = (1.0 - w * w).max(0.0).sqrt();
    let mut x = Vec::with_capacity(dim);
    x.push(w);
    x.extend(tangent.iter().map(|t| r * t));

    // Householder reflection H = I − 2uuᵀ/|u|² with u = e₁ − μ maps e₁ to μ.
    let mut u = mu.iter().map(|m| -m).collect::<Vec<_>>();
    u[0] += 1.0;
    let uu = dot(&u, &u);
    if uu > 1e-30 {
        let c = 2.0 * dot(&u, &x) / uu;
        for (xi, ui) in x.iter_mut().zip(&u) {
            *xi -= c * ui;
        }
    }
    let n = norm(&x);
    Ok(x.into_iter().map(|v| v / n).collect())
}

fn sample_vmf_cosine(dim: usize, kappa: f64, rng: &mut RngState) -> f64 {
    let m = (dim - 1) as f64;
    // b = (−2κ + sqrt(4κ² + m²)) / m, written without cancellation
    let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
    let beta = Beta::new(0.5 * m, 0.5 * m).expect("beta parameters are positive");
    loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u = rng.uniform();
        if kappa * w + m * (1.0 - x0 * w).ln() - c >= u.ln() {
            return w.clamp(-1.0, 1.0);
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub errors: Vec<f64>,
    pub epsilon: f64,
}

/// Denominator floor for relative errors of near-zero gradient components.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Per-coordinate error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(mut loss: F, analytic: &[f64], params: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return domain(format!("grad_check: eps must be positive, got {eps}"));
    }
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "grad_check",
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let up = loss(&probe);
        probe[i] = params[i] - eps;
        let down = loss(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation { index: i });
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let den = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        errors.push((a - numeric).abs() / den);
    }
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        errors,
        epsilon: eps,
    })
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // ln I_ν(x) from mpmath at 40 significant digits.
    const LN_BESSEL_ORACLE: [(f64, f64, f64); 16] = [
        (0.0, 0.1, 0.0024984392338762433813),
        (0.0, 1.0, 0.23591435850717864869),
        (0.0, 10.0, 7.9429720831186955545),
        (0.0, 100.0, 96.779732689942583717),
        (0.5, 0.1, -1.3754177876781698139),
        (0.5, 1.0, -0.064351991073531798753),
        (0.5, 10.0, 7.9297689182371507916),
        (0.5, 100.0, 96.778476373801281574),
        (1.0, 0.1, -2.9944825338622049398),
        (1.0, 1.0, -0.57064798749083128142),
        (1.0, 10.0, 7.8902038341042122935),
        (1.0, 100.0, 96.774707457591448463),
        (31.0, 0.1, -170.95984590858150865),
        (31.0, 1.0, -99.571974575165503456),
        (31.0, 10.0, -27.427374064197923471),
        (31.0, 100.0, 91.988975079706840893),
    ];

    #[test]
    fn log_bessel_matches_high_precision_values() {
        for &(order, x, expected) in &LN_BESSEL_ORACLE {
            let got = log_bessel_i(order, x).unwrap();
            assert!(
                (got - expected).abs() < 1e-10 * expected.abs().max(1.0),
                "ln I_{order}({x}) = {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn log_bessel_large_arguments() {
        // mpmath values
        let cases = [
            (0.0, 1e4, 9994.475903781432301005),
            (0.5, 1e6, 999992.1733061878131902),
            (20.0, 1e3, 995.4272154672798901938),
            (40.0, 30.0, 3.18037187658220721108),
            (40.0, 1e4, 9994.395899887697061188),
        ];
        for (order, x, expected) in cases {
            let got = log_bessel_i(order, x).unwrap();
            assert_relative_eq!(got, expected, max_relative = 1e-11);
        }
    }

    #[test]
    fn log_bessel_special_points_and_errors() {
        assert_eq!(log_bessel_i(0.0, 0.0).unwrap(), 0.0);
        let half = (2.0 / std::f64::consts::PI).sqrt() * 1f64.sinh();
        assert_relative_eq!(log_bessel_i(0.5, 1.0).unwrap(), half.ln(), epsilon = 1e-14);
        assert!(log_bessel_i(0.0, -1.0).is_err());
        assert!(log_bessel_i(-0.5, 1.0).is_err());
        assert!(log_bessel_i(0.0, f64::NAN).is_err());
        assert!(log_bessel_i(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn log_bessel_is_continuous_at_series_crossover() {
        for order in [0.0, 0.5, 1.0, 2.5, 10.0, 15.0, 21.0, 30.0, 39.0, 40.0, 60.0] {
            let below = log_bessel_series(order, SERIES_CROSSOVER);
            let above = log_bessel_i(order, SERIES_CROSSOVER).unwrap();
            let rel = (below - above).abs() / above.abs().max(1.0);
            assert!(rel < 1e-10, "order {order}: series {below} vs {above}");
        }
    }

    #[test]
    fn norm_const_closed_forms() {
        let four_pi = 4.0 * std::f64::consts::PI;
        assert_relative_eq!(log_vmf_norm_const(3, 0.0).unwrap(), -four_pi.ln(), epsilon = 1e-12);
        for kappa in [1e-3, 0.5, 2.0, 10.0, 29.9, 30.0, 50.0, 300.0] {
            let closed = (kappa / (four_pi * f64::sinh(kappa))).ln();
            assert_relative_eq!(log_vmf_norm_const(3, kappa).unwrap(), closed, max_relative = 1e-10);
        }
        assert_relative_eq!(log_vmf_norm_const(3, 2.0).unwrap(), -3.1262444390235136, epsilon = 1e-12);
        assert_relative_eq!(log_vmf_norm_const(2, 1.0).unwrap(), -2.0737914249165241, epsilon = 1e-12);
        assert!(log_vmf_norm_const(1, 1.0).is_err());
    }

    #[test]
    fn mean_resultant_in_three_dims_is_langevin() {
        for kappa in [0.1f64, 1.0, 5.0, 40.0, 400.0] {
            let langevin = 1.0 / kappa.tanh() - 1.0 / kappa;
            assert_relative_eq!(vmf_mean_resultant(3, kappa).unwrap(), langevin, max_relative = 1e-9);
        }
        assert_eq!(vmf_mean_resultant(3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn logsumexp_examples() {
        assert_relative_eq!(logsumexp(&[0.0, 0.0]).unwrap(), std::f64::consts::LN_2);
        assert_relative_eq!(logsumexp(&[1000.0, 1000.0]).unwrap(), 1000.0 + std::f64::consts::LN_2);
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        assert!(logsumexp(&[]).is_err());
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_examples() {
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(), -1.0);
        // cov = 5.5, sxx = 5, syy = 8.75 by hand
        let expected = 5.5 / (5.0f64 * 8.75).sqrt();
        assert_relative_eq!(
            pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap(),
            expected,
            epsilon = 1e-14
        );
        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_relative_eq!(entropy(&[0.1; 10]).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap(), std::f64::consts::LN_2);
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn uniform_vmf_has_vanishing_mean() {
        let mut rng = RngState::new(7);
        let mu = [0.0, 0.0, 1.0];
        let mut acc = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let x = sample_vmf(&mu, 0.0, &mut rng).unwrap();
            for k in 0..3 {
                acc[k] += x[k] / n as f64;
            }
        }
        assert!(norm(&acc) < 0.02);
    }

    #[test]
    fn concentrated_vmf_stays_near_mean() {
        let mut rng = RngState::new(11);
        let mu = crate::linalg::normalized(&[1.0, -2.0, 0.5, 3.0]);
        for _ in 0..2000 {
            let x = sample_vmf(&mu, 1e6, &mut rng).unwrap();
            let angle = dot(&x, &mu).clamp(-1.0, 1.0).acos();
            assert!(angle < 0.01);
        }
    }

    #[test]
    fn vmf_rejects_non_unit_mean() {
        let mut rng = RngState::new(1);
        assert!(sample_vmf(&[1.0, 1.0, 0.0], 1.0, &mut rng).is_err());
    }

    #[test]
    fn grad_check_examples() {
        let p = [1.0, 2.0];
        let report = grad_check(|q| q.iter().map(|x| x * x).sum(), &[2.0, 4.0], &p, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-8);
        let report = grad_check(|_| 3.5, &[0.0, 0.0], &p, 1e-5).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
        assert!(matches!(
            grad_check(|q| if q[0] > 1.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], &p, 1e-5),
            Err(Error::Evaluation { index: 0 })
        ));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.word_pos(), b.word_pos());
    }

    proptest! {
        #[test]
        fn norm_const_decreases_in_kappa(dim in 2usize..12, k in 0.0f64..200.0, dk in 1e-3f64..5.0) {
            let a = log_vmf_norm_const(dim, k).unwrap();
            let b = log_vmf_norm_const(dim, k + dk).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn logsumexp_shift(xs in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -1e3f64..1e3) {
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&xs).unwrap() + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }

        #[test]
        fn pearson_affine_invariance(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..30),
            a in 0.1f64..10.0, b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x + (i as f64).sin()).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                let r2 = pearson(&xt, &ys).unwrap();
                prop_assert!((r - r2).abs() < 1e-10);
            }
        }

        #[test]
        fn vmf_samples_are_unit(seed in 0u64..1000, kappa in 0.0f64..1e4, dim in 2usize..10) {
            let mut rng = RngState::new(seed);
            let mu = sample_unit_sphere(dim, &mut rng);
            let x = sample_vmf(&mu, kappa, &mut rng).unwrap();
            prop_assert!((norm(&x) - 1.0).abs() < 1e-9);
        }
    }
}
