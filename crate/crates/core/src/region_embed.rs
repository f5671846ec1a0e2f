//! Learning the region projection `h = Λ f^(r)` from sample-wise similarity
//! plus alignment with the sample embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{cosine, dot, norm, orientation_vjp, strength_grad, strength_orientation, Matrix};
use crate::numutil::{log_vmf_norm_const, softmax, vmf_mean_resultant, RngState};
use crate::sample_embed::backtracking_step;
use crate::vmf::KappaTable;

/// A K×H×W feature map stored channel-major; region `r = row·W + col`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels * height * width != values.len() {
            return Err(Error::DimensionMismatch {
                context: "feature map values",
                expected: channels * height * width,
                found: values.len(),
            });
        }
        if height * width == 0 {
            return domain("feature map needs at least one region");
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("feature map has non-finite values");
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            values,
        })
    }

    /// Builds a map from per-region K-vectors in row-major region order.
    pub fn from_regions(height: usize, width: usize, regions: &[Vec<f64>]) -> Result<Self> {
        if regions.len() != height * width {
            return Err(Error::DimensionMismatch {
                context: "region count",
                expected: height * width,
                found: regions.len(),
            });
        }
        let k = regions.first().map_or(0, Vec::len);
        let hw = height * width;
        let mut values = vec![0.0; k * hw];
        for (r, f) in regions.iter().enumerate() {
            if f.len() != k {
                return Err(Error::DimensionMismatch {
                    context: "regional feature",
                    expected: k,
                    found: f.len(),
                });
            }
            for (c, v) in f.iter().enumerate() {
                values[c * hw + r] = *v;
            }
        }
        FeatureMap::new(k, height, width, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn regions_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn region(&self, r: usize) -> Vec<f64> {
        let hw = self.regions_count();
        (0..self.channels).map(|c| self.values[c * hw + r]).collect()
    }

    pub fn regions(&self) -> Vec<Vec<f64>> {
        (0..self.regions_count()).map(|r| self.region(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProjection {
    pub matrix: Matrix,
}

pub fn project_regions(lambda: &Matrix, fmap: &FeatureMap) -> Result<Vec<Vec<f64>>> {
    if lambda.cols() != fmap.channels() {
        return Err(Error::DimensionMismatch {
            context: "region projection columns vs channels",
            expected: fmap.channels(),
            found: lambda.cols(),
        });
    }
    fmap.regions().iter().map(|f| lambda.matvec(f)).collect()
}

/// `P(x₂|x₁) ∝ exp[κ_p cos(z₂, z₁)]` over `x₂ ≠ x₁`; zero diagonal.
pub fn sample_similarity_p(logits: &[Vec<f64>], kappa_p: f64) -> Result<Vec<Vec<f64>>> {
    let n = logits.len();
    if n < 2 {
        return domain("sample_similarity_p: need at least two samples");
    }
    if !(kappa_p >= 0.0) || !kappa_p.is_finite() {
        return domain(format!("sample_similarity_p: invalid kappa_p {kappa_p}"));
    }
    if logits.iter().any(|z| norm(z) == 0.0) {
        return domain("sample_similarity_p: zero-norm logit vector");
    }
    (0..n)
        .map(|i| {
            let scores: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| kappa_p * cosine(&logits[j], &logits[i])).collect();
            Ok(with_zero_diagonal(&softmax(&scores)?, i))
        })
        .collect()
}

fn with_zero_diagonal(off: &[f64], i: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(off.len() + 1);
    row.extend_from_slice(&off[..i]);
    row.push(0.0);
    row.extend_from_slice(&off[i..]);
    row
}

/// Region of `h1` whose normalized direction best explains `h2_r` under the
/// revised vMF; ties go to the lowest index.
pub fn region_match(h2_r: &[f64], h1: &[Vec<f64>], table: &KappaTable) -> Result<(usize, f64)> {
    if h1.is_empty() {
        return domain("region_match: empty candidate list");
    }
    let (l, o) = strength_orientation(h2_r);
    let kappa = table.lookup(l);
    let log_c = log_vmf_norm_const(table.dim(), kappa)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, cand) in h1.iter().enumerate() {
        let (_, mu) = strength_orientation(cand);
        let ll = log_c + kappa * dot(&o, &mu);
        if ll > best.1 {
            best = (i, ll);
        }
    }
    Ok(best)
}

/// Precomputed regional features and logits for a batch of samples.
#[derive(Debug, Clone)]
pub struct RegionBatch {
    /// `regions[x][r]` is the K-vector `f^(r)` of sample `x`.
    pub regions: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

impl RegionBatch {
    pub fn new(fmaps: &[FeatureMap], logits: Vec<Vec<f64>>) -> Result<Self> {
        if fmaps.len() != logits.len() {
            return Err(Error::DimensionMismatch {
                context: "feature maps vs logits",
                expected: fmaps.len(),
                found: logits.len(),
            });
        }
        if let Some(first) = fmaps.first() {
            for f in fmaps {
                if f.dims() != first.dims() {
                    return domain("region batch: feature maps differ in shape");
                }
            }
        }
        Ok(RegionBatch {
            regions: fmaps.iter().map(FeatureMap::regions).collect(),
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions_per_sample(&self) -> usize {
        self.regions.first().map_or(0, Vec::len)
    }

    pub fn channels(&self) -> usize {
        self.regions.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }
}

/// Loss value and gradient with respect to the projection matrix.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Matrix,
}

/// `matches[x1][x2][r]`: region of `x1` matched to region `r` of `x2`
/// (entries with `x1 == x2` are unused).
pub type Matches = Vec<Vec<Vec<usize>>>;

fn project_batch(lambda: &Matrix, batch: &RegionBatch) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .regions
        .par_iter()
        .map(|regions| regions.iter().map(|f| lambda.matvec(f)).collect())
        .collect()
}

struct Projected {
    kappa: f64,
    slope: f64,
    log_c: f64,
    orientation: Vec<f64>,
}

fn describe(h: &[Vec<Vec<f64>>], table: &KappaTable) -> Result<Vec<Vec<Projected>>> {
    h.par_iter()
        .map(|regions| {
            regions
                .iter()
                .map(|v| {
                    let (l, o) = strength_orientation(v);
                    let (kappa, slope) = table.lookup_with_slope(l);
                    Ok(Projected {
                        kappa,
                        slope,
                        log_c: log_vmf_norm_const(table.dim(), kappa)?,
                        orientation: o,
                    })
                })
                .collect()
        })
        .collect()
}

/// Matches for every ordered pair under projection `lambda`.
pub fn compute_matches(batch: &RegionBatch, lambda: &Matrix, table: &KappaTable) -> Result<Matches> {
    let h = project_batch(lambda, batch)?;
    matches_from_projected(&h, table)
}

fn matches_from_projected(h: &[Vec<Vec<f64>>], table: &KappaTable) -> Result<Matches> {
    let desc = describe(h, table)?;
    let n = h.len();
    Ok((0..n)
        .into_par_iter()
        .map(|x1| {
            (0..n)
                .map(|x2| {
                    if x1 == x2 {
                        return Vec::new();
                    }
                    desc[x2]
                        .iter()
                        .map(|p2| {
                            let mut best = (0, f64::NEG_INFINITY);
                            for (i, p1) in desc[x1].iter().enumerate() {
                                let s = p2.kappa * dot(&p2.orientation, &p1.orientation);
                                if s > best.1 {
                                    best = (i, s);
                                }
                            }
                            best.0
                        })
                        .collect()
                })
                .collect()
        })
        .collect())
}

fn check_similarity_inputs(batch: &RegionBatch, lambda: &Matrix, weights: &[Vec<f64>], p: &[Vec<f64>]) -> Result<()> {
    let n = batch.len();
    if n < 2 {
        return domain("similarity loss: need at least two samples");
    }
    if lambda.cols() != batch.channels() {
        return Err(Error::DimensionMismatch {
            context: "region projection columns vs channels",
            expected: batch.channels(),
            found: lambda.cols(),
        });
    }
    if weights.len() != n || p.len() != n {
        return Err(Error::DimensionMismatch {
            context: "similarity weights / P rows",
            expected: n,
            found: weights.len().min(p.len()),
        });
    }
    for w in weights {
        if w.len() != batch.regions_per_sample() {
            return Err(Error::DimensionMismatch {
                context: "region weights",
                expected: batch.regions_per_sample(),
                found: w.len(),
            });
        }
    }
    Ok(())
}

/// Similarity KL with fixed matches; returns loss and `∂/∂Λ`.
pub fn similarity_loss_with_matches(
    batch: &RegionBatch,
    lambda: &Matrix,
    weights: &[Vec<f64>],
    table: &KappaTable,
    p: &[Vec<f64>],
    matches: &Matches,
) -> Result<LossGrad> {
    check_similarity_inputs(batch, lambda, weights, p)?;
    let n = batch.len();
    let dim = table.dim();
    let h = project_batch(lambda, batch)?;
    let desc = describe(&h, table)?;
    let inv_n = 1.0 / n as f64;
    let parts: Vec<(f64, Matrix)> = (0..n)
        .into_par_iter()
        .map(|x1| {
            let mut scores = Vec::with_capacity(n - 1);
            for x2 in (0..n).filter(|&x2| x2 != x1) {
                let mut s = 0.0;
                for (r, p2) in desc[x2].iter().enumerate() {
                    let p1 = &desc[x1][matches[x1][x2][r]];
                    s += weights[x2][r] * (p2.log_c + p2.kappa * dot(&p2.orientation, &p1.orientation));
                }
                scores.push(s);
            }
            let q = with_zero_diagonal(&softmax(&scores)?, x1);
            let loss: f64 = p[x1]
                .iter()
                .zip(&q)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
                .sum();
            let mut grad = Matrix::zeros(lambda.rows(), lambda.cols());
            for x2 in (0..n).filter(|&x2| x2 != x1) {
                let coef = (q[x2] - p[x1][x2]) * inv_n;
                if coef == 0.0 {
                    continue;
                }
                for (r, p2) in desc[x2].iter().enumerate() {
                    let w = weights[x2][r] * coef;
                    if w == 0.0 {
                        continue;
                    }
                    let r1 = matches[x1][x2][r];
                    let p1 = &desc[x1][r1];
                    let h2 = &h[x2][r];
                    let h1 = &h[x1][r1];
                    let cos = dot(&p2.orientation, &p1.orientation);
                    // d/dh2: κ'·(−A_d(κ) + cos)·∇l + κ·J_o2ᵀ o1
                    let mut d2 = orientation_vjp(h2, &p1.orientation);
                    d2.iter_mut().for_each(|x| *x *= p2.kappa);
                    if p2.slope != 0.0 {
                        let a = vmf_mean_resultant(dim, p2.kappa)?;
                        let s = p2.slope * (cos - a);
                        d2.iter_mut().zip(strength_grad(h2)).for_each(|(x, gl)| *x += s * gl);
                    }
                    let mut d1 = orientation_vjp(h1, &p2.orientation);
                    d1.iter_mut().for_each(|x| *x *= p2.kappa);
                    grad.add_outer(w, &d2, &batch.regions[x2][r]);
                    grad.add_outer(w, &d1, &batch.regions[x1][r1]);
                }
            }
            Ok((loss * inv_n, grad))
        })
        .collect::<Result<_>>()?;
    let mut out = LossGrad {
        loss: 0.0,
        grad: Matrix::zeros(lambda.rows(), lambda.cols()),
    };
    for (l, g) in &parts {
        out.loss += l;
        out.grad.add_assign(g);
    }
    Ok(out)
}

/// Similarity KL with matches computed at `lambda`.
pub fn similarity_loss(
    batch: &RegionBatch,
    lambda: &Matrix,
    weights: &[Vec<f64>],
    table: &KappaTable,
    kappa_p: f64,
) -> Result<LossGrad> {
    let p = sample_similarity_p(&batch.logits, kappa_p)?;
    let matches = compute_matches(batch, lambda, table)?;
    similarity_loss_with_matches(batch, lambda, weights, table, &p, &matches)
}

/// `−Σ_r w_r cos(g, h_r)` and its gradient with respect to each `h_r`.
pub fn align_loss(h: &[Vec<f64>], w: &[f64], g: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    if h.len() != w.len() {
        return Err(Error::DimensionMismatch {
            context: "align weights",
            expected: h.len(),
            found: w.len(),
        });
    }
    let gn = norm(g);
    if gn == 0.0 {
        return domain("align_loss: zero-norm sample embedding");
    }
    let g_hat: Vec<f64> = g.iter().map(|x| x / gn).collect();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(h.len());
    for (hr, &wr) in h.iter().zip(w) {
        if hr.len() != g.len() {
            return Err(Error::DimensionMismatch {
                context: "align embedding dim",
                expected: g.len(),
                found: hr.len(),
            });
        }
        let hn = norm(hr);
        if hn == 0.0 {
            grads.push(vec![0.0; hr.len()]);
            continue;
        }
        let cos = cosine(g, hr);
        loss -= wr * cos;
        grads.push(hr.iter().zip(&g_hat).map(|(hi, gi)| -wr * (gi - cos * hi / hn) / hn).collect());
    }
    Ok((loss, grads))
}

/// Batch-mean align loss and its gradient with respect to Λ.
pub fn align_loss_batch(batch: &RegionBatch, lambda: &Matrix, weights: &[Vec<f64>], g: &[Vec<f64>]) -> Result<LossGrad> {
    if g.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "sample embeddings",
            expected: batch.len(),
            found: g.len(),
        });
    }
    let h = project_batch(lambda, batch)?;
    let inv_n = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Vec<Vec<f64>>)> = h
        .par_iter()
        .zip(weights.par_iter())
        .zip(g.par_iter())
        .map(|((hx, wx), gx)| align_loss(hx, wx, gx))
        .collect::<Result<_>>()?;
    let mut out = LossGrad {
        loss: 0.0,
        grad: Matrix::zeros(lambda.rows(), lambda.cols()),
    };
    for (x, (l, dh)) in parts.iter().enumerate() {
        out.loss += l * inv_n;
        for (r, d) in dh.iter().enumerate() {
            out.grad.add_outer(inv_n, d, &batch.regions[x][r]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub dim: usize,
    pub kappa_p: f64,
    pub alpha: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            dim: 3,
            kappa_p: 10.0,
            alpha: 0.1,
            learning_rate: 0.1,
            iterations: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegionFit {
    pub projection: RegionProjection,
    /// Total loss `L_similarity + α·L_align` at the start and after each step.
    pub loss_trace: Vec<f64>,
}

/// Random `Λ` with entries `N(0, 1/K)`, redrawn if it comes out all zero.
pub fn init_region_projection(dim: usize, channels: usize, rng: &mut RngState) -> Matrix {
    loop {
        let m = Matrix::random_normal(dim, channels, 1.0 / (channels as f64).sqrt(), rng);
        if m.frobenius_norm() > 0.0 {
            return m;
        }
    }
}

fn total_loss(
    batch: &RegionBatch,
    lambda: &Matrix,
    weights: &[Vec<f64>],
    g: &[Vec<f64>],
    table: &KappaTable,
    p: &[Vec<f64>],
    alpha: f64,
) -> Result<LossGrad> {
    let matches = compute_matches(batch, lambda, table)?;
    let mut sim = similarity_loss_with_matches(batch, lambda, weights, table, p, &matches)?;
    if alpha != 0.0 {
        let al = align_loss_batch(batch, lambda, weights, g)?;
        sim.loss += alpha * al.loss;
        sim.grad = sim.grad.add_scaled(alpha, &al.grad);
    }
    Ok(sim)
}

/// Gradient descent with backtracking on `L_similarity + α·L_align`;
/// matches are refreshed at every evaluated point.
pub fn fit_region_projection(
    batch: &RegionBatch,
    g: &[Vec<f64>],
    weights: &[Vec<f64>],
    table: &KappaTable,
    config: &SimilarityConfig,
) -> Result<RegionFit> {
    if config.dim != table.dim() {
        return Err(Error::DimensionMismatch {
            context: "region projection dim vs kappa table",
            expected: table.dim(),
            found: config.dim,
        });
    }
    if !(config.learning_rate > 0.0) || !(config.alpha >= 0.0) || !(config.kappa_p >= 0.0) {
        return Err(Error::Config("region fit needs positive learning rate and nonnegative alpha, kappa_p".into()));
    }
    let p = sample_similarity_p(&batch.logits, config.kappa_p)?;
    let mut rng = RngState::new(config.seed);
    let mut lambda = init_region_projection(config.dim, batch.channels(), &mut rng);
    let mut current = total_loss(batch, &lambda, weights, g, table, &p, config.alpha)?;
    if !current.loss.is_finite() {
        return Err(Error::Divergence {
            stage: "region fit",
            loss: current.loss,
        });
    }
    let mut trace = vec![current.loss];
    let mut lr = config.learning_rate;
    for _ in 0..config.iterations {
        if !current.grad.is_finite() {
            return Err(Error::Divergence {
                stage: "region fit gradient",
                loss: current.loss,
            });
        }
        let eval = |trial: &Matrix| Ok(total_loss(batch, trial, weights, g, table, &p, config.alpha)?.loss);
        match backtracking_step(&lambda, &current.grad, current.loss, lr, eval)? {
            Some((next, _, next_lr)) => {
                lambda = next;
                lr = next_lr.min(config.learning_rate * 1e3);
                current = total_loss(batch, &lambda, weights, g, table, &p, config.alpha)?;
                trace.push(current.loss);
            }
            None => break,
        }
    }
    Ok(RegionFit {
        projection: RegionProjection { matrix: lambda },
        loss_trace: trace,
    })
}
