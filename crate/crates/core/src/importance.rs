//! Region importance `w` and channel importance `v` per sample, and an exact
//! Shapley oracle over spatial regions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{norm, strength_orientation, Matrix};
use crate::numutil::{pearson, softmax};
use crate::region_embed::{sample_similarity_p, FeatureMap, RegionBatch};

/// Per-sample region weights `w` (length HW) and channel weights `v`
/// (length K); both nonnegative with unit L1 norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl ImportanceWeights {
    pub fn uniform(regions: usize, channels: usize) -> Self {
        ImportanceWeights {
            w: vec![1.0 / regions as f64; regions],
            v: vec![1.0 / channels as f64; channels],
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let ok = |x: &[f64]| x.iter().all(|v| *v >= 0.0) && (x.iter().sum::<f64>() - 1.0).abs() <= tol;
        ok(&self.w) && ok(&self.v)
    }
}

/// `κ̃ Σ_k v_k (f₂ₖ/‖f₂‖)(f₁ₖ/‖f₁‖)`, the log of the region score.
pub fn raw_region_score(f2: &[f64], f1: &[f64], v2: &[f64], kappa_tilde: f64) -> Result<f64> {
    if f2.len() != f1.len() || v2.len() != f2.len() {
        return Err(Error::DimensionMismatch {
            context: "raw_region_score",
            expected: f2.len(),
            found: f1.len().min(v2.len()),
        });
    }
    let (n2, n1) = (norm(f2), norm(f1));
    if n2 == 0.0 || n1 == 0.0 {
        return domain("raw_region_score: zero-norm regional feature");
    }
    let s: f64 = f2.iter().zip(f1).zip(v2).map(|((a, b), v)| v * (a / n2) * (b / n1)).sum();
    Ok(kappa_tilde * s)
}

/// Absolute values divided by their sum; all-zero input falls back to uniform.
pub fn project_l1(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().map(|x| x.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        log::warn!("project_l1: degenerate input of length {}, using uniform weights", values.len());
        return vec![1.0 / values.len() as f64; values.len()];
    }
    values.iter().map(|x| x.abs() / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub kappa_tilde: f64,
    pub kappa_p: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            kappa_tilde: 1000.0,
            kappa_p: 10.0,
            learning_rate: 1e-3,
            iterations: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImportanceLoss {
    pub loss: f64,
    pub grad_w: Vec<Vec<f64>>,
    pub grad_v: Vec<Vec<f64>>,
}

/// Unit orientations of every raw regional feature, `o[x][r]`.
pub(crate) fn orientations(batch: &RegionBatch) -> Vec<Vec<Vec<f64>>> {
    batch
        .regions
        .iter()
        .map(|regions| regions.iter().map(|f| strength_orientation(f).1).collect())
        .collect()
}

fn weighted_product(o2: &[f64], o1: &[f64], v2: &[f64]) -> f64 {
    o2.iter().zip(o1).zip(v2).map(|((a, b), v)| v * a * b).sum()
}

/// `matches[x1][x2][r] = argmax_{r′} score(f₂^(r), f₁^(r′), v₂)`.
pub fn importance_matches(batch: &RegionBatch, weights: &[ImportanceWeights]) -> Vec<Vec<Vec<usize>>> {
    let o = orientations(batch);
    matches_from(&o, weights)
}

fn matches_from(o: &[Vec<Vec<f64>>], weights: &[ImportanceWeights]) -> Vec<Vec<Vec<usize>>> {
    let n = o.len();
    (0..n)
        .into_par_iter()
        .map(|x1| {
            (0..n)
                .map(|x2| {
                    if x1 == x2 {
                        return Vec::new();
                    }
                    o[x2]
                        .iter()
                        .map(|o2| {
                            let mut best = (0, f64::NEG_INFINITY);
                            for (i, o1) in o[x1].iter().enumerate() {
                                let s = weighted_product(o2, o1, &weights[x2].v);
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
        .collect()
}

fn check_inputs(batch: &RegionBatch, weights: &[ImportanceWeights], p: &[Vec<f64>]) -> Result<()> {
    let n = batch.len();
    if n < 2 {
        return domain("importance loss: need at least two samples");
    }
    if weights.len() != n || p.len() != n {
        return Err(Error::DimensionMismatch {
            context: "importance weights / P rows",
            expected: n,
            found: weights.len().min(p.len()),
        });
    }
    for wt in weights {
        if wt.w.len() != batch.regions_per_sample() || wt.v.len() != batch.channels() {
            return Err(Error::DimensionMismatch {
                context: "importance weight lengths",
                expected: batch.regions_per_sample() + batch.channels(),
                found: wt.w.len() + wt.v.len(),
            });
        }
    }
    Ok(())
}

/// Importance KL with fixed matches, with gradients for every `w` and `v`.
pub fn importance_kl_loss_with_matches(
    batch: &RegionBatch,
    weights: &[ImportanceWeights],
    p: &[Vec<f64>],
    kappa_tilde: f64,
    matches: &[Vec<Vec<usize>>],
) -> Result<ImportanceLoss> {
    check_inputs(batch, weights, p)?;
    let o = orientations(batch);
    loss_from_orientations(&o, weights, p, kappa_tilde, matches)
}

fn loss_from_orientations(
    o: &[Vec<Vec<f64>>],
    weights: &[ImportanceWeights],
    p: &[Vec<f64>],
    kappa_tilde: f64,
    matches: &[Vec<Vec<usize>>],
) -> Result<ImportanceLoss> {
    let n = o.len();
    let inv_n = 1.0 / n as f64;
    let pair_score = |x1: usize, x2: usize| -> f64 {
        o[x2]
            .iter()
            .enumerate()
            .map(|(r, o2)| weights[x2].w[r] * kappa_tilde * weighted_product(o2, &o[x1][matches[x1][x2][r]], &weights[x2].v))
            .sum()
    };
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|x1| {
            let scores: Vec<f64> = (0..n).filter(|&x2| x2 != x1).map(|x2| pair_score(x1, x2)).collect();
            let off = softmax(&scores)?;
            let mut q = off[..x1].to_vec();
            q.push(0.0);
            q.extend_from_slice(&off[x1..]);
            let kl: f64 = p[x1]
                .iter()
                .zip(&q)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
                .sum();
            Ok((kl, q))
        })
        .collect::<Result<_>>()?;
    let loss = rows.iter().map(|(kl, _)| kl).sum::<f64>() * inv_n;

    let grads: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|x2| {
            let mut gw = vec![0.0; o[x2].len()];
            let mut gv = vec![0.0; weights[x2].v.len()];
            for x1 in (0..n).filter(|&x1| x1 != x2) {
                let coef = (rows[x1].1[x2] - p[x1][x2]) * inv_n;
                if coef == 0.0 {
                    continue;
                }
                for (r, o2) in o[x2].iter().enumerate() {
                    let o1 = &o[x1][matches[x1][x2][r]];
                    gw[r] += coef * kappa_tilde * weighted_product(o2, o1, &weights[x2].v);
                    let a = coef * kappa_tilde * weights[x2].w[r];
                    for ((g, a2), a1) in gv.iter_mut().zip(o2).zip(o1) {
                        *g += a * a2 * a1;
                    }
                }
            }
            (gw, gv)
        })
        .collect();
    let (grad_w, grad_v) = grads.into_iter().unzip();
    Ok(ImportanceLoss { loss, grad_w, grad_v })
}

/// Importance KL with matches taken at the given weights.
pub fn importance_kl_loss(batch: &RegionBatch, weights: &[ImportanceWeights], config: &ImportanceConfig) -> Result<ImportanceLoss> {
    let p = sample_similarity_p(&batch.logits, config.kappa_p)?;
    check_inputs(batch, weights, &p)?;
    let o = orientations(batch);
    let matches = matches_from(&o, weights);
    loss_from_orientations(&o, weights, &p, config.kappa_tilde, &matches)
}

#[derive(Debug, Clone)]
pub struct ImportanceFit {
    pub weights: Vec<ImportanceWeights>,
    /// Loss at the uniform start and after each accepted step.
    pub loss_trace: Vec<f64>,
}

/// Joint gradient step on all `w` and `v`, then L1 projection of each;
/// the projected point is accepted only if the loss does not increase.
pub fn fit_importance(batch: &RegionBatch, config: &ImportanceConfig) -> Result<ImportanceFit> {
    if !(config.kappa_tilde > 0.0) || !(config.learning_rate > 0.0) {
        return Err(Error::Config("importance fit needs positive kappa_tilde and learning rate".into()));
    }
    let n = batch.len();
    let mut weights = vec![ImportanceWeights::uniform(batch.regions_per_sample(), batch.channels()); n];
    let p = sample_similarity_p(&batch.logits, config.kappa_p)?;
    check_inputs(batch, &weights, &p)?;
    let o = orientations(batch);
    let eval = |wts: &[ImportanceWeights]| -> Result<ImportanceLoss> {
        let matches = matches_from(&o, wts);
        loss_from_orientations(&o, wts, &p, config.kappa_tilde, &matches)
    };
    let mut current = eval(&weights)?;
    if !current.loss.is_finite() {
        return Err(Error::Divergence {
            stage: "importance fit",
            loss: current.loss,
        });
    }
    let mut trace = vec![current.loss];
    let mut lr = config.learning_rate;
    for _ in 0..config.iterations {
        let mut accepted = None;
        let mut step = lr;
        for _ in 0..40 {
            let trial: Vec<ImportanceWeights> = weights
                .iter()
                .zip(current.grad_w.iter().zip(&current.grad_v))
                .map(|(wt, (gw, gv))| ImportanceWeights {
                    w: project_l1(&wt.w.iter().zip(gw).map(|(a, g)| a - step * g).collect::<Vec<_>>()),
                    v: project_l1(&wt.v.iter().zip(gv).map(|(a, g)| a - step * g).collect::<Vec<_>>()),
                })
                .collect();
            let next = eval(&trial)?;
            if next.loss.is_finite() && next.loss <= current.loss {
                accepted = Some((trial, next, step));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, next, step)) => {
                weights = trial;
                current = next;
                lr = (step * 1.5).min(config.learning_rate * 1e3);
                trace.push(current.loss);
            }
            None => break,
        }
    }
    Ok(ImportanceFit {
        weights,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOutput {
    /// Target-category logit.
    Logit,
    /// Target-category softmax probability.
    Probability,
}

/// Linear classifier over the spatial average of a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// C × K weights.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub output: HeadOutput,
}

impl LinearHead {
    pub fn new(weights: Matrix, bias: Vec<f64>, output: HeadOutput) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                context: "head bias",
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        Ok(LinearHead { weights, bias, output })
    }

    pub fn categories(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(pooled)?;
        z.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
        Ok(z)
    }

    pub fn value(&self, pooled: &[f64], target: usize) -> Result<f64> {
        let z = self.logits(pooled)?;
        match self.output {
            HeadOutput::Logit => Ok(z[target]),
            HeadOutput::Probability => Ok(softmax(&z)?[target]),
        }
    }

    pub fn describe(&self) -> String {
        let out = match self.output {
            HeadOutput::Logit => "logit",
            HeadOutput::Probability => "probability",
        };
        format!("linear head {}x{} over spatial average, {out} output", self.weights.rows(), self.weights.cols())
    }
}

pub fn spatial_average(fmap: &FeatureMap) -> Vec<f64> {
    let hw = fmap.regions_count();
    fmap.values().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

/// Replacement for masked-out regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "values")]
pub enum Baseline {
    Zero,
    /// Per-channel dataset mean.
    Mean(Vec<f64>),
}

impl Baseline {
    pub fn dataset_mean(fmaps: &[FeatureMap]) -> Result<Self> {
        let first = fmaps.first().ok_or_else(|| Error::Domain("dataset mean of empty set".into()))?;
        let mut acc = vec![0.0; first.channels()];
        for f in fmaps {
            for (a, m) in acc.iter_mut().zip(spatial_average(f)) {
                *a += m;
            }
        }
        acc.iter_mut().for_each(|a| *a /= fmaps.len() as f64);
        Ok(Baseline::Mean(acc))
    }

    fn vector(&self, channels: usize) -> Result<Vec<f64>> {
        match self {
            Baseline::Zero => Ok(vec![0.0; channels]),
            Baseline::Mean(m) if m.len() == channels => Ok(m.clone()),
            Baseline::Mean(m) => Err(Error::DimensionMismatch {
                context: "baseline channels",
                expected: channels,
                found: m.len(),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Zero => "zero",
            Baseline::Mean(_) => "dataset_mean",
        }
    }
}

pub const MAX_SHAPLEY_REGIONS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi: Vec<f64>,
    pub baseline: String,
    pub head: String,
    pub target: usize,
    pub full_value: f64,
    pub empty_value: f64,
    /// `|Σφ − (value(all) − value(none))|`.
    pub efficiency_residual: f64,
}

/// Exact Shapley values of the regions by enumerating all `2^HW` masks.
pub fn exact_shapley(fmap: &FeatureMap, head: &LinearHead, target: usize, baseline: &Baseline) -> Result<ShapleyReport> {
    let hw = fmap.regions_count();
    if hw > MAX_SHAPLEY_REGIONS {
        return Err(Error::TooManyRegions {
            regions: hw,
            limit: MAX_SHAPLEY_REGIONS,
        });
    }
    if target >= head.categories() {
        return domain(format!("exact_shapley: target {target} outside {} categories", head.categories()));
    }
    let k = fmap.channels();
    let base = baseline.vector(k)?;
    let deltas: Vec<Vec<f64>> = fmap
        .regions()
        .iter()
        .map(|f| f.iter().zip(&base).map(|(a, b)| (a - b) / hw as f64).collect())
        .collect();
    let values: Vec<f64> = (0..1usize << hw)
        .into_par_iter()
        .map(|mask| {
            let mut pooled = base.clone();
            for (r, d) in deltas.iter().enumerate() {
                if mask & (1 << r) != 0 {
                    pooled.iter_mut().zip(d).for_each(|(p, x)| *p += x);
                }
            }
            head.value(&pooled, target)
        })
        .collect::<Result<_>>()?;
    let mut fact = vec![1.0f64; hw + 1];
    for i in 1..=hw {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..hw).map(|s| fact[s] * fact[hw - s - 1] / fact[hw]).collect();
    let phi: Vec<f64> = (0..hw)
        .map(|r| {
            let bit = 1usize << r;
            (0..1usize << hw)
                .filter(|m| m & bit == 0)
                .map(|m| weight[m.count_ones() as usize] * (values[m | bit] - values[m]))
                .sum()
        })
        .collect();
    let full_value = values[(1 << hw) - 1];
    let empty_value = values[0];
    let efficiency_residual = (phi.iter().sum::<f64>() - (full_value - empty_value)).abs();
    Ok(ShapleyReport {
        phi,
        baseline: baseline.name().to_string(),
        head: head.describe(),
        target,
        full_value,
        empty_value,
        efficiency_residual,
    })
}

/// Pearson correlation between importance weights and Shapley values.
pub fn importance_shapley_correlation(w: &[f64], phi: &[f64]) -> Result<f64> {
    pearson(w, phi)
}
