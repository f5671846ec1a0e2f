//! Learning the sample projection `g = M f` so that the vMF mixture posterior
//! over `g` mimics the network's classification probabilities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{dot, norm, orientation_vjp, strength_grad, strength_orientation, Matrix};
use crate::mixture::{em_m_step, fit_em, posterior, EmConfig, EmInit, MixtureModel};
use crate::numutil::{entropy, pearson, softmax, RngState};
use crate::vmf::{default_strength_grid, KappaTable};

/// Features, logits and labels of a batch of samples. Labels are 0-based
/// category indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl SampleBatch {
    pub fn new(ids: Vec<String>, features: Vec<Vec<f64>>, logits: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let n = features.len();
        for (what, len) in [("sample ids", ids.len()), ("logits", logits.len()), ("labels", labels.len())] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    context: what,
                    expected: n,
                    found: len,
                });
            }
        }
        let batch = SampleBatch {
            ids,
            features,
            logits,
            labels,
        };
        if n > 0 {
            let d = batch.features[0].len();
            let c = batch.logits[0].len();
            for i in 0..n {
                if batch.features[i].len() != d {
                    return Err(Error::DimensionMismatch {
                        context: "feature vector",
                        expected: d,
                        found: batch.features[i].len(),
                    });
                }
                if batch.logits[i].len() != c {
                    return Err(Error::DimensionMismatch {
                        context: "logit vector",
                        expected: c,
                        found: batch.logits[i].len(),
                    });
                }
                if batch.labels[i] >= c {
                    return domain(format!("sample {}: label {} outside {c} categories", batch.ids[i], batch.labels[i]));
                }
                if batch.features[i].iter().chain(&batch.logits[i]).any(|x| !x.is_finite()) {
                    return domain(format!("sample {}: non-finite feature or logit", batch.ids[i]));
                }
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn categories(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    /// `P(y|x) = softmax(z)` per sample.
    pub fn probabilities(&self) -> Result<Vec<Vec<f64>>> {
        self.logits.iter().map(|z| softmax(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProjection {
    pub matrix: Matrix,
}

pub fn project_sample(m: &Matrix, f: &[f64]) -> Result<Vec<f64>> {
    m.matvec(f)
}

pub fn project_all(m: &Matrix, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    features.iter().map(|f| m.matvec(f)).collect()
}

fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn check_model(m: &Matrix, model: &MixtureModel, batch: &SampleBatch) -> Result<()> {
    if m.rows() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "projection rows vs mixture dim",
            expected: model.dim(),
            found: m.rows(),
        });
    }
    if batch.categories() != model.categories() {
        return Err(Error::DimensionMismatch {
            context: "logit width vs mixture categories",
            expected: model.categories(),
            found: batch.categories(),
        });
    }
    if batch.is_empty() {
        return domain("sample batch is empty");
    }
    Ok(())
}

/// Mean over samples of `KL(P(·|x) ‖ Q_M(·|x))`.
pub fn sample_kl_loss(batch: &SampleBatch, m: &Matrix, model: &MixtureModel) -> Result<f64> {
    let probs = batch.probabilities()?;
    kl_loss_with_probs(batch, &probs, m, model)
}

fn kl_loss_with_probs(batch: &SampleBatch, probs: &[Vec<f64>], m: &Matrix, model: &MixtureModel) -> Result<f64> {
    check_model(m, model, batch)?;
    let terms: Vec<f64> = batch
        .features
        .par_iter()
        .zip(probs.par_iter())
        .map(|(f, p)| {
            let g = m.matvec(f)?;
            let q = posterior(&g, model)?;
            Ok(kl_row(p, &q))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / batch.len() as f64)
}

/// `∂ sample_kl_loss / ∂M`, with κ(l) differentiated as the piecewise-linear
/// table interpolant.
pub fn sample_kl_grad(batch: &SampleBatch, m: &Matrix, model: &MixtureModel) -> Result<Matrix> {
    let probs = batch.probabilities()?;
    Ok(kl_loss_and_grad(batch, &probs, m, model)?.1)
}

fn kl_loss_and_grad(batch: &SampleBatch, probs: &[Vec<f64>], m: &Matrix, model: &MixtureModel) -> Result<(f64, Matrix)> {
    check_model(m, model, batch)?;
    let n = batch.len() as f64;
    let table = model.kappa_table();
    let parts: Vec<(f64, Vec<f64>)> = batch
        .features
        .par_iter()
        .zip(probs.par_iter())
        .map(|(f, p)| {
            let g = m.matvec(f)?;
            if norm(&g) == 0.0 {
                return domain("sample_kl_loss: zero-norm projected feature");
            }
            let (l, o) = strength_orientation(&g);
            let (kappa, slope) = table.lookup_with_slope(l);
            let q = softmax(&model.log_scores(kappa, &o))?;
            let mut a = vec![0.0; g.len()];
            for (y, mu) in model.directions().iter().enumerate() {
                let c = q[y] - p[y];
                a.iter_mut().zip(mu).for_each(|(ai, mi)| *ai += c * mi);
            }
            let mut dg = orientation_vjp(&g, &a);
            dg.iter_mut().for_each(|x| *x *= kappa);
            if slope != 0.0 {
                let s = slope * dot(&o, &a);
                dg.iter_mut().zip(strength_grad(&g)).for_each(|(x, gl)| *x += s * gl);
            }
            Ok((kl_row(p, &q), dg))
        })
        .collect::<Result<_>>()?;
    let mut grad = Matrix::zeros(m.rows(), m.cols());
    let mut loss = 0.0;
    for ((l, dg), f) in parts.iter().zip(&batch.features) {
        loss += l;
        grad.add_outer(1.0 / n, dg, f);
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleFitConfig {
    /// Projected dimension d′.
    pub dim: usize,
    pub learning_rate: f64,
    pub gradient_steps: usize,
    pub alternations: usize,
    /// Stop when an alternation improves the loss by less than this.
    pub tol: f64,
    pub seed: u64,
    /// Noise scale and Monte-Carlo size of the κ(l) table in the projected space.
    pub table_sigma: f64,
    pub table_samples: usize,
    pub em: EmConfig,
}

impl Default for SampleFitConfig {
    fn default() -> Self {
        SampleFitConfig {
            dim: 3,
            learning_rate: 1.0,
            gradient_steps: 30,
            alternations: 10,
            tol: 1e-6,
            seed: 0,
            table_sigma: 1.0,
            table_samples: 10_000,
            em: EmConfig::default(),
        }
    }
}

impl SampleFitConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.gradient_steps == 0 || self.alternations == 0 {
            return Err(Error::Config("dim, gradient_steps and alternations must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.tol > 0.0) || !(self.table_sigma > 0.0) {
            return Err(Error::Config("learning_rate, tol and table_sigma must be positive".into()));
        }
        if self.table_samples < 100 {
            return Err(Error::Config("table_samples must be at least 100".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SampleFit {
    pub projection: SampleProjection,
    pub model: MixtureModel,
    pub embeddings: Vec<Vec<f64>>,
    /// KL after the first EM fit, then after every gradient step and EM refit.
    pub loss_trace: Vec<f64>,
}

impl SampleFit {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    /// Loss of the returned state, which is the best one visited.
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn finite_or_diverged(stage: &'static str, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence { stage, loss })
    }
}

/// One gradient step with halving backtracking. Returns the accepted matrix,
/// its loss and the step size to try next; `None` if no decrease was found.
pub(crate) fn backtracking_step<F>(
    params: &Matrix,
    grad: &Matrix,
    loss: f64,
    lr: f64,
    mut eval: F,
) -> Result<Option<(Matrix, f64, f64)>>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut step = lr;
    for _ in 0..40 {
        let trial = params.add_scaled(-step, grad);
        match eval(&trial) {
            Ok(l) if l.is_finite() && l <= loss => return Ok(Some((trial, l, step * 1.5))),
            Ok(_) | Err(Error::Domain(_)) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Alternates EM on `{g}` (M fixed) with gradient descent on M (mixture
/// fixed). The first EM run starts from the supervised M-step with `P` as
/// responsibilities so that component `y` stands for category `y`.
pub fn fit_sample_projection(batch: &SampleBatch, config: &SampleFitConfig) -> Result<SampleFit> {
    config.validate()?;
    let n = batch.len();
    let c = batch.categories();
    if n < c || c == 0 {
        return domain(format!("fit_sample_projection: {n} samples for {c} categories"));
    }
    let d = batch.feature_dim();
    let probs = batch.probabilities()?;
    let mut rng = RngState::new(config.seed);
    let mut m = Matrix::random_normal(config.dim, d, 1.0 / (d as f64).sqrt(), &mut rng);
    let g0 = project_all(&m, &batch.features)?;
    let strengths: Vec<f64> = g0.iter().map(|g| norm(g)).collect();
    let mean = strengths.iter().sum::<f64>() / n as f64;
    let max = strengths.iter().copied().fold(0.0, f64::max);
    let grid = default_strength_grid((4.0 * mean).max(max));
    let table = KappaTable::build(config.dim, config.table_sigma, &grid, config.table_samples, &mut rng.fork(1))?;

    let supervised = |g: &[Vec<f64>]| -> Result<MixtureModel> {
        match em_m_step(&probs, g, &table) {
            Ok(model) => Ok(model),
            Err(Error::DegenerateComponent { .. }) => {
                let fit = fit_em(g, c, EmInit::Seeded(config.seed), &table, &config.em)?;
                Ok(fit.model)
            }
            Err(e) => Err(e),
        }
    };
    let init = supervised(&g0)?;
    let mut model = fit_em(&g0, c, EmInit::Model(init), &table, &config.em)?.model;

    let mut loss = finite_or_diverged("sample fit", kl_loss_with_probs(batch, &probs, &m, &model)?)?;
    let mut trace = vec![loss];
    let mut best = (loss, m.clone(), model.clone());
    let mut lr = config.learning_rate;
    for alternation in 0..config.alternations {
        let start = loss;
        for _ in 0..config.gradient_steps {
            let (_, grad) = kl_loss_and_grad(batch, &probs, &m, &model)?;
            if !grad.is_finite() {
                return Err(Error::Divergence {
                    stage: "sample fit gradient",
                    loss,
                });
            }
            match backtracking_step(&m, &grad, loss, lr, |trial| kl_loss_with_probs(batch, &probs, trial, &model))? {
                Some((next, l, next_lr)) => {
                    m = next;
                    loss = l;
                    lr = next_lr.min(config.learning_rate * 1e3);
                    trace.push(loss);
                }
                None => break,
            }
        }
        if loss < best.0 {
            best = (loss, m.clone(), model.clone());
        }
        if alternation + 1 == config.alternations {
            break;
        }
        let g = project_all(&m, &batch.features)?;
        model = match fit_em(&g, c, EmInit::Model(model.clone()), &table, &config.em) {
            Ok(fit) => fit.model,
            Err(Error::DegenerateComponent { .. } | Error::Domain(_)) => model,
            Err(e) => return Err(e),
        };
        loss = finite_or_diverged("sample fit", kl_loss_with_probs(batch, &probs, &m, &model)?)?;
        trace.push(loss);
        if loss < best.0 {
            best = (loss, m.clone(), model.clone());
        }
        if (start - loss).abs() < config.tol {
            break;
        }
    }
    let (_, m, model) = best;
    let embeddings = project_all(&m, &batch.features)?;
    Ok(SampleFit {
        projection: SampleProjection { matrix: m },
        model,
        embeddings,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthUncertaintyReport {
    pub pearson: f64,
    /// `(‖g‖, entropy of softmax(z))` per sample.
    pub pairs: Vec<(f64, f64)>,
}

/// Pearson correlation between embedding strength and classification entropy.
pub fn strength_uncertainty_report(embeddings: &[Vec<f64>], logits: &[Vec<f64>]) -> Result<StrengthUncertaintyReport> {
    if embeddings.len() != logits.len() {
        return Err(Error::DimensionMismatch {
            context: "embeddings vs logits",
            expected: embeddings.len(),
            found: logits.len(),
        });
    }
    if embeddings.len() < 2 {
        return domain("strength_uncertainty_report: need at least two samples");
    }
    let pairs = embeddings
        .iter()
        .zip(logits)
        .map(|(g, z)| Ok((norm(g), entropy(&softmax(z)?)?)))
        .collect::<Result<Vec<_>>>()?;
    let (s, h): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(StrengthUncertaintyReport {
        pearson: pearson(&s, &h)?,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub g: Vec<f64>,
    pub strength: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: usize,
    pub mu: Vec<f64>,
    pub pi: f64,
}

/// Plot-ready embedding document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub samples: Vec<SampleRecord>,
    pub categories: Vec<CategoryRecord>,
    pub loss_trace: Vec<f64>,
}

pub fn embedding_export(batch: &SampleBatch, fit: &SampleFit) -> Result<EmbeddingExport> {
    let samples = batch
        .ids
        .iter()
        .zip(&batch.labels)
        .zip(fit.embeddings.iter().zip(&batch.logits))
        .map(|((id, &label), (g, z))| {
            Ok(SampleRecord {
                id: id.clone(),
                label,
                g: g.clone(),
                strength: norm(g),
                entropy: entropy(&softmax(z)?)?,
            })
        })
        .collect::<Result<_>>()?;
    let categories = fit
        .model
        .directions()
        .iter()
        .zip(fit.model.priors())
        .enumerate()
        .map(|(id, (mu, &pi))| CategoryRecord { id, mu: mu.clone(), pi })
        .collect();
    Ok(EmbeddingExport {
        samples,
        categories,
        loss_trace: fit.loss_trace.clone(),
    })
}
