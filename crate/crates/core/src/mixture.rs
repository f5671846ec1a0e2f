//! Mixture of revised vMF components over projected sample features:
//! posterior inference and EM fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{cosine, dot, norm, normalized, strength_orientation};
use crate::numutil::{log_vmf_norm_const, logsumexp, RngState};
use crate::vmf::KappaTable;

/// Category priors π and unit mean directions μ, plus the κ(l) table of the
/// embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    priors: Vec<f64>,
    directions: Vec<Vec<f64>>,
    kappa_table: KappaTable,
}

impl MixtureModel {
    pub fn new(priors: Vec<f64>, directions: Vec<Vec<f64>>, kappa_table: KappaTable) -> Result<Self> {
        if priors.is_empty() || priors.len() != directions.len() {
            return Err(Error::DimensionMismatch {
                context: "mixture priors vs directions",
                expected: directions.len(),
                found: priors.len(),
            });
        }
        if priors.iter().any(|p| !(*p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return domain("mixture priors must be nonnegative and sum to 1");
        }
        for mu in &directions {
            if mu.len() != kappa_table.dim() {
                return Err(Error::DimensionMismatch {
                    context: "mixture direction",
                    expected: kappa_table.dim(),
                    found: mu.len(),
                });
            }
            if (norm(mu) - 1.0).abs() > 1e-9 {
                return domain(format!("mixture direction has norm {}", norm(mu)));
            }
        }
        Ok(MixtureModel {
            priors,
            directions,
            kappa_table,
        })
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn kappa_table(&self) -> &KappaTable {
        &self.kappa_table
    }

    pub fn categories(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.kappa_table.dim()
    }

    /// Same components with a different κ(l) table.
    pub fn with_table(&self, kappa_table: KappaTable) -> Result<Self> {
        MixtureModel::new(self.priors.clone(), self.directions.clone(), kappa_table)
    }

    /// Unnormalized log scores `ln π_y + κ · cos(o, μ_y)`.
    pub(crate) fn log_scores(&self, kappa: f64, orientation: &[f64]) -> Vec<f64> {
        self.priors
            .iter()
            .zip(&self.directions)
            .map(|(p, mu)| p.ln() + kappa * dot(orientation, mu))
            .collect()
    }
}

/// Per-sample quantities that stay fixed across EM iterations.
struct Prepared {
    kappas: Vec<f64>,
    orientations: Vec<Vec<f64>>,
}

fn prepare(model_dim: usize, table: &KappaTable, points: &[Vec<f64>]) -> Result<Prepared> {
    let mut kappas = Vec::with_capacity(points.len());
    let mut orientations = Vec::with_capacity(points.len());
    for g in points {
        if g.len() != model_dim {
            return Err(Error::DimensionMismatch {
                context: "mixture input",
                expected: model_dim,
                found: g.len(),
            });
        }
        if norm(g) == 0.0 {
            return domain("mixture: zero-norm embedding");
        }
        let (l, o) = strength_orientation(g);
        kappas.push(table.lookup(l));
        orientations.push(o);
    }
    Ok(Prepared {
        kappas,
        orientations,
    })
}

/// `p(y | g)` under the mixture; `C_d(κ(l_g))` and the strength prior cancel.
pub fn posterior(g: &[f64], model: &MixtureModel) -> Result<Vec<f64>> {
    if g.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "posterior",
            expected: model.dim(),
            found: g.len(),
        });
    }
    if norm(g) == 0.0 {
        return domain("posterior: zero-norm embedding");
    }
    let (l, o) = strength_orientation(g);
    posterior_parts(model, model.kappa_table.lookup(l), &o)
}

/// Like [`posterior`] but maps a zero vector through the strength floor
/// instead of failing: its orientation is zero, so only the priors remain.
pub fn posterior_floored(g: &[f64], model: &MixtureModel) -> Result<Vec<f64>> {
    if g.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "posterior",
            expected: model.dim(),
            found: g.len(),
        });
    }
    let (l, o) = strength_orientation(g);
    posterior_parts(model, model.kappa_table.lookup(l), &o)
}

fn posterior_parts(model: &MixtureModel, kappa: f64, orientation: &[f64]) -> Result<Vec<f64>> {
    crate::numutil::softmax(&model.log_scores(kappa, orientation))
}

/// Responsibilities: row `i` is `posterior(G[i])`.
pub fn em_e_step(model: &MixtureModel, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let prep = prepare(model.dim(), model.kappa_table(), points)?;
    e_step_prepared(model, &prep)
}

fn e_step_prepared(model: &MixtureModel, prep: &Prepared) -> Result<Vec<Vec<f64>>> {
    prep.kappas
        .par_iter()
        .zip(prep.orientations.par_iter())
        .map(|(&k, o)| posterior_parts(model, k, o))
        .collect()
}

/// M-step result per component; `None` marks a zero resultant.
fn m_step_prepared(resp: &[Vec<f64>], prep: &Prepared, categories: usize, dim: usize) -> (Vec<f64>, Vec<Option<Vec<f64>>>) {
    let n = resp.len() as f64;
    let mut priors = vec![0.0; categories];
    let mut resultants = vec![vec![0.0; dim]; categories];
    let mut mass = vec![0.0; categories];
    for (i, row) in resp.iter().enumerate() {
        let k = prep.kappas[i];
        let o = &prep.orientations[i];
        for (y, &r) in row.iter().enumerate() {
            priors[y] += r;
            let w = k * r;
            mass[y] += w;
            for (acc, oi) in resultants[y].iter_mut().zip(o) {
                *acc += w * oi;
            }
        }
    }
    priors.iter_mut().for_each(|p| *p /= n);
    let directions = resultants
        .into_iter()
        .zip(mass)
        .map(|(v, m)| {
            let len = norm(&v);
            if m > 0.0 && len > 1e-12 * m {
                Some(v.iter().map(|x| x / len).collect())
            } else {
                None
            }
        })
        .collect();
    (priors, directions)
}

fn check_responsibilities(resp: &[Vec<f64>], points: &[Vec<f64>]) -> Result<usize> {
    if points.is_empty() {
        return domain("em_m_step: no samples");
    }
    if resp.len() != points.len() {
        return Err(Error::DimensionMismatch {
            context: "responsibilities",
            expected: points.len(),
            found: resp.len(),
        });
    }
    let categories = resp[0].len();
    for row in resp {
        if row.len() != categories {
            return Err(Error::DimensionMismatch {
                context: "responsibility row",
                expected: categories,
                found: row.len(),
            });
        }
        if row.iter().any(|r| !(*r >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return domain("em_m_step: responsibilities must be row-stochastic");
        }
    }
    Ok(categories)
}

/// `μ_y ∝ Σ_i κ(l_i) r_iy o_i`, `π_y = mean_i r_iy`.
pub fn em_m_step(resp: &[Vec<f64>], points: &[Vec<f64>], table: &KappaTable) -> Result<MixtureModel> {
    let categories = check_responsibilities(resp, points)?;
    let prep = prepare(table.dim(), table, points)?;
    let (priors, directions) = m_step_prepared(resp, &prep, categories, table.dim());
    let mut dirs = Vec::with_capacity(categories);
    for (y, d) in directions.into_iter().enumerate() {
        dirs.push(d.ok_or(Error::DegenerateComponent { component: y })?);
    }
    let total: f64 = priors.iter().sum();
    MixtureModel::new(priors.iter().map(|p| p / total).collect(), dirs, table.clone())
}

fn average_log_likelihood(model: &MixtureModel, prep: &Prepared) -> Result<f64> {
    let per_sample = per_sample_log_likelihood(model, prep)?;
    Ok(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

fn per_sample_log_likelihood(model: &MixtureModel, prep: &Prepared) -> Result<Vec<f64>> {
    let dim = model.dim();
    prep.kappas
        .par_iter()
        .zip(prep.orientations.par_iter())
        .map(|(&k, o)| Ok(log_vmf_norm_const(dim, k)? + logsumexp(&model.log_scores(k, o))?))
        .collect()
}

/// Average per-sample log-likelihood `mean_i ln Σ_y π_y p_vMF(o_i | μ_y, κ(l_i))`,
/// with the category-independent strength prior dropped.
pub fn mixture_log_likelihood(model: &MixtureModel, points: &[Vec<f64>]) -> Result<f64> {
    let prep = prepare(model.dim(), model.kappa_table(), points)?;
    average_log_likelihood(model, &prep)
}

/// How to start EM.
#[derive(Debug, Clone)]
pub enum EmInit {
    /// Warm start from an existing model (its table is replaced by the fit's).
    Model(MixtureModel),
    /// Farthest-point seeding on cosine distance with uniform priors.
    Seeded(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// How many degenerate components may be re-seeded before giving up.
    pub reseed_budget: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            tol: 1e-6,
            reseed_budget: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: MixtureModel,
    /// Average log-likelihood before the first iteration and after each one.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
}

impl EmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().expect("trace is never empty")
    }
}

/// Picks `count` well-spread directions: a random first point, then
/// repeatedly the point farthest (in cosine distance) from those chosen.
pub fn farthest_point_directions(points: &[Vec<f64>], count: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.below(n)];
    let mut min_dist: Vec<f64> = points.iter().map(|p| 1.0 - cosine(p, &points[chosen[0]])).collect();
    while chosen.len() < count {
        let mut best = 0;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_dist && !chosen.contains(&i) {
                best = i;
                best_dist = d;
            }
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            min_dist[i] = min_dist[i].min(1.0 - cosine(p, &points[best]));
        }
    }
    chosen.into_iter().map(|i| normalized(&points[i])).collect()
}

/// Fits priors and directions by EM with κ(l) held fixed per sample.
pub fn fit_em(
    points: &[Vec<f64>],
    categories: usize,
    init: EmInit,
    table: &KappaTable,
    config: &EmConfig,
) -> Result<EmFit> {
    if categories == 0 {
        return domain("fit_em: need at least one category");
    }
    if points.len() < categories {
        return domain(format!(
            "fit_em: {} samples for {categories} categories",
            points.len()
        ));
    }
    let prep = prepare(table.dim(), table, points)?;
    let mut model = match init {
        EmInit::Model(m) => {
            if m.categories() != categories {
                return Err(Error::DimensionMismatch {
                    context: "fit_em initial model",
                    expected: categories,
                    found: m.categories(),
                });
            }
            m.with_table(table.clone())?
        }
        EmInit::Seeded(seed) => {
            let mut rng = RngState::new(seed);
            let dirs = farthest_point_directions(points, categories, &mut rng);
            MixtureModel::new(vec![1.0 / categories as f64; categories], dirs, table.clone())?
        }
    };

    let mut trace = vec![average_log_likelihood(&model, &prep)?];
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let resp = e_step_prepared(&model, &prep)?;
        let (mut priors, directions) = m_step_prepared(&resp, &prep, categories, table.dim());
        let mut dirs = Vec::with_capacity(categories);
        let mut reseeded = false;
        for (y, d) in directions.into_iter().enumerate() {
            match d {
                Some(d) => dirs.push(d),
                None => {
                    if reseeds >= config.reseed_budget {
                        return Err(Error::DegenerateComponent { component: y });
                    }
                    reseeds += 1;
                    reseeded = true;
                    let ll = per_sample_log_likelihood(&model, &prep)?;
                    let worst = ll
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .expect("points are nonempty");
                    log::warn!("EM component {y} degenerate; re-seeding at sample {worst}");
                    dirs.push(prep.orientations[worst].iter().map(|x| x / norm(&prep.orientations[worst])).collect());
                    if priors[y] <= 0.0 {
                        priors[y] = 1.0 / points.len() as f64;
                    }
                }
            }
        }
        let total: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= total);
        model = MixtureModel::new(priors, dirs, table.clone())?;
        let ll = average_log_likelihood(&model, &prep)?;
        let prev = *trace.last().unwrap();
        trace.push(ll);
        if !reseeded && ll - prev < config.tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        model,
        log_likelihood: trace,
        iterations,
        converged,
        reseeds,
    })
}
