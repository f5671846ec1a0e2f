//! Comparison metrics over paired regional embeddings: adversarial attack
//! utilities, attacked-region histograms, trajectory typing and
//! distillation dissimilarity.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{cosine, norm};
use crate::mixture::{posterior_floored, MixtureModel};

/// Fixed-width histogram with explicit edges; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        edges[bins] = hi;
        Histogram {
            edges,
            counts: vec![0; bins],
        }
    }

    pub fn bin_of(&self, x: f64) -> usize {
        let bins = self.counts.len();
        let lo = self.edges[0];
        let hi = self.edges[bins];
        let idx = ((x - lo) / (hi - lo) * bins as f64).floor();
        if idx < 0.0 {
            0
        } else {
            (idx as usize).min(bins - 1)
        }
    }

    pub fn add(&mut self, x: f64) {
        let b = self.bin_of(x);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Two conditions of the same regions: `a[sample][region]`, `b[sample][region]`.
#[derive(Debug, Clone, Copy)]
pub struct PairedRegions<'a> {
    pub a: &'a [Vec<Vec<f64>>],
    pub b: &'a [Vec<Vec<f64>>],
}

impl PairedRegions<'_> {
    fn check(&self) -> Result<usize> {
        if self.a.is_empty() {
            return domain("paired regions are empty");
        }
        if self.a.len() != self.b.len() {
            return Err(Error::Pairing(format!("{} samples vs {}", self.a.len(), self.b.len())));
        }
        let mut count = 0;
        for (i, (ra, rb)) in self.a.iter().zip(self.b).enumerate() {
            if ra.len() != rb.len() {
                return Err(Error::Pairing(format!("sample {i}: {} regions vs {}", ra.len(), rb.len())));
            }
            for (r, (ha, hb)) in ra.iter().zip(rb).enumerate() {
                if ha.len() != hb.len() {
                    return Err(Error::Pairing(format!("sample {i} region {r}: dim {} vs {}", ha.len(), hb.len())));
                }
            }
            count += ra.len();
        }
        if count == 0 {
            return domain("paired regions are empty");
        }
        Ok(count)
    }

    fn iter(&self) -> impl Iterator<Item = (usize, &Vec<f64>, &Vec<f64>)> + '_ {
        self.a
            .iter()
            .zip(self.b)
            .enumerate()
            .flat_map(|(s, (ra, rb))| ra.iter().zip(rb).map(move |(x, y)| (s, x, y)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackUtilities {
    pub delta_orientation: f64,
    pub delta_strength: f64,
}

/// `E_x E_r cos(h_a, h_b)` and `E_x E_r |‖h_a‖ − ‖h_b‖|`.
pub fn attack_utilities(pairs: PairedRegions<'_>) -> Result<AttackUtilities> {
    pairs.check()?;
    let mut cos_sum = 0.0;
    let mut str_sum = 0.0;
    for (ra, rb) in pairs.a.iter().zip(pairs.b) {
        if ra.is_empty() {
            continue;
        }
        let k = ra.len() as f64;
        cos_sum += ra.iter().zip(rb).map(|(x, y)| cosine(x, y)).sum::<f64>() / k;
        str_sum += ra.iter().zip(rb).map(|(x, y)| (norm(x) - norm(y)).abs()).sum::<f64>() / k;
    }
    let n = pairs.a.iter().filter(|r| !r.is_empty()).count() as f64;
    Ok(AttackUtilities {
        delta_orientation: cos_sum / n,
        delta_strength: str_sum / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackedRegionHistogram {
    pub threshold: f64,
    pub selected: u64,
    pub histogram: Histogram,
}

/// Regions whose attacked embedding is confident (> threshold) on the
/// adversarial target, histogrammed by their original-category posterior
/// before the attack. `c_ori[x]` and `c_adv[x]` are per sample.
pub fn attacked_region_histogram(
    pairs: PairedRegions<'_>,
    c_ori: &[usize],
    c_adv: &[usize],
    model: &MixtureModel,
    threshold: f64,
) -> Result<AttackedRegionHistogram> {
    pairs.check()?;
    if c_ori.len() != pairs.a.len() || c_adv.len() != pairs.a.len() {
        return Err(Error::DimensionMismatch {
            context: "attack categories per sample",
            expected: pairs.a.len(),
            found: c_ori.len().min(c_adv.len()),
        });
    }
    let mut hist = Histogram::new(0.0, 1.0, 10);
    for (s, ha, hb) in pairs.iter() {
        let pb = posterior_floored(hb, model)?;
        if pb[c_adv[s]] > threshold {
            let pa = posterior_floored(ha, model)?;
            hist.add(pa[c_ori[s]]);
        }
    }
    Ok(AttackedRegionHistogram {
        threshold,
        selected: hist.total(),
        histogram: hist,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryType {
    /// Important before and after, target-confident, never weak in between.
    Type1,
    /// Important before and after, but weak at some recorded midpoint.
    Type2,
    /// Unimportant before, important and target-confident after.
    Type3,
    /// Important before, unimportant after.
    Type4,
    /// None of the rules apply.
    Unattacked,
    /// Types 1 and 2 cannot be told apart without midpoints.
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Quantile of a sample's region strengths above which a region is important.
    pub theta_w: f64,
    pub theta_p: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            theta_w: 0.5,
            theta_p: 0.4,
        }
    }
}

/// Linear-interpolated quantile of the region strengths of one sample.
pub fn strength_quantile(regions: &[Vec<f64>], q: f64) -> Result<f64> {
    if regions.is_empty() {
        return domain("strength_quantile: no regions");
    }
    if !(0.0..=1.0).contains(&q) {
        return domain(format!("quantile {q} outside [0, 1]"));
    }
    let mut s: Vec<f64> = regions.iter().map(|h| norm(h)).collect();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = pos.ceil() as usize;
    Ok(s[i] + (s[j] - s[i]) * (pos - i as f64))
}

/// One region followed through an attack. Thresholds are the strength
/// quantiles of the whole sample at each stage.
#[derive(Debug, Clone, Copy)]
pub struct Trajectory<'a> {
    pub start: &'a [f64],
    pub start_threshold: f64,
    pub end: &'a [f64],
    pub end_threshold: f64,
    /// `(h, threshold)` at intermediate attack steps, if recorded.
    pub midpoints: Option<&'a [(Vec<f64>, f64)]>,
    pub target: usize,
}

pub fn classify_trajectory(t: &Trajectory<'_>, model: &MixtureModel, theta_p: f64) -> Result<TrajectoryType> {
    if !(theta_p > 0.0 && theta_p < 1.0) {
        return domain(format!("theta_p must lie in (0, 1), got {theta_p}"));
    }
    let important_start = norm(t.start) > t.start_threshold;
    let important_end = norm(t.end) > t.end_threshold;
    let target_confident = posterior_floored(t.end, model)?[t.target] > theta_p;
    Ok(match (important_start, important_end) {
        (true, true) if target_confident => match t.midpoints {
            None => TrajectoryType::Indeterminate,
            Some(mids) if mids.iter().any(|(h, thr)| norm(h) < *thr) => TrajectoryType::Type2,
            Some(_) => TrajectoryType::Type1,
        },
        (false, true) if target_confident => TrajectoryType::Type3,
        (true, false) => TrajectoryType::Type4,
        _ => TrajectoryType::Unattacked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Histogram of `1 − cos(student, teacher)` on `[0, 2]`.
    pub orientation: Histogram,
    /// Histogram of `‖student‖ − ‖teacher‖` on a symmetric range.
    pub strength: Histogram,
    pub pairs: u64,
}

pub const DISTILL_BINS: usize = 20;

/// `pairs.a` is the student, `pairs.b` the teacher.
pub fn distill_dissimilarity(pairs: PairedRegions<'_>) -> Result<DistillReport> {
    let count = pairs.check()?;
    let diffs: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(_, s, t)| (1.0 - cosine(s, t), norm(s) - norm(t)))
        .collect();
    let max_abs = diffs.iter().map(|d| d.1.abs()).fold(0.0, f64::max);
    let span = if max_abs > 0.0 { max_abs } else { 1.0 };
    let mut orientation = Histogram::new(0.0, 2.0, DISTILL_BINS);
    let mut strength = Histogram::new(-span, span, DISTILL_BINS);
    for (o, s) in diffs {
        orientation.add(o);
        strength.add(s);
    }
    Ok(DistillReport {
        orientation,
        strength,
        pairs: count as u64,
    })
}
