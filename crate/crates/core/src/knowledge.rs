//! Knowledge points: regional features whose strongest category posterior
//! exceeds τ, and the reliable ones whose argmax is the sample's label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::norm;
use crate::mixture::{posterior_floored, MixtureModel};

pub const DEFAULT_TAU: f64 = 0.4;

/// Projected regional features of one layer: `h[sample][region]`.
pub type LayerRegions = Vec<Vec<Vec<f64>>>;

fn average_strength(layer: &LayerRegions) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in layer {
        for h in sample {
            total += norm(h);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Rescales every layer so its mean regional strength equals the reference
/// layer's. The reference layer is returned unchanged.
pub fn normalize_layer_strength(
    layers: &BTreeMap<String, LayerRegions>,
    reference: &str,
) -> Result<BTreeMap<String, LayerRegions>> {
    let ref_layer = layers
        .get(reference)
        .ok_or_else(|| Error::Config(format!("reference layer {reference} not present")))?;
    let ref_avg = average_strength(ref_layer);
    if !(ref_avg > 0.0) {
        return Err(Error::DegenerateLayer {
            layer: reference.to_string(),
        });
    }
    let mut out = BTreeMap::new();
    for (name, layer) in layers {
        let avg = average_strength(layer);
        if !(avg > 0.0) {
            return Err(Error::DegenerateLayer { layer: name.clone() });
        }
        let scaled = if name == reference {
            layer.clone()
        } else {
            let s = ref_avg / avg;
            layer
                .iter()
                .map(|sample| sample.iter().map(|h| h.iter().map(|x| x * s).collect()).collect())
                .collect()
        };
        out.insert(name.clone(), scaled);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionKnowledge {
    pub sample: usize,
    pub region: usize,
    pub label: usize,
    pub argmax: usize,
    pub max_posterior: f64,
    pub is_knowledge: bool,
    pub is_reliable: bool,
    /// Another category shares the maximum posterior.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeReport {
    pub tau: f64,
    pub total_points: usize,
    pub reliable_points: usize,
    pub ratio: Option<f64>,
    pub ties: usize,
    pub regions: Vec<RegionKnowledge>,
}

/// One region to classify.
#[derive(Debug, Clone, Copy)]
pub struct RegionRef<'a> {
    pub sample: usize,
    pub region: usize,
    pub label: usize,
    pub h: &'a [f64],
}

/// Counts knowledge points from posteriors already computed.
pub fn tally(posteriors: &[(usize, usize, usize, Vec<f64>)], tau: f64) -> Result<KnowledgeReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return domain(format!("tau must lie in (0, 1), got {tau}"));
    }
    let mut regions = Vec::with_capacity(posteriors.len());
    let (mut total, mut reliable, mut ties) = (0, 0, 0);
    for (sample, region, label, p) in posteriors {
        let mut argmax = 0;
        for (c, v) in p.iter().enumerate() {
            if *v > p[argmax] {
                argmax = c;
            }
        }
        let max = p[argmax];
        let tie = p.iter().enumerate().any(|(c, v)| c != argmax && *v == max);
        let is_knowledge = max > tau;
        let is_reliable = is_knowledge && argmax == *label;
        total += usize::from(is_knowledge);
        reliable += usize::from(is_reliable);
        ties += usize::from(tie && is_knowledge);
        regions.push(RegionKnowledge {
            sample: *sample,
            region: *region,
            label: *label,
            argmax,
            max_posterior: max,
            is_knowledge,
            is_reliable,
            tie,
        });
    }
    Ok(KnowledgeReport {
        tau,
        total_points: total,
        reliable_points: reliable,
        ratio: (total > 0).then(|| reliable as f64 / total as f64),
        ties,
        regions,
    })
}

/// Posterior of every region under the mixture, then [`tally`].
pub fn count_knowledge_points(regions: &[RegionRef<'_>], model: &MixtureModel, tau: f64) -> Result<KnowledgeReport> {
    let posteriors = regions
        .iter()
        .map(|r| {
            if r.label >= model.categories() {
                return domain(format!("label {} outside {} categories", r.label, model.categories()));
            }
            Ok((r.sample, r.region, r.label, posterior_floored(r.h, model)?))
        })
        .collect::<Result<Vec<_>>>()?;
    tally(&posteriors, tau)
}

/// Flattens a layer into region references using per-sample labels.
pub fn layer_region_refs<'a>(layer: &'a LayerRegions, labels: &[usize]) -> Result<Vec<RegionRef<'a>>> {
    if layer.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "layer samples vs labels",
            expected: labels.len(),
            found: layer.len(),
        });
    }
    Ok(layer
        .iter()
        .zip(labels)
        .enumerate()
        .flat_map(|(sample, (regions, &label))| {
            regions.iter().enumerate().map(move |(region, h)| RegionRef {
                sample,
                region,
                label,
                h,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayCell {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

/// Grid cells of knowledge points, grouped by argmax category.
pub fn knowledge_regions_export(report: &KnowledgeReport, height: usize, width: usize) -> Result<BTreeMap<usize, Vec<OverlayCell>>> {
    let mut out: BTreeMap<usize, Vec<OverlayCell>> = BTreeMap::new();
    for r in report.regions.iter().filter(|r| r.is_knowledge) {
        if r.region >= height * width {
            return domain(format!("region {} outside a {height}x{width} grid", r.region));
        }
        out.entry(r.argmax).or_default().push(OverlayCell {
            sample: r.sample,
            row: r.region / width,
            col: r.region % width,
        });
    }
    Ok(out)
}
