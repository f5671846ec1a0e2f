//! Synthetic datasets with known category directions, strengths and
//! classifier heads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{spatial_average, HeadOutput, LinearHead};
use crate::io::{write_fmap, write_json, write_tensor, DType, Manifest, ManifestSample, Tensor};
use crate::linalg::Matrix;
use crate::numutil::{sample_unit_sphere, sample_vmf, RngState};
use crate::region_embed::FeatureMap;
use crate::sample_embed::SampleBatch;

/// Generator settings. Category directions and heads are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub categories: usize,
    /// Raw sample feature dimension d.
    pub dim: usize,
    /// Channels K of the regional feature maps.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Concentration of features around their category direction; may be infinite.
    pub kappa_true: f64,
    /// Signal strength drawn uniformly from `[lo, hi]`.
    pub strength_range: (f64, f64),
    pub noise_sigma: f64,
    /// Row-major grid cells that carry the class signal.
    pub signal_mask: Vec<bool>,
    /// Head weights are `head_scale · μ_c`.
    pub head_scale: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            categories: 10,
            dim: 64,
            channels: 16,
            height: 3,
            width: 3,
            kappa_true: 30.0,
            strength_range: (0.2, 4.0),
            noise_sigma: 0.3,
            signal_mask: vec![false, true, false, false, false, false, false, true, false],
            head_scale: 2.0,
            seed: 0,
        }
    }
}

/// Params plus the ground truth they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub params: SynthParams,
    pub sample_directions: Vec<Vec<f64>>,
    pub channel_directions: Vec<Vec<f64>>,
    pub sample_head: LinearHead,
    pub regional_head: LinearHead,
}

impl SynthSpec {
    pub fn new(params: SynthParams) -> Result<Self> {
        let p = &params;
        if p.categories == 0 || p.dim < 2 || p.channels < 2 || p.height * p.width == 0 {
            return Err(Error::Config("synth: categories ≥ 1, dim ≥ 2, channels ≥ 2 and a nonempty grid are required".into()));
        }
        if p.signal_mask.len() != p.height * p.width || !p.signal_mask.iter().any(|m| *m) {
            return Err(Error::Config("synth: signal mask must cover the grid and mark at least one cell".into()));
        }
        let (lo, hi) = p.strength_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) || !(p.noise_sigma >= 0.0) || !(p.kappa_true >= 0.0) {
            return Err(Error::Config("synth: invalid strength range, noise or concentration".into()));
        }
        let mut rng = RngState::new(p.seed);
        let sample_directions: Vec<Vec<f64>> = (0..p.categories).map(|_| sample_unit_sphere(p.dim, &mut rng)).collect();
        let channel_directions: Vec<Vec<f64>> = (0..p.categories).map(|_| sample_unit_sphere(p.channels, &mut rng)).collect();
        let head = |dirs: &[Vec<f64>]| -> Result<LinearHead> {
            let mut w = Matrix::from_rows(dirs)?;
            w.scale(p.head_scale);
            LinearHead::new(w, vec![0.0; p.categories], HeadOutput::Logit)
        };
        let sample_head = head(&sample_directions)?;
        let regional_head = head(&channel_directions)?;
        Ok(SynthSpec {
            params,
            sample_directions,
            channel_directions,
            sample_head,
            regional_head,
        })
    }

    fn signal(&self, mu: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
        let (lo, hi) = self.params.strength_range;
        let l = lo + (hi - lo) * rng.uniform();
        let dir = sample_vmf(mu, self.params.kappa_true, rng)?;
        let sigma = self.params.noise_sigma;
        Ok(dir.iter().map(|x| l * x + sigma * rng.normal()).collect())
    }
}

/// `n` samples with uniform random labels: `f = l · vMF(μ_y) + N(0, σ²)`,
/// logits from the sample head.
pub fn gen_sample_batch(spec: &SynthSpec, n: usize, rng: &mut RngState) -> Result<SampleBatch> {
    let c = spec.params.categories;
    if n < c {
        return Err(Error::Config(format!("synth: {n} samples for {c} categories")));
    }
    let mut features = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.below(c);
        let f = spec.signal(&spec.sample_directions[y], rng)?;
        logits.push(spec.sample_head.logits(&f)?);
        features.push(f);
        labels.push(y);
    }
    SampleBatch::new((0..n).map(|i| format!("s{i:05}")).collect(), features, logits, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalSample {
    pub fmap: FeatureMap,
    pub logits: Vec<f64>,
    pub label: usize,
}

fn regional_map(spec: &SynthSpec, y: usize, rng: &mut RngState) -> Result<FeatureMap> {
    let p = &spec.params;
    let regions = p
        .signal_mask
        .iter()
        .map(|&signal| {
            if signal {
                spec.signal(&spec.channel_directions[y], rng)
            } else {
                Ok((0..p.channels).map(|_| p.noise_sigma * rng.normal()).collect())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMap::from_regions(p.height, p.width, &regions)
}

/// Feature maps whose masked cells carry the class signal and whose other
/// cells are isotropic noise; logits from the regional head over the
/// spatial average.
pub fn gen_regional_batch(spec: &SynthSpec, n: usize, rng: &mut RngState) -> Result<Vec<RegionalSample>> {
    let c = spec.params.categories;
    if n < c {
        return Err(Error::Config(format!("synth: {n} samples for {c} categories")));
    }
    (0..n)
        .map(|_| {
            let y = rng.below(c);
            let fmap = regional_map(spec, y, rng)?;
            let logits = spec.regional_head.logits(&spatial_average(&fmap))?;
            Ok(RegionalSample { fmap, logits, label: y })
        })
        .collect()
}

/// Options for writing a dataset to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub samples: usize,
    pub layers: Vec<String>,
    /// Also write a second manifest in which this layer is perturbed.
    pub perturb_layer: Option<String>,
    pub perturb_scale: f64,
    pub dtype_f32: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            samples: 200,
            layers: vec!["conv_1".into(), "conv_2".into(), "conv_3".into()],
            perturb_layer: None,
            perturb_scale: 2.0,
            dtype_f32: false,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PERTURBED_MANIFEST_FILE: &str = "manifest_perturbed.json";
pub const SPEC_FILE: &str = "synth_spec.json";

/// Writes tensors, `manifest.json` and `synth_spec.json` under `dir`.
/// Returns the written paths relative to `dir`, sorted.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, options: &DatasetOptions, rng: &mut RngState) -> Result<Vec<String>> {
    if let Some(l) = &options.perturb_layer {
        if !options.layers.contains(l) {
            return Err(Error::Config(format!("perturbed layer {l} is not one of the dataset layers")));
        }
    }
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors)?;
    let dtype = if options.dtype_f32 { DType::F32 } else { DType::F64 };
    let round = |v: Vec<f64>| -> Vec<f64> {
        if options.dtype_f32 {
            v.into_iter().map(|x| x as f32 as f64).collect()
        } else {
            v
        }
    };
    let batch = gen_sample_batch(spec, options.samples, rng)?;
    let mut files = Vec::new();
    let mut samples = Vec::new();
    let mut perturbed = Vec::new();
    for i in 0..batch.len() {
        let id = batch.ids[i].clone();
        let y = batch.labels[i];
        let features = format!("tensors/{id}_features.ftc");
        let logits = format!("tensors/{id}_logits.ftc");
        write_tensor(&dir.join(&features), &Tensor::new(dtype, vec![batch.feature_dim()], round(batch.features[i].clone()))?)?;
        write_tensor(&dir.join(&logits), &Tensor::new(dtype, vec![batch.categories()], round(batch.logits[i].clone()))?)?;
        files.push(features.clone());
        files.push(logits.clone());
        let mut layers = BTreeMap::new();
        let mut perturbed_layers = BTreeMap::new();
        for name in &options.layers {
            let fmap = regional_map(spec, y, rng)?;
            let rel = format!("tensors/{id}_{name}.ftc");
            let stored = FeatureMap::new(fmap.channels(), fmap.height(), fmap.width(), round(fmap.values().to_vec()))?;
            write_fmap(&dir.join(&rel), &stored, dtype)?;
            files.push(rel.clone());
            layers.insert(name.clone(), rel.clone());
            if options.perturb_layer.as_deref() == Some(name.as_str()) {
                let sigma = spec.params.noise_sigma;
                let values = stored
                    .values()
                    .iter()
                    .map(|v| options.perturb_scale * v + sigma * rng.normal())
                    .collect();
                let moved = FeatureMap::new(fmap.channels(), fmap.height(), fmap.width(), round(values))?;
                let prel = format!("tensors/{id}_{name}_perturbed.ftc");
                write_fmap(&dir.join(&prel), &moved, dtype)?;
                files.push(prel.clone());
                perturbed_layers.insert(name.clone(), prel);
            } else {
                perturbed_layers.insert(name.clone(), rel);
            }
        }
        samples.push(ManifestSample {
            id: id.clone(),
            label: y,
            features: features.clone(),
            logits: logits.clone(),
            layers,
        });
        perturbed.push(ManifestSample {
            id,
            label: y,
            features,
            logits,
            layers: perturbed_layers,
        });
    }
    let categories: Vec<String> = (0..spec.params.categories).map(|c| format!("class_{c}")).collect();
    let manifest = Manifest::new(
        format!("synthetic-{}", spec.params.seed),
        categories.clone(),
        options.layers.clone(),
        samples,
        dir.to_path_buf(),
    );
    manifest.save(&dir.join(MANIFEST_FILE))?;
    files.push(MANIFEST_FILE.into());
    if let Some(layer) = &options.perturb_layer {
        let m = Manifest::new(
            format!("synthetic-{}-perturbed-{layer}", spec.params.seed),
            categories,
            options.layers.clone(),
            perturbed,
            dir.to_path_buf(),
        );
        m.save(&dir.join(PERTURBED_MANIFEST_FILE))?;
        files.push(PERTURBED_MANIFEST_FILE.into());
    }
    write_json(&dir.join(SPEC_FILE), spec)?;
    files.push(SPEC_FILE.into());
    files.sort();
    Ok(files)
}
