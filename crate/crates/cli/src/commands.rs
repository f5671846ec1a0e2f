use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use discpower::analysis::{
    attack_utilities, attacked_region_histogram, classify_trajectory, distill_dissimilarity, strength_quantile,
    AttackUtilities, PairedRegions, Trajectory,
};
use discpower::importance::{fit_importance, ImportanceConfig, ImportanceWeights};
use discpower::io::{downsample_fmap, load_mixture, read_matrix, save_mixture, Manifest, Tensor};
use discpower::knowledge::{
    count_knowledge_points, knowledge_regions_export, layer_region_refs, normalize_layer_strength, KnowledgeReport,
    LayerRegions,
};
use discpower::linalg::{norm, Matrix};
use discpower::mixture::MixtureModel;
use discpower::region_embed::{fit_region_projection, project_regions, FeatureMap, RegionBatch, SimilarityConfig};
use discpower::sample_embed::{embedding_export, fit_sample_projection, strength_uncertainty_report, SampleFitConfig};
use discpower::synth::{write_dataset, DatasetOptions, SynthParams, SynthSpec, MANIFEST_FILE};
use discpower::RngState;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::{layer_tensor, load_json, read_layer, require, Outputs};
use crate::{AttackArgs, Common, DistillArgs, KnowledgeArgs, RegionArgs, SampleArgs, SynthArgs};

const SAMPLE_DIR: &str = "sample";
const MIXTURE_STEM: &str = "mixture";
const EMBEDDINGS: &str = "sample/embeddings.ftc";
const LAYERS_FILE: &str = "region/layers.json";

#[derive(Serialize)]
struct Config<'a, A: Serialize> {
    seed: u64,
    #[serde(flatten)]
    args: &'a A,
}

fn config<'a, A: Serialize>(common: &Common, args: &'a A) -> Config<'a, A> {
    Config { seed: common.seed, args }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("io: loading manifest {}", path.display()))
}

fn matrix_tensor(m: &Matrix) -> Result<Tensor> {
    Ok(Tensor::f64(vec![m.rows(), m.cols()], m.as_slice().to_vec())?)
}

pub fn synth(common: &Common, a: &SynthArgs) -> Result<()> {
    let cells = a.height * a.width;
    let mut mask = vec![false; cells];
    for &c in &a.signal_cells {
        ensure!(c < cells, "synth: signal cell {c} outside a {}x{} grid", a.height, a.width);
        mask[c] = true;
    }
    let params = SynthParams {
        categories: a.categories,
        dim: a.feature_dim,
        channels: a.channels,
        height: a.height,
        width: a.width,
        kappa_true: a.kappa_true,
        strength_range: (a.strength_min, a.strength_max),
        noise_sigma: a.noise,
        signal_mask: mask,
        head_scale: a.head_scale,
        seed: common.seed,
    };
    let spec = SynthSpec::new(params).context("synth: invalid parameters")?;
    let options = DatasetOptions {
        samples: a.samples,
        layers: a.layers.clone(),
        perturb_layer: a.perturb_layer.clone(),
        perturb_scale: a.perturb_scale,
        dtype_f32: a.f32,
    };
    let mut out = Outputs::create(common)?;
    let mut rng = RngState::new(common.seed);
    let files = write_dataset(&out.path(""), &spec, &options, &mut rng).context("synth: writing dataset")?;
    out.extend("", files);

    let manifest = load_manifest(&out.path(MANIFEST_FILE))?;
    let mut label_counts = vec![0usize; a.categories];
    for s in &manifest.samples {
        label_counts[s.label] += 1;
    }
    let expected = a.samples as f64 / a.categories as f64;
    let chi_square: f64 = label_counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let metrics = json!({
        "samples": manifest.samples.len(),
        "layers": manifest.layers,
        "label_counts": label_counts,
        "label_chi_square": chi_square,
    });
    out.finish("synth", &config(common, a), &metrics)
}

pub fn fit_sample(common: &Common, a: &SampleArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest.manifest)?;
    let batch = manifest.load_sample_batch().context("io: loading sample features")?;
    let cfg = SampleFitConfig {
        dim: a.dim,
        learning_rate: a.sample_lr,
        gradient_steps: a.gradient_steps,
        alternations: a.alternations,
        seed: common.seed,
        table_samples: a.table_samples,
        ..SampleFitConfig::default()
    };
    let fit = fit_sample_projection(&batch, &cfg).context("sample_embed: fitting the sample projection")?;
    let report =
        strength_uncertainty_report(&fit.embeddings, &batch.logits).context("sample_embed: strength report")?;

    let mut out = Outputs::create(common)?;
    out.tensor("sample/projection.ftc", &matrix_tensor(&fit.projection.matrix)?)?;
    out.tensor(EMBEDDINGS, &matrix_tensor(&Matrix::from_rows(&fit.embeddings)?)?)?;
    let names = save_mixture(&out.dir(SAMPLE_DIR)?, MIXTURE_STEM, &fit.model).context("io: saving mixture")?;
    out.extend(SAMPLE_DIR, names);
    out.json("sample/embedding.json", &embedding_export(&batch, &fit)?)?;

    let metrics = json!({
        "samples": batch.len(),
        "strength_entropy_pearson": report.pearson,
        "initial_loss": fit.initial_loss(),
        "final_loss": fit.final_loss(),
        "loss_trace": fit.loss_trace,
    });
    out.finish("fit-sample", &config(common, a), &metrics)
}

/// Layer metadata shared by the downstream commands.
#[derive(Debug, Serialize, Deserialize)]
struct LayerIndex {
    grid: [usize; 2],
    reference: String,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    channels: usize,
    /// Factor applied to projected features to match the reference strength.
    scale: f64,
    lambda: String,
    h: String,
}

/// Grid of the last manifest layer, to which all layers are pooled.
fn target_grid(manifest: &Manifest) -> Result<[usize; 2]> {
    let last = manifest.layers.last().ok_or_else(|| anyhow!("io: manifest lists no layers"))?;
    let first = manifest.load_layer(last)?;
    let f = first.first().ok_or_else(|| anyhow!("io: manifest has no samples"))?;
    Ok([f.height(), f.width()])
}

fn load_pooled(manifest: &Manifest, layer: &str, grid: [usize; 2], adaptive: bool) -> Result<Vec<FeatureMap>> {
    manifest
        .load_layer(layer)
        .with_context(|| format!("io: loading layer {layer}"))?
        .into_iter()
        .map(|f| {
            if [f.height(), f.width()] == grid {
                Ok(f)
            } else {
                downsample_fmap(&f, grid[0], grid[1], adaptive).with_context(|| format!("io: pooling layer {layer}"))
            }
        })
        .collect()
}

fn project_layer(lambda: &Matrix, fmaps: &[FeatureMap], scale: f64) -> Result<LayerRegions> {
    fmaps
        .iter()
        .map(|f| {
            let h = project_regions(lambda, f)?;
            Ok(h.into_iter().map(|v| v.into_iter().map(|x| x * scale).collect()).collect())
        })
        .collect()
}

#[derive(Serialize)]
struct ImportanceRecord<'a> {
    id: &'a str,
    w: &'a [f64],
    v: &'a [f64],
}

#[derive(Serialize)]
struct RegionRecord<'a> {
    id: &'a str,
    label: usize,
    h: &'a [Vec<f64>],
    strength: Vec<f64>,
}

pub fn fit_region(common: &Common, a: &RegionArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest.manifest)?;
    let mut out = Outputs::create(common)?;
    let g_tensor = {
        let path = out.path(EMBEDDINGS);
        require(&path, "fit-sample")?;
        read_matrix(&path).with_context(|| format!("io: reading {}", path.display()))?
    };
    require(&out.path(&format!("{SAMPLE_DIR}/{MIXTURE_STEM}.json")), "fit-sample")?;
    let model = load_mixture(&out.path(SAMPLE_DIR), MIXTURE_STEM).context("io: loading the sample mixture")?;
    let batch = manifest.load_sample_batch().context("io: loading sample logits")?;
    ensure!(
        g_tensor.rows() == batch.len(),
        "fit-region: {} sample embeddings for {} manifest samples; rerun fit-sample on this manifest",
        g_tensor.rows(),
        batch.len()
    );
    let g: Vec<Vec<f64>> = (0..g_tensor.rows()).map(|i| g_tensor.row(i).to_vec()).collect();

    let layers = if a.layers.is_empty() { manifest.layers.clone() } else { a.layers.clone() };
    for l in &layers {
        ensure!(manifest.layers.contains(l), "fit-region: layer {l} is not in the manifest");
    }
    let reference = a.reference_layer.clone().or_else(|| layers.last().cloned()).ok_or_else(|| anyhow!("fit-region: no layers"))?;
    ensure!(layers.contains(&reference), "fit-region: reference layer {reference} is not among the fitted layers");
    let grid = target_grid(&manifest)?;

    let importance_cfg = ImportanceConfig {
        kappa_tilde: a.kappa_tilde,
        kappa_p: a.kappa_p,
        learning_rate: a.importance_lr,
        iterations: a.importance_iterations,
    };
    let mut raw = BTreeMap::new();
    let mut layer_metrics = BTreeMap::new();
    let mut lambdas = BTreeMap::new();
    for (index, layer) in layers.iter().enumerate() {
        let fmaps = load_pooled(&manifest, layer, grid, a.adaptive_pool)?;
        let rb = RegionBatch::new(&fmaps, batch.logits.clone()).with_context(|| format!("region_embed: layer {layer}"))?;
        let imp = fit_importance(&rb, &importance_cfg).with_context(|| format!("importance: layer {layer}"))?;
        let w: Vec<Vec<f64>> = imp.weights.iter().map(|x| x.w.clone()).collect();
        let sim_cfg = SimilarityConfig {
            dim: model.dim(),
            kappa_p: a.kappa_p,
            alpha: a.alpha,
            learning_rate: a.region_lr,
            iterations: a.region_iterations,
            seed: common.seed.wrapping_add(index as u64),
        };
        let fit = fit_region_projection(&rb, &g, &w, model.kappa_table(), &sim_cfg)
            .with_context(|| format!("region_embed: fitting layer {layer}"))?;
        raw.insert(layer.clone(), project_layer(&fit.projection.matrix, &fmaps, 1.0)?);
        write_importance(&mut out, layer, &batch.ids, &imp.weights, &imp.loss_trace)?;
        layer_metrics.insert(
            layer.clone(),
            json!({
                "channels": rb.channels(),
                "importance_loss": [imp.loss_trace[0], imp.loss_trace[imp.loss_trace.len() - 1]],
                "region_loss": [fit.loss_trace[0], fit.loss_trace[fit.loss_trace.len() - 1]],
            }),
        );
        lambdas.insert(layer.clone(), (fit.projection.matrix, rb.channels()));
    }

    let normalized = normalize_layer_strength(&raw, &reference).context("knowledge: normalizing layer strength")?;
    let mut entries = Vec::new();
    for layer in &layers {
        let (lambda, channels) = &lambdas[layer];
        let h = &normalized[layer];
        let scale = strength_scale(&raw[layer], h);
        let lambda_rel = format!("region/{layer}/lambda.ftc");
        let h_rel = format!("region/{layer}/h.ftc");
        out.tensor(&lambda_rel, &matrix_tensor(lambda)?)?;
        out.tensor(&h_rel, &layer_tensor(h)?)?;
        let records: Vec<RegionRecord> = batch
            .ids
            .iter()
            .zip(&batch.labels)
            .zip(h)
            .map(|((id, &label), regions)| RegionRecord {
                id,
                label,
                h: regions,
                strength: regions.iter().map(|v| norm(v)).collect(),
            })
            .collect();
        out.json(&format!("region/{layer}/embedding.json"), &records)?;
        if let Some(m) = layer_metrics.get_mut(layer) {
            m["scale"] = json!(scale);
        }
        entries.push(LayerEntry {
            name: layer.clone(),
            channels: *channels,
            scale,
            lambda: lambda_rel,
            h: h_rel,
        });
    }
    out.json(
        LAYERS_FILE,
        &LayerIndex {
            grid,
            reference,
            layers: entries,
        },
    )?;
    out.finish("fit-region", &config(common, a), &json!({ "grid": grid, "layers": layer_metrics }))
}

fn write_importance(
    out: &mut Outputs,
    layer: &str,
    ids: &[String],
    weights: &[ImportanceWeights],
    trace: &[f64],
) -> Result<()> {
    let samples: Vec<ImportanceRecord> = ids
        .iter()
        .zip(weights)
        .map(|(id, wt)| ImportanceRecord { id, w: &wt.w, v: &wt.v })
        .collect();
    out.json(
        &format!("region/{layer}/importance.json"),
        &json!({ "samples": samples, "loss_trace": trace }),
    )
}

/// Ratio of normalized to raw strength; 1 for the reference layer.
fn strength_scale(raw: &LayerRegions, scaled: &LayerRegions) -> f64 {
    let total = |l: &LayerRegions| l.iter().flatten().map(|h| norm(h)).sum::<f64>();
    let r = total(raw);
    if r > 0.0 {
        total(scaled) / r
    } else {
        1.0
    }
}

fn layer_index(out: &Outputs) -> Result<LayerIndex> {
    load_json(&out.path(LAYERS_FILE), "fit-region")
}

fn sample_mixture(out: &Outputs) -> Result<MixtureModel> {
    require(&out.path(&format!("{SAMPLE_DIR}/{MIXTURE_STEM}.json")), "fit-sample")?;
    load_mixture(&out.path(SAMPLE_DIR), MIXTURE_STEM).context("io: loading the sample mixture")
}

#[derive(Serialize, Deserialize, Clone, Copy)]
struct CurvePoint {
    total: usize,
    reliable: usize,
    ratio: Option<f64>,
}

type Curves = BTreeMap<String, BTreeMap<String, CurvePoint>>;

pub fn knowledge(common: &Common, a: &KnowledgeArgs) -> Result<()> {
    ensure!(a.tau > 0.0 && a.tau < 1.0, "knowledge: tau must lie in (0, 1), got {}", a.tau);
    let manifest = load_manifest(&a.manifest.manifest)?;
    let labels: Vec<usize> = manifest.samples.iter().map(|s| s.label).collect();
    let mut out = Outputs::create(common)?;
    let index = layer_index(&out)?;
    let model = sample_mixture(&out)?;
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| manifest.name.clone());

    let mut curve = BTreeMap::new();
    let mut layer_metrics = BTreeMap::new();
    for entry in &index.layers {
        let h = read_layer(&out.path(&entry.h), "fit-region")?;
        let refs = layer_region_refs(&h, &labels).with_context(|| format!("knowledge: layer {}", entry.name))?;
        let report = count_knowledge_points(&refs, &model, a.tau).with_context(|| format!("knowledge: layer {}", entry.name))?;
        let sweep = (1..=9)
            .map(|i| {
                let tau = f64::from(i) / 10.0;
                let r = count_knowledge_points(&refs, &model, tau)?;
                Ok((tau, r.total_points, r.reliable_points))
            })
            .collect::<Result<Vec<_>>>()
            .with_context(|| format!("knowledge: tau sweep on layer {}", entry.name))?;
        let monotone = sweep.windows(2).all(|w| w[1].1 <= w[0].1);
        let overlay = knowledge_regions_export(&report, index.grid[0], index.grid[1])?;
        out.json(&format!("knowledge/{}.json", entry.name), &report)?;
        out.json(&format!("knowledge/{}_overlay.json", entry.name), &overlay)?;
        curve.insert(entry.name.clone(), curve_point(&report));
        layer_metrics.insert(
            entry.name.clone(),
            json!({
                "total": report.total_points,
                "reliable": report.reliable_points,
                "ratio": report.ratio,
                "ties": report.ties,
                "tau_sweep": sweep,
                "tau_sweep_monotone": monotone,
            }),
        );
    }

    let curves_path = out.path("knowledge/curves.json");
    let mut curves: Curves = if curves_path.exists() {
        discpower::io::read_json(&curves_path).with_context(|| format!("io: reading {}", curves_path.display()))?
    } else {
        Curves::new()
    };
    curves.insert(checkpoint.clone(), curve);
    out.json("knowledge/curves.json", &curves)?;
    let metrics = json!({ "checkpoint": checkpoint, "tau": a.tau, "layers": layer_metrics });
    out.finish("knowledge", &config(common, a), &metrics)
}

fn curve_point(r: &KnowledgeReport) -> CurvePoint {
    CurvePoint {
        total: r.total_points,
        reliable: r.reliable_points,
        ratio: r.ratio,
    }
}

/// Reorders `other` to follow `reference` by sample id, or lists every
/// unmatched id.
fn pair_manifests(reference: &Manifest, mut other: Manifest, what: &str) -> Result<Manifest> {
    let position: HashMap<&str, usize> = other.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let missing: Vec<&str> = reference
        .samples
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !position.contains_key(id))
        .collect();
    let ours: std::collections::HashSet<&str> = reference.samples.iter().map(|s| s.id.as_str()).collect();
    let extra: Vec<&str> = other.samples.iter().map(|s| s.id.as_str()).filter(|id| !ours.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        bail!(
            "analysis: pairing error with {what}: missing there {:?}; unknown ids {:?}",
            missing,
            extra
        );
    }
    let order: Vec<usize> = reference.samples.iter().map(|s| position[s.id.as_str()]).collect();
    let mut slots: Vec<Option<_>> = other.samples.drain(..).map(Some).collect();
    other.samples = order.into_iter().map(|i| slots[i].take().expect("ids are unique")).collect();
    Ok(other)
}

struct ProjectedLayer {
    name: String,
    a: LayerRegions,
    b: LayerRegions,
}

/// Projects both conditions of every fitted layer with the reference Λ and scale.
fn project_pairs(out: &Outputs, index: &LayerIndex, a: &Manifest, b: &Manifest, adaptive: bool) -> Result<Vec<ProjectedLayer>> {
    index
        .layers
        .iter()
        .map(|entry| {
            let lambda_path = out.path(&entry.lambda);
            require(&lambda_path, "fit-region")?;
            let lambda = read_matrix(&lambda_path).with_context(|| format!("io: reading {}", lambda_path.display()))?;
            let fa = load_pooled(a, &entry.name, index.grid, adaptive)?;
            let fb = load_pooled(b, &entry.name, index.grid, adaptive)?;
            Ok(ProjectedLayer {
                name: entry.name.clone(),
                a: project_layer(&lambda, &fa, entry.scale)?,
                b: project_layer(&lambda, &fb, entry.scale)?,
            })
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn attack(common: &Common, a: &AttackArgs) -> Result<()> {
    ensure!(a.theta_p > 0.0 && a.theta_p < 1.0, "attack: theta_p must lie in (0, 1)");
    ensure!((0.0..=1.0).contains(&a.theta_w), "attack: theta_w must lie in [0, 1]");
    let original = load_manifest(&a.manifest.manifest)?;
    let attacked = pair_manifests(&original, load_manifest(&a.paired_manifest)?, "the attacked manifest")?;
    let steps = a
        .step_manifest
        .iter()
        .map(|p| pair_manifests(&original, load_manifest(p)?, &format!("step manifest {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Outputs::create(common)?;
    let index = layer_index(&out)?;
    let model = sample_mixture(&out)?;
    let c_ori: Vec<usize> = original.samples.iter().map(|s| s.label).collect();
    let c_adv: Vec<usize> = attacked
        .load_sample_batch()
        .context("io: loading attacked logits")?
        .logits
        .iter()
        .map(|z| argmax(z))
        .collect();

    let layers = project_pairs(&out, &index, &original, &attacked, a.adaptive_pool)?;
    let mut step_layers: Vec<Vec<ProjectedLayer>> = Vec::new();
    for s in &steps {
        step_layers.push(project_pairs(&out, &index, &original, s, a.adaptive_pool)?);
    }

    let mut utilities = BTreeMap::new();
    let mut trajectories = BTreeMap::new();
    for (li, layer) in layers.iter().enumerate() {
        let pairs = PairedRegions { a: &layer.a, b: &layer.b };
        let u = attack_utilities(pairs).with_context(|| format!("analysis: layer {}", layer.name))?;
        let hist = attacked_region_histogram(pairs, &c_ori, &c_adv, &model, a.theta_p)
            .with_context(|| format!("analysis: layer {}", layer.name))?;
        out.json(&format!("attack/{}_histogram.json", layer.name), &hist)?;
        let counts = trajectory_counts(layer, step_layers.iter().map(|s| &s[li]).collect(), &c_adv, &model, a)?;
        trajectories.insert(layer.name.clone(), counts);
        utilities.insert(layer.name.clone(), u);
    }
    out.json("attack/utilities.json", &utilities)?;
    out.json("attack/trajectories.json", &trajectories)?;
    let most = utilities
        .iter()
        .max_by(|x, y| x.1.delta_strength.total_cmp(&y.1.delta_strength))
        .map(|(k, _)| k.clone());
    let metrics = json!({
        "utilities": utilities,
        "largest_delta_strength_layer": most,
        "steps": steps.len(),
    });
    out.finish("attack", &config(common, a), &metrics)
}

fn trajectory_counts(
    layer: &ProjectedLayer,
    steps: Vec<&ProjectedLayer>,
    targets: &[usize],
    model: &MixtureModel,
    args: &AttackArgs,
) -> Result<BTreeMap<String, usize>> {
    let threshold = |regions: &[Vec<f64>]| strength_quantile(regions, args.theta_w);
    let mut counts = BTreeMap::new();
    for (s, (start, end)) in layer.a.iter().zip(&layer.b).enumerate() {
        let t0 = threshold(start)?;
        let t1 = threshold(end)?;
        let step_thresholds = steps.iter().map(|st| threshold(&st.b[s])).collect::<discpower::Result<Vec<_>>>()?;
        for r in 0..start.len() {
            let mids: Vec<(Vec<f64>, f64)> = steps.iter().zip(&step_thresholds).map(|(st, &t)| (st.b[s][r].clone(), t)).collect();
            let t = Trajectory {
                start: &start[r],
                start_threshold: t0,
                end: &end[r],
                end_threshold: t1,
                midpoints: (!steps.is_empty()).then_some(mids.as_slice()),
                target: targets[s],
            };
            let kind = classify_trajectory(&t, model, args.theta_p).with_context(|| format!("analysis: layer {}", layer.name))?;
            let name = serde_json::to_value(kind)?.as_str().unwrap_or("unknown").to_string();
            *counts.entry(name).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

pub fn distill(common: &Common, a: &DistillArgs) -> Result<()> {
    let teacher = load_manifest(&a.manifest.manifest)?;
    let student = pair_manifests(&teacher, load_manifest(&a.paired_manifest)?, "the student manifest")?;
    let mut out = Outputs::create(common)?;
    let index = layer_index(&out)?;
    let layers = project_pairs(&out, &index, &teacher, &student, a.adaptive_pool)?;
    let mut metrics = BTreeMap::new();
    for layer in &layers {
        // Student first, teacher second.
        let pairs = PairedRegions { a: &layer.b, b: &layer.a };
        let report = distill_dissimilarity(pairs).with_context(|| format!("analysis: layer {}", layer.name))?;
        let AttackUtilities {
            delta_orientation,
            delta_strength,
        } = attack_utilities(pairs)?;
        out.json(&format!("distill/{}.json", layer.name), &report)?;
        metrics.insert(
            layer.name.clone(),
            json!({
                "pairs": report.pairs,
                "mean_orientation_dissimilarity": 1.0 - delta_orientation,
                "mean_abs_strength_difference": delta_strength,
            }),
        );
    }
    out.finish("distill", &config(common, a), &json!({ "layers": metrics }))
}
