use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use discpower::io::{read_json, read_tensor, write_json, write_tensor, Tensor};
use discpower::knowledge::LayerRegions;
use serde::Serialize;

use crate::Common;

/// Records every file written below the output root.
pub struct Outputs {
    root: PathBuf,
    files: BTreeSet<String>,
    started: Instant,
    reproducible: bool,
}

impl Outputs {
    pub fn create(common: &Common) -> Result<Self> {
        fs::create_dir_all(&common.out).with_context(|| format!("creating output directory {}", common.out.display()))?;
        Ok(Outputs {
            root: common.out.clone(),
            files: BTreeSet::new(),
            started: Instant::now(),
            reproducible: common.reproducible,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn prepare(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.files.insert(rel.to_string());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let path = self.prepare(rel)?;
        write_json(&path, value).with_context(|| format!("writing {}", path.display()))
    }

    pub fn tensor(&mut self, rel: &str, t: &Tensor) -> Result<()> {
        let path = self.prepare(rel)?;
        write_tensor(&path, t).with_context(|| format!("writing {}", path.display()))
    }

    /// Registers files a library writer produced inside `dir` (relative to the root).
    pub fn extend(&mut self, dir: &str, names: Vec<String>) {
        self.files.extend(names.into_iter().map(|n| if dir.is_empty() { n } else { format!("{dir}/{n}") }));
    }

    pub fn dir(&self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(path)
    }

    /// Writes `summary_<command>.json` and finishes the run.
    pub fn finish<C: Serialize, M: Serialize>(mut self, command: &str, config: &C, metrics: &M) -> Result<()> {
        let rel = format!("summary_{command}.json");
        self.files.insert(rel.clone());
        let summary = Summary {
            command,
            config,
            metrics,
            output_files: self.files.iter().filter(|f| **f != rel).cloned().collect(),
            elapsed_seconds: (!self.reproducible).then(|| self.started.elapsed().as_secs_f64()),
        };
        let path = self.path(&rel);
        write_json(&path, &summary).with_context(|| format!("writing {}", path.display()))?;
        log::info!("{command}: wrote {} files to {}", self.files.len(), self.root.display());
        Ok(())
    }
}

#[derive(Serialize)]
struct Summary<'a, C, M> {
    command: &'a str,
    config: &'a C,
    metrics: &'a M,
    output_files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_seconds: Option<f64>,
}

/// Fails with a dependency error if an upstream artifact is missing.
pub fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing upstream artifact {}; run `discpower {producer}` with the same --out first", path.display());
    }
    Ok(())
}

pub fn load_json<T: for<'de> serde::Deserialize<'de>>(path: &Path, producer: &str) -> Result<T> {
    require(path, producer)?;
    read_json(path).with_context(|| format!("reading {}", path.display()))
}

/// Stores `h[sample][region]` as a `[n, regions, dim]` tensor.
pub fn layer_tensor(layer: &LayerRegions) -> Result<Tensor> {
    let n = layer.len();
    let regions = layer.first().map_or(0, Vec::len);
    let dim = layer.first().and_then(|s| s.first()).map_or(0, Vec::len);
    let values: Vec<f64> = layer.iter().flatten().flatten().copied().collect();
    Ok(Tensor::f64(vec![n, regions, dim], values)?)
}

pub fn read_layer(path: &Path, producer: &str) -> Result<LayerRegions> {
    require(path, producer)?;
    let t = read_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    let [n, regions, dim] = t.dims[..] else {
        bail!("{}: expected a 3-d tensor, found dims {:?}", path.display(), t.dims);
    };
    if dim == 0 || regions == 0 {
        return Ok(vec![vec![vec![0.0; dim]; regions]; n]);
    }
    Ok(t.values
        .chunks(regions * dim)
        .map(|s| s.chunks(dim).map(<[f64]>::to_vec).collect())
        .collect())
}
