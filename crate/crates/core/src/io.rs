//! The `FTC1` tensor container, dataset manifests, feature-map resampling and
//! persistence of fitted models.
//!
//! Container layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `FTC1` |
//! | 4     | dtype: 0 = f32, 1 = f64 |
//! | 5     | ndim |
//! | 6..8  | reserved, zero |
//! | 8..   | ndim × u64 dims, then the row-major payload |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixture::MixtureModel;
use crate::region_embed::FeatureMap;
use crate::sample_embed::SampleBatch;
use crate::vmf::KappaTable;

pub const MAGIC: &[u8; 4] = b"FTC1";
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// A dense array. Values are held as f64; `F32` tensors hold values that
/// are exactly representable in f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected = element_count(&dims).ok_or_else(|| Error::Domain("tensor dims overflow".into()))?;
        if expected != values.len() {
            return Err(Error::DimensionMismatch {
                context: "tensor values",
                expected,
                found: values.len(),
            });
        }
        Ok(Tensor { dtype, dims, values })
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(DType::F64, dims, values)
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            dtype: DType::F64,
            dims: vec![values.len()],
            values,
        }
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d))
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::Domain(format!("tensor has {} dims, at most 255 supported", t.dims.len())));
    }
    if element_count(&t.dims) != Some(t.values.len()) {
        return Err(Error::DimensionMismatch {
            context: "tensor values",
            expected: element_count(&t.dims).unwrap_or(usize::MAX),
            found: t.values.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.dims.len() + t.dtype.size() * t.values.len());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype.code());
    out.push(t.dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for d in &t.dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    match t.dtype {
        DType::F32 => t.values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => t.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset: offset as u64,
        message: message.into(),
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return format_err(0, "bad magic, expected FTC1");
    }
    if bytes.len() < HEADER_LEN {
        return format_err(bytes.len(), "truncated header");
    }
    let dtype = match DType::from_code(bytes[4]) {
        Some(d) => d,
        None => return format_err(4, format!("unknown dtype code {}", bytes[4])),
    };
    let ndim = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return format_err(6, "reserved bytes must be zero");
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return format_err(bytes.len(), format!("truncated dims: need {dims_end} bytes"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = HEADER_LEN + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        match usize::try_from(d) {
            Ok(d) => dims.push(d),
            Err(_) => return format_err(at, format!("dim {d} does not fit in memory")),
        }
    }
    let count = match element_count(&dims).and_then(|n| n.checked_mul(dtype.size())) {
        Some(n) => n / dtype.size(),
        None => return format_err(HEADER_LEN, "dims overflow"),
    };
    let payload = &bytes[dims_end..];
    let need = count * dtype.size();
    if payload.len() < need {
        return format_err(
            bytes.len(),
            format!("truncated payload: need {need} bytes after offset {dims_end}, found {}", payload.len()),
        );
    }
    if payload.len() > need {
        return format_err(dims_end + need, format!("{} trailing bytes", payload.len() - need));
    }
    let values = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    Ok(Tensor { dtype, dims, values })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensor(path, &Tensor::f64(vec![m.rows(), m.cols()], m.as_slice().to_vec())?)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let t = read_tensor(path)?;
    if t.dims.len() != 2 {
        return Err(Error::DimensionMismatch {
            context: "matrix tensor rank",
            expected: 2,
            found: t.dims.len(),
        });
    }
    Matrix::from_vec(t.dims[0], t.dims[1], t.values)
}

pub fn write_fmap(path: &Path, fmap: &FeatureMap, dtype: DType) -> Result<()> {
    write_tensor(path, &Tensor::new(dtype, fmap.dims().to_vec(), fmap.values().to_vec())?)
}

pub fn read_fmap(path: &Path) -> Result<FeatureMap> {
    let t = read_tensor(path)?;
    if t.dims.len() != 3 {
        return Err(Error::DimensionMismatch {
            context: "feature map tensor rank",
            expected: 3,
            found: t.dims.len(),
        });
    }
    FeatureMap::new(t.dims[0], t.dims[1], t.dims[2], t.values)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    /// 0-based index into the manifest's category list.
    pub label: usize,
    pub features: String,
    pub logits: String,
    #[serde(default)]
    pub layers: BTreeMap<String, String>,
}

/// Dataset description. File paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub categories: Vec<String>,
    /// Layer names in forward order.
    #[serde(default)]
    pub layers: Vec<String>,
    pub samples: Vec<ManifestSample>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(name: String, categories: Vec<String>, layers: Vec<String>, samples: Vec<ManifestSample>, base_dir: PathBuf) -> Self {
        Manifest {
            name,
            categories,
            layers,
            samples,
            base_dir,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Manifest("no categories".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {}", s.id)));
            }
            if s.label >= self.categories.len() {
                return Err(Error::Manifest(format!(
                    "sample {}: label {} outside {} categories",
                    s.id,
                    s.label,
                    self.categories.len()
                )));
            }
            let mut files = vec![("features", &s.features), ("logits", &s.logits)];
            for layer in &self.layers {
                match s.layers.get(layer) {
                    Some(f) => files.push(("layer", f)),
                    None => return Err(Error::Manifest(format!("sample {}: no file for layer {layer}", s.id))),
                }
            }
            for (what, f) in files {
                if !self.resolve(f).is_file() {
                    return Err(Error::Manifest(format!("sample {}: missing {what} file {f}", s.id)));
                }
            }
        }
        Ok(())
    }

    fn read_vector(&self, sample: &ManifestSample, rel: &str) -> Result<Vec<f64>> {
        let t = read_tensor(&self.resolve(rel)).map_err(|e| Error::Manifest(format!("sample {}: {e}", sample.id)))?;
        if t.dims.len() != 1 {
            return Err(Error::Manifest(format!("sample {}: {rel} is not a vector", sample.id)));
        }
        Ok(t.values)
    }

    pub fn load_sample_batch(&self) -> Result<SampleBatch> {
        let mut features = Vec::with_capacity(self.samples.len());
        let mut logits = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            features.push(self.read_vector(s, &s.features)?);
            let z = self.read_vector(s, &s.logits)?;
            if z.len() != self.categories.len() {
                return Err(Error::Manifest(format!(
                    "sample {}: {} logits for {} categories",
                    s.id,
                    z.len(),
                    self.categories.len()
                )));
            }
            logits.push(z);
        }
        SampleBatch::new(
            self.samples.iter().map(|s| s.id.clone()).collect(),
            features,
            logits,
            self.samples.iter().map(|s| s.label).collect(),
        )
    }

    pub fn load_layer(&self, layer: &str) -> Result<Vec<FeatureMap>> {
        self.samples
            .iter()
            .map(|s| {
                let rel = s
                    .layers
                    .get(layer)
                    .ok_or_else(|| Error::Manifest(format!("sample {}: no file for layer {layer}", s.id)))?;
                read_fmap(&self.resolve(rel)).map_err(|e| Error::Manifest(format!("sample {} layer {layer}: {e}", s.id)))
            })
            .collect()
    }
}

/// Average-pools each channel to `h × w`. Without `adaptive`, the input
/// size must be a multiple of the output size; with it, windows follow the
/// `[⌊iH/h⌋, ⌈(i+1)H/h⌉)` rule.
pub fn downsample_fmap(fmap: &FeatureMap, h: usize, w: usize, adaptive: bool) -> Result<FeatureMap> {
    let (k, hh, ww) = (fmap.channels(), fmap.height(), fmap.width());
    if h == 0 || w == 0 || h > hh || w > ww {
        return Err(Error::Resample(format!("cannot pool {hh}x{ww} to {h}x{w}")));
    }
    if !adaptive && (hh % h != 0 || ww % w != 0) {
        return Err(Error::Resample(format!(
            "{hh}x{ww} is not divisible into {h}x{w}; enable adaptive pooling to allow unequal windows"
        )));
    }
    let window = |i: usize, out: usize, inp: usize| (i * inp / out, ((i + 1) * inp).div_ceil(out));
    let src = fmap.values();
    let mut values = Vec::with_capacity(k * h * w);
    for c in 0..k {
        let plane = &src[c * hh * ww..(c + 1) * hh * ww];
        for i in 0..h {
            let (r0, r1) = window(i, h, hh);
            for j in 0..w {
                let (c0, c1) = window(j, w, ww);
                let mut sum = 0.0;
                for r in r0..r1 {
                    sum += plane[r * ww + c0..r * ww + c1].iter().sum::<f64>();
                }
                values.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    FeatureMap::new(k, h, w, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KappaTableMeta {
    dim: usize,
    sigma: f64,
    sample_count: usize,
    strengths: String,
    kappas: String,
}

/// Writes `<stem>_strengths.ftc`, `<stem>_kappas.ftc` and `<stem>.json`.
/// Returns the file names written.
pub fn save_kappa_table(dir: &Path, stem: &str, table: &KappaTable) -> Result<Vec<String>> {
    let meta = KappaTableMeta {
        dim: table.dim(),
        sigma: table.sigma(),
        sample_count: table.sample_count(),
        strengths: format!("{stem}_strengths.ftc"),
        kappas: format!("{stem}_kappas.ftc"),
    };
    write_tensor(&dir.join(&meta.strengths), &Tensor::vector(table.strengths().to_vec()))?;
    write_tensor(&dir.join(&meta.kappas), &Tensor::vector(table.kappas().to_vec()))?;
    let json = format!("{stem}.json");
    write_json(&dir.join(&json), &meta)?;
    Ok(vec![meta.strengths, meta.kappas, json])
}

pub fn load_kappa_table(dir: &Path, stem: &str) -> Result<KappaTable> {
    let meta: KappaTableMeta = read_json(&dir.join(format!("{stem}.json")))?;
    let strengths = read_tensor(&dir.join(&meta.strengths))?.values;
    let kappas = read_tensor(&dir.join(&meta.kappas))?.values;
    KappaTable::from_parts(meta.dim, meta.sigma, meta.sample_count, strengths, kappas)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MixtureMeta {
    categories: usize,
    dim: usize,
    priors: String,
    directions: String,
    kappa_table: String,
}

/// Writes priors, the direction matrix, the κ table and a JSON sidecar.
pub fn save_mixture(dir: &Path, stem: &str, model: &MixtureModel) -> Result<Vec<String>> {
    let meta = MixtureMeta {
        categories: model.categories(),
        dim: model.dim(),
        priors: format!("{stem}_priors.ftc"),
        directions: format!("{stem}_directions.ftc"),
        kappa_table: format!("{stem}_kappa"),
    };
    write_tensor(&dir.join(&meta.priors), &Tensor::vector(model.priors().to_vec()))?;
    write_matrix(&dir.join(&meta.directions), &Matrix::from_rows(model.directions())?)?;
    let mut files = vec![meta.priors.clone(), meta.directions.clone()];
    files.extend(save_kappa_table(dir, &meta.kappa_table, model.kappa_table())?);
    let json = format!("{stem}.json");
    write_json(&dir.join(&json), &meta)?;
    files.push(json);
    Ok(files)
}

pub fn load_mixture(dir: &Path, stem: &str) -> Result<MixtureModel> {
    let meta: MixtureMeta = read_json(&dir.join(format!("{stem}.json")))?;
    let priors = read_tensor(&dir.join(&meta.priors))?.values;
    let dirs = read_matrix(&dir.join(&meta.directions))?;
    let table = load_kappa_table(dir, &meta.kappa_table)?;
    let directions = (0..dirs.rows()).map(|i| dirs.row(i).to_vec()).collect();
    MixtureModel::new(priors, directions, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numutil::RngState;
    use proptest::prelude::*;

    fn random_tensor(dims: Vec<usize>, dtype: DType, rng: &mut RngState) -> Tensor {
        let n = dims.iter().product();
        let values = (0..n)
            .map(|_| {
                let v = rng.normal() * 1e3;
                match dtype {
                    DType::F32 => v as f32 as f64,
                    DType::F64 => v,
                }
            })
            .collect();
        Tensor::new(dtype, dims, values).unwrap()
    }

    #[test]
    fn round_trip_examples() {
        let mut rng = RngState::new(1);
        let dir = tempfile::tempdir().unwrap();
        for dtype in [DType::F32, DType::F64] {
            let t = random_tensor(vec![3, 4, 5], dtype, &mut rng);
            let p = dir.path().join("t.ftc");
            write_tensor(&p, &t).unwrap();
            let back = read_tensor(&p).unwrap();
            assert_eq!(back.dims, t.dims);
            for (a, b) in back.values.iter().zip(&t.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let scalar = Tensor::new(DType::F64, vec![], vec![std::f64::consts::PI]).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&scalar).unwrap()).unwrap(), scalar);
        let empty = Tensor::new(DType::F32, vec![3, 0], vec![]).unwrap();
        let bytes = encode_tensor(&empty).unwrap();
        assert_eq!(bytes.len(), 8 + 16);
        assert_eq!(decode_tensor(&bytes).unwrap(), empty);
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(DType::F64, vec![2], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..8], &[b'F', b'T', b'C', b'1', 1, 1, 0, 0]);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
        assert_eq!(encode_tensor(&t).unwrap(), b);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let t = Tensor::new(DType::F32, vec![2, 2], vec![1.0; 4]).unwrap();
        let good = encode_tensor(&t).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = good.clone();
        bad[7] = 1;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format { offset: 6, .. })));
        let short = &good[..good.len() - 3];
        assert!(matches!(decode_tensor(short), Err(Error::Format { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(Error::Format { offset: 40, .. })));
        let mut huge = vec![b'F', b'T', b'C', b'1', 1, 2, 0, 0];
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_tensor(&huge), Err(Error::Format { .. })));
        assert!(matches!(decode_tensor(&good[..10]), Err(Error::Format { .. })));
    }

    #[test]
    fn downsample_examples() {
        let mut rng = RngState::new(2);
        let f = FeatureMap::new(2, 4, 4, (0..32).map(|_| rng.normal()).collect()).unwrap();
        assert_eq!(downsample_fmap(&f, 4, 4, false).unwrap(), f);
        let c = FeatureMap::new(1, 4, 6, vec![2.5; 24]).unwrap();
        assert!(downsample_fmap(&c, 2, 3, false).unwrap().values().iter().all(|v| *v == 2.5));
        let q = FeatureMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(downsample_fmap(&q, 1, 1, false).unwrap().values(), &[2.5]);
        let odd = FeatureMap::new(1, 3, 3, (0..9).map(f64::from).collect()).unwrap();
        assert!(matches!(downsample_fmap(&odd, 2, 2, false), Err(Error::Resample(_))));
        let a = downsample_fmap(&odd, 2, 2, true).unwrap();
        // windows rows/cols {0,1} and {1,2}
        assert_eq!(a.values(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn manifest_errors_name_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        write_tensor(&dir.path().join("f.ftc"), &Tensor::vector(vec![1.0, 2.0])).unwrap();
        let m = Manifest::new(
            "t".into(),
            vec!["a".into(), "b".into()],
            vec![],
            vec![ManifestSample {
                id: "s7".into(),
                label: 1,
                features: "f.ftc".into(),
                logits: "missing.ftc".into(),
                layers: BTreeMap::new(),
            }],
            dir.path().to_path_buf(),
        );
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains("s7") && err.contains("logits"), "{err}");
    }

    #[test]
    fn model_persistence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let table = KappaTable::from_parts(3, 1.0, 500, vec![0.1, 1.0, 2.0], vec![0.2, 1.0, 4.0]).unwrap();
        let model = MixtureModel::new(
            vec![0.25, 0.75],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.6, 0.8]],
            table,
        )
        .unwrap();
        save_mixture(dir.path(), "mixture", &model).unwrap();
        assert_eq!(load_mixture(dir.path(), "mixture").unwrap(), model);
    }

    proptest! {
        #[test]
        fn downsample_preserves_channel_means(seed in 0u64..200, fh in 1usize..4, fw in 1usize..4) {
            let mut rng = RngState::new(seed);
            // power-of-two factors keep the pooled sums exact in binary
            let (h, w) = (2, 2);
            let (hh, ww) = (h * (1 << fh), w * (1 << fw));
            let vals: Vec<f64> = (0..2 * hh * ww).map(|_| (rng.below(2001) as f64 - 1000.0) / 8.0).collect();
            let f = FeatureMap::new(2, hh, ww, vals).unwrap();
            let d = downsample_fmap(&f, h, w, false).unwrap();
            for c in 0..2 {
                let a: f64 = f.values()[c * hh * ww..(c + 1) * hh * ww].iter().sum::<f64>() / (hh * ww) as f64;
                let b: f64 = d.values()[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
                prop_assert_eq!(a, b);
            }
        }
    }
}
