//! On-disk datasets: a directory of flat binary tensors per modality, a CSV
//! label manifest and a JSON description.
//!
//! Tensor file layout, little-endian throughout:
//!
//! ```text
//! magic   4 bytes  "DMXT"
//! version u32      1
//! ndim    u32
//! dims    ndim x u64
//! data    prod(dims) x f64, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"DMXT";
pub const TENSOR_VERSION: u32 = 1;
pub const DATASET_FORMAT: &str = "dagmix-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.json";
pub const LABELS_FILE: &str = "labels.csv";

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor<f64>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format("not a tensor file".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    r.read_exact(&mut u32b)?;
    let ndim = u32::from_le_bytes(u32b) as usize;
    if ndim > 16 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut u64b = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64b)?;
        shape.push(usize::try_from(u64::from_le_bytes(u64b)).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != len * 8 {
        return Err(Error::Format(format!("expected {} data bytes, found {}", len * 8, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f64>> {
    read_tensor(fs::File::open(path)?)
}

/// Per-sample ground truth. Categorical columns hold small integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub columns: Vec<String>,
    pub categorical: Vec<bool>,
    /// One row per sample.
    pub rows: Vec<Vec<f64>>,
}

impl LabelTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|x| x == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    /// Categorical columns as `(name, values)`.
    pub fn factors(&self) -> Vec<(String, Vec<usize>)> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(c, _)| self.categorical[*c])
            .map(|(c, name)| (name.clone(), self.rows.iter().map(|r| r[c] as usize).collect()))
            .collect()
    }

    /// Categorical columns are written as integers, the rest with full precision.
    pub fn to_csv(&self) -> String {
        let mut s = format!("index,{}\n", self.columns.join(","));
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&i.to_string());
            for (c, v) in r.iter().enumerate() {
                if self.categorical[c] {
                    s.push_str(&format!(",{}", *v as i64));
                } else {
                    s.push_str(&format!(",{v:?}"));
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, categorical: &[String]) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty label file".into()))?;
        let mut cols: Vec<String> = header.split(',').map(str::to_string).collect();
        if cols.first().map(String::as_str) != Some("index") {
            return Err(Error::Format("label file must start with an index column".into()));
        }
        cols.remove(0);
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() + 1 || fields[0].parse::<usize>().ok() != Some(i) {
                return Err(Error::Format(format!("label row {i} is malformed")));
            }
            let row = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("label row {i}: bad value {f}"))))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self {
            categorical: cols.iter().map(|c| categorical.contains(c)).collect(),
            columns: cols,
            rows,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    /// Shape of one sample file.
    pub sample_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub n: usize,
    pub seed: u64,
    pub modalities: Vec<ModalityEntry>,
    pub categorical: Vec<String>,
    /// Generator draws rejected for leaving bounds.
    pub rejected: usize,
    /// The generator settings, verbatim.
    pub generator: serde_json::Value,
}

fn sample_path(dir: &Path, modality: &str, i: usize) -> std::path::PathBuf {
    dir.join(modality).join(format!("{i:05}.bin"))
}

/// Writes `samples[m][i]` for every modality `m` and sample `i`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[Vec<Tensor<f64>>], labels: &LabelTable) -> Result<()> {
    if samples.len() != manifest.modalities.len() || samples.iter().any(|s| s.len() != manifest.n) || labels.rows.len() != manifest.n {
        return Err(Error::Format("dataset counts disagree with the manifest".into()));
    }
    fs::create_dir_all(dir)?;
    for (entry, items) in manifest.modalities.iter().zip(samples) {
        fs::create_dir_all(dir.join(&entry.name))?;
        for (i, t) in items.iter().enumerate() {
            if t.shape() != entry.sample_shape.as_slice() {
                return Err(Error::Format(format!("{} sample {i} has shape {:?}", entry.name, t.shape())));
            }
            save_tensor(&sample_path(dir, &entry.name, i), t)?;
        }
    }
    fs::write(dir.join(LABELS_FILE), labels.to_csv())?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset {} version {}", m.format, m.version)));
    }
    Ok(m)
}

pub fn load_labels(dir: &Path, manifest: &DatasetManifest) -> Result<LabelTable> {
    let labels = LabelTable::from_csv(&fs::read_to_string(dir.join(LABELS_FILE))?, &manifest.categorical)?;
    if labels.rows.len() != manifest.n {
        return Err(Error::Format("label count differs from the manifest".into()));
    }
    Ok(labels)
}

/// Loads the model inputs only; labels are read separately.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Dataset)> {
    let manifest = load_manifest(dir)?;
    let mut mods = Vec::with_capacity(manifest.modalities.len());
    for entry in &manifest.modalities {
        let d: usize = entry.sample_shape.iter().product();
        let mut data = Vec::with_capacity(manifest.n * d);
        for i in 0..manifest.n {
            let t = load_tensor(&sample_path(dir, &entry.name, i))?;
            if t.shape() != entry.sample_shape.as_slice() {
                return Err(Error::Format(format!("{} sample {i} has shape {:?}", entry.name, t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        mods.push(Modality::new(entry.name.clone(), Tensor::new(vec![manifest.n, d], data)?, None)?);
    }
    Ok((manifest, Dataset::new(mods)?))
}
