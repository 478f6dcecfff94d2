//! On-disk formats.
//!
//! A grid file is a 17-byte header followed by row-major values, all
//! little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `CASG`                            |
//! | 4      | 4    | height (`u32`)                          |
//! | 8      | 4    | width (`u32`)                           |
//! | 12     | 4    | channels (`u32`)                        |
//! | 16     | 1    | dtype: `0x01` = `f64`, `0x02` = `u32`   |
//! | 17     | ...  | `height * width * channels` values      |
//!
//! Images and model tensors use `f64`; region maps use `u32` with one
//! channel. A dataset is a directory holding two grid files per sample plus
//! `index.json`; a checkpoint is a directory holding one grid file per
//! parameter tensor plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RegionMap, Shape};
use crate::nnet::{LayerParams, ModelParams, NetSpec};
use crate::synth::SynthSample;

pub const MAGIC: [u8; 4] = *b"CASG";
pub const HEADER_LEN: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0x01,
    U32 = 0x02,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0x01 => Some(DType::F64),
            0x02 => Some(DType::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::U32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

/// A decoded grid file before it is checked against a domain type.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub shape: Shape,
    pub data: GridData,
}

fn dim_u32(v: usize, what: &str) -> std::result::Result<u32, String> {
    u32::try_from(v).map_err(|_| format!("{what} {v} does not fit in u32"))
}

impl RawGrid {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let fail = |reason| Error::InvalidGrid(reason);
        let (dtype, len) = match &self.data {
            GridData::F64(v) => (DType::F64, v.len()),
            GridData::U32(v) => (DType::U32, v.len()),
        };
        if len != self.shape.len() {
            return Err(fail(format!("{len} values for shape {}", self.shape)));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + len * dtype.width());
        out.extend_from_slice(&MAGIC);
        for (v, what) in [
            (self.shape.height, "height"),
            (self.shape.width, "width"),
            (self.shape.channels, "channels"),
        ] {
            out.extend_from_slice(&dim_u32(v, what).map_err(fail)?.to_le_bytes());
        }
        out.push(dtype as u8);
        match &self.data {
            GridData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            GridData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    /// Parses a grid file; the error string says what is malformed.
    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("{} bytes is shorter than the header", bytes.len()));
        }
        if bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(4), dim(8), dim(12));
        let dtype = DType::from_tag(bytes[16]).ok_or_else(|| format!("unknown dtype tag {:#04x}", bytes[16]))?;
        let body = &bytes[HEADER_LEN..];
        let expected = shape
            .height
            .checked_mul(shape.width)
            .and_then(|p| p.checked_mul(shape.channels))
            .and_then(|n| n.checked_mul(dtype.width()))
            .ok_or("dimensions overflow")?;
        if body.len() != expected {
            return Err(format!("shape {shape} needs {expected} value bytes, found {}", body.len()));
        }
        let data = match dtype {
            DType::F64 => GridData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => GridData::U32(
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { shape, data })
    }
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })
}

pub fn read_raw(path: &Path) -> Result<RawGrid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawGrid::decode(&bytes).map_err(|reason| Error::Format {
        path: path.into(),
        reason,
    })
}

fn format_error(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.to_string(),
    }
}

pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let raw = RawGrid {
        shape: image.shape(),
        data: GridData::F64(image.values().to_vec()),
    };
    write_atomic(path, &raw.encode()?)
}

pub fn read_image(path: &Path) -> Result<ImageGrid> {
    match read_raw(path)? {
        RawGrid {
            shape,
            data: GridData::F64(v),
        } => ImageGrid::new(shape, v).map_err(|e| format_error(path, e)),
        _ => Err(format_error(path, "expected f64 values")),
    }
}

pub fn write_region_map(path: &Path, regions: &RegionMap) -> Result<()> {
    let raw = RawGrid {
        shape: Shape::new(regions.height(), regions.width(), 1),
        data: GridData::U32(regions.ids().to_vec()),
    };
    write_atomic(path, &raw.encode()?)
}

pub fn read_region_map(path: &Path) -> Result<RegionMap> {
    match read_raw(path)? {
        RawGrid {
            shape,
            data: GridData::U32(ids),
        } if shape.channels == 1 => RegionMap::new(shape.height, shape.width, ids).map_err(|e| format_error(path, e)),
        _ => Err(format_error(path, "expected single-channel u32 values")),
    }
}

fn write_tensor(path: &Path, values: &[f64]) -> Result<()> {
    let raw = RawGrid {
        shape: Shape::new(1, values.len(), 1),
        data: GridData::F64(values.to_vec()),
    };
    write_atomic(path, &raw.encode()?)
}

fn read_tensor(path: &Path) -> Result<Vec<f64>> {
    match read_raw(path)? {
        RawGrid {
            shape,
            data: GridData::F64(v),
        } if shape.height <= 1 && shape.channels <= 1 => Ok(v),
        _ => Err(format_error(path, "expected a 1×n×1 f64 tensor")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: usize,
    pub seed: u64,
    pub low_fidelity: bool,
    pub class_labels: Vec<u32>,
    pub image: String,
    pub regions: String,
}

/// Contents of a dataset's `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub kind: String,
    pub seed: u64,
    pub samples: Vec<DatasetEntry>,
}

pub const DATASET_INDEX: &str = "index.json";

pub fn save_dataset(dir: &Path, kind: &str, seed: u64, samples: &[SynthSample]) -> Result<DatasetIndex> {
    let mut entries = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let image = format!("sample_{id:05}_image.casg");
        let regions = format!("sample_{id:05}_regions.casg");
        write_image(&dir.join(&image), &s.image)?;
        write_region_map(&dir.join(&regions), &s.regions)?;
        entries.push(DatasetEntry {
            id,
            seed: s.seed,
            low_fidelity: s.low_fidelity,
            class_labels: s.class_labels.clone(),
            image,
            regions,
        });
    }
    let index = DatasetIndex {
        kind: kind.into(),
        seed,
        samples: entries,
    };
    write_json(&dir.join(DATASET_INDEX), &index)?;
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<SynthSample>)> {
    let index_path = dir.join(DATASET_INDEX);
    let index: DatasetIndex = read_json(&index_path)?;
    let mut samples = Vec::with_capacity(index.samples.len());
    for e in &index.samples {
        let image = read_image(&dir.join(&e.image))?;
        let regions = read_region_map(&dir.join(&e.regions))?;
        if image.shape().height != regions.height() || image.shape().width != regions.width() {
            return Err(format_error(&index_path, format!("sample {}: image and regions differ in size", e.id)));
        }
        if e.class_labels.len() != regions.region_count() {
            return Err(format_error(
                &index_path,
                format!(
                    "sample {}: {} class labels for {} regions",
                    e.id,
                    e.class_labels.len(),
                    regions.region_count()
                ),
            ));
        }
        samples.push(SynthSample {
            image,
            regions,
            class_labels: e.class_labels.clone(),
            low_fidelity: e.low_fidelity,
            seed: e.seed,
        });
    }
    Ok((index, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub layer: usize,
    pub role: String,
    pub file: String,
}

/// Contents of a checkpoint's `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub net: NetSpec,
    pub seed: u64,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

pub fn save_checkpoint(dir: &Path, spec: &NetSpec, params: &ModelParams, step: usize) -> Result<()> {
    params.check_shapes(spec)?;
    let mut tensors = Vec::new();
    for (layer, p) in params.layers().iter().enumerate() {
        for (role, values) in [("weight", &p.weight), ("bias", &p.bias)] {
            if values.is_empty() {
                continue;
            }
            let file = format!("layer{layer:02}_{role}.casg");
            write_tensor(&dir.join(&file), values)?;
            tensors.push(TensorEntry {
                layer,
                role: role.into(),
                file,
            });
        }
    }
    let manifest = CheckpointManifest {
        net: spec.clone(),
        seed: params.seed(),
        step,
        tensors,
    };
    write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(NetSpec, ModelParams, usize)> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let manifest: CheckpointManifest = read_json(&path)?;
    manifest.net.validate().map_err(|e| format_error(&path, e))?;
    let mut layers: Vec<LayerParams> = manifest
        .net
        .layers()
        .iter()
        .map(|_| LayerParams {
            weight: Vec::new(),
            bias: Vec::new(),
        })
        .collect();
    for t in &manifest.tensors {
        let values = read_tensor(&dir.join(&t.file))?;
        let layer = layers
            .get_mut(t.layer)
            .ok_or_else(|| format_error(&path, format!("tensor for missing layer {}", t.layer)))?;
        match t.role.as_str() {
            "weight" => layer.weight = values,
            "bias" => layer.bias = values,
            other => return Err(format_error(&path, format!("unknown tensor role {other:?}"))),
        }
    }
    let params =
        ModelParams::from_layers(&manifest.net, layers, manifest.seed).map_err(|e| format_error(&path, e))?;
    Ok((manifest.net, params, manifest.step))
}
