//! `RTCK` checkpoints.
//!
//! ```text
//! "RTCK" | u32 version | u32 config_len | config (UTF-8 TOML) | u32 count
//! count × ( u16 name_len | name | u8 dtype | u8 ndim | ndim × u64 dim | values )
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Little-endian throughout. dtype 0 is `f64`, 1 is `f32`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::bin::{read_file, write_file, Reader};
use crate::backbone::{ModelConfig, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    /// Values widened to `f64`; `f32` tensors round-trip exactly.
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelGraph) -> Result<Checkpoint> {
        let config = toml::to_string(&model.model_config()).map_err(|e| Error::Config(e.to_string()))?;
        let tensors = model
            .params()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name().to_string(),
                dtype: DType::F64,
                tensor: p.value().clone(),
            })
            .collect();
        Ok(Checkpoint {
            version: VERSION,
            config,
            tensors,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        toml::from_str(&self.config).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid("checkpoint", format!("tensor name too long: {}", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype.code());
            out.push(t.tensor.ndim() as u8);
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.tensor.data() {
                match t.dtype {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        if bytes.len() < 12 {
            return Err(r.error_at(bytes.len() as u64, "truncated: no room for a checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut r = Reader::new(body, path);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(at, format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let config = String::from_utf8(r.take(len, "config")?.to_vec())
            .map_err(|_| r.error_at(at, "config is not UTF-8"))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let at = r.offset();
            let nlen = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
                .map_err(|_| r.error_at(at, "tensor name is not UTF-8"))?;
            if !seen.insert(name.clone()) {
                return Err(r.error_at(at, format!("duplicate tensor {name}")));
            }
            let at = r.offset();
            let dtype = r.u8("dtype")?;
            let dtype = DType::from_code(dtype).ok_or_else(|| r.error_at(at, format!("unknown dtype code {dtype}")))?;
            let ndim = r.u8("ndim")? as usize;
            let at = r.offset();
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0 && n.saturating_mul(dtype.width()) <= r.remaining())
                .ok_or_else(|| r.error_at(at, format!("tensor {name}: shape {shape:?} does not fit the file")))?;
            let raw = r.take(numel * dtype.width(), "values")?;
            let data: Vec<f64> = match dtype {
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            tensors.push(NamedTensor {
                name,
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if r.remaining() > 0 {
            return Err(r.error_at(r.offset(), format!("{} trailing bytes before checksum", r.remaining())));
        }
        Ok(Checkpoint {
            version,
            config,
            tensors,
        })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &ckpt.encode()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_file(path)?, path)
}

/// Every parameter, frozen and trainable, plus the model config.
pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    write_checkpoint(&Checkpoint::from_model(model)?, path)
}

/// Rebuild the model from the stored config, then overwrite every parameter.
pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    let ckpt = read_checkpoint(path)?;
    let mut model = ModelGraph::from_config(&ckpt.model_config()?)?;
    apply_tensors(&mut model, &ckpt.tensors)?;
    Ok(model)
}

/// Load a checkpoint's tensors into an already-built model of matching shape.
pub fn load_state(model: &mut ModelGraph, path: &Path) -> Result<()> {
    let ckpt = read_checkpoint(path)?;
    apply_tensors(model, &ckpt.tensors)
}

fn apply_tensors(model: &mut ModelGraph, tensors: &[NamedTensor]) -> Result<()> {
    let by_name: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let known: BTreeSet<String> = model.params().iter().map(|p| p.name().to_string()).collect();
    if let Some(t) = tensors.iter().find(|t| !known.contains(&t.name)) {
        return Err(Error::UnknownTensor(t.name.clone()));
    }
    let missing: Vec<String> = known.iter().filter(|n| !by_name.contains_key(n.as_str())).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    for p in model.params() {
        let t = by_name[p.name()];
        if t.tensor.shape() != p.value().shape() {
            return Err(Error::TensorShape {
                name: p.name().to_string(),
                expected: p.value().shape().to_vec(),
                found: t.tensor.shape().to_vec(),
            });
        }
    }
    for p in model.params_mut() {
        p.set_value(by_name[p.name()].tensor.clone())?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportReport {
    pub imported: Vec<String>,
    /// File tensors that no mapping entry used.
    pub warnings: Vec<String>,
}

/// Identity mapping for every backbone parameter of `model`.
pub fn identity_map(model: &ModelGraph) -> BTreeMap<String, String> {
    model
        .params()
        .into_iter()
        .filter(|p| is_backbone(p.name()))
        .map(|p| (p.name().to_string(), p.name().to_string()))
        .collect()
}

fn is_backbone(name: &str) -> bool {
    !name.starts_with("tuners.") && !name.starts_with("head.")
}

/// Initialize backbone weights from an external `RTCK` file.
///
/// `name_map` maps model parameter names to file tensor names. Every
/// backbone parameter is mandatory; head and tuner entries are optional.
pub fn import_weights(
    model: &mut ModelGraph,
    path: &Path,
    name_map: &BTreeMap<String, String>,
    dtype: DType,
) -> Result<ImportReport> {
    let ckpt = read_checkpoint(path)?;
    let file: BTreeMap<&str, &NamedTensor> = ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut missing = Vec::new();
    let mut plan: Vec<(String, &NamedTensor)> = Vec::new();
    for p in model.params() {
        let src = name_map.get(p.name()).and_then(|f| file.get(f.as_str()));
        match src {
            Some(t) => {
                if t.dtype != dtype {
                    return Err(Error::DType {
                        name: t.name.clone(),
                        expected: dtype.as_str(),
                        found: t.dtype.as_str(),
                    });
                }
                if t.tensor.shape() != p.value().shape() {
                    return Err(Error::TensorShape {
                        name: p.name().to_string(),
                        expected: p.value().shape().to_vec(),
                        found: t.tensor.shape().to_vec(),
                    });
                }
                plan.push((p.name().to_string(), t));
            }
            None if is_backbone(p.name()) => missing.push(p.name().to_string()),
            None => {}
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors(missing));
    }
    let used: BTreeSet<&str> = plan.iter().map(|(_, t)| t.name.as_str()).collect();
    let warnings = ckpt
        .tensors
        .iter()
        .filter(|t| !used.contains(t.name.as_str()))
        .map(|t| format!("unused tensor {} in {}", t.name, path.display()))
        .collect();
    let values: BTreeMap<String, Tensor> = plan.iter().map(|(n, t)| (n.clone(), t.tensor.clone())).collect();
    for p in model.params_mut() {
        if let Some(v) = values.get(p.name()) {
            p.set_value(v.clone())?;
        }
    }
    Ok(ImportReport {
        imported: values.into_keys().collect(),
        warnings,
    })
}
