//! Model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 9 | magic `DIFFGATE1` |
//! | 4 | `u32` header length `H` |
//! | H | UTF-8 JSON header: format tag, model layout, partition hyperparameters, tensor table |
//! | ... | per tensor in table order: `u32` rank, `u64` per dimension, `f64` values |
//!
//! Tensor names are `layer{i}.weight`, `layer{i}.bias`, `partition{j}.mu`,
//! `partition{j}.zeta_raw` and `partition{j}.eta`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gates::{GateTarget, Partition, UtilityMap};
use crate::model::{Layer, Model, ModelError, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"DIFFGATE1";
pub const FORMAT: &str = "diffgate-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint: missing DIFFGATE1 magic")]
    BadMagic,
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Frozen hyperparameters of a partition; the trained values live in tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartitionHeader {
    id: usize,
    beta: f64,
    lambda: f64,
    sigma: f64,
    utility: UtilityMap,
    dropout: bool,
    target: GateTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelSpec,
    partitions: Vec<PartitionHeader>,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        if let Some(w) = &l.weight {
            out.push((format!("layer{i}.weight"), w.clone()));
        }
        if let Some(b) = &l.bias {
            out.push((format!("layer{i}.bias"), b.clone()));
        }
    }
    for (j, p) in model.partitions.iter().enumerate() {
        out.push((format!("partition{j}.mu"), Tensor::vector(p.mu.clone())));
        out.push((format!("partition{j}.zeta_raw"), Tensor::scalar(p.zeta_raw)));
        out.push((format!("partition{j}.eta"), Tensor::scalar(p.eta)));
    }
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let tensors = named_tensors(model);
    let header = Header {
        format: FORMAT.into(),
        model: model.spec(),
        partitions: model
            .partitions
            .iter()
            .map(|p| PartitionHeader {
                id: p.id,
                beta: p.beta,
                lambda: p.lambda,
                sigma: p.sigma,
                utility: p.utility,
                dropout: p.dropout,
                target: p.target,
            })
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    if !bytes.starts_with(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        bytes,
        at: MAGIC.len(),
    };
    let len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format != FORMAT {
        return Err(CheckpointError::Header(format!(
            "unsupported format {:?}",
            header.format
        )));
    }

    let mut tensors = std::collections::HashMap::new();
    for entry in &header.tensors {
        let bad = |detail: String| CheckpointError::Tensor {
            name: entry.name.clone(),
            detail,
        };
        let rank = r.u32(&entry.name)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64(&entry.name).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != entry.shape {
            return Err(bad(format!(
                "shape {shape:?} disagrees with table {:?}",
                entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8).ok_or_else(|| bad("too large".into()))?,
            &entry.name,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
        tensors.insert(entry.name.clone(), t);
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }

    let mut take_tensor = |name: String, shape: &[usize]| -> Result<Tensor, CheckpointError> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| CheckpointError::Tensor {
                name: name.clone(),
                detail: "missing".into(),
            })?;
        if t.shape() != shape {
            return Err(CheckpointError::Tensor {
                name,
                detail: format!("expected shape {shape:?}, found {:?}", t.shape()),
            });
        }
        Ok(t)
    };

    // A fresh build validates the layout and tells us every expected shape.
    let template = crate::model::build_model(&header.model, 0)?;
    let mut layers: Vec<Layer> = Vec::with_capacity(template.layers.len());
    for (i, l) in template.layers.iter().enumerate() {
        let weight = match &l.weight {
            Some(w) => Some(take_tensor(format!("layer{i}.weight"), w.shape())?),
            None => None,
        };
        let bias = match &l.bias {
            Some(b) => Some(take_tensor(format!("layer{i}.bias"), b.shape())?),
            None => None,
        };
        layers.push(Layer {
            weight,
            bias,
            ..l.clone()
        });
    }
    if header.partitions.len() != template.partitions.len() {
        return Err(CheckpointError::Header(format!(
            "{} partitions listed, layout implies {}",
            header.partitions.len(),
            template.partitions.len()
        )));
    }
    let mut partitions = Vec::with_capacity(header.partitions.len());
    for (j, (ph, tp)) in header
        .partitions
        .iter()
        .zip(&template.partitions)
        .enumerate()
    {
        if ph.target != tp.target || ph.id != j {
            return Err(CheckpointError::Header(format!(
                "partition {j} does not match the layout"
            )));
        }
        let mu = take_tensor(format!("partition{j}.mu"), &[tp.size()])?.into_data();
        let zeta_raw = take_tensor(format!("partition{j}.zeta_raw"), &[])?.item();
        let eta = take_tensor(format!("partition{j}.eta"), &[])?.item();
        partitions.push(Partition {
            id: j,
            mu,
            zeta_raw,
            eta,
            beta: ph.beta,
            lambda: ph.lambda,
            sigma: ph.sigma,
            utility: ph.utility,
            dropout: ph.dropout,
            target: ph.target,
        });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Tensor {
            name: extra.clone(),
            detail: "not used by the model".into(),
        });
    }
    Ok(Model {
        input_shape: header.model.input_shape.clone(),
        layers,
        partitions,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::PartitionConfig;
    use crate::model::build_model;

    fn model() -> Model {
        let mut m = build_model(
            &ModelSpec::mlp(&[6, 5, 4, 3], Some(PartitionConfig::default())),
            3,
        )
        .unwrap();
        m.partitions[1].zeta_raw = 0.25;
        m.partitions[0].eta = -0.5;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = to_bytes(&m);
        assert_eq!(&bytes[..9], MAGIC);
        assert_eq!(from_bytes(&bytes).unwrap(), m);
        let pruned = m.prune_export().unwrap();
        assert_eq!(from_bytes(&to_bytes(&pruned)).unwrap(), pruned);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model());
        assert!(matches!(
            from_bytes(b"DIFFGATE0xxxx"),
            Err(CheckpointError::BadMagic)
        ));
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            from_bytes(&longer),
            Err(CheckpointError::Header(_))
        ));
    }
}
