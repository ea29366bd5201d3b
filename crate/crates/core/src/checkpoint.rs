//! `ALORA1` tensor container.
//!
//! Layout: the 6-byte magic `ALORA1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the raw little-endian `f64` blob. The header
//! maps each tensor name to `{"shape": [rows, cols], "dtype": "f64",
//! "offset": <byte offset into the blob>}`; the reserved key `__metadata__`
//! carries the model config and flags.
//!
//! Adapter tensors are named `adapter.{layer}.{module}.{A|B|gates}`.

use std::collections::BTreeMap;
use std::path::Path;

use alora_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::AloraAdapter;
use crate::backbone::{Backbone, BlockWeights, Head, ModelConfig, ModuleId, ModuleKind};
use crate::network::SuperNetwork;
use crate::{Error, Result};

pub const MAGIC: &[u8; 6] = b"ALORA1";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: [usize; 2],
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    merged: bool,
}

pub fn encode(tensors: &[(String, &Tensor)], metadata: Value) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    header.insert(METADATA_KEY.into(), metadata);
    let mut blob = Vec::new();
    for (name, t) in tensors {
        if name == METADATA_KEY || header.contains_key(name) {
            return Err(Error::Format(format!("duplicate or reserved tensor name {name}")));
        }
        let entry = Entry {
            shape: t.shape(),
            dtype: "f64".into(),
            offset: blob.len(),
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, BTreeMap<String, Tensor>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing ALORA1 magic".into()));
    }
    let len_bytes: [u8; 8] = bytes[6..14].try_into().expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let blob_start = 14usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[14..blob_start])?;
    let blob = &bytes[blob_start..];
    let mut metadata = Value::Null;
    let mut tensors = BTreeMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            metadata = value;
            continue;
        }
        let entry: Entry = serde_json::from_value(value)?;
        if entry.dtype != "f64" {
            return Err(Error::Format(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        let n = entry.shape[0] * entry.shape[1];
        let end = entry.offset + n * 8;
        if end > blob.len() {
            return Err(Error::Format(format!("{name}: data runs past end of file")));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor::new(entry.shape[0], entry.shape[1], data)?);
    }
    Ok((metadata, tensors))
}

pub fn adapter_tensor_name(id: ModuleId, part: &str) -> String {
    format!("adapter.{}.{}.{part}", id.layer, id.kind)
}

pub fn network_to_bytes(net: &SuperNetwork) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor)> = net.backbone.named_tensors();
    tensors.push(("head.weight".into(), &net.head.weight));
    tensors.push(("head.bias".into(), &net.head.bias));
    let gates: Vec<(ModuleId, Tensor)> = net
        .adapters()
        .iter()
        .map(|(id, a)| {
            let row = a.gates().iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
            (*id, Tensor::row(row))
        })
        .collect();
    for ((id, adapter), (_, g)) in net.adapters().iter().zip(&gates) {
        tensors.push((adapter_tensor_name(*id, "A"), adapter.a()));
        tensors.push((adapter_tensor_name(*id, "B"), adapter.b()));
        tensors.push((adapter_tensor_name(*id, "gates"), g));
    }
    let meta = Metadata {
        model: net.config,
        merged: net.is_merged(),
    };
    encode(&tensors, serde_json::to_value(meta)?)
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<SuperNetwork> {
    let (meta, mut tensors) = decode(bytes)?;
    let meta: Metadata = serde_json::from_value(meta)
        .map_err(|e| Error::Format(format!("bad metadata: {e}")))?;
    let cfg = meta.model;
    cfg.validate("model.")?;
    let mut take = |name: &str, shape: [usize; 2]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "{name}: shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let d = cfg.d_model;
    let token_embedding = take("embed.token", [cfg.vocab_size, d])?;
    let position_embedding = take("embed.position", [cfg.max_seq_len, d])?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut proj = Vec::with_capacity(7);
        for kind in ModuleKind::ALL {
            let (i, o) = cfg.projection_shape(kind);
            proj.push(take(&format!("block.{l}.{kind}"), [i, o])?);
        }
        let projections: [Tensor; 7] = proj.try_into().expect("seven projections");
        let ln1 = (
            take(&format!("block.{l}.ln1.gamma"), [1, d])?,
            take(&format!("block.{l}.ln1.beta"), [1, d])?,
        );
        let ln2 = (
            take(&format!("block.{l}.ln2.gamma"), [1, d])?,
            take(&format!("block.{l}.ln2.beta"), [1, d])?,
        );
        blocks.push(BlockWeights::from_parts(projections, ln1, ln2));
    }
    let final_gamma = take("final.gamma", [1, d])?;
    let final_beta = take("final.beta", [1, d])?;
    let head = Head {
        weight: take("head.weight", [d, cfg.n_classes])?,
        bias: take("head.bias", [1, cfg.n_classes])?,
    };
    let backbone = Backbone {
        token_embedding,
        position_embedding,
        blocks,
        final_gamma,
        final_beta,
    };
    let mut net = SuperNetwork::new(cfg, backbone, head);
    net.set_merged(meta.merged);

    for id in cfg.module_ids() {
        let a_name = adapter_tensor_name(id, "A");
        let Some(a) = tensors.remove(&a_name) else {
            continue;
        };
        let b = tensors
            .remove(&adapter_tensor_name(id, "B"))
            .ok_or_else(|| Error::Format(format!("{id}: A without B")))?;
        let g = tensors
            .remove(&adapter_tensor_name(id, "gates"))
            .ok_or_else(|| Error::Format(format!("{id}: A without gates")))?;
        let gates = g
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::Format(format!("{id}: non-binary gate {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        net.insert_adapter(AloraAdapter::from_parts(id, a, b, gates)?)?;
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    Ok(net)
}

pub fn save(net: &SuperNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, network_to_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SuperNetwork> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_bytes(&bytes)
}

/// Names of every tensor stored in a checkpoint file.
pub fn tensor_names(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.1.into_keys().collect())
}
