//! The `LORAFUS1` on-disk container.
//!
//! Layout: 8-byte magic `LORAFUS1`, a little-endian u32 header length, a
//! UTF-8 JSON header, the little-endian f32 tensor payload, and a CRC32
//! of the payload. Adapters and base model weights share the container;
//! the header's `kind` tag tells them apart. Loading what saving wrote is
//! bit-exact on the 32-bit payload and field-identical on the metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, LoraAdapter, LoraLayer};
use crate::model::{ModelConfig, ModelError, ModelWeights};
use crate::tensor::Matrix;
use crate::Severity;

const MAGIC: &[u8; 8] = b"LORAFUS1";
const MAGIC_STEM: &[u8; 7] = b"LORAFUS";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a LORAFUS container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0:?}")]
    UnsupportedVersion(char),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("{extra} trailing byte(s) after payload")]
    TrailingBytes { extra: usize },
    #[error("payload checksum mismatch: header says {expected:#010x}, computed {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("container validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    module: String,
    rank: usize,
    alpha: f64,
    a: TensorHeader,
    b: TensorHeader,
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensorHeader {
    id: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum Header {
    #[serde(rename = "ADAPTER")]
    Adapter {
        name: String,
        rank: Option<usize>,
        alpha: Option<f64>,
        layers: Vec<LayerHeader>,
    },
    #[serde(rename = "BASE")]
    Base {
        name: String,
        config: ModelConfig,
        tensors: Vec<NamedTensorHeader>,
    },
}

fn matrix_to_f32_bytes(m: &Matrix, context: &str) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        if v.abs() > f32::MAX as f64 {
            return Err(ContainerError::Validation(format!(
                "{context}: value {v} does not fit the 32-bit payload"
            )));
        }
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn matrix_from_f32_bytes(
    rows: usize,
    cols: usize,
    bytes: &[u8],
    context: &str,
) -> Result<Matrix, ContainerError> {
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunks of 4"));
        data.push(v as f64);
    }
    Matrix::new(rows, cols, data)
        .map_err(|e| ContainerError::Validation(format!("{context}: {e}")))
}

fn write_container(path: &Path, header: &Header, payload: &[u8]) -> Result<(), ContainerError> {
    let header_json = serde_json::to_vec(header).expect("header serializes");
    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload.len() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(payload);
    bytes.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    fs::write(path, bytes).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>), ContainerError> {
    let bytes = fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 8 {
        return Err(ContainerError::BadMagic);
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..7] == MAGIC_STEM {
            return Err(ContainerError::UnsupportedVersion(bytes[7] as char));
        }
        return Err(ContainerError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(ContainerError::TruncatedHeader);
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .ok_or(ContainerError::TruncatedHeader)?;
    // the payload checksum always trails the header
    if bytes.len() < header_end + 4 {
        return Err(ContainerError::TruncatedHeader);
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| ContainerError::MalformedHeader(e.to_string()))?;

    let payload = &bytes[header_end..bytes.len() - 4];
    let expected = expected_payload_len(&header)?;
    if payload.len() < expected {
        return Err(ContainerError::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(ContainerError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    let stored_crc = u32::from_le_bytes(
        bytes[bytes.len() - 4..].try_into().expect("4 bytes"),
    );
    let actual_crc = crc32fast::hash(payload);
    if stored_crc != actual_crc {
        return Err(ContainerError::ChecksumMismatch {
            expected: stored_crc,
            actual: actual_crc,
        });
    }
    Ok((header, payload.to_vec()))
}

fn tensor_size_bytes(rows: usize, cols: usize) -> Result<usize, ContainerError> {
    rows.checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| ContainerError::MalformedHeader("tensor size overflows".into()))
}

fn expected_payload_len(header: &Header) -> Result<usize, ContainerError> {
    let mut running = 0usize;
    let mut check = |rows: usize, cols: usize, offset: usize, what: &str| {
        if rows == 0 || cols == 0 {
            return Err(ContainerError::Validation(format!(
                "{what}: degenerate shape {rows}x{cols}"
            )));
        }
        if offset != running {
            return Err(ContainerError::MalformedHeader(format!(
                "{what}: offset {offset} is not contiguous (expected {running})"
            )));
        }
        running += tensor_size_bytes(rows, cols)?;
        Ok(())
    };
    match header {
        Header::Adapter { layers, .. } => {
            for layer in layers {
                if layer.rank == 0 {
                    return Err(ContainerError::Validation(format!(
                        "layer {}: rank must be positive",
                        layer.module
                    )));
                }
                if !(layer.alpha > 0.0 && layer.alpha.is_finite()) {
                    return Err(ContainerError::Validation(format!(
                        "layer {}: alpha must be positive, got {}",
                        layer.module, layer.alpha
                    )));
                }
                check(layer.a.rows, layer.a.cols, layer.a.offset, &layer.module)?;
                check(layer.b.rows, layer.b.cols, layer.b.offset, &layer.module)?;
            }
        }
        Header::Base { tensors, .. } => {
            for t in tensors {
                check(t.rows, t.cols, t.offset, &t.id)?;
            }
        }
    }
    Ok(running)
}

/// Write an adapter. The layer table preserves the adapter's module
/// order; tensors are packed contiguously in that order.
pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<(), ContainerError> {
    let findings = crate::adapter::validate_adapter(adapter);
    if let Some(err) = findings.iter().find(|f| f.severity == Severity::Error) {
        return Err(ContainerError::Validation(err.to_string()));
    }

    let mut layers = Vec::with_capacity(adapter.layers.len());
    let mut payload = Vec::new();
    for (module, layer) in &adapter.layers {
        let a_offset = payload.len();
        payload.extend(matrix_to_f32_bytes(&layer.a, &format!("{module}.a"))?);
        let b_offset = payload.len();
        payload.extend(matrix_to_f32_bytes(&layer.b, &format!("{module}.b"))?);
        layers.push(LayerHeader {
            module: module.clone(),
            rank: layer.rank,
            alpha: layer.alpha,
            a: TensorHeader {
                rows: layer.a.rows(),
                cols: layer.a.cols(),
                offset: a_offset,
            },
            b: TensorHeader {
                rows: layer.b.rows(),
                cols: layer.b.cols(),
                offset: b_offset,
            },
        });
    }
    let header = Header::Adapter {
        name: adapter.name.clone(),
        rank: adapter.uniform_rank(),
        alpha: {
            let mut alphas = adapter.layers.values().map(|l| l.alpha);
            let first = alphas.next();
            first.filter(|f| adapter.layers.values().all(|l| l.alpha == *f))
        },
        layers,
    };
    write_container(path, &header, &payload)
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter, ContainerError> {
    let (header, payload) = read_container(path)?;
    let (name, layers) = match header {
        Header::Adapter { name, layers, .. } => (name, layers),
        Header::Base { .. } => {
            return Err(ContainerError::Validation(
                "container holds base weights, not an adapter".into(),
            ))
        }
    };
    let mut adapter = LoraAdapter::new(name);
    for lh in layers {
        let a_len = tensor_size_bytes(lh.a.rows, lh.a.cols)?;
        let b_len = tensor_size_bytes(lh.b.rows, lh.b.cols)?;
        let a = matrix_from_f32_bytes(
            lh.a.rows,
            lh.a.cols,
            &payload[lh.a.offset..lh.a.offset + a_len],
            &format!("{}.a", lh.module),
        )?;
        let b = matrix_from_f32_bytes(
            lh.b.rows,
            lh.b.cols,
            &payload[lh.b.offset..lh.b.offset + b_len],
            &format!("{}.b", lh.module),
        )?;
        let layer = LoraLayer::new(a, b, lh.rank, lh.alpha)?;
        adapter.insert(lh.module, layer)?;
    }
    Ok(adapter)
}

/// Write base model weights under the `BASE` section tag.
pub fn save_model(weights: &ModelWeights, name: &str, path: &Path) -> Result<(), ContainerError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (id, tensor) in weights.tensors() {
        tensors.push(NamedTensorHeader {
            id: id.clone(),
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: payload.len(),
        });
        payload.extend(matrix_to_f32_bytes(tensor, id)?);
    }
    let header = Header::Base {
        name: name.to_string(),
        config: weights.config().clone(),
        tensors,
    };
    write_container(path, &header, &payload)
}

pub fn load_model(path: &Path) -> Result<(ModelWeights, String), ContainerError> {
    let (header, payload) = read_container(path)?;
    let (name, config, tensors) = match header {
        Header::Base {
            name,
            config,
            tensors,
        } => (name, config, tensors),
        Header::Adapter { .. } => {
            return Err(ContainerError::Validation(
                "container holds an adapter, not base weights".into(),
            ))
        }
    };
    let mut map = BTreeMap::new();
    for th in tensors {
        let len = tensor_size_bytes(th.rows, th.cols)?;
        let tensor =
            matrix_from_f32_bytes(th.rows, th.cols, &payload[th.offset..th.offset + len], &th.id)?;
        if map.insert(th.id.clone(), tensor).is_some() {
            return Err(ContainerError::Validation(format!(
                "duplicate tensor id {}",
                th.id
            )));
        }
    }
    let weights = ModelWeights::from_tensor_map(config, map)?;
    Ok((weights, name))
}

/// Debug export: metadata plus base64-encoded f32 payload per factor.
pub fn adapter_to_json(adapter: &LoraAdapter) -> Result<serde_json::Value, ContainerError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut layers = Vec::new();
    for (module, layer) in &adapter.layers {
        let encode = |m: &Matrix, ctx: &str| -> Result<serde_json::Value, ContainerError> {
            Ok(serde_json::json!({
                "rows": m.rows(),
                "cols": m.cols(),
                "data_b64": b64.encode(matrix_to_f32_bytes(m, ctx)?),
            }))
        };
        layers.push(serde_json::json!({
            "module": module,
            "rank": layer.rank,
            "alpha": layer.alpha,
            "a": encode(&layer.a, &format!("{module}.a"))?,
            "b": encode(&layer.b, &format!("{module}.b"))?,
        }));
    }
    Ok(serde_json::json!({
        "name": adapter.name,
        "layers": layers,
    }))
}

pub fn adapter_from_json(value: &serde_json::Value) -> Result<LoraAdapter, ContainerError> {
    let b64 = base64::engine::general_purpose::STANDARD;
    let bad = |msg: &str| ContainerError::MalformedHeader(msg.to_string());
    let name = value
        .get("name")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("missing name"))?;
    let layers = value
        .get("layers")
        .and_then(|v| v.as_array())
        .ok_or_else(|| bad("missing layers"))?;
    let mut adapter = LoraAdapter::new(name);
    for entry in layers {
        let module = entry
            .get("module")
            .and_then(|v| v.as_str())
            .ok_or_else(|| bad("layer missing module"))?;
        let rank = entry
            .get("rank")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("layer missing rank"))? as usize;
        let alpha = entry
            .get("alpha")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| bad("layer missing alpha"))?;
        let decode = |key: &str| -> Result<Matrix, ContainerError> {
            let obj = entry.get(key).ok_or_else(|| bad("layer missing factor"))?;
            let rows = obj.get("rows").and_then(|v| v.as_u64()).ok_or_else(|| bad("factor missing rows"))? as usize;
            let cols = obj.get("cols").and_then(|v| v.as_u64()).ok_or_else(|| bad("factor missing cols"))? as usize;
            let data = obj
                .get("data_b64")
                .and_then(|v| v.as_str())
                .ok_or_else(|| bad("factor missing data_b64"))?;
            let bytes = b64
                .decode(data)
                .map_err(|e| ContainerError::MalformedHeader(format!("base64: {e}")))?;
            if bytes.len() != rows * cols * 4 {
                return Err(ContainerError::TruncatedPayload {
                    expected: rows * cols * 4,
                    actual: bytes.len(),
                });
            }
            matrix_from_f32_bytes(rows, cols, &bytes, &format!("{module}.{key}"))
        };
        let layer = LoraLayer::new(decode("a")?, decode("b")?, rank, alpha)?;
        adapter.insert(module, layer)?;
    }
    Ok(adapter)
}
