//! The `LWU1` weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic        b"LWU1"
//! offset 4   header_len   u32
//! offset 8   header       header_len bytes of UTF-8 JSON
//! offset 8+header_len     payload: f32 values
//! ```
//!
//! The header is
//!
//! ```json
//! {"format_version":1,"algorithm":"lora","dim":4,"alpha":4.0,"factor":-1,"seed":0,
//!  "layers":[{"name":"fc1","kind":"linear","shape":[8,6],
//!             "tensors":[{"role":"up","shape":[8,4],"dtype":"f32",
//!                         "byte_offset":0,"byte_length":128}, ...]}]}
//! ```
//!
//! `byte_offset` counts from the start of the payload. Tensors are written
//! contiguously in header order. `algorithm` is `lora`, `loha`, `lokr`, or
//! `full` for files holding dense weights (one tensor with role `weight` per
//! layer). Values are stored as `f32` and widened to `f64` on load.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::FormatError;
use crate::adapters::{
    Adapter, AdapterModel, Algorithm, LayerShape, ModelMetadata, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LWU1";
const PREFIX_LEN: usize = 8;
const DENSE_TAG: &str = "full";
const DENSE_ROLE: &str = "weight";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    algorithm: String,
    dim: usize,
    alpha: f64,
    factor: i64,
    seed: u64,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    name: String,
    kind: String,
    shape: Vec<usize>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    role: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_length: u64,
}

/// Dense per-layer weights (base models or full deltas).
pub type DenseWeights = IndexMap<String, Tensor>;

fn layer_kind(shape: &LayerShape) -> &'static str {
    if shape.is_conv() {
        "conv2d"
    } else {
        "linear"
    }
}

fn encode(mut header: Header, layers: Vec<Vec<(String, &Tensor)>>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (lh, tensors) in header.layers.iter_mut().zip(layers) {
        for (role, t) in tensors {
            let offset = payload.len() as u64;
            for (i, &v) in t.data().iter().enumerate() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::invalid(format!(
                        "layer '{}' tensor '{role}': value {v} at flat index {i} does not fit in f32",
                        lh.name
                    )));
                }
                payload.extend_from_slice(&narrow.to_le_bytes());
            }
            lh.tensors.push(TensorHeader {
                role,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                byte_offset: offset,
                byte_length: payload.len() as u64 - offset,
            });
        }
    }
    let json = serde_json::to_vec(&header).expect("header serialises");
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::invalid("weight file header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Serialises an adapter model to bytes.
pub fn encode_weights(model: &AdapterModel) -> Result<Vec<u8>> {
    let meta = model.metadata();
    let mut header = Header {
        format_version: meta.format_version,
        algorithm: meta.algorithm.as_str().into(),
        dim: meta.dim,
        alpha: meta.alpha,
        factor: meta.factor,
        seed: meta.seed,
        layers: Vec::new(),
    };
    let mut tensors = Vec::new();
    for (name, entry) in model.entries() {
        header.layers.push(LayerHeader {
            name: name.clone(),
            kind: layer_kind(&entry.shape).into(),
            shape: entry.shape.weight_shape(),
            tensors: Vec::new(),
        });
        tensors.push(entry.adapter.named_tensors());
    }
    encode(header, tensors)
}

/// Serialises dense weights to bytes. `seed` is recorded as metadata only.
pub fn encode_dense(weights: &DenseWeights, seed: u64) -> Result<Vec<u8>> {
    let mut header = Header {
        format_version: FORMAT_VERSION,
        algorithm: DENSE_TAG.into(),
        dim: 1,
        alpha: 1.0,
        factor: -1,
        seed,
        layers: Vec::new(),
    };
    let mut tensors = Vec::new();
    for (name, w) in weights {
        let shape = LayerShape::from_weight_shape(w.shape())?;
        header.layers.push(LayerHeader {
            name: name.clone(),
            kind: layer_kind(&shape).into(),
            shape: w.shape().to_vec(),
            tensors: Vec::new(),
        });
        tensors.push(vec![(DENSE_ROLE.to_string(), w)]);
    }
    encode(header, tensors)
}

fn json_position(header: &[u8], err: &serde_json::Error) -> usize {
    let mut line_start = 0;
    let mut line = 1;
    for (i, &b) in header.iter().enumerate() {
        if line == err.line() {
            break;
        }
        if b == b'\n' {
            line += 1;
            line_start = i + 1;
        }
    }
    PREFIX_LEN + (line_start + err.column().saturating_sub(1)).min(header.len())
}

struct Parsed {
    header: Header,
    layers: Vec<Vec<(String, Tensor)>>,
}

fn parse(bytes: &[u8]) -> std::result::Result<Parsed, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            position: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            found: bytes[..4].try_into().expect("four bytes"),
        });
    }
    if bytes.len() < PREFIX_LEN {
        return Err(FormatError::Truncated {
            position: 4,
            needed: 4,
            available: bytes.len() - 4,
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let available = bytes.len() - PREFIX_LEN;
    if header_len > available {
        return Err(FormatError::Truncated {
            position: PREFIX_LEN,
            needed: header_len,
            available,
        });
    }
    let raw = &bytes[PREFIX_LEN..PREFIX_LEN + header_len];
    let text = std::str::from_utf8(raw).map_err(|e| FormatError::Utf8 {
        position: PREFIX_LEN + e.valid_up_to(),
    })?;
    let header: Header = serde_json::from_str(text).map_err(|e| FormatError::Json {
        position: json_position(raw, &e),
        message: e.to_string(),
    })?;
    let schema = |message: String| FormatError::Schema {
        position: PREFIX_LEN,
        message,
    };
    if header.format_version != FORMAT_VERSION {
        return Err(schema(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }

    let payload_start = PREFIX_LEN + header_len;
    let payload = &bytes[payload_start..];
    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let mut tensors = Vec::with_capacity(lh.tensors.len());
        for th in &lh.tensors {
            let label = format!("{}/{}", lh.name, th.role);
            if th.dtype != "f32" {
                return Err(schema(format!("{label}: unsupported dtype '{}'", th.dtype)));
            }
            let count = th
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .filter(|&c| c > 0 && !th.shape.is_empty())
                .ok_or_else(|| schema(format!("{label}: invalid shape {:?}", th.shape)))?;
            if count.checked_mul(4) != Some(th.byte_length) {
                return Err(schema(format!(
                    "{label}: shape {:?} needs {} bytes but byte_length is {}",
                    th.shape,
                    count.saturating_mul(4),
                    th.byte_length
                )));
            }
            let end = th.byte_offset.checked_add(th.byte_length);
            if end.is_none_or(|e| e > payload.len() as u64) {
                return Err(FormatError::OutOfBounds {
                    tensor: label,
                    position: (payload_start as u64).saturating_add(th.byte_offset),
                    length: th.byte_length,
                    file_len: bytes.len() as u64,
                });
            }
            let end = end.expect("checked above");
            if let Some((_, _, other)) = spans
                .iter()
                .find(|(s, e, _)| th.byte_offset < *e && *s < end)
            {
                return Err(FormatError::Overlap {
                    first: other.clone(),
                    second: label,
                    position: (payload_start as u64).saturating_add(th.byte_offset),
                });
            }
            spans.push((th.byte_offset, end, label.clone()));
            let slice = &payload[th.byte_offset as usize..end as usize];
            let data: Vec<f64> = slice
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
                .collect();
            let tensor = Tensor::new(&th.shape, data).map_err(|e| FormatError::Schema {
                position: payload_start + th.byte_offset as usize,
                message: format!("{label}: {e}"),
            })?;
            tensors.push((th.role.clone(), tensor));
        }
        layers.push(tensors);
    }
    Ok(Parsed { header, layers })
}

fn layer_shape(lh: &LayerHeader) -> std::result::Result<LayerShape, FormatError> {
    let schema = |message: String| FormatError::Schema {
        position: PREFIX_LEN,
        message,
    };
    let shape = LayerShape::from_weight_shape(&lh.shape)
        .map_err(|e| schema(format!("layer '{}': {e}", lh.name)))?;
    if lh.kind != layer_kind(&shape) {
        return Err(schema(format!(
            "layer '{}': kind '{}' does not match shape {:?}",
            lh.name, lh.kind, lh.shape
        )));
    }
    Ok(shape)
}

/// Parses an adapter model. Never reads outside `bytes`.
pub fn decode_weights(bytes: &[u8]) -> Result<AdapterModel> {
    let Parsed { header, layers } = parse(bytes)?;
    let schema = |message: String| -> Error {
        FormatError::Schema {
            position: PREFIX_LEN,
            message,
        }
        .into()
    };
    let algorithm: Algorithm = header
        .algorithm
        .parse()
        .map_err(|_| schema(format!("'{}' is not an adapter algorithm", header.algorithm)))?;
    let mut model = AdapterModel::new(ModelMetadata {
        algorithm,
        dim: header.dim,
        alpha: header.alpha,
        factor: header.factor,
        seed: header.seed,
        format_version: header.format_version,
    })
    .map_err(|e| schema(e.to_string()))?;
    let scale = model.metadata().scale()?;
    let factor = model.metadata().kron_factor()?;
    for (lh, tensors) in header.layers.iter().zip(layers) {
        let shape = layer_shape(lh)?;
        let adapter = Adapter::from_named_tensors(algorithm, scale, factor, tensors)
            .map_err(|e| schema(format!("layer '{}': {e}", lh.name)))?;
        if adapter.layer_shape()? != shape {
            return Err(schema(format!(
                "layer '{}': factors reconstruct to {:?}, header says {:?}",
                lh.name,
                adapter.layer_shape()?.weight_shape(),
                lh.shape
            )));
        }
        model
            .insert(lh.name.clone(), adapter)
            .map_err(|e| schema(e.to_string()))?;
    }
    Ok(model)
}

/// Parses a dense weight file.
pub fn decode_dense(bytes: &[u8]) -> Result<DenseWeights> {
    let Parsed { header, layers } = parse(bytes)?;
    let schema = |message: String| -> Error {
        FormatError::Schema {
            position: PREFIX_LEN,
            message,
        }
        .into()
    };
    if header.algorithm != DENSE_TAG {
        return Err(schema(format!(
            "expected a dense ('{DENSE_TAG}') weight file, found '{}'",
            header.algorithm
        )));
    }
    let mut out = DenseWeights::new();
    for (lh, mut tensors) in header.layers.iter().zip(layers) {
        layer_shape(lh)?;
        if tensors.len() != 1 || tensors[0].0 != DENSE_ROLE {
            return Err(schema(format!(
                "layer '{}': dense layers hold exactly one '{DENSE_ROLE}' tensor",
                lh.name
            )));
        }
        let (_, w) = tensors.pop().expect("one tensor");
        if w.shape() != lh.shape.as_slice() {
            return Err(schema(format!("layer '{}': tensor shape differs from layer shape", lh.name)));
        }
        if out.insert(lh.name.clone(), w).is_some() {
            return Err(schema(format!("duplicate layer name '{}'", lh.name)));
        }
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_weights(model: &AdapterModel, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_weights(model)?)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<AdapterModel> {
    decode_weights(&read(path.as_ref())?)
}

pub fn save_dense(weights: &DenseWeights, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_dense(weights, seed)?)
}

pub fn load_dense(path: impl AsRef<Path>) -> Result<DenseWeights> {
    decode_dense(&read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::InitConfig;

    fn model() -> AdapterModel {
        let layers = vec![
            ("fc".to_string(), LayerShape::linear(6, 4).unwrap()),
            ("conv".to_string(), LayerShape::conv2d(4, 2, 3).unwrap()),
        ];
        AdapterModel::init(&InitConfig::lokr(2, 3.0, -1).with_tucker(), &layers, 11).unwrap()
    }

    fn header_and_payload(bytes: &[u8]) -> (serde_json::Value, Vec<u8>) {
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        (
            serde_json::from_slice(&bytes[8..8 + n]).unwrap(),
            bytes[8 + n..].to_vec(),
        )
    }

    fn rebuild(header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        out.extend(payload);
        out
    }

    #[test]
    fn roundtrip_adapter_model() {
        let m = model();
        let back = decode_weights(&encode_weights(&m).unwrap()).unwrap();
        assert_eq!(back.metadata(), m.metadata());
        for ((n1, e1), (n2, e2)) in m.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(e1.shape, e2.shape);
            for ((r1, t1), (r2, t2)) in e1.adapter.named_tensors().iter().zip(e2.adapter.named_tensors()) {
                assert_eq!(r1, &r2);
                assert_eq!(&t1.quantize_f32(), t2);
            }
        }
    }

    #[test]
    fn roundtrip_dense() {
        let mut w = DenseWeights::new();
        w.insert("a".into(), Tensor::from_rows(&[&[0.1, -2.5], &[3.0, 1e-3]]));
        w.insert("b".into(), Tensor::ones(&[2, 1, 3, 3]));
        let back = decode_dense(&encode_dense(&w, 4).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (k, t) in &w {
            assert_eq!(&t.quantize_f32(), &back[k]);
        }
        assert!(decode_weights(&encode_dense(&w, 4).unwrap()).is_err());
        assert!(decode_dense(&encode_weights(&model()).unwrap()).is_err());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_weights(&model()).unwrap();
        bytes[0] = b'X';
        let err = decode_weights(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::BadMagic { .. })));
        assert!(err.to_string().contains("byte 0"));
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = encode_weights(&model()).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode_weights(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let err = decode_weights(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::OutOfBounds { .. })), "{err}");
        let err = decode_weights(&bytes[..6]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Truncated { .. })), "{err}");
    }

    #[test]
    fn overlapping_offsets() {
        let (mut h, payload) = header_and_payload(&encode_weights(&model()).unwrap());
        let t = &mut h["layers"][0]["tensors"];
        let first_len = t[0]["byte_length"].as_u64().unwrap();
        t[1]["byte_offset"] = (first_len - 4).into();
        let err = decode_weights(&rebuild(&h, &payload)).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::Overlap { .. })), "{err}");
    }

    #[test]
    fn out_of_bounds_offset() {
        let (mut h, payload) = header_and_payload(&encode_weights(&model()).unwrap());
        h["layers"][0]["tensors"][0]["byte_offset"] = (1u64 << 40).into();
        let err = decode_weights(&rebuild(&h, &payload)).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::OutOfBounds { .. })), "{err}");
        h["layers"][0]["tensors"][0]["byte_offset"] = u64::MAX.into();
        assert!(decode_weights(&rebuild(&h, &payload)).is_err());
    }

    #[test]
    fn malformed_json_reports_position() {
        let mut bytes = MAGIC.to_vec();
        let json = b"{\"format_version\": 1,\n  oops}";
        bytes.extend((json.len() as u32).to_le_bytes());
        bytes.extend(json);
        match decode_weights(&bytes).unwrap_err() {
            Error::Format(FormatError::Json { position, .. }) => {
                assert_eq!(position, 8 + 24);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn schema_violations() {
        let (h, payload) = header_and_payload(&encode_weights(&model()).unwrap());
        let mut bad = h.clone();
        bad["layers"][0]["tensors"][0]["dtype"] = "f16".into();
        assert!(matches!(
            decode_weights(&rebuild(&bad, &payload)).unwrap_err(),
            Error::Format(FormatError::Schema { .. })
        ));
        let mut bad = h.clone();
        bad["layers"][0]["shape"] = serde_json::json!([7, 4]);
        assert!(decode_weights(&rebuild(&bad, &payload)).is_err());
        let mut bad = h.clone();
        bad["format_version"] = 9.into();
        assert!(decode_weights(&rebuild(&bad, &payload)).is_err());
        let mut bad = h;
        bad["extra"] = 1.into();
        assert!(matches!(
            decode_weights(&rebuild(&bad, &payload)).unwrap_err(),
            Error::Format(FormatError::Json { .. })
        ));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let bytes = encode_weights(&model()).unwrap();
        let (h, mut payload) = header_and_payload(&bytes);
        payload[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_weights(&rebuild(&h, &payload)).is_err());
    }

    #[test]
    fn values_outside_f32_range_are_rejected_on_save() {
        let mut w = DenseWeights::new();
        w.insert("a".into(), Tensor::from_rows(&[&[1e300]]));
        assert!(encode_dense(&w, 0).is_err());
    }
}
