//! Model file format.
//!
//! ```text
//! "SCNN" | u32 version = 1 | u32 header_len | header (UTF-8 JSON)
//!        | parameters: little-endian f32, declaration order
//!        | u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! All integers are little-endian. The header holds the input shape, layer
//! list, class names and init seed; parameter shapes follow from the spec.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCNN";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    class_names: Vec<String>,
    seed: u64,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let spec = model.spec();
    let header = serde_json::to_vec(&Header {
        input_shape: spec.input_shape,
        layers: spec.layers.clone(),
        class_names: spec.class_names.clone(),
        seed: model.seed(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + model.param_count() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < PREAMBLE + 4 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32_at(bytes.len() - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header_len = u32_at(8) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Format("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let spec = ModelSpec {
        input_shape: header.input_shape,
        layers: header.layers,
        class_names: header.class_names,
    };
    let template = Model::<f32>::init(spec.clone(), header.seed)?;
    let shapes: Vec<Vec<usize>> = template.params().iter().map(|p| p.shape().to_vec()).collect();
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let weights = &body[header_end..];
    if weights.len() != expected * 4 {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            expected * 4,
            weights.len()
        )));
    }
    let mut values = weights
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let params = shapes
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Model::from_params(spec, header.seed, params)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// Byte range of the parameter block within an encoded model.
pub fn weights_region(bytes: &[u8]) -> Option<std::ops::Range<usize>> {
    let header_len = u32::from_le_bytes(bytes.get(8..12)?.try_into().ok()?) as usize;
    let start = PREAMBLE + header_len;
    let end = bytes.len().checked_sub(4)?;
    (start <= end).then_some(start..end)
}
