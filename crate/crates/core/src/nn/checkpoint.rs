//! "MVCK1" checkpoint container.
//!
//! ```text
//! b"MVCK1" | u64 LE metadata length | metadata JSON | blobs...
//! ```
//!
//! Blobs are raw little-endian floats (`dtype` in the metadata) in the order
//! listed under `blobs`. Every trainable parameter contributes its value and
//! its two Adam moments; buffers contribute only their value.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamSet};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MVCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub dtype: DType,
    /// Architecture descriptor of the network (free-form JSON).
    pub arch: serde_json::Value,
    pub seed: u64,
    /// Adam step count of the parameter set.
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub blobs: Vec<BlobEntry>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn push_scalar<T: Scalar>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

/// Serialize to bytes.
pub fn encode<T: Scalar>(params: &ParamSet<T>, arch: serde_json::Value, seed: u64, extra: serde_json::Value) -> Result<Vec<u8>> {
    let mut meta = CheckpointMeta {
        format: "MVCK1".into(),
        dtype: T::DTYPE,
        arch,
        seed,
        step: params.step,
        params: Vec::new(),
        blobs: Vec::new(),
        extra,
    };
    let mut payload = Vec::new();
    for (name, p) in params.iter() {
        let shape = p.value.shape().to_vec();
        meta.params.push(ParamEntry { name: name.into(), shape: shape.clone(), trainable: p.trainable });
        meta.blobs.push(BlobEntry { name: name.into(), shape: shape.clone() });
        p.value.data().iter().for_each(|&v| push_scalar(&mut payload, v));
        if p.trainable {
            meta.blobs.push(BlobEntry { name: format!("{name}/adam_m"), shape: shape.clone() });
            p.m.iter().for_each(|&v| push_scalar(&mut payload, v));
            meta.blobs.push(BlobEntry { name: format!("{name}/adam_v"), shape });
            p.v.iter().for_each(|&v| push_scalar(&mut payload, v));
        }
    }
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(5 + 8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse bytes produced by [`encode`]. Gradients come back zeroed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ParamSet<T>, CheckpointMeta)> {
    if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing MVCK1 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let json_end = 13usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[13..json_end])?;
    if meta.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint dtype {:?}, requested {:?}", meta.dtype, T::DTYPE)));
    }
    let width = match meta.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut cursor = json_end;
    let mut read_blob = |expected: &str, shape: &[usize], blobs: &mut std::slice::Iter<'_, BlobEntry>| -> Result<Vec<T>> {
        let entry = blobs.next().ok_or_else(|| Error::Format(format!("missing blob `{expected}`")))?;
        if entry.name != expected || entry.shape != shape {
            return Err(Error::Format(format!("blob `{}` out of order, expected `{expected}`", entry.name)));
        }
        let n: usize = shape.iter().product();
        let end = cursor + n * width;
        if end > bytes.len() {
            return Err(Error::Format(format!("blob `{expected}` truncated")));
        }
        let vals = bytes[cursor..end]
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        cursor = end;
        Ok(vals)
    };
    let mut blobs = meta.blobs.iter();
    let mut ps = ParamSet::new();
    for entry in &meta.params {
        let value = read_blob(&entry.name, &entry.shape, &mut blobs)?;
        let mut p = Param::new(Tensor::new(&entry.shape, value)?, entry.trainable);
        if entry.trainable {
            p.m = read_blob(&format!("{}/adam_m", entry.name), &entry.shape, &mut blobs)?;
            p.v = read_blob(&format!("{}/adam_v", entry.name), &entry.shape, &mut blobs)?;
        }
        ps.insert(entry.name.clone(), p)?;
    }
    if cursor != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cursor)));
    }
    ps.step = meta.step;
    Ok((ps, meta))
}

pub fn save<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    arch: serde_json::Value,
    seed: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let bytes = encode(params, arch, seed, extra)?;
    write_atomic(path, &bytes)
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamSet<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Write through a `.incomplete` sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".incomplete");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, init_params, AdamConfig, LayerSpec};

    fn trained() -> ParamSet<f32> {
        let layers = [
            LayerSpec::Conv { name: "c".into(), in_ch: 2, out_ch: 3, k: 3 },
            LayerSpec::BatchNorm { name: "bn".into(), ch: 3 },
        ];
        let mut ps = init_params::<f32>(&layers, 5).unwrap();
        for (i, (_, p)) in ps.iter_mut().enumerate() {
            p.grad.iter_mut().enumerate().for_each(|(j, g)| *g = (i + j) as f32 * 0.01 - 0.1);
        }
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        adam_step(&mut ps, &AdamConfig::default()).unwrap();
        ps.zero_grads();
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = trained();
        let bytes = encode(&ps, serde_json::json!({"net": "toy"}), 9, serde_json::Value::Null).unwrap();
        assert_eq!(&bytes[..5], b"MVCK1");
        let (back, meta) = decode::<f32>(&bytes).unwrap();
        assert_eq!(back, ps);
        assert_eq!(meta.step, 2);
        assert_eq!(meta.seed, 9);
        assert_eq!(encode(&back, meta.arch.clone(), 9, serde_json::Value::Null).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let ps = trained();
        let bytes = encode(&ps, serde_json::Value::Null, 0, serde_json::Value::Null).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f64>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
