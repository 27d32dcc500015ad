//! Checkpoint container: `OPDN` magic, a length-prefixed JSON config
//! record, a named f32 tensor table (little-endian), and a trailing CRC-32
//! over everything before it. Round-trips are bit-exact.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{OpdnError, Result};
use crate::model::{
    build_degradation_model, build_model, DegradationConfig, DegradationModel, Model, ModelConfig,
    ParamStore,
};

const MAGIC: &[u8; 4] = b"OPDN";
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CheckpointRecord {
    Sr { config: ModelConfig },
    Degradation { config: DegradationConfig },
}

/// Either network kind a checkpoint may hold.
pub enum LoadedNet {
    Sr(Model),
    Degradation(DegradationModel),
}

// IEEE CRC-32 (reflected, poly 0xEDB88320), table-driven.
fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *entry = c;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ u32::from(b)) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

fn encode(record: &CheckpointRecord, params: &ParamStore) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let config_json =
        serde_json::to_vec(record).map_err(|e| OpdnError::BadConfig(e.to_string()))?;
    buf.write_all(&(config_json.len() as u32).to_le_bytes())?;
    buf.write_all(&config_json)?;

    buf.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        buf.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        buf.write_all(name_bytes)?;
        buf.push(DTYPE_F32);
        buf.push(tensor.ndim() as u8);
        for &d in tensor.shape() {
            buf.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.iter() {
            buf.write_all(&v.to_le_bytes())?;
        }
    }
    let crc = crc32(&buf);
    buf.write_all(&crc.to_le_bytes())?;
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(OpdnError::Truncated);
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn decode(bytes: &[u8]) -> Result<(CheckpointRecord, ParamStore)> {
    if bytes.len() < 4 {
        return Err(OpdnError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(OpdnError::BadMagic);
    }
    let mut cur = Cursor {
        data: bytes,
        pos: 4,
    };
    let config_len = cur.u32()? as usize;
    let config_bytes = cur.take(config_len)?.to_vec();

    let n_tensors = cur.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_tensors {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| OpdnError::BadConfig(format!("tensor name: {e}")))?;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(OpdnError::UnsupportedDtype(dtype));
        }
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = cur.take(len * 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| OpdnError::BadConfig(format!("tensor {name}: {e}")))?;
        params.insert(name, tensor);
    }
    let stored_crc = cur.u32()?;
    let body_end = cur.pos - 4;
    if cur.pos != bytes.len() {
        return Err(OpdnError::Truncated);
    }
    if crc32(&bytes[..body_end]) != stored_crc {
        return Err(OpdnError::ChecksumMismatch);
    }
    let record: CheckpointRecord = serde_json::from_slice(&config_bytes)
        .map_err(|e| OpdnError::BadConfig(e.to_string()))?;
    Ok((record, params))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let record = CheckpointRecord::Sr {
        config: model.config.clone(),
    };
    let bytes = encode(&record, &model.params)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn save_degradation_checkpoint(
    model: &DegradationModel,
    path: impl AsRef<Path>,
) -> Result<()> {
    let record = CheckpointRecord::Degradation {
        config: model.config.clone(),
    };
    let bytes = encode(&record, &model.params)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Load either network kind.
pub fn load_any(path: impl AsRef<Path>) -> Result<LoadedNet> {
    let bytes = std::fs::read(path)?;
    let (record, params) = decode(&bytes)?;
    match record {
        CheckpointRecord::Sr { config } => {
            let mut model = build_model(&config)?;
            restore_params(&mut model.params, params)?;
            Ok(LoadedNet::Sr(model))
        }
        CheckpointRecord::Degradation { config } => {
            let mut model = build_degradation_model(&config)?;
            restore_params(&mut model.params, params)?;
            Ok(LoadedNet::Degradation(model))
        }
    }
}

/// Load a super-resolution checkpoint (variant A/B/stage2).
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    match load_any(path)? {
        LoadedNet::Sr(m) => Ok(m),
        LoadedNet::Degradation(_) => Err(OpdnError::BadConfig(
            "checkpoint holds a degradation model, not an SR model".into(),
        )),
    }
}

pub fn load_degradation_checkpoint(path: impl AsRef<Path>) -> Result<DegradationModel> {
    match load_any(path)? {
        LoadedNet::Degradation(m) => Ok(m),
        LoadedNet::Sr(_) => Err(OpdnError::BadConfig(
            "checkpoint holds an SR model, not a degradation model".into(),
        )),
    }
}

fn restore_params(dst: &mut ParamStore, src: ParamStore) -> Result<()> {
    for (name, value) in dst.iter_mut() {
        match src.get(name) {
            Some(sv) if sv.shape() == value.shape() => *value = sv.clone(),
            Some(sv) => {
                return Err(OpdnError::BadConfig(format!(
                    "tensor {name}: shape {:?} does not match config {:?}",
                    sv.shape(),
                    value.shape()
                )))
            }
            None => {
                return Err(OpdnError::BadConfig(format!(
                    "tensor {name} missing from checkpoint"
                )))
            }
        }
    }
    Ok(())
}
