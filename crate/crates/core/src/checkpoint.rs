//! Single-file checkpoints.
//!
//! Layout: the magic `TSLM1\n`, a little-endian `u64` header length, a JSON
//! header (model config, step, tensor table), then raw little-endian tensor
//! data in table order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TslmError};
use crate::model::{ModelConfig, TslmModel};

const MAGIC: &[u8; 6] = b"TSLM1\n";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn elem_size(dtype: DType) -> usize {
    if dtype == DType::F64 {
        8
    } else {
        4
    }
}

pub fn save_checkpoint(path: &Path, model: &TslmModel, step: u64) -> Result<()> {
    let dtype = model.store.dtype();
    let es = elem_size(dtype) as u64;
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut data = Vec::new();
    for p in model.store.iter() {
        let t = p.var().as_tensor().flatten_all()?;
        tensors.push(TensorEntry { name: p.name().to_string(), shape: p.var().dims().to_vec(), offset: data.len() as u64 / es });
        if dtype == DType::F64 {
            for v in t.to_vec1::<f64>()? {
                data.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            for v in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader { config: model.config().clone(), step, tensors })?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&data)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(path: &Path, why: impl std::fmt::Display) -> TslmError {
    TslmError::CorruptCheckpoint(format!("{}: {why}", path.display()))
}

fn read_parts(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let n = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    if n > MAX_HEADER || 14 + n as usize > bytes.len() {
        return Err(corrupt(path, "truncated header"));
    }
    let end = 14 + n as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[14..end]).map_err(|e| corrupt(path, e))?;
    Ok((header, bytes.split_off(end)))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_parts(path)?.0)
}

/// Rebuild the model described by the checkpoint and load every tensor.
pub fn load_checkpoint(path: &Path) -> Result<(TslmModel, u64)> {
    let (header, data) = read_parts(path)?;
    let model = TslmModel::new(header.config.clone(), 0)?;
    let dtype = model.store.dtype();
    let es = elem_size(dtype);
    if header.tensors.len() != model.store.len() {
        return Err(corrupt(path, "tensor table does not match the model"));
    }
    for e in &header.tensors {
        let p = model.store.get(&e.name).ok_or_else(|| corrupt(path, format!("unexpected tensor {}", e.name)))?;
        if p.var().dims() != e.shape.as_slice() {
            return Err(corrupt(path, format!("shape mismatch for {}", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize * es;
        let bytes = data.get(start..start + numel * es).ok_or_else(|| corrupt(path, "truncated data"))?;
        let dev = model.store.device();
        let t = if dtype == DType::F64 {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
            Tensor::from_vec(v, e.shape.as_slice(), dev)?
        } else {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
            Tensor::from_vec(v, e.shape.as_slice(), dev)?.to_dtype(dtype)?
        };
        p.set(&t)?;
    }
    Ok((model, header.step))
}
