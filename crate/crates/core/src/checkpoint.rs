//! Checkpointing: binary tensor dump/load and whole-model save/restore.
//!
//! Tensor wire format, little-endian throughout: u32 rank, one u64 per
//! dimension, then the row-major f64 values. A model checkpoint is a magic
//! tag, a length-prefixed JSON header (config + vocabulary + parameter
//! names), and each named tensor in registry order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RVSMCKP1";

/// Write one tensor in the binary checkpoint format.
pub fn write_tensor(w: &mut impl Write, tensor: &Tensor) -> Result<()> {
    let shape = tensor.shape();
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for dim in &shape {
        w.write_all(&(*dim as u64).to_le_bytes())?;
    }
    for v in tensor.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read one tensor written by [`write_tensor`].
pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut rank_buf = [0u8; 4];
    r.read_exact(&mut rank_buf)?;
    let rank = u32::from_le_bytes(rank_buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim_buf = [0u8; 8];
        r.read_exact(&mut dim_buf)?;
        shape.push(u64::from_le_bytes(dim_buf) as usize);
    }
    let count: usize = shape.iter().product();
    let mut values = Vec::with_capacity(count);
    let mut value_buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut value_buf)?;
        values.push(f64::from_le_bytes(value_buf));
    }
    Tensor::from_values(&shape, values)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab_tokens: Vec<String>,
    param_names: Vec<String>,
}

/// Save config, vocabulary and every named parameter tensor.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(MAGIC)?;
    let header = CheckpointHeader {
        config: model.config.clone(),
        vocab_tokens: model.vocab.tokens().to_vec(),
        param_names: model.parameters().iter().map(|(n, _)| n.clone()).collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, tensor) in model.parameters() {
        write_tensor(&mut out, tensor)?;
    }
    Ok(())
}

/// Rebuild a model from a checkpoint, bit-exact parameter values included.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let mut input = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{} is not a model checkpoint", path.as_ref().display())));
    }
    let mut len_buf = [0u8; 8];
    input.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Data(format!("bad checkpoint header: {}", e)))?;

    let vocab = Vocabulary::from_tokens(header.vocab_tokens);
    let model = build_model(header.config, vocab, 0)?;
    if header.param_names.len() != model.parameters().len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            header.param_names.len(),
            model.parameters().len()
        )));
    }
    for (stored_name, (name, tensor)) in header.param_names.iter().zip(model.parameters()) {
        if stored_name != name {
            return Err(Error::Data(format!(
                "checkpoint tensor {} does not match expected parameter {}",
                stored_name, name
            )));
        }
        let loaded = read_tensor(&mut input)?;
        if loaded.shape() != tensor.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {} has shape {:?}, expected {:?}",
                name,
                loaded.shape(),
                tensor.shape()
            )));
        }
        tensor.set_values(&loaded.values())?;
    }
    Ok(model)
}
