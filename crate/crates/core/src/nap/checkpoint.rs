//! Checkpoint format: the magic line `GGCKPT`, a little-endian `u32` header
//! length, a JSON header (version, config, vocabulary, grammar hash, tensor
//! table) and the parameters as little-endian `f64`s.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::InferenceModel;
use super::params::TensorInfo;
use super::vocab::Vocabulary;
use super::{ModelConfig, NapError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"GGCKPT\n";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    grammar_hash: String,
    tensors: Vec<TensorInfo>,
}

pub fn write_model(model: &InferenceModel, mut w: impl Write) -> Result<(), NapError> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        grammar_hash: model.grammar_hash.clone(),
        tensors: model.params.tensors.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NapError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for v in &model.params.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<InferenceModel, NapError> {
    let bad = |m: &str| NapError::Checkpoint(m.to_string());
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if magic != MAGIC {
        return Err(bad("not a gengrade checkpoint"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| NapError::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NapError::Checkpoint(format!("unsupported version {}", header.version)));
    }
    header.config.validate()?;
    let (mut model, _) = InferenceModel::assemble(header.config, header.vocab, header.grammar_hash);
    if model.params.tensors != header.tensors {
        return Err(bad("tensor table does not match the config and vocabulary"));
    }
    let mut buf = [0u8; 8];
    for v in model.params.data.iter_mut() {
        r.read_exact(&mut buf).map_err(|_| bad("truncated parameters"))?;
        *v = f64::from_le_bytes(buf);
    }
    if r.read(&mut buf)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(model)
}

pub fn save_model(model: &InferenceModel, path: impl AsRef<Path>) -> Result<(), NapError> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<InferenceModel, NapError> {
    read_model(BufReader::new(File::open(path)?))
}
