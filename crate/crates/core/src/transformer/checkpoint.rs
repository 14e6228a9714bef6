//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `FACAIDCK`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian row-major `f32`. The
//! header carries the model config, the vocabulary dump, the grammar hash and
//! a manifest of `(name, shape, byte_offset)` relative to the body start.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, SeqModel};
use crate::tokenizer::{Vocabulary, VocabularyDump};

pub const MAGIC: &[u8; 8] = b"FACAIDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("checkpoint grammar {found} does not match this build ({expected})")]
    GrammarMismatch { expected: String, found: String },
    #[error("tensor manifest does not match the config: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub vocabulary: VocabularyDump,
    pub grammar_hash: String,
    pub tensors: Vec<TensorEntry>,
}

fn manifest(model: &SeqModel<f32>) -> Vec<TensorEntry> {
    model
        .tensors()
        .iter()
        .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone(), byte_offset: 4 * t.offset as u64 })
        .collect()
}

pub fn write_checkpoint(model: &SeqModel<f32>, vocab: &Vocabulary, mut w: impl Write) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        vocabulary: vocab.to_json(),
        grammar_hash: vocab.grammar().hash(),
        tensors: manifest(model),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint(model: &SeqModel<f32>, vocab: &Vocabulary, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("ckpt.tmp");
    write_checkpoint(model, vocab, BufWriter::new(File::create(&tmp)?))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(mut r: impl Read) -> Result<CheckpointHeader, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 64 << 20 {
        return Err(CheckpointError::Header(format!("header of {len} bytes")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(header.format_version));
    }
    Ok(header)
}

/// Reads a checkpoint and rebuilds the vocabulary it was trained with.
pub fn read_checkpoint(mut r: impl Read) -> Result<(SeqModel<f32>, Vocabulary), CheckpointError> {
    let header = read_header(&mut r)?;
    let vocab = Vocabulary::standard(header.vocabulary.resolution)
        .map_err(|e| CheckpointError::Header(format!("vocabulary: {e}")))?;
    let expected = vocab.grammar().hash();
    if header.grammar_hash != expected || header.vocabulary.grammar_hash != expected {
        return Err(CheckpointError::GrammarMismatch { expected, found: header.grammar_hash });
    }
    if header.vocabulary != vocab.to_json() {
        return Err(CheckpointError::Header("vocabulary differs from this build".into()));
    }
    if header.config.vocab_size != vocab.size() || header.config.resolution != vocab.resolution() {
        return Err(CheckpointError::Header("config does not match the vocabulary".into()));
    }
    let mut model = SeqModel::<f32>::new(header.config.clone(), 0)?;
    let want = manifest(&model);
    if header.tensors != want {
        let diff = header.tensors.iter().zip(&want).find(|(a, b)| a != b);
        let detail = match diff {
            Some((a, b)) => format!("{} {:?}@{} vs {} {:?}@{}", a.name, a.shape, a.byte_offset, b.name, b.shape, b.byte_offset),
            None => format!("{} tensors vs {}", header.tensors.len(), want.len()),
        };
        return Err(CheckpointError::Manifest(detail));
    }
    let mut body = vec![0u8; 4 * model.param_count()];
    r.read_exact(&mut body)?;
    for (p, b) in model.params_mut().iter_mut().zip(body.chunks_exact(4)) {
        *p = f32::from_le_bytes(b.try_into().expect("4 bytes"));
    }
    Ok((model, vocab))
}

pub fn load_checkpoint(path: &Path) -> Result<(SeqModel<f32>, Vocabulary), CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (SeqModel<f32>, Vocabulary) {
        let vocab = Vocabulary::standard(50).unwrap();
        (SeqModel::new(ModelConfig::tiny(&vocab, 16, 1, 2), 11).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &vocab, &path).unwrap();
        let (back, v2) = load_checkpoint(&path).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());
        let len = std::fs::metadata(&path).unwrap().len();
        let header = read_header(File::open(&path).unwrap()).unwrap();
        let header_len = serde_json::to_vec(&header).unwrap().len() as u64;
        assert_eq!(len, 16 + header_len + 4 * model.param_count() as u64);
        assert_eq!(header.tensors[0].name, "tok_emb");
        assert_eq!(header.tensors[1].byte_offset, 4 * (vocab.size() * 16) as u64);
    }

    #[test]
    fn rejects_corruption() {
        let (model, vocab) = tiny();
        let mut buf = Vec::new();
        write_checkpoint(&model, &vocab, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(CheckpointError::BadMagic)));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(truncated), Err(CheckpointError::Io(_))));

        let hash = vocab.grammar().hash();
        let at = buf.windows(hash.len()).position(|w| w == hash.as_bytes()).unwrap();
        let mut bad = buf.clone();
        bad[at..at + hash.len()].fill(b'0');
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(CheckpointError::GrammarMismatch { .. })));
    }
}
