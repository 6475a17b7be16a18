//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! magic         8 bytes  "AMRCKPT\0"
//! version       u32
//! gate order    u32 length + UTF-8 ("i,f,g,o")
//! config        u32 length + UTF-8 JSON
//! vocabulary    u32 count, then per token u32 length + UTF-8 (count 0 = none)
//! tensors       u32 count, then per tensor:
//!               u32 name length + UTF-8 name, u32 rank, rank × u32 extents,
//!               numel × f32 values
//! ```

use std::path::Path;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::GATE_ORDER;
use crate::model::{Amr, AmrParams, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AMRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Amr,
    pub vocab: Option<Vocabulary>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Amr, vocab: Option<&Vocabulary>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_str(&mut out, GATE_ORDER)?;
    let config = serde_json::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_str(&mut out, &config)?;
    let tokens = vocab.map(Vocabulary::tokens).unwrap_or_default();
    put_u32(&mut out, tokens.len())?;
    for t in tokens {
        put_str(&mut out, t)?;
    }
    put_u32(&mut out, model.params.len())?;
    let mut result: Result<()> = Ok(());
    model.params.for_each(&mut |name, t| {
        if result.is_err() {
            return;
        }
        result = (|| {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.rank())?;
            for &e in t.shape() {
                put_u32(&mut out, e)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            Ok(())
        })();
    });
    result?;
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Amr, vocab: Option<&Vocabulary>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, vocab)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let gates = r.string()?;
    if gates != GATE_ORDER {
        return Err(Error::Checkpoint(format!("gate order {gates:?}, expected {GATE_ORDER:?}")));
    }
    let config: ModelConfig =
        serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let n_tokens = r.u32()?;
    let vocab = if n_tokens == 0 {
        None
    } else {
        let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        Some(Vocabulary::from_tokens(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?)
    };

    let count = r.u32()?;
    let mut named = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let vocab_size = named
        .first()
        .filter(|(n, _)| n == "embeddings")
        .and_then(|(_, t)| t.dims2())
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Checkpoint("first tensor must be the rank-2 embedding table".into()))?;
    if let Some(v) = &vocab {
        if v.len() != vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens but the embedding table has {vocab_size} rows",
                v.len()
            )));
        }
    }
    let skeleton = AmrParams::skeleton(&config, vocab_size).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let names = skeleton.names();
    if names.len() != named.len() {
        return Err(Error::Checkpoint(format!(
            "configuration implies {} tensors, file holds {}",
            names.len(),
            named.len()
        )));
    }
    for (want, (got, _)) in names.iter().zip(&named) {
        if want != got {
            return Err(Error::Checkpoint(format!("expected tensor {want}, found {got}")));
        }
    }
    let values: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let params = skeleton.with_values(&values)?;
    let model = Amr::from_parts(config, params)?;
    Ok(Checkpoint { model, vocab })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
