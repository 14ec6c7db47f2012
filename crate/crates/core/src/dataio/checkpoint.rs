//! Versioned parameter checkpoints.
//!
//! Layout (little-endian): magic `DAKC`, `u32` version, `u64` payload length,
//! then the payload: `u64` metadata length, metadata as JSON, `u32` tensor count, then per tensor a `u32`-prefixed
//! UTF-8 name, `u32` rank, `u64` extents and `f64` values. A SHA-256 digest of
//! everything before it closes the file.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::diffcore::Tensor;
use crate::models::{Model, ModelConfig};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DAKC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: ParamStore,
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<(), DataError> {
    let mut payload = Vec::new();
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| DataError::Format(e.to_string()))?;
    payload.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    payload.extend_from_slice(&meta);
    payload.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in ckpt.tensors.iter() {
        payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut buf = Vec::with_capacity(payload.len() + 48);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(&payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DataError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, DataError> {
        usize::try_from(self.u64(what)?).map_err(|_| DataError::Format(format!("{what} too large")))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, DataError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "header")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = cur.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload_len = cur.len("header")?;
    let body_len = cur
        .pos
        .checked_add(payload_len)
        .ok_or_else(|| DataError::Format("payload length overflows".into()))?;
    if bytes.len() < body_len + 32 {
        return Err(DataError::Truncated(format!(
            "declared {payload_len} payload bytes, file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > body_len + 32 {
        return Err(DataError::Format("trailing bytes after checksum".into()));
    }
    if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
        return Err(DataError::Checksum);
    }
    let mut cur = Cursor {
        bytes: &bytes[..body_len],
        pos: cur.pos,
    };
    let meta_len = cur.len("metadata")?;
    let meta: Value =
        serde_json::from_slice(cur.take(meta_len, "metadata")?).map_err(|e| DataError::Format(e.to_string()))?;
    let count = cur.u32("tensor count")?;
    let mut tensors = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32("tensor name")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| DataError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("tensor rank")? as usize;
        let shape = (0..rank).map(|_| cur.len("tensor shape")).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DataError::Format(format!("tensor `{name}` is too large")))?;
        let raw = cur.take(numel.checked_mul(8).ok_or_else(|| DataError::Truncated(name.clone()))?, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DataError::Format(format!("tensor `{name}`: {e}")))?;
        if tensors.contains(&name) {
            return Err(DataError::Format(format!("duplicate tensor `{name}`")));
        }
        tensors.insert(name, t);
    }
    if cur.pos != body_len {
        return Err(DataError::Format("trailing bytes before checksum".into()));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Writes `model` with its configuration and caller-supplied metadata.
pub fn save_model(path: &Path, model: &Model, extra: Value) -> Result<(), DataError> {
    let config = serde_json::to_value(&model.config).map_err(|e| DataError::Format(e.to_string()))?;
    let ckpt = Checkpoint {
        meta: json!({ "model": config, "extra": extra }),
        tensors: model.params.clone(),
    };
    write_checkpoint(BufWriter::new(File::create(path)?), &ckpt)
}

/// Reads a model written by [`save_model`], returning it with its extra metadata.
pub fn load_model(path: &Path) -> crate::Result<(Model, Value)> {
    let ckpt = read_checkpoint(File::open(path).map_err(DataError::from)?)?;
    let config: ModelConfig = serde_json::from_value(ckpt.meta.get("model").cloned().unwrap_or(Value::Null))
        .map_err(|e| DataError::Format(format!("model configuration: {e}")))?;
    for name in config.param_names() {
        if !ckpt.tensors.contains(&name) {
            return Err(DataError::MissingParameter(name).into());
        }
    }
    let extra = ckpt.meta.get("extra").cloned().unwrap_or(Value::Null);
    Ok((Model::from_parts(config, ckpt.tensors)?, extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = ParamStore::new();
        tensors.insert("a.w", Tensor::from_rows(&[vec![0.1, -1.0 / 3.0], vec![f64::MIN_POSITIVE, 2.5]]).unwrap());
        tensors.insert("b", Tensor::vector(vec![1e300, -0.0]));
        Checkpoint {
            meta: json!({"kind": "test", "n": 3}),
            tensors,
        }
    }

    fn encode(c: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, c).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let buf = encode(&c);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back), buf);
        assert_eq!(back.tensors.get("b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corruption_is_detected() {
        let buf = encode(&sample());
        let mut flipped = buf.clone();
        let mid = buf.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(read_checkpoint(flipped.as_slice()), Err(DataError::Checksum)));

        let mut bad = buf.clone();
        bad[1] = b'x';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(DataError::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(DataError::VersionMismatch { found: 2, .. })));

        assert!(matches!(read_checkpoint(&buf[..buf.len() - 40]), Err(DataError::Truncated(_))));
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 1]), Err(DataError::Truncated(_))));
        assert!(matches!(read_checkpoint(&buf[..6]), Err(DataError::Truncated(_))));
    }
}
