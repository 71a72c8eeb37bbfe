//! Flat binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic            8 bytes  b"FKVMODEL"
//! version          u64      1
//! num_layers       u64
//! num_heads        u64
//! head_dim         u64
//! hidden_dim       u64
//! ffn_dim          u64
//! vocab_size       u64
//! max_position     u64
//! seed             u64
//! rope_base        f64
//! tensors          f32 each, row-major, declaration order:
//!                  embedding [vocab x hidden],
//!                  per layer: attn_norm_gain [hidden], wq, wk, wv, wo
//!                  [hidden x hidden], ffn_norm_gain [hidden],
//!                  w1 [hidden x ffn], w2 [ffn x hidden],
//!                  final_norm_gain [hidden],
//!                  unembedding [hidden x vocab]
//! checksum         u64      CRC-64/XZ over all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{LayerWeights, Matrix, ModelBundle, ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FKVMODEL";
pub const CHECKPOINT_VERSION: u64 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

fn push_floats(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn serialize_body(bundle: &ModelBundle) -> Vec<u8> {
    let cfg = &bundle.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for value in [
        CHECKPOINT_VERSION,
        cfg.num_layers as u64,
        cfg.num_heads as u64,
        cfg.head_dim as u64,
        cfg.hidden_dim as u64,
        cfg.ffn_dim as u64,
        cfg.vocab_size as u64,
        cfg.max_position as u64,
        cfg.seed,
    ] {
        buf.extend_from_slice(&value.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.rope_base.to_le_bytes());
    push_floats(&mut buf, bundle.embedding.data());
    for layer in &bundle.layers {
        push_floats(&mut buf, &layer.attn_norm_gain);
        push_floats(&mut buf, layer.wq.data());
        push_floats(&mut buf, layer.wk.data());
        push_floats(&mut buf, layer.wv.data());
        push_floats(&mut buf, layer.wo.data());
        push_floats(&mut buf, &layer.ffn_norm_gain);
        push_floats(&mut buf, layer.w1.data());
        push_floats(&mut buf, layer.w2.data());
    }
    push_floats(&mut buf, &bundle.final_norm_gain);
    push_floats(&mut buf, bundle.unembedding.data());
    buf
}

/// CRC-64 of the serialized checkpoint body; doubles as the model identity
/// recorded in KV store indexes.
pub(crate) fn checksum(bundle: &ModelBundle) -> u64 {
    CRC64.checksum(&serialize_body(bundle))
}

pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<(), ModelError> {
    let mut buf = serialize_body(bundle);
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.at + n > self.buf.len() {
            return Err(ModelError::CheckpointFormat("truncated checkpoint".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, ModelError> {
        Ok(Matrix::from_data(rows, cols, self.floats(rows * cols)?))
    }
}

pub fn load_model(path: &Path) -> Result<ModelBundle, ModelError> {
    let buf = fs::read(path)?;
    if buf.len() < 8 {
        return Err(ModelError::CheckpointFormat("file too short".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if CRC64.checksum(body) != stored {
        return Err(ModelError::ChecksumMismatch);
    }

    let mut r = Reader { buf: body, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic".into()));
    }
    let version = r.u64()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let config = ModelConfig {
        num_layers: r.u64()? as usize,
        num_heads: r.u64()? as usize,
        head_dim: r.u64()? as usize,
        hidden_dim: r.u64()? as usize,
        ffn_dim: r.u64()? as usize,
        vocab_size: r.u64()? as usize,
        max_position: r.u64()? as usize,
        seed: r.u64()?,
        rope_base: r.f64()?,
    };
    config.validate()?;

    let h = config.hidden_dim;
    let embedding = r.matrix(config.vocab_size, h)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            attn_norm_gain: r.floats(h)?,
            wq: r.matrix(h, h)?,
            wk: r.matrix(h, h)?,
            wv: r.matrix(h, h)?,
            wo: r.matrix(h, h)?,
            ffn_norm_gain: r.floats(h)?,
            w1: r.matrix(h, config.ffn_dim)?,
            w2: r.matrix(config.ffn_dim, h)?,
        });
    }
    let final_norm_gain = r.floats(h)?;
    let unembedding = r.matrix(h, config.vocab_size)?;
    if r.at != body.len() {
        return Err(ModelError::CheckpointFormat("trailing bytes".into()));
    }
    Ok(ModelBundle {
        config,
        embedding,
        layers,
        final_norm_gain,
        unembedding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn bundle() -> ModelBundle {
        init_model(ModelConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 32,
            max_position: 128,
            rope_base: 10000.0,
            seed: 21,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let original = bundle();
        save_model(&original, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(original, loaded);
        assert_eq!(original.checksum(), loaded.checksum());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&bundle(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ModelError::ChecksumMismatch)
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&bundle(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..4]).unwrap();
        assert!(load_model(&path).is_err());
    }
}
