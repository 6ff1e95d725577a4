//! Base-LM checkpoint container: magic "ENNDOLA1", format version, init
//! seed, config block, then parameter tensors in declaration order with
//! shape prefixes. Little-endian throughout; load(save(w)) is bitwise.

use crate::error::{Error, Result};
use crate::io;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ParamLayout, TransformerWeights, CHECKPOINT_MAGIC};

pub(crate) fn write_weights<W: Write>(w: &mut W, weights: &TransformerWeights) -> Result<()> {
    io::write_magic(w, &CHECKPOINT_MAGIC)?;
    io::write_u64(w, weights.seed)?;
    write_config(w, &weights.config)?;
    for (_, shape, range) in weights.layout.entries(&weights.config) {
        io::write_tensor_f64(w, &shape, &weights.params[range])?;
    }
    Ok(())
}

fn write_config<W: Write>(w: &mut W, cfg: &ModelConfig) -> Result<()> {
    io::write_u64(w, cfg.vocab_size as u64)?;
    io::write_u64(w, cfg.n_layers as u64)?;
    io::write_u64(w, cfg.d_model as u64)?;
    io::write_u64(w, cfg.n_heads as u64)?;
    io::write_u64(w, cfg.d_ff as u64)?;
    io::write_u64(w, cfg.max_seq_len as u64)?;
    io::write_f64(w, cfg.norm_epsilon)?;
    Ok(())
}

fn read_config<R: Read>(r: &mut R) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        vocab_size: io::read_dim(r, "vocab_size")?,
        n_layers: io::read_dim(r, "n_layers")?,
        d_model: io::read_dim(r, "d_model")?,
        n_heads: io::read_dim(r, "n_heads")?,
        d_ff: io::read_dim(r, "d_ff")?,
        max_seq_len: io::read_dim(r, "max_seq_len")?,
        norm_epsilon: io::read_f64(r)?,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;
    Ok(cfg)
}

pub fn save_checkpoint(weights: &TransformerWeights, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerWeights> {
    let mut r = BufReader::new(File::open(path)?);
    io::read_magic(&mut r, &CHECKPOINT_MAGIC)?;
    let seed = io::read_u64(&mut r)?;
    let config = read_config(&mut r)?;
    let layout = ParamLayout::new(&config);
    let mut params = vec![0.0f64; layout.total];
    for (name, shape, range) in layout.entries(&config) {
        let data = io::read_tensor_f64(&mut r, &shape)
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        params[range].copy_from_slice(&data);
    }
    io::expect_eof(&mut r)?;
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite parameter in checkpoint".into()));
    }
    Ok(TransformerWeights {
        config,
        seed,
        params,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights() -> TransformerWeights {
        let cfg = ModelConfig {
            vocab_size: 9,
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            max_seq_len: 6,
            norm_epsilon: 1e-5,
        };
        TransformerWeights::init(&cfg, 42).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let w = weights();
        save_checkpoint(&w, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.seed, w.seed);
        assert_eq!(loaded.config, w.config);
        assert_eq!(w.to_bytes(), loaded.to_bytes());
        assert_eq!(w.content_hash(), loaded.content_hash());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let w = weights();
        save_checkpoint(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn bumped_version_is_a_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&weights(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // version u32 sits right after the 8-byte magic
        let v = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) + 1;
        bytes[8..12].copy_from_slice(&v.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&weights(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
