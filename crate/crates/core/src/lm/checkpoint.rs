//! Binary checkpoints.
//!
//! Layout (little endian): magic, format version, backend tag, vocabulary
//! hash, model config text, then named `f64` tensors, followed by a SHA-256
//! of everything before it so truncation and corruption are detected.

use super::params::ParamStore;
use super::tensor::Tensor;
use super::transformer::{TransformerConfig, TransformerModel};
use super::{Backend, LanguageModel, LmError, Model, TabularModel};
use crate::worldgen::World;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ULABCKPT";
const VERSION: u32 = 1;

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(b: &mut Vec<u8>, s: &[u8]) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s);
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), LmError> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    put_u32(&mut b, VERSION);
    let (tag, cfg) = match model {
        Model::Tabular(_) => (0u8, String::new()),
        Model::Transformer(t) => (1u8, t.config.to_text()),
    };
    b.push(tag);
    b.extend_from_slice(&model.vocab().hash());
    put_bytes(&mut b, cfg.as_bytes());
    let p = model.params();
    put_u32(&mut b, p.len() as u32);
    for (name, t) in p.iter() {
        put_bytes(&mut b, name.as_bytes());
        put_u32(&mut b, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut b, d as u32);
        }
        for x in t.data() {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, b)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LmError> {
        let s = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| LmError::Checkpoint("unexpected end of data".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LmError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String, LmError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| LmError::Checkpoint("invalid utf-8".into()))
    }
}

/// Loads a checkpoint for `world`, whose vocabulary must match the one the
/// model was saved with.
pub fn load_checkpoint(path: &Path, world: &World) -> Result<Model, LmError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LmError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(LmError::Checkpoint(
            "checksum mismatch (truncated or corrupt)".into(),
        ));
    }
    let mut r = Reader {
        buf: body,
        at: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(LmError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let backend = match r.take(1)?[0] {
        0 => Backend::Tabular,
        1 => Backend::Transformer,
        t => return Err(LmError::Checkpoint(format!("unknown backend tag {t}"))),
    };
    let vocab = world.vocab();
    if r.take(32)? != vocab.hash() {
        return Err(LmError::Checkpoint(
            "vocabulary does not match the world".into(),
        ));
    }
    let cfg = r.string()?;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let nd = r.u32()? as usize;
        let shape: Vec<usize> = (0..nd)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    if r.at != body.len() {
        return Err(LmError::Checkpoint("trailing bytes".into()));
    }
    let mut model = match backend {
        Backend::Tabular => Model::Tabular(TabularModel::new(world)?),
        Backend::Transformer => Model::Transformer(TransformerModel::new(
            vocab,
            TransformerConfig::from_text(&cfg)?,
        )?),
    };
    model
        .params_mut()
        .assign_from(store)
        .map_err(LmError::Checkpoint)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_world, WorldConfig};

    fn small() -> (World, Model) {
        let w = generate_world(&WorldConfig::default(), 3).unwrap();
        let cfg = TransformerConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context: 48,
            seed: 4,
        };
        let m = TransformerModel::new(w.vocab(), cfg).unwrap();
        (w, Model::Transformer(m))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (w, m) = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p, &w).unwrap();
        assert_eq!(back.params(), m.params());
        save_checkpoint(&back, &dir.path().join("n.ckpt")).unwrap();
        assert_eq!(
            std::fs::read(&p).unwrap(),
            std::fs::read(dir.path().join("n.ckpt")).unwrap()
        );
    }

    #[test]
    fn truncation_and_foreign_vocab_detected() {
        let (w, m) = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&p, &w),
            Err(LmError::Checkpoint(_))
        ));

        std::fs::write(&p, &bytes).unwrap();
        let other = generate_world(&WorldConfig::default(), 99).unwrap();
        assert!(matches!(
            load_checkpoint(&p, &other),
            Err(LmError::Checkpoint(_))
        ));
    }
}
