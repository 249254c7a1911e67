//! Checkpoint file: versioned magic header, config manifest as JSON, then
//! one tensor snapshot block per parameter. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

use super::{param_schema, ModelConfig, ModelSnapshot};

const MAGIC: &[u8; 8] = b"ULABCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, snap: &ModelSnapshot) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&snap.config)?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&snap.step.to_le_bytes())?;
    w.write_all(&(snap.params.len() as u64).to_le_bytes())?;
    for (name, t) in &snap.params {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u64).to_le_bytes())?;
        w.write_all(nb)?;
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelSnapshot> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let cfg_len = u64::from_le_bytes(b8) as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)?;
    r.read_exact(&mut b8)?;
    let step = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let n_params = u64::from_le_bytes(b8) as usize;

    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        r.read_exact(&mut b8)?;
        let name_len = u64::from_le_bytes(b8) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
        params.insert(name, read_tensor(&mut r)?);
    }

    // The schema is derived from the config; a checkpoint that disagrees
    // is corrupt.
    for (name, shape) in param_schema(&config) {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match schema {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    }
    if params.len() != param_schema(&config).len() {
        return Err(Error::Checkpoint("extra parameters beyond schema".into()));
    }
    Ok(ModelSnapshot { config, params, step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 12,
            vocab_size: 19,
            max_seq_len: 6,
            init_seed: 9,
            tie_embeddings: false,
        };
        let snap = ModelSnapshot::init(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &snap).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, snap.config);
        assert_eq!(back.step, snap.step);
        for (name, t) in &snap.params {
            let u = &back.params[name];
            assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
