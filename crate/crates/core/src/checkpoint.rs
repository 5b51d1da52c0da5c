//! Single-file parameter checkpoints.
//!
//! Layout: 8-byte magic, little-endian u64 manifest length, JSON manifest,
//! then every parameter's values as little-endian f64 in manifest order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::params::ParamStore;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"VNCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    /// Model configuration and any auxiliary state (vocabulary, step).
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, kind: &str, seed: u64, config: serde_json::Value, store: &ParamStore) -> Result<()> {
    let tensors = store
        .shapes()
        .into_iter()
        .map(|(name, shape, trainable)| TensorEntry { name, shape, trainable })
        .collect();
    let manifest = Manifest {
        kind: kind.to_string(),
        seed,
        config,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.value(id).iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Manifest, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + n).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    let mut data = &bytes[16 + n..];
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let count = t.shape.0 * t.shape.1;
        if data.len() < count * 8 {
            return Err(bad("truncated tensor data"));
        }
        let vals: Vec<f64> = data[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[count * 8..];
        let m = Mat::from_shape_vec(t.shape, vals).map_err(|e| bad(&e.to_string()))?;
        store.insert(t.name.clone(), m, t.trainable);
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((manifest, store))
}

/// Copy values from `src` into `dst` by name; every parameter of `dst` must
/// be present in `src` with the same shape.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::Data(format!("checkpoint is missing `{name}`")))?;
        let (a, b) = (dst.value(id).dim(), src.value(sid).dim());
        if a != b {
            return Err(Error::Shape(format!("`{name}`: expected {a:?}, checkpoint has {b:?}")));
        }
        dst.value_mut(id).assign(src.value(sid));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a", (3, 4), Init::Normal(1.0), true, &mut rng);
        store.add("b", (1, 2), Init::Normal(1.0), false, &mut rng);
        let path = dir.path().join("m.ckpt");
        save(&path, "test", 3, serde_json::json!({"w": 1}), &store).unwrap();
        let (m, back) = load(&path).unwrap();
        assert_eq!(m.kind, "test");
        assert_eq!(m.seed, 3);
        assert_eq!(back.digest(|_, _| true), store.digest(|_, _| true));
        assert!(!back.is_trainable(back.find("b").unwrap()));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"hello").unwrap();
        assert!(matches!(load(&p), Err(Error::Data(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add("a", (2, 2), Init::Zeros, true, &mut rng);
        save(&p, "t", 0, serde_json::Value::Null, &store).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load(&p), Err(Error::Data(_))));
    }
}
