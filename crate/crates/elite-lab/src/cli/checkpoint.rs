//! Checkpoint persistence.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, a JSON
//! manifest (stage tag, config snapshot, tensor directory with name,
//! shape, dtype and byte offset), then one raw blob of little-endian f32
//! values in directory order. Files are written atomically via a
//! temporary sibling and rename, and reload is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli::config::RunConfig;
use crate::diffcore::params::ParamSet;
use crate::diffcore::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ELAB0001";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset of this tensor inside the data blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    config: RunConfig,
    tensors: Vec<ManifestEntry>,
}

/// A loaded checkpoint: stage tag, config snapshot, and named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: String,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Copies every stored tensor into the matching parameter of `ps`.
    /// Every checkpoint tensor must exist in `ps` with the same shape;
    /// parameters absent from the checkpoint are left untouched.
    pub fn load_into<S: Scalar>(&self, ps: &mut ParamSet<S>) -> Result<usize> {
        let mut loaded = 0;
        for (name, tensor) in &self.tensors {
            let r = ps.lookup(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor `{name}` not present in model"))
            })?;
            if ps.get(r).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: model {:?} vs checkpoint {:?}",
                    ps.get(r).shape(),
                    tensor.shape()
                )));
            }
            *ps.get_mut(r) = tensor.cast();
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes every parameter of `ps` (in registration order, as f32) plus the
/// config snapshot and stage tag.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    stage: &str,
    cfg: &RunConfig,
    ps: &ParamSet<S>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(ps.len());
    let mut blob: Vec<u8> = Vec::new();
    for r in ps.all_refs() {
        let t = ps.get(r);
        entries.push(ManifestEntry {
            name: ps.name(r).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        stage: stage.to_string(),
        config: cfg.clone(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&manifest_bytes)?;
        f.write_all(&blob)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, verifying magic, manifest consistency, and that
/// every directory entry's extent product matches its blob span.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` spans bytes {start}..{end} beyond blob of {} bytes",
                e.name,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in blob[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok(Checkpoint { stage: manifest.stage, config: manifest.config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        ps.register("a.w", Tensor::randn(vec![3, 4], 1.0, &mut rng)).unwrap();
        ps.register("b.w", Tensor::randn(vec![7], 0.5, &mut rng)).unwrap();
        ps
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ps = sample_params();
        let cfg = RunConfig::default();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, "test", &cfg, &ps).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        let mut ps2 = sample_params();
        for t in ps2.all_refs() {
            ps2.get_mut(t).data_mut().fill(0.0);
        }
        assert_eq!(ck.load_into(&mut ps2).unwrap(), 2);
        save_checkpoint(&p2, "test", &ck.config, &ps2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn reload_restores_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let ps = sample_params();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, "stage-x", &RunConfig::default(), &ps).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.stage, "stage-x");
        assert_eq!(ck.tensor("a.w").unwrap().data(), ps.get(ps.lookup("a.w").unwrap()).data());
    }

    #[test]
    fn shape_mismatch_is_rejected_on_load_into() {
        let dir = tempfile::tempdir().unwrap();
        let ps = sample_params();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, "s", &RunConfig::default(), &ps).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let mut other = ParamSet::<f32>::new();
        other.register("a.w", Tensor::zeros(vec![4, 3])).unwrap();
        other.register("b.w", Tensor::zeros(vec![7])).unwrap();
        assert!(matches!(ck.load_into(&mut other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
