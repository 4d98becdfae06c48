//! Versioned binary checkpoint.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic          8 bytes   "CLSHCKPT"
//! version        u8        1
//! config         u32 len + UTF-8 JSON of the TrainConfig
//! task names     u32 count, then per name: u32 len + UTF-8
//! vocabularies   u32 count (0 or one per task), then per task:
//!                u32 token count, per token: u32 len + UTF-8
//! tensors        u32 count, then per tensor: u64 len + len x f64,
//!                in ModelParams::tensor_names order
//! cluster states u32 layers, then per layer: u8 frozen, u32 N,
//!                N x u32 assignments, u32 K, u32 dim, K*dim x f64 centroids
//! ```

use std::io::Write;
use std::path::Path;

use crate::cluster_layer::ClusterState;
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"CLSHCKPT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub task_names: Vec<String>,
    /// Per-task vocabularies for text runs; empty for synthetic runs.
    pub vocabularies: Vec<Vec<String>>,
    pub params: ModelParams<f64>,
    pub cluster_states: Vec<ClusterState<f64>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("checkpoint field fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u8(VERSION);
        w.str(&serde_json::to_string(&self.config)?);
        w.u32(self.task_names.len());
        for name in &self.task_names {
            w.str(name);
        }
        w.u32(self.vocabularies.len());
        for vocab in &self.vocabularies {
            w.u32(vocab.len());
            for tok in vocab {
                w.str(tok);
            }
        }
        let tensors = self.params.tensors();
        w.u32(tensors.len());
        for t in tensors {
            w.u64(t.len());
            w.f64s(t);
        }
        w.u32(self.cluster_states.len());
        for state in &self.cluster_states {
            w.u8(u8::from(state.frozen));
            w.u32(state.assignments.len());
            for &a in &state.assignments {
                w.u32(a);
            }
            w.u32(state.centroids.len());
            w.u32(state.centroids.first().map_or(0, Vec::len));
            for c in &state.centroids {
                w.f64s(c);
            }
        }
        Ok(w.0)
    }

    /// Decodes and validates a checkpoint against the architecture of its own config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
        }
        let config: TrainConfig = serde_json::from_str(&r.str()?)?;
        let task_names = (0..r.u32()?).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocabularies = (0..r.u32()?)
            .map(|_| (0..r.u32()?).map(|_| r.str()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        if task_names.len() != config.num_tasks {
            return Err(Error::Checkpoint(format!(
                "config has {} tasks but {} task names are stored",
                config.num_tasks,
                task_names.len()
            )));
        }
        let mut params = ModelParams::zeros(&config.architecture())
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        let count = r.u32()?;
        let names = params.tensor_names();
        if count != names.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} tensors but {count} are stored",
                names.len()
            )));
        }
        for (i, dst) in params.tensors_mut().into_iter().enumerate() {
            let len = r.u64()?;
            if len != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {len} values, config implies {}",
                    names[i],
                    dst.len()
                )));
            }
            *dst = r.f64s(len)?;
        }
        let layers = r.u32()?;
        if layers != params.cluster_layers.len() {
            return Err(Error::Checkpoint(format!(
                "{layers} cluster states for {} cluster layers",
                params.cluster_layers.len()
            )));
        }
        let mut cluster_states = Vec::with_capacity(layers);
        for bank in &params.cluster_layers {
            let frozen = r.u8()? != 0;
            let assignments = (0..r.u32()?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let k = r.u32()?;
            let dim = r.u32()?;
            let centroids = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
            let state = ClusterState {
                assignments,
                centroids,
                frozen,
            };
            // Reuse the bank's own consistency checks.
            let mut probe = bank.clone();
            probe
                .replace_with_centroids(&state)
                .map_err(|e| Error::Checkpoint(format!("cluster layer {}: {e}", bank.layer_index)))?;
            cluster_states.push(state);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            task_names,
            vocabularies,
            params,
            cluster_states,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainState;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            input_dim: 3,
            trunk_dims: vec![4],
            cluster_hidden_dims: vec![3, 2],
            cluster_counts: vec![2, 3],
            num_tasks: 3,
            ..TrainConfig::default()
        };
        let state = TrainState::<f64>::new(&config).unwrap();
        Checkpoint {
            config,
            task_names: vec!["a".into(), "b".into(), "c".into()],
            vocabularies: vec![vec!["x".into()], vec![], vec!["y".into(), "z".into()]],
            params: state.params,
            cluster_states: state.cluster_states,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("magic")));
    }

    #[test]
    fn rejects_config_mismatch_and_truncation() {
        let mut ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        // Same tensors under a config with a wider trunk no longer fit.
        ck.config.trunk_dims = vec![5];
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
