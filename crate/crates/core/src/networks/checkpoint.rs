//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding the four network parameter archives
//! (`gen_l2h.tensors`, `gen_h2l.tensors`, `disc_h.tensors`,
//! `disc_l.tensors`) plus `meta.json`.
//!
//! Archive layout, documented for external readers:
//! line 1: the magic `FPTA1`; line 2: a JSON header
//! `{"dtype":"f32","tensors":[{"name":...,"shape":[...]}, ...]}`; then the
//! raw little-endian f32 payload of each tensor, in header order. Writing is
//! deterministic, so identical parameters produce identical files.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Discriminator, Generator};
use crate::config::{hex_digest, InitSpec, NetworkConfig};
use crate::error::{Error, Result};

const MAGIC: &str = "FPTA1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pass_index: usize,
    pub epoch: usize,
    /// Validation adversarial loss of the low-to-high direction at `epoch`.
    pub val_adv1: f64,
    pub seed: u64,
    pub config_digest: String,
    pub network: NetworkConfig,
}

pub struct CycleGanCheckpoint {
    pub gen_l2h: Generator<f32>,
    pub gen_h2l: Generator<f32>,
    pub disc_h: Discriminator<f32>,
    pub disc_l: Discriminator<f32>,
    pub meta: CheckpointMeta,
}

impl CycleGanCheckpoint {
    /// Fresh random networks drawn from the config's init spec.
    pub fn fresh(net: &NetworkConfig, init: &InitSpec, seed: u64, meta: CheckpointMeta) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gen_l2h: Generator::new(net.generator(), init, &mut rng),
            gen_h2l: Generator::new(net.generator(), init, &mut rng),
            disc_h: Discriminator::new(net.discriminator(), init, &mut rng),
            disc_l: Discriminator::new(net.discriminator(), init, &mut rng),
            meta,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_archive(&dir.join("gen_l2h.tensors"), &self.gen_l2h.named_tensors())?;
        write_archive(&dir.join("gen_h2l.tensors"), &self.gen_h2l.named_tensors())?;
        write_archive(&dir.join("disc_h.tensors"), &self.disc_h.named_tensors())?;
        write_archive(&dir.join("disc_l.tensors"), &self.disc_l.named_tensors())?;
        let meta_path = dir.join("meta.json");
        let text =
            serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&meta_path, e))?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        // Construct the right shapes, then overwrite every tensor from disk.
        let net = meta.network.clone();
        let mut ckpt = Self::fresh(&net, &InitSpec::FanIn, 0, meta);
        load_into(
            &dir.join("gen_l2h.tensors"),
            ckpt.gen_l2h.named_tensors_mut(),
        )?;
        load_into(
            &dir.join("gen_h2l.tensors"),
            ckpt.gen_h2l.named_tensors_mut(),
        )?;
        load_into(&dir.join("disc_h.tensors"), ckpt.disc_h.named_tensors_mut())?;
        load_into(&dir.join("disc_l.tensors"), ckpt.disc_l.named_tensors_mut())?;
        Ok(ckpt)
    }

    /// Error unless the checkpoint was produced under the given config digest.
    pub fn verify_digest(&self, expected: &str, context: &str) -> Result<()> {
        if self.meta.config_digest != expected {
            return Err(Error::DigestMismatch {
                expected: expected.to_string(),
                found: self.meta.config_digest.clone(),
                context: context.to_string(),
            });
        }
        Ok(())
    }

    /// SHA-256 over all four networks' tensors (including BN running
    /// statistics), in canonical order. Two checkpoints share a digest iff
    /// their parameters are bitwise identical.
    pub fn param_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, view) in self
            .gen_l2h
            .named_tensors()
            .into_iter()
            .chain(self.gen_h2l.named_tensors())
            .chain(self.disc_h.named_tensors())
            .chain(self.disc_l.named_tensors())
        {
            hasher.update(name.as_bytes());
            for v in view.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(&hasher.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn write_archive(path: &Path, tensors: &[(String, ndarray::ArrayViewD<'_, f32>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = ArchiveHeader {
        dtype: "f32".into(),
        tensors: tensors
            .iter()
            .map(|(name, view)| TensorEntry {
                name: name.clone(),
                shape: view.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_string(&header).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{MAGIC}").map_err(|e| Error::io(path, e))?;
    writeln!(w, "{header_json}").map_err(|e| Error::io(path, e))?;
    for (_, view) in tensors {
        for v in view.iter() {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an archive written by [`write_archive`] into a map of tensors.
pub fn read_archive(path: &Path) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = String::new();
    read_line(&mut r, &mut magic, path)?;
    if magic.trim_end() != MAGIC {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: format!("bad magic {:?}", magic.trim_end()),
        });
    }
    let mut header_line = String::new();
    read_line(&mut r, &mut header_line, path)?;
    let header: ArchiveHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::json(path, e))?;
    if header.dtype != "f32" {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: format!("unsupported dtype {}", header.dtype),
        });
    }
    let mut out = BTreeMap::new();
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|_| {
            Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("shape {:?} does not fit payload", entry.shape),
            }
        })?;
        if out.insert(entry.name.clone(), arr).is_some() {
            return Err(Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("duplicate tensor {}", entry.name),
            });
        }
    }
    Ok(out)
}

fn load_into(path: &Path, targets: Vec<(String, ndarray::ArrayViewMutD<'_, f32>)>) -> Result<()> {
    let mut stored = read_archive(path)?;
    for (name, mut view) in targets {
        let arr = stored
            .remove(&name)
            .ok_or_else(|| Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!("missing tensor {name}"),
            })?;
        if arr.shape() != view.shape() {
            return Err(Error::CheckpointFormat {
                path: path.to_path_buf(),
                msg: format!(
                    "tensor {name} shape {:?} does not match expected {:?}",
                    arr.shape(),
                    view.shape()
                ),
            });
        }
        view.assign(&arr);
    }
    if let Some((name, _)) = stored.into_iter().next() {
        return Err(Error::CheckpointFormat {
            path: path.to_path_buf(),
            msg: format!("unexpected tensor {name}"),
        });
    }
    Ok(())
}

fn read_line(r: &mut impl std::io::BufRead, buf: &mut String, path: &Path) -> Result<()> {
    r.read_line(buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Relative position of a checkpoint directory within a pass directory.
pub fn checkpoint_dir_name(epoch: usize) -> String {
    format!("epoch_{epoch:05}")
}

/// Checkpoint directory for `epoch` under `pass_dir/checkpoints/`.
pub fn checkpoint_path(pass_dir: &Path, epoch: usize) -> PathBuf {
    pass_dir
        .join("checkpoints")
        .join(checkpoint_dir_name(epoch))
}
