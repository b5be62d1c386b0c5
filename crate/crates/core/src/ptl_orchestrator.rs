//! The multi-pass protocol: build each pass's dataset from the previous
//! pass's restored outputs, seed each pass's networks from the previous best
//! checkpoint, and expose cascaded inference over the per-pass models.
//!
//! Run directory layout:
//! `runs/<run_id>/pass_<i>/{checkpoints/, trace.jsonl, restored/, best.json}`
//! plus top-level `run.json` and `config.json`. A lock file guards the run
//! directory against concurrent orchestrators.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, InitMode, RunConfig};
use crate::cycle_trainer::{
    load_pass_data, select_best_epoch, train_pass, BestEpoch, TrainPassSetup,
};
use crate::data_pipeline::image_ops::{load_tensor, ImageTensor};
use crate::data_pipeline::{emit_restored_dataset, DatasetManifest, PassDataset, Split};
use crate::error::{Error, Result};
use crate::networks::{CheckpointMeta, CycleGanCheckpoint};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass_index: usize,
    pub best_epoch: usize,
    pub val_adv1: f64,
    /// Best-epoch selection fell back to the global maximum.
    pub fallback: bool,
    /// Checkpoint directory of Q(i), relative to the run directory.
    pub checkpoint: PathBuf,
    /// Manifest of the restored low-quality set, relative to the run directory.
    pub restored_manifest: PathBuf,
    /// Parameter digest of the networks the pass started from.
    pub init_param_digest: String,
    /// Parameter digest of Q(i).
    pub best_param_digest: String,
    pub low_count: usize,
    pub high_count: usize,
    pub val_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    InProgress,
    Complete,
    Failed { pass: usize, error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub n_passes: usize,
    pub init_mode: InitMode,
    pub config_digest: String,
    pub status: RunStatus,
    pub passes: Vec<PassRecord>,
}

impl RunRecord {
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join("run.json");
        let tmp = run_dir.join("run.json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("run.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

/// Exclusive hold on a run directory. Dropping releases the lock; a lock left
/// behind by a dead process is treated as stale and reclaimed.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(".lock");
        loop {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(mut file) => {
                    let _ = write!(file, "{}", std::process::id());
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let mut contents = String::new();
                    if let Ok(mut f) = std::fs::File::open(&path) {
                        let _ = f.read_to_string(&mut contents);
                    }
                    let pid: Option<u32> = contents.trim().parse().ok();
                    match pid {
                        Some(pid) if pid != std::process::id() && pid_alive(pid) => {
                            return Err(Error::LockHeld {
                                path: path.clone(),
                                pid,
                            });
                        }
                        _ => {
                            // Stale lock from a dead process: reclaim.
                            let _ = std::fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn pid_alive(pid: u32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}

/// Copy all four parameter sets of `prev` for the next pass's initialization.
/// Optimizer state never transfers; only network weights do.
pub fn transfer_weights(prev: &CycleGanCheckpoint, next_pass: usize) -> CycleGanCheckpoint {
    CycleGanCheckpoint {
        gen_l2h: prev.gen_l2h.clone(),
        gen_h2l: prev.gen_h2l.clone(),
        disc_h: prev.disc_h.clone(),
        disc_l: prev.disc_l.clone(),
        meta: CheckpointMeta {
            pass_index: next_pass,
            epoch: 0,
            val_adv1: 0.0,
            ..prev.meta.clone()
        },
    }
}

/// Restore every image with the checkpoint's low-to-high generator in
/// evaluation mode; order and source paths are preserved.
pub fn restore_dataset(
    checkpoint: &CycleGanCheckpoint,
    low_images: &[PathBuf],
    run_digest: &str,
) -> Result<Vec<(PathBuf, ImageTensor)>> {
    checkpoint.verify_digest(run_digest, "restore_dataset")?;
    let size = checkpoint.meta.network.image_size;
    let mut out = Vec::with_capacity(low_images.len());
    for path in low_images {
        let tensor = load_tensor(path, (size, size))?;
        out.push((path.clone(), restore_tensor(checkpoint, &tensor)?));
    }
    Ok(out)
}

/// One image through one checkpoint's low-to-high generator.
pub fn restore_tensor(checkpoint: &CycleGanCheckpoint, image: &ImageTensor) -> Result<ImageTensor> {
    let batch = image
        .clone()
        .insert_axis(Axis(0))
        .into_dimensionality()
        .expect("rank 4");
    let restored = checkpoint.gen_l2h.forward(&batch)?;
    Ok(restored.index_axis(Axis(0), 0).to_owned())
}

/// Sequential application of the passes' best generators, entirely in
/// floating point (no between-stage quantization). Returns every
/// intermediate stage; the last entry is the final restoration.
pub fn cascade_restore_stages(
    checkpoints: &[&CycleGanCheckpoint],
    image: &ImageTensor,
) -> Result<Vec<ImageTensor>> {
    if checkpoints.is_empty() {
        return Err(Error::Invalid(
            "cascade needs at least one checkpoint".into(),
        ));
    }
    let digest = &checkpoints[0].meta.config_digest;
    for (i, ckpt) in checkpoints.iter().enumerate() {
        if &ckpt.meta.config_digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest.clone(),
                found: ckpt.meta.config_digest.clone(),
                context: format!("cascade stage {i}"),
            });
        }
        if i > 0 && ckpt.meta.pass_index <= checkpoints[i - 1].meta.pass_index {
            return Err(Error::Invalid(format!(
                "cascade checkpoints out of order: pass {} after pass {}",
                ckpt.meta.pass_index,
                checkpoints[i - 1].meta.pass_index
            )));
        }
    }
    let mut stages = Vec::with_capacity(checkpoints.len());
    let mut current = image.clone();
    for ckpt in checkpoints {
        current = restore_tensor(ckpt, &current)?;
        stages.push(current.clone());
    }
    Ok(stages)
}

pub fn cascade_restore(
    checkpoints: &[&CycleGanCheckpoint],
    image: &ImageTensor,
) -> Result<ImageTensor> {
    Ok(cascade_restore_stages(checkpoints, image)?
        .pop()
        .expect("nonempty cascade"))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this pass completes, leaving a resumable run.
    pub stop_after_pass: Option<usize>,
}

fn pass_dir_name(pass: usize) -> String {
    format!("pass_{pass}")
}

/// Initial pass dataset D(0) from a source manifest: train lows, train
/// highs, and validation lows.
pub fn initial_pass_dataset(manifest: &DatasetManifest) -> PassDataset {
    let resolve = |r: &crate::data_pipeline::ManifestRecord| manifest.resolve(r);
    PassDataset {
        pass_index: 0,
        low_set: manifest
            .records_in(Split::Train)
            .filter(|r| r.quality == 0)
            .map(resolve)
            .collect(),
        high_set: manifest
            .records_in(Split::Train)
            .filter(|r| r.quality == 1)
            .map(resolve)
            .collect(),
        val_low_set: manifest
            .records_in(Split::Val)
            .filter(|r| r.quality == 0)
            .map(resolve)
            .collect(),
    }
}

/// Drive the whole run: N passes of train, select, restore, refine.
pub fn run_passes(cfg: &RunConfig, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let _lock = RunLock::acquire(&run_dir)?;
    let digest = cfg.digest();

    let mut record = if run_dir.join("run.json").exists() {
        let existing = RunRecord::load(&run_dir)?;
        if existing.config_digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: existing.config_digest,
                context: "existing run.json".into(),
            });
        }
        if !opts.resume {
            return Err(Error::Invalid(format!(
                "run directory {} already holds a run; pass resume to continue",
                run_dir.display()
            )));
        }
        existing
    } else {
        RunRecord {
            run_id: cfg.run_id(),
            seed: cfg.seed,
            n_passes: cfg.n_passes,
            init_mode: cfg.init_mode,
            config_digest: digest.clone(),
            status: RunStatus::InProgress,
            passes: Vec::new(),
        }
    };
    cfg.save(&run_dir.join("config.json"))?;

    // Discard records whose artifacts are incomplete on disk, then the
    // trailing passes after the first gap.
    let mut completed = 0;
    for pass_record in &record.passes {
        let pass_dir = run_dir.join(pass_dir_name(pass_record.pass_index));
        let ok = run_dir
            .join(&pass_record.checkpoint)
            .join("meta.json")
            .is_file()
            && run_dir.join(&pass_record.restored_manifest).is_file()
            && pass_dir.join("best.json").is_file();
        if ok && pass_record.pass_index == completed + 1 {
            completed += 1;
        } else {
            break;
        }
    }
    record.passes.truncate(completed);
    record.status = RunStatus::InProgress;

    let source = DatasetManifest::load(&cfg.manifest)?;
    let d0 = initial_pass_dataset(&source);
    if d0.low_set.is_empty() || d0.high_set.is_empty() {
        return Err(Error::Invalid(
            "source manifest has no low/high training records".into(),
        ));
    }

    let mut current = d0;
    // Rebuild D(completed) by replaying manifests of finished passes.
    for i in 1..=completed {
        let manifest_path = run_dir.join(&record.passes[i - 1].restored_manifest);
        let restored = DatasetManifest::load(&manifest_path)?;
        current = next_pass_dataset(&current, &restored, cfg, i);
    }

    for pass in (completed + 1)..=cfg.n_passes {
        current.pass_index = pass - 1;
        match execute_pass(cfg, &run_dir, &digest, pass, &current) {
            Ok((pass_record, restored_manifest)) => {
                record.passes.push(pass_record);
                current = next_pass_dataset(&current, &restored_manifest, cfg, pass);
                record.save(&run_dir)?;
            }
            Err(e) => {
                record.status = RunStatus::Failed {
                    pass,
                    error: e.to_string(),
                };
                record.save(&run_dir)?;
                return Err(e);
            }
        }
        if opts.stop_after_pass == Some(pass) && pass < cfg.n_passes {
            record.status = RunStatus::InProgress;
            record.save(&run_dir)?;
            return Ok(record);
        }
    }

    record.status = RunStatus::Complete;
    record.save(&run_dir)?;
    Ok(record)
}

/// D(i+1) = {restored lows, original highs}; validation lows follow the
/// restored set unless the run keeps scoring the original validation images.
fn next_pass_dataset(
    current: &PassDataset,
    restored: &DatasetManifest,
    cfg: &RunConfig,
    pass: usize,
) -> PassDataset {
    let low_set: Vec<PathBuf> = restored
        .records_in(Split::Train)
        .map(|r| restored.resolve(r))
        .collect();
    let val_low_set: Vec<PathBuf> = if cfg.restore_val_between_passes {
        restored
            .records_in(Split::Val)
            .map(|r| restored.resolve(r))
            .collect()
    } else {
        current.val_low_set.clone()
    };
    PassDataset {
        pass_index: pass,
        low_set,
        high_set: current.high_set.clone(),
        val_low_set,
    }
}

fn execute_pass(
    cfg: &RunConfig,
    run_dir: &Path,
    digest: &str,
    pass: usize,
    dataset: &PassDataset,
) -> Result<(PassRecord, DatasetManifest)> {
    let pass_dir = run_dir.join(pass_dir_name(pass));
    if pass_dir.exists() {
        // Wipe leftovers of an interrupted attempt; the pass re-runs
        // deterministically from its derived seed.
        std::fs::remove_dir_all(&pass_dir).map_err(|e| Error::io(&pass_dir, e))?;
    }
    std::fs::create_dir_all(&pass_dir).map_err(|e| Error::io(&pass_dir, e))?;

    let train_cfg = cfg.training_for_pass(pass);
    let meta = CheckpointMeta {
        pass_index: pass,
        epoch: 0,
        val_adv1: 0.0,
        seed: train_cfg.seed,
        config_digest: digest.to_string(),
        network: cfg.network.clone(),
    };
    let init = if pass == 1 || cfg.init_mode == InitMode::Random {
        CycleGanCheckpoint::fresh(
            &cfg.network,
            &train_cfg.init,
            derive_seed(train_cfg.seed, "fresh-init"),
            meta,
        )
    } else {
        let prev = &pass_record_of(run_dir, pass - 1)?;
        let prev_ckpt = CycleGanCheckpoint::load(&run_dir.join(&prev.checkpoint))?;
        prev_ckpt.verify_digest(digest, "transfer init")?;
        transfer_weights(&prev_ckpt, pass)
    };
    let init_param_digest = init.param_digest();

    let data = load_pass_data(dataset, cfg.network.image_size)?;
    let trace = train_pass(TrainPassSetup {
        data: &data,
        init: Some(&init),
        train_cfg: &train_cfg,
        net_cfg: &cfg.network,
        pass_index: pass,
        pass_dir: &pass_dir,
        config_digest: digest,
    })?;

    let best = select_best_epoch(&trace, train_cfg.warmup_exclusion)?;
    write_best(&pass_dir, &best)?;
    let best_ckpt = CycleGanCheckpoint::load(&pass_dir.join(&best.checkpoint))?;

    // Restore training and validation lows for the next pass's dataset.
    let mut to_restore = dataset.low_set.clone();
    if cfg.restore_val_between_passes {
        to_restore.extend(dataset.val_low_set.iter().cloned());
    }
    let restored = restore_dataset(&best_ckpt, &to_restore, digest)?;
    let source = DatasetManifest::load(&cfg.manifest)?;
    let restored_manifest = emit_restored_dataset(&restored, &pass_dir.join("restored"), &source)?;

    let checkpoint_rel = PathBuf::from(pass_dir_name(pass)).join(&best.checkpoint);
    let record = PassRecord {
        pass_index: pass,
        best_epoch: best.epoch,
        val_adv1: best.val_adv1,
        fallback: best.fallback,
        checkpoint: checkpoint_rel,
        restored_manifest: PathBuf::from(pass_dir_name(pass))
            .join("restored")
            .join("manifest.jsonl"),
        init_param_digest,
        best_param_digest: best_ckpt.param_digest(),
        low_count: dataset.low_set.len(),
        high_count: dataset.high_set.len(),
        val_count: dataset.val_low_set.len(),
    };
    Ok((record, restored_manifest))
}

fn pass_record_of(run_dir: &Path, pass: usize) -> Result<PassRecord> {
    let record = RunRecord::load(run_dir)?;
    record
        .passes
        .into_iter()
        .find(|p| p.pass_index == pass)
        .ok_or_else(|| Error::Invalid(format!("run record holds no pass {pass}")))
}

fn write_best(pass_dir: &Path, best: &BestEpoch) -> Result<()> {
    let path = pass_dir.join("best.json");
    let text = serde_json::to_string_pretty(best).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_best(pass_dir: &Path) -> Result<BestEpoch> {
    let path = pass_dir.join("best.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Load the best checkpoints of passes `1..=upto` of a finished run.
pub fn load_cascade(run_dir: &Path, upto: Option<usize>) -> Result<Vec<CycleGanCheckpoint>> {
    let record = RunRecord::load(run_dir)?;
    let n = upto.unwrap_or(record.passes.len());
    if n == 0 || n > record.passes.len() {
        return Err(Error::Invalid(format!(
            "run has {} completed passes, cannot load {n}",
            record.passes.len()
        )));
    }
    record.passes[..n]
        .iter()
        .map(|p| {
            let ckpt = CycleGanCheckpoint::load(&run_dir.join(&p.checkpoint))?;
            ckpt.verify_digest(&record.config_digest, "load_cascade")?;
            Ok(ckpt)
        })
        .collect()
}
