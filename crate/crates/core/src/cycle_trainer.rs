//! One restoration pass: alternating generator/discriminator updates over
//! unpaired batches, the two-phase learning-rate schedule, per-epoch
//! validation of the low-to-high adversarial loss, checkpointing, and
//! best-epoch selection.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, NetworkConfig, TrainingConfig};
use crate::data_pipeline::image_ops::{augment, load_tensor, ImageTensor};
use crate::data_pipeline::PassDataset;
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_generator_loss, adversarial_generator_loss_grad, cycle_loss, discriminator_loss,
    discriminator_loss_grads, identity_loss, mean_abs_diff_grad, total_generator_loss, LossReport,
};
use crate::networks::adam::GAN_BETAS;
use crate::networks::checkpoint::checkpoint_path;
use crate::networks::{Adam, CheckpointMeta, CycleGanCheckpoint, Discriminator, Generator};

/// Learning rate at a 1-based epoch: constant at `lr_initial`, then linear
/// decay to `lr_final` over `lr_decay_epochs`, then flat at the floor.
pub fn lr_at_epoch(cfg: &TrainingConfig, epoch: usize) -> Result<f64> {
    if epoch < 1 || epoch > cfg.epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} outside schedule range 1..={}",
            cfg.epochs
        )));
    }
    if epoch <= cfg.lr_constant_epochs {
        return Ok(cfg.lr_initial);
    }
    let past = epoch - cfg.lr_constant_epochs;
    if cfg.lr_decay_epochs == 0 || past >= cfg.lr_decay_epochs {
        return Ok(cfg.lr_final);
    }
    let t = past as f64 / cfg.lr_decay_epochs as f64;
    Ok(cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) * t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossReport,
    pub disc_h_loss: f64,
    pub disc_l_loss: f64,
    pub val_adv1: f64,
    pub lr: f64,
    /// Checkpoint directory relative to the pass directory, when saved.
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for record in &self.records {
            let line = serde_json::to_string(record).map_err(|e| Error::json(path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: EpochRecord =
                serde_json::from_str(line).map_err(|e| Error::LabelFormat {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            records.push(record);
        }
        let trace = Self { records };
        trace.check_monotone(path)?;
        Ok(trace)
    }

    fn check_monotone(&self, path: &Path) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.epoch != i + 1 {
                return Err(Error::CheckpointFormat {
                    path: path.to_path_buf(),
                    msg: format!("trace epoch {} at position {i}", r.epoch),
                });
            }
        }
        Ok(())
    }
}

/// Best-epoch selection result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestEpoch {
    pub epoch: usize,
    pub val_adv1: f64,
    /// Checkpoint directory relative to the pass directory.
    pub checkpoint: String,
    /// True when no checkpointed epoch lay past the warmup exclusion and the
    /// global maximum was used instead.
    pub fallback: bool,
}

/// The checkpointed epoch beyond `warmup` with maximal validation adv1, ties
/// broken toward the earliest epoch; falls back to the global maximum (and
/// flags it) when every checkpointed epoch is inside the warmup window.
pub fn select_best_epoch(trace: &TrainingTrace, warmup: usize) -> Result<BestEpoch> {
    let candidates: Vec<&EpochRecord> = trace
        .records
        .iter()
        .filter(|r| r.checkpoint.is_some())
        .collect();
    if candidates.is_empty() {
        return Err(Error::Invalid(
            "trace holds no checkpointed epochs to select from".into(),
        ));
    }
    let pick = |records: &[&EpochRecord]| -> Option<(usize, f64, String)> {
        let mut best: Option<(usize, f64, String)> = None;
        for r in records {
            let better = match &best {
                None => true,
                Some((_, best_val, _)) => r.val_adv1 > *best_val,
            };
            if better {
                best = Some((
                    r.epoch,
                    r.val_adv1,
                    r.checkpoint.clone().expect("candidates are checkpointed"),
                ));
            }
        }
        best
    };
    let beyond: Vec<&EpochRecord> = candidates
        .iter()
        .copied()
        .filter(|r| r.epoch > warmup)
        .collect();
    if let Some((epoch, val_adv1, checkpoint)) = pick(&beyond) {
        return Ok(BestEpoch {
            epoch,
            val_adv1,
            checkpoint,
            fallback: false,
        });
    }
    let (epoch, val_adv1, checkpoint) = pick(&candidates).expect("candidates nonempty");
    Ok(BestEpoch {
        epoch,
        val_adv1,
        checkpoint,
        fallback: true,
    })
}

/// In-memory training material for one pass.
pub struct LoadedPassData {
    pub pass_index: usize,
    pub low: Vec<ImageTensor>,
    pub high: Vec<ImageTensor>,
    pub val_low: Vec<ImageTensor>,
}

pub fn load_pass_data(dataset: &PassDataset, image_size: usize) -> Result<LoadedPassData> {
    let size = (image_size, image_size);
    let load_all = |paths: &[PathBuf]| -> Result<Vec<ImageTensor>> {
        paths.iter().map(|p| load_tensor(p, size)).collect()
    };
    Ok(LoadedPassData {
        pass_index: dataset.pass_index,
        low: load_all(&dataset.low_set)?,
        high: load_all(&dataset.high_set)?,
        val_low: load_all(&dataset.val_low_set)?,
    })
}

/// Visit order for one epoch: each base image appears exactly once (oversampled
/// low visits cycle through the base set), independently shuffled per domain,
/// truncated to a common number of batches.
pub fn epoch_plan(
    n_low: usize,
    n_high: usize,
    lq_target: Option<usize>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> (Vec<usize>, Vec<usize>) {
    let effective_low = lq_target.map(|t| t.max(n_low)).unwrap_or(n_low);
    let mut low: Vec<usize> = (0..effective_low).map(|i| i % n_low.max(1)).collect();
    let mut high: Vec<usize> = (0..n_high).collect();
    let mut rng_low = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch-{epoch}-low")));
    let mut rng_high = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch-{epoch}-high")));
    low.shuffle(&mut rng_low);
    high.shuffle(&mut rng_high);
    let steps = (low.len().min(high.len())) / batch_size.max(1);
    low.truncate(steps * batch_size);
    high.truncate(steps * batch_size);
    (low, high)
}

fn stack_batch(images: &[ImageTensor], indices: &[usize]) -> Array4<f32> {
    let (c, h, w) = images[indices[0]].dim();
    let mut batch = Array4::zeros((indices.len(), c, h, w));
    for (slot, &idx) in indices.iter().enumerate() {
        batch.index_axis_mut(Axis(0), slot).assign(&images[idx]);
    }
    batch
}

/// Mean evaluation-mode L_adv1 over the validation low-quality images:
/// the discriminator of the high domain applied to each restored image.
pub fn validate_epoch(
    gen_l2h: &Generator<f32>,
    disc_h: &Discriminator<f32>,
    val_low: &[ImageTensor],
) -> Result<f64> {
    if val_low.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let mut acc = 0.0f64;
    for img in val_low {
        let batch = stack_batch(std::slice::from_ref(img), &[0]);
        let restored = gen_l2h.forward(&batch)?;
        let scores = disc_h.forward(&restored)?;
        acc += adversarial_generator_loss(&scores)? as f64;
    }
    Ok(acc / val_low.len() as f64)
}

/// Spec-facing convenience over a stored checkpoint.
pub fn validate_checkpoint(ckpt: &CycleGanCheckpoint, val_low: &[ImageTensor]) -> Result<f64> {
    validate_epoch(&ckpt.gen_l2h, &ckpt.disc_h, val_low)
}

pub struct TrainPassSetup<'a> {
    pub data: &'a LoadedPassData,
    /// Previous pass's best checkpoint; `None` trains from a fresh draw.
    pub init: Option<&'a CycleGanCheckpoint>,
    pub train_cfg: &'a TrainingConfig,
    pub net_cfg: &'a NetworkConfig,
    pub pass_index: usize,
    pub pass_dir: &'a Path,
    pub config_digest: &'a str,
}

/// Train one CycleGAN pass and return its trace. Checkpoints land under
/// `pass_dir/checkpoints/`, the trace under `pass_dir/trace.jsonl`.
pub fn train_pass(setup: TrainPassSetup<'_>) -> Result<TrainingTrace> {
    let TrainPassSetup {
        data,
        init,
        train_cfg: cfg,
        net_cfg,
        pass_index,
        pass_dir,
        config_digest,
    } = setup;
    if data.low.is_empty() || data.high.is_empty() {
        return Err(Error::Invalid(
            "pass dataset needs nonempty low and high sets".into(),
        ));
    }
    let effective_low = cfg
        .train_lq_target
        .map(|t| t.max(data.low.len()))
        .unwrap_or(data.low.len());
    if effective_low.min(data.high.len()) < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "batch size {} exceeds the usable per-epoch set size {}",
            cfg.batch_size,
            effective_low.min(data.high.len())
        )));
    }

    let meta = CheckpointMeta {
        pass_index,
        epoch: 0,
        val_adv1: 0.0,
        seed: cfg.seed,
        config_digest: config_digest.to_string(),
        network: net_cfg.clone(),
    };
    let (mut gen_l2h, mut gen_h2l, mut disc_h, mut disc_l) = match init {
        Some(prev) => {
            prev.verify_digest(config_digest, "train_pass init")?;
            (
                prev.gen_l2h.clone(),
                prev.gen_h2l.clone(),
                prev.disc_h.clone(),
                prev.disc_l.clone(),
            )
        }
        None => {
            let fresh = CycleGanCheckpoint::fresh(
                net_cfg,
                &cfg.init,
                derive_seed(cfg.seed, "fresh-init"),
                meta.clone(),
            );
            (fresh.gen_l2h, fresh.gen_h2l, fresh.disc_h, fresh.disc_l)
        }
    };

    // One optimizer over both generators, one over both discriminators;
    // state is fresh for every pass.
    let mut adam_gen = {
        let params: Vec<_> = gen_l2h
            .trainable()
            .into_iter()
            .chain(gen_h2l.trainable())
            .collect();
        Adam::new(&params, GAN_BETAS)
    };
    let mut adam_disc = {
        let params: Vec<_> = disc_h
            .trainable()
            .into_iter()
            .chain(disc_l.trainable())
            .collect();
        Adam::new(&params, GAN_BETAS)
    };

    std::fs::create_dir_all(pass_dir).map_err(|e| Error::io(pass_dir, e))?;
    let trace_path = pass_dir.join("trace.jsonl");
    let trace_file = std::fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let mut trace_writer = std::io::BufWriter::new(trace_file);
    let mut trace = TrainingTrace::default();

    let lambda = cfg.weights.lambda_cyc as f32;
    let beta = cfg.weights.beta_ide as f32;

    for epoch in 1..=cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch)?;
        let (low_order, high_order) = epoch_plan(
            data.low.len(),
            data.high.len(),
            cfg.train_lq_target,
            cfg.batch_size,
            cfg.seed,
            epoch,
        );
        let steps = low_order.len() / cfg.batch_size.max(1);

        let mut epoch_losses = LossReport::zero();
        let mut epoch_dh = 0.0f64;
        let mut epoch_dl = 0.0f64;

        for step in 0..steps {
            let lo = &low_order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let hi = &high_order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let xl = assemble_low_batch(data, lo, cfg, epoch, step);
            let xh = assemble_high_batch(data, hi, cfg, epoch, step);

            // Generator update: minimize adv1 + adv2 + lambda*cyc + beta*ide.
            let (fake_h, c_fake_h) = gen_l2h.forward_train(&xl)?;
            let (rec_l, c_rec_l) = gen_h2l.forward_train(&fake_h)?;
            let (fake_l, c_fake_l) = gen_h2l.forward_train(&xh)?;
            let (rec_h, c_rec_h) = gen_l2h.forward_train(&fake_l)?;
            let (idt_h, c_idt_h) = gen_l2h.forward_train(&xh)?;
            let (idt_l, c_idt_l) = gen_h2l.forward_train(&xl)?;
            let (d_fake_h, c_d_fake_h) = disc_h.forward_train(&fake_h)?;
            let (d_fake_l, c_d_fake_l) = disc_l.forward_train(&fake_l)?;

            let adv1 = adversarial_generator_loss(&d_fake_h)? as f64;
            let adv2 = adversarial_generator_loss(&d_fake_l)? as f64;
            let cyc = cycle_loss(&xl, &xh, &rec_l, &rec_h)? as f64;
            let ide = identity_loss(&xl, &xh, &idt_h, &idt_l)? as f64;
            let report =
                total_generator_loss(adv1, adv2, cyc, ide, &cfg.weights, cfg.batch_size)
                    .map_err(|_| divergence(pass_index, epoch, step, adv1 + adv2 + cyc + ide))?;

            let mut g1_grads = gen_l2h.zero_grads();
            let mut g2_grads = gen_h2l.zero_grads();
            // Discriminators stay frozen here; their gradients go to scratch.
            let mut dh_scratch = disc_h.zero_grads();
            let mut dl_scratch = disc_l.zero_grads();

            // Low -> high direction: adversarial + cycle paths into G_L2H.
            let g_scores_h = adversarial_generator_loss_grad(&d_fake_h);
            let g_fake_h_adv = disc_h.backward(&g_scores_h, &c_d_fake_h, &mut dh_scratch);
            let g_rec_l = mean_abs_diff_grad(&rec_l, &xl, lambda);
            let g_fake_h_cyc = gen_h2l.backward(&g_rec_l, &c_rec_l, &mut g2_grads);
            let g_fake_h = &g_fake_h_adv + &g_fake_h_cyc;
            gen_l2h.backward(&g_fake_h, &c_fake_h, &mut g1_grads);

            // High -> low direction.
            let g_scores_l = adversarial_generator_loss_grad(&d_fake_l);
            let g_fake_l_adv = disc_l.backward(&g_scores_l, &c_d_fake_l, &mut dl_scratch);
            let g_rec_h = mean_abs_diff_grad(&rec_h, &xh, lambda);
            let g_fake_l_cyc = gen_l2h.backward(&g_rec_h, &c_rec_h, &mut g1_grads);
            let g_fake_l = &g_fake_l_adv + &g_fake_l_cyc;
            gen_h2l.backward(&g_fake_l, &c_fake_l, &mut g2_grads);

            // Identity terms.
            let g_idt_h = mean_abs_diff_grad(&idt_h, &xh, beta);
            gen_l2h.backward(&g_idt_h, &c_idt_h, &mut g1_grads);
            let g_idt_l = mean_abs_diff_grad(&idt_l, &xl, beta);
            gen_h2l.backward(&g_idt_l, &c_idt_l, &mut g2_grads);

            {
                let params: Vec<_> = gen_l2h
                    .trainable_mut()
                    .into_iter()
                    .chain(gen_h2l.trainable_mut())
                    .collect();
                let grads: Vec<_> = g1_grads.flat().into_iter().chain(g2_grads.flat()).collect();
                adam_gen.step(lr, params, &grads);
            }

            // Discriminator update on detached generator outputs.
            let (d_real_h, c_real_h) = disc_h.forward_train(&xh)?;
            let (d_fake_h2, c_fake_h2) = disc_h.forward_train(&fake_h)?;
            let loss_dh = discriminator_loss(&d_real_h, &d_fake_h2)? as f64;
            let (d_real_l, c_real_l) = disc_l.forward_train(&xl)?;
            let (d_fake_l2, c_fake_l2) = disc_l.forward_train(&fake_l)?;
            let loss_dl = discriminator_loss(&d_real_l, &d_fake_l2)? as f64;
            if !(loss_dh.is_finite() && loss_dl.is_finite()) {
                return Err(divergence(pass_index, epoch, step, loss_dh + loss_dl));
            }

            let mut dh_grads = disc_h.zero_grads();
            let (g_real_h, g_fake_h2) = discriminator_loss_grads(&d_real_h, &d_fake_h2);
            disc_h.backward(&g_real_h, &c_real_h, &mut dh_grads);
            disc_h.backward(&g_fake_h2, &c_fake_h2, &mut dh_grads);
            let mut dl_grads = disc_l.zero_grads();
            let (g_real_l, g_fake_l2) = discriminator_loss_grads(&d_real_l, &d_fake_l2);
            disc_l.backward(&g_real_l, &c_real_l, &mut dl_grads);
            disc_l.backward(&g_fake_l2, &c_fake_l2, &mut dl_grads);
            {
                let params: Vec<_> = disc_h
                    .trainable_mut()
                    .into_iter()
                    .chain(disc_l.trainable_mut())
                    .collect();
                let grads: Vec<_> = dh_grads.flat().into_iter().chain(dl_grads.flat()).collect();
                adam_disc.step(lr, params, &grads);
            }

            epoch_losses.adv1 += report.adv1;
            epoch_losses.adv2 += report.adv2;
            epoch_losses.cyc += report.cyc;
            epoch_losses.ide += report.ide;
            epoch_losses.total += report.total;
            epoch_dh += loss_dh;
            epoch_dl += loss_dl;
        }

        let denom = steps.max(1) as f64;
        let losses = LossReport {
            adv1: epoch_losses.adv1 / denom,
            adv2: epoch_losses.adv2 / denom,
            cyc: epoch_losses.cyc / denom,
            ide: epoch_losses.ide / denom,
            total: epoch_losses.total / denom,
            m: cfg.batch_size,
        };

        let val_adv1 = validate_epoch(&gen_l2h, &disc_h, &data.val_low)?;

        let checkpoint_now = epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs;
        let checkpoint_rel = if checkpoint_now {
            let dir = checkpoint_path(pass_dir, epoch);
            let ckpt = CycleGanCheckpoint {
                gen_l2h: gen_l2h.clone(),
                gen_h2l: gen_h2l.clone(),
                disc_h: disc_h.clone(),
                disc_l: disc_l.clone(),
                meta: CheckpointMeta {
                    epoch,
                    val_adv1,
                    ..meta.clone()
                },
            };
            ckpt.save(&dir)?;
            Some(
                dir.strip_prefix(pass_dir)
                    .expect("checkpoint under pass dir")
                    .to_string_lossy()
                    .into_owned(),
            )
        } else {
            None
        };

        let record = EpochRecord {
            epoch,
            losses,
            disc_h_loss: epoch_dh / denom,
            disc_l_loss: epoch_dl / denom,
            val_adv1,
            lr,
            checkpoint: checkpoint_rel,
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::json(&trace_path, e))?;
        writeln!(trace_writer, "{line}").map_err(|e| Error::io(&trace_path, e))?;
        trace_writer
            .flush()
            .map_err(|e| Error::io(&trace_path, e))?;
        trace.records.push(record);
    }

    Ok(trace)
}

fn assemble_low_batch(
    data: &LoadedPassData,
    indices: &[usize],
    cfg: &TrainingConfig,
    epoch: usize,
    step: usize,
) -> Array4<f32> {
    let base = stack_batch(&data.low, indices);
    maybe_augment_batch(base, &data.low, indices, cfg, epoch, step, "low")
}

fn assemble_high_batch(
    data: &LoadedPassData,
    indices: &[usize],
    cfg: &TrainingConfig,
    epoch: usize,
    step: usize,
) -> Array4<f32> {
    let base = stack_batch(&data.high, indices);
    maybe_augment_batch(base, &data.high, indices, cfg, epoch, step, "high")
}

fn maybe_augment_batch(
    mut batch: Array4<f32>,
    images: &[ImageTensor],
    indices: &[usize],
    cfg: &TrainingConfig,
    epoch: usize,
    step: usize,
    domain: &str,
) -> Array4<f32> {
    // Oversampled low visits are always augmented; base visits only when the
    // config asks for it.
    let oversampling = domain == "low" && cfg.train_lq_target.is_some_and(|t| t > images.len());
    if !cfg.augment && !oversampling {
        return batch;
    }
    for (slot, &idx) in indices.iter().enumerate() {
        let seed = derive_seed(
            cfg.seed,
            &format!("augment-{domain}-{epoch}-{step}-{slot}-{idx}"),
        );
        let augmented = augment(&images[idx], seed);
        batch.index_axis_mut(Axis(0), slot).assign(&augmented);
    }
    batch
}

fn divergence(pass: usize, epoch: usize, step: usize, loss: f64) -> Error {
    Error::Divergence {
        pass,
        epoch,
        step,
        loss: format!("{loss}"),
    }
}
