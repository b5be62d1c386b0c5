//! Quantifying restoration benefit: the downstream classifier harness with
//! confusion-count metrics, PSNR against paired synthetic references,
//! inference latency, and comparison grids.

pub mod grid;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::InitSpec;
use crate::config::{derive_seed, NetworkConfig, RunConfig};
use crate::data_pipeline::image_ops::{load_tensor, ImageTensor};
use crate::data_pipeline::synth::load_pairing;
use crate::data_pipeline::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::networks::adam::GAN_BETAS;
use crate::networks::classifier::{argmax_rows, cross_entropy, Classifier};
use crate::networks::{Adam, CycleGanCheckpoint};
use crate::ptl_orchestrator::{cascade_restore_stages, RunRecord};

pub use grid::{render_comparison_grid, GridRow};

/// Binary confusion counts with "abnormal" (DR present) as positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub f1: f64,
}

/// Accuracy, precision, sensitivity, and F1 from confusion counts. Zero
/// denominators yield 0 rather than an error so degenerate classifiers stay
/// reportable.
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Invalid("empty confusion counts".into()));
    }
    let accuracy = (counts.tp + counts.tn) as f64 / total as f64;
    let precision = if counts.tp + counts.fp > 0 {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    } else {
        0.0
    };
    let sensitivity = if counts.tp + counts.fn_ > 0 {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        sensitivity,
        f1: f1_score(precision, sensitivity),
    })
}

/// Harmonic mean of precision and sensitivity; 0 when both vanish.
pub fn f1_score(precision: f64, sensitivity: f64) -> f64 {
    if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    }
}

/// Peak signal-to-noise ratio in decibels over [-1, 1] tensors (peak 2).
/// Identical images return `f64::INFINITY`.
pub fn psnr(reference: &ImageTensor, candidate: &ImageTensor) -> Result<f64> {
    if reference.dim() != candidate.dim() {
        return Err(Error::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            reference.dim(),
            candidate.dim()
        )));
    }
    let mse = reference
        .iter()
        .zip(candidate.iter())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (4.0 / mse).log10())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Images plus their binary DR labels.
pub struct LabeledSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

/// Load the DR-labeled records of one split. Missing labels fail with the
/// offending record's path.
pub fn load_labeled_split(
    manifest: &DatasetManifest,
    split: Split,
    quality: Option<u8>,
    image_size: usize,
) -> Result<LabeledSet> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for record in manifest.records_in(split) {
        if let Some(q) = quality {
            if record.quality != q {
                continue;
            }
        }
        let dr = record.dr.ok_or_else(|| {
            Error::Invalid(format!("record {} has no dr label", record.path.display()))
        })?;
        images.push(load_tensor(
            &manifest.resolve(record),
            (image_size, image_size),
        )?);
        labels.push(dr as usize);
    }
    Ok(LabeledSet { images, labels })
}

fn stack(images: &[ImageTensor], indices: &[usize]) -> Array4<f32> {
    let (c, h, w) = images[indices[0]].dim();
    let mut batch = Array4::zeros((indices.len(), c, h, w));
    for (slot, &i) in indices.iter().enumerate() {
        batch.index_axis_mut(Axis(0), slot).assign(&images[i]);
    }
    batch
}

/// Train the compact CNN with cross-entropy. Identical seeds produce
/// identical initial weights and batch orders, so classifiers compared
/// across datasets differ only in the images they saw.
pub fn train_classifier(
    set: &LabeledSet,
    net_cfg: &NetworkConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier<f32>, Vec<f64>)> {
    if set.images.is_empty() {
        return Err(Error::Invalid("classifier training set is empty".into()));
    }
    let classes: std::collections::BTreeSet<usize> = set.labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Invalid(
            "classifier training set holds a single class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "classifier-init"));
    let mut clf = Classifier::<f32>::new(net_cfg.classifier(), &InitSpec::FanIn, &mut rng);
    let mut adam = Adam::new(&clf.trainable(), GAN_BETAS);

    let n = set.images.len();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("classifier-epoch-{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = stack(&set.images, chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let (logits, cache) = clf.forward_cached(&batch)?;
            let (loss, grad_logits) = cross_entropy(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Invalid(format!(
                    "classifier loss diverged at epoch {epoch}"
                )));
            }
            let mut grads = clf.zero_grads();
            clf.backward(&grad_logits, &cache, &mut grads);
            adam.step(cfg.lr, clf.trainable_mut(), &grads.flat());
            epoch_loss += loss as f64;
            steps += 1;
        }
        loss_trace.push(epoch_loss / steps.max(1) as f64);
    }
    Ok((clf, loss_trace))
}

/// Tally predictions over a labeled set; positive class is "abnormal" (1).
pub fn evaluate_classifier(clf: &Classifier<f32>, set: &LabeledSet) -> Result<ConfusionCounts> {
    if set.images.is_empty() {
        return Err(Error::Invalid("classifier test set is empty".into()));
    }
    let mut counts = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (image, &label) in set.images.iter().zip(set.labels.iter()) {
        let batch = stack(std::slice::from_ref(image), &[0]);
        let logits = clf.forward(&batch)?;
        let pred = argmax_rows(&logits)[0];
        match (pred, label) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 1) => counts.fn_ += 1,
            (0, 0) => counts.tn += 1,
            _ => unreachable!("binary labels"),
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageStats {
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyStats {
    pub per_stage: Vec<StageStats>,
    pub full_cascade: StageStats,
    pub hardware: String,
    pub repetitions: usize,
    pub image_count: usize,
}

fn summarize(samples: &mut [f64]) -> StageStats {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    StageStats {
        median_s: median,
        min_s: samples[0],
        max_s: samples[n - 1],
    }
}

pub fn hardware_description() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{model} ({cores} logical cores)")
}

/// Wall-clock per-image latency of the cascade, per stage and end to end.
pub fn benchmark_inference(
    checkpoints: &[&CycleGanCheckpoint],
    images: &[ImageTensor],
    repetitions: usize,
) -> Result<LatencyStats> {
    if images.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one image".into()));
    }
    if repetitions < 3 {
        return Err(Error::Invalid(
            "benchmark needs at least 3 repetitions".into(),
        ));
    }
    if checkpoints.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one stage".into()));
    }
    let mut stage_samples: Vec<Vec<f64>> = vec![Vec::new(); checkpoints.len()];
    let mut full_samples = Vec::new();
    for _ in 0..repetitions {
        for image in images {
            let start_full = Instant::now();
            let mut current = image.clone();
            for (k, ckpt) in checkpoints.iter().enumerate() {
                let start = Instant::now();
                current = crate::ptl_orchestrator::restore_tensor(ckpt, &current)?;
                stage_samples[k].push(start.elapsed().as_secs_f64());
            }
            full_samples.push(start_full.elapsed().as_secs_f64());
        }
    }
    Ok(LatencyStats {
        per_stage: stage_samples.iter_mut().map(|s| summarize(s)).collect(),
        full_cascade: summarize(&mut full_samples),
        hardware: hardware_description(),
        repetitions,
        image_count: images.len(),
    })
}

/// PSNR statistics of one dataset row. Infinite samples (identical images)
/// are counted separately; the mean covers the finite ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsnrStats {
    pub mean_db: Option<f64>,
    pub min_db: Option<f64>,
    pub max_db: Option<f64>,
    pub count: usize,
    pub infinite_count: usize,
}

pub fn psnr_stats(values: &[f64]) -> PsnrStats {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let infinite_count = values.len() - finite.len();
    if finite.is_empty() {
        return PsnrStats {
            mean_db: None,
            min_db: None,
            max_db: None,
            count: values.len(),
            infinite_count,
        };
    }
    PsnrStats {
        mean_db: Some(finite.iter().sum::<f64>() / finite.len() as f64),
        min_db: finite.iter().copied().reduce(f64::min),
        max_db: finite.iter().copied().reduce(f64::max),
        count: values.len(),
        infinite_count,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub counts: Option<ConfusionCounts>,
    pub metrics: Option<ClassificationMetrics>,
    pub psnr: Option<PsnrStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub latency: Option<LatencyStats>,
    pub config_digest: String,
    pub classifier_config: Option<ClassifierTrainConfig>,
    pub notes: Vec<String>,
}

pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

pub fn row_name(pass: usize) -> String {
    if pass == 0 {
        "Original".into()
    } else {
        format!("{} Pass Restoration", ordinal(pass))
    }
}

impl EvaluationReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Evaluation report\n\n");
        out.push_str(&format!("config digest: `{}`\n\n", self.config_digest));
        let has_metrics = self.rows.iter().any(|r| r.metrics.is_some());
        if has_metrics {
            out.push_str("| Dataset | Accuracy | Precision | Sensitivity | F1 Score |\n");
            out.push_str("|---|---|---|---|---|\n");
            for row in &self.rows {
                if let Some(m) = &row.metrics {
                    out.push_str(&format!(
                        "| {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                        row.name,
                        100.0 * m.accuracy,
                        100.0 * m.precision,
                        100.0 * m.sensitivity,
                        100.0 * m.f1
                    ));
                }
            }
            out.push('\n');
        }
        let has_psnr = self.rows.iter().any(|r| r.psnr.is_some());
        if has_psnr {
            out.push_str("| Dataset | mean PSNR (dB) | min | max | n | inf |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            for row in &self.rows {
                if let Some(p) = &row.psnr {
                    let fmt = |v: Option<f64>| {
                        v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "inf".into())
                    };
                    out.push_str(&format!(
                        "| {} | {} | {} | {} | {} | {} |\n",
                        row.name,
                        fmt(p.mean_db),
                        fmt(p.min_db),
                        fmt(p.max_db),
                        p.count,
                        p.infinite_count
                    ));
                }
            }
            out.push('\n');
        }
        if let Some(lat) = &self.latency {
            out.push_str(&format!(
                "Latency on {}: full cascade median {:.4} s/image over {} images x {} reps\n\n",
                lat.hardware, lat.full_cascade.median_s, lat.image_count, lat.repetitions
            ));
            for (i, s) in lat.per_stage.iter().enumerate() {
                out.push_str(&format!(
                    "- stage {}: median {:.4} s (min {:.4}, max {:.4})\n",
                    i + 1,
                    s.median_s,
                    s.min_s,
                    s.max_s
                ));
            }
            out.push('\n');
        }
        for note in &self.notes {
            out.push_str(&format!("> {note}\n"));
        }
        out
    }

    pub fn save_markdown(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_markdown()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Classifier,
    Psnr,
    Both,
}

pub struct EvalSetup<'a> {
    pub run_dir: &'a Path,
    pub manifest: &'a DatasetManifest,
    pub mode: EvalMode,
    pub classifier: ClassifierTrainConfig,
    /// Degraded-to-clean pairing for PSNR; discovered next to the manifest
    /// when absent.
    pub pairing: Option<PathBuf>,
}

/// Build the Original / per-pass report for a finished run: retrain the same
/// classifier per dataset row and/or score PSNR against paired references.
pub fn evaluate_run(setup: EvalSetup<'_>) -> Result<EvaluationReport> {
    let record = RunRecord::load(setup.run_dir)?;
    let run_cfg = RunConfig::load(&setup.run_dir.join("config.json"))?;
    let digest = run_cfg.digest();
    let n_passes = record.passes.len();
    if n_passes == 0 {
        return Err(Error::Invalid("run has no completed passes".into()));
    }
    let checkpoints = crate::ptl_orchestrator::load_cascade(setup.run_dir, None)?;
    let ckpt_refs: Vec<&CycleGanCheckpoint> = checkpoints.iter().collect();
    let size = run_cfg.network.image_size;

    let mut notes = vec![
        "Rows compare the low-quality domain: Original is the untouched degraded split; \
         pass k applies the first k best checkpoints in sequence."
            .to_string(),
        "Classifiers are trained and tested inside the same transformation regime \
         (pass-k training images against pass-k test images)."
            .to_string(),
    ];

    let mut rows: Vec<ReportRow> = (0..=n_passes)
        .map(|k| ReportRow {
            name: row_name(k),
            counts: None,
            metrics: None,
            psnr: None,
        })
        .collect();

    let do_classifier = matches!(setup.mode, EvalMode::Classifier | EvalMode::Both);
    let do_psnr = matches!(setup.mode, EvalMode::Psnr | EvalMode::Both);

    if do_psnr {
        let pairing_path = setup
            .pairing
            .clone()
            .unwrap_or_else(|| setup.manifest.base_dir.join("pairing.json"));
        let pairing = load_pairing(&pairing_path)?;
        let mut per_row: Vec<Vec<f64>> = vec![Vec::new(); n_passes + 1];
        for record in setup.manifest.records_in(Split::Test) {
            if record.quality != 0 {
                continue;
            }
            let key = record.path.to_string_lossy().into_owned();
            let clean_rel = pairing.get(&key).ok_or_else(|| {
                Error::Invalid(format!("pairing file has no reference for {key}"))
            })?;
            let reference = load_tensor(&setup.manifest.base_dir.join(clean_rel), (size, size))?;
            let degraded = load_tensor(&setup.manifest.resolve(record), (size, size))?;
            per_row[0].push(psnr(&reference, &degraded)?);
            let stages = cascade_restore_stages(&ckpt_refs, &degraded)?;
            for (k, stage) in stages.iter().enumerate() {
                per_row[k + 1].push(psnr(&reference, stage)?);
            }
        }
        if per_row[0].is_empty() {
            return Err(Error::Invalid(
                "no low-quality test records available for PSNR".into(),
            ));
        }
        for (k, values) in per_row.iter().enumerate() {
            rows[k].psnr = Some(psnr_stats(values));
        }
    }

    if do_classifier {
        let train = load_labeled_split(setup.manifest, Split::Train, Some(0), size)?;
        let test = load_labeled_split(setup.manifest, Split::Test, Some(0), size)?;
        if test.images.is_empty() {
            return Err(Error::Invalid(
                "no low-quality test records with dr labels".into(),
            ));
        }
        // Original row.
        let (clf, trace) = train_classifier(&train, &run_cfg.network, &setup.classifier)?;
        if trace.iter().any(|l| !l.is_finite()) {
            return Err(Error::Invalid("classifier loss trace is not finite".into()));
        }
        let counts = evaluate_classifier(&clf, &test)?;
        rows[0].metrics = Some(compute_metrics(&counts)?);
        rows[0].counts = Some(counts);

        // Pass rows: transform both train and test sets through the cascade
        // prefix, retraining an identically seeded classifier each time.
        let mut train_stages = vec![train];
        let mut test_stages = vec![test];
        for k in 1..=n_passes {
            let prev_train = &train_stages[k - 1];
            let prev_test = &test_stages[k - 1];
            let step = |set: &LabeledSet| -> Result<LabeledSet> {
                let mut images = Vec::with_capacity(set.images.len());
                for img in &set.images {
                    images.push(crate::ptl_orchestrator::restore_tensor(
                        &checkpoints[k - 1],
                        img,
                    )?);
                }
                Ok(LabeledSet {
                    images,
                    labels: set.labels.clone(),
                })
            };
            let train_k = step(prev_train)?;
            let test_k = step(prev_test)?;
            let (clf, _) = train_classifier(&train_k, &run_cfg.network, &setup.classifier)?;
            let counts = evaluate_classifier(&clf, &test_k)?;
            rows[k].metrics = Some(compute_metrics(&counts)?);
            rows[k].counts = Some(counts);
            train_stages.push(train_k);
            test_stages.push(test_k);
        }
        notes.push(format!(
            "All classifier rows share seed {} and the schedule in classifier_config.",
            setup.classifier.seed
        ));
    }

    Ok(EvaluationReport {
        rows,
        latency: None,
        config_digest: digest,
        classifier_config: do_classifier.then(|| setup.classifier.clone()),
        notes,
    })
}
