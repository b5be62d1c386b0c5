//! Dataset ingestion: manifests binding image paths to quality/DR labels and
//! splits, deterministic split assignment, and persistence of restored
//! datasets between passes.
//!
//! Manifest files are line-delimited JSON, one record per line with keys
//! `path`, `quality`, `dr`, `split`; paths are relative to the manifest's
//! directory.

pub mod degrade;
pub mod image_ops;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use degrade::{DarkPatch, DegradationProfile, DegradationSpec};
pub use image_ops::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One labeled image. Quality: 0 = low, 1 = high. DR: 0 = normal,
/// 1 = abnormal, absent for quality-only corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub quality: u8,
    pub dr: Option<u8>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub source_id: String,
    pub seed: u64,
    /// Directory record paths are relative to (the manifest file's parent).
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    /// (low, high) record counts.
    pub fn quality_counts(&self) -> (usize, usize) {
        let low = self.records.iter().filter(|r| r.quality == 0).count();
        (low, self.records.len() - low)
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for record in &self.records {
            let line = serde_json::to_string(record).map_err(|e| Error::json(path, e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::LabelFormat {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: e.to_string(),
                })?;
            records.push(record);
        }
        Ok(Self {
            records,
            source_id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            seed: 0,
            base_dir: path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf(),
        })
    }
}

/// The training material of one pass: `low_set` is X_L for pass `pass_index`
/// (restored outputs of the previous pass when `pass_index > 1`), `high_set`
/// is X_H and stays identical across every pass of a run. Validation lows are
/// carried separately so pass-i validation can score pass-(i-1) outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassDataset {
    pub pass_index: usize,
    pub low_set: Vec<PathBuf>,
    pub high_set: Vec<PathBuf>,
    pub val_low_set: Vec<PathBuf>,
}

struct LabelEntry {
    filename: String,
    quality: u8,
    dr: Option<u8>,
}

/// Parse a label file: a `filename,quality[,dr]` header line followed by one
/// comma-separated entry per line. DR may be empty per row.
fn parse_label_file(path: &Path) -> Result<Vec<LabelEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut has_dr_column = false;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if lineno == 1 {
            match fields.as_slice() {
                ["filename", "quality"] => has_dr_column = false,
                ["filename", "quality", "dr"] => has_dr_column = true,
                _ => {
                    return Err(Error::LabelFormat {
                        path: path.to_path_buf(),
                        line: lineno,
                        msg: format!("expected header 'filename,quality[,dr]', got {trimmed:?}"),
                    })
                }
            }
            continue;
        }
        let expected = if has_dr_column { 3 } else { 2 };
        if fields.len() != expected {
            return Err(Error::LabelFormat {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected {expected} fields, got {}", fields.len()),
            });
        }
        let quality = parse_binary(fields[1], "quality", path, lineno)?;
        let dr = if has_dr_column && !fields[2].is_empty() {
            Some(parse_binary(fields[2], "dr", path, lineno)?)
        } else {
            None
        };
        entries.push(LabelEntry {
            filename: fields[0].to_string(),
            quality,
            dr,
        });
    }
    Ok(entries)
}

fn parse_binary(text: &str, what: &str, path: &Path, line: usize) -> Result<u8> {
    match text {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::LabelFormat {
            path: path.to_path_buf(),
            line,
            msg: format!("{what} must be 0 or 1, got {text:?}"),
        }),
    }
}

/// Build a manifest from an image directory and its label file. Records are
/// sorted by path, then shuffled with `seed`; missing images fail with the
/// offending path.
pub fn load_manifest(root: &Path, labels: &Path, seed: u64) -> Result<DatasetManifest> {
    let entries = parse_label_file(labels)?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        if !seen.insert(entry.filename.clone()) {
            return Err(Error::Invalid(format!(
                "duplicate label entry for {}",
                entry.filename
            )));
        }
        let full = root.join(&entry.filename);
        if !full.is_file() {
            return Err(Error::MissingFile(full));
        }
        records.push(ManifestRecord {
            path: PathBuf::from(&entry.filename),
            quality: entry.quality,
            dr: entry.dr,
            split: Split::Train,
        });
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    Ok(DatasetManifest {
        records,
        source_id: root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        seed,
        base_dir: root.to_path_buf(),
    })
}

/// Largest-remainder apportionment of `n` records over the three fractions;
/// each split lands within one record of its exact share.
fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fs = [fractions.0, fractions.1, fractions.2];
    let mut sizes = [0usize; 3];
    let mut remainders = [0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = n as f64 * fs[i];
        sizes[i] = exact.floor() as usize;
        remainders[i] = exact - exact.floor();
        assigned += sizes[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).expect("finite"));
    for &i in order.iter().cycle().take(n - assigned) {
        sizes[i] += 1;
    }
    sizes
}

fn validate_fractions(fractions: (f64, f64, f64)) -> Result<()> {
    let (t, v, s) = fractions;
    for f in [t, v, s] {
        if !f.is_finite() || f < 0.0 {
            return Err(Error::Config(format!("invalid split fraction {f}")));
        }
    }
    if ((t + v + s) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            t + v + s
        )));
    }
    Ok(())
}

/// Assign every record to exactly one split, as a pure function of
/// (manifest, fractions, seed). With `test_high_only`, low-quality records
/// are distributed over train/val only and the test split holds only
/// high-quality records.
pub fn build_splits(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
    test_high_only: bool,
) -> Result<DatasetManifest> {
    validate_fractions(fractions)?;
    if manifest.records.is_empty() {
        return Err(Error::Invalid("cannot split an empty manifest".into()));
    }
    let mut records = manifest.records.clone();
    records.sort_by(|a, b| a.path.cmp(&b.path));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);

    if test_high_only {
        let (mut highs, mut lows): (Vec<_>, Vec<_>) =
            records.into_iter().partition(|r| r.quality == 1);
        let sizes = split_sizes(highs.len(), fractions);
        assign_by_sizes(&mut highs, sizes);
        let (t, v, _) = fractions;
        let low_fracs = if t + v > 0.0 {
            (t / (t + v), v / (t + v), 0.0)
        } else {
            (1.0, 0.0, 0.0)
        };
        let sizes = split_sizes(lows.len(), low_fracs);
        assign_by_sizes(&mut lows, sizes);
        let mut combined = highs;
        combined.append(&mut lows);
        combined.shuffle(&mut rng);
        records = combined;
    } else {
        let sizes = split_sizes(records.len(), fractions);
        assign_by_sizes(&mut records, sizes);
    }

    Ok(DatasetManifest {
        records,
        source_id: manifest.source_id.clone(),
        seed,
        base_dir: manifest.base_dir.clone(),
    })
}

fn assign_by_sizes(records: &mut [ManifestRecord], sizes: [usize; 3]) {
    let mut idx = 0;
    for (split, count) in [
        (Split::Train, sizes[0]),
        (Split::Val, sizes[1]),
        (Split::Test, sizes[2]),
    ] {
        for _ in 0..count {
            records[idx].split = split;
            idx += 1;
        }
    }
}

/// Write restored tensors under `out_dir` keeping original filenames, and
/// return their manifest: quality 0 (they remain the low-quality domain for
/// the next pass) with DR labels and splits carried over from `source` by
/// filename.
pub fn emit_restored_dataset(
    images: &[(PathBuf, ImageTensor)],
    out_dir: &Path,
    source: &DatasetManifest,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut by_name: BTreeMap<String, &ManifestRecord> = BTreeMap::new();
    for record in &source.records {
        if let Some(name) = record.path.file_name() {
            by_name.insert(name.to_string_lossy().into_owned(), record);
        }
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(images.len());
    for (orig_path, tensor) in images {
        let name = orig_path
            .file_name()
            .ok_or_else(|| Error::Invalid(format!("path {orig_path:?} has no filename")))?
            .to_string_lossy()
            .into_owned();
        if !seen.insert(name.clone()) {
            return Err(Error::Invalid(format!(
                "filename collision: {name} written twice (passes must use distinct directories)"
            )));
        }
        image_ops::save_png(tensor, &out_dir.join(&name))?;
        let (dr, split) = by_name
            .get(&name)
            .map(|r| (r.dr, r.split))
            .unwrap_or((None, Split::Train));
        records.push(ManifestRecord {
            path: PathBuf::from(&name),
            quality: 0,
            dr,
            split,
        });
    }
    let manifest = DatasetManifest {
        records,
        source_id: format!("{}-restored", source.source_id),
        seed: source.seed,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
