//! Procedural retina-like test images and the paired clean/degraded corpus
//! used for desk-scale verification. Clean images form the high-quality
//! domain, their degraded counterparts the low-quality domain; the pairing is
//! recorded for PSNR evaluation but training never sees it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::degrade::DegradationProfile;
use super::image_ops::{denormalize, save_png, tensor_from_rgb, ImageTensor};
use super::{build_splits, DatasetManifest, ManifestRecord, Split};
use crate::config::derive_seed;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDataConfig {
    pub count: usize,
    pub size: usize,
    pub profile: DegradationProfile,
    pub seed: u64,
    /// Fraction of images given abnormality blobs (their DR label is 1).
    pub dr_fraction: f64,
    pub fractions: (f64, f64, f64),
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        Self {
            count: 100,
            size: 64,
            profile: DegradationProfile::moderate(),
            seed: 0,
            dr_fraction: 0.5,
            fractions: (0.6, 0.2, 0.2),
        }
    }
}

pub struct SynthCorpus {
    /// Combined manifest (clean + degraded) with splits assigned per pair.
    pub manifest_path: PathBuf,
    pub clean_manifest_path: PathBuf,
    pub degraded_manifest_path: PathBuf,
    /// JSON map from degraded record path to its clean counterpart.
    pub pairing_path: PathBuf,
    pub manifest: DatasetManifest,
}

/// Generate `count` clean/degraded pairs with manifests and the PSNR pairing
/// file under `out_dir`.
pub fn generate_corpus(cfg: &SynthDataConfig, out_dir: &Path) -> Result<SynthCorpus> {
    if cfg.count == 0 {
        return Err(Error::Config("synthetic corpus count must be >= 1".into()));
    }
    let clean_dir = out_dir.join("clean");
    let degraded_dir = out_dir.join("degraded");
    std::fs::create_dir_all(&clean_dir).map_err(|e| Error::io(&clean_dir, e))?;
    std::fs::create_dir_all(&degraded_dir).map_err(|e| Error::io(&degraded_dir, e))?;

    let mut records = Vec::with_capacity(cfg.count * 2);
    let mut pairing: BTreeMap<String, String> = BTreeMap::new();
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("image-{i}")));
        let has_lesions = rng.random_bool(cfg.dr_fraction);
        let clean = generate_fundus_like(cfg.size, &mut rng, has_lesions);
        // Quantize before degrading so PSNR references equal the saved files.
        let clean = tensor_from_rgb(&denormalize(&clean));
        let clean_name = format!("clean_{i:04}.png");
        save_png(&clean, &clean_dir.join(&clean_name))?;

        let spec = cfg
            .profile
            .sample(derive_seed(cfg.seed, &format!("degrade-{i}")));
        let degraded = spec.apply(&clean);
        let degraded_name = format!("deg_{i:04}.png");
        save_png(&degraded, &degraded_dir.join(&degraded_name))?;

        let dr = Some(if has_lesions { 1u8 } else { 0u8 });
        records.push(ManifestRecord {
            path: PathBuf::from("clean").join(&clean_name),
            quality: 1,
            dr,
            split: Split::Train,
        });
        records.push(ManifestRecord {
            path: PathBuf::from("degraded").join(&degraded_name),
            quality: 0,
            dr,
            split: Split::Train,
        });
        pairing.insert(
            format!("degraded/{degraded_name}"),
            format!("clean/{clean_name}"),
        );
    }

    // Assign splits per pair so held-out degraded images keep held-out
    // references.
    let pair_manifest = DatasetManifest {
        records: (0..cfg.count)
            .map(|i| ManifestRecord {
                path: PathBuf::from(format!("pair_{i:04}")),
                quality: 0,
                dr: None,
                split: Split::Train,
            })
            .collect(),
        source_id: "synth-pairs".into(),
        seed: cfg.seed,
        base_dir: out_dir.to_path_buf(),
    };
    let pair_splits = build_splits(&pair_manifest, cfg.fractions, cfg.seed, false)?;
    let mut split_of_pair: BTreeMap<usize, Split> = BTreeMap::new();
    for r in &pair_splits.records {
        let idx: usize = r
            .path
            .to_string_lossy()
            .trim_start_matches("pair_")
            .parse()
            .expect("pair index");
        split_of_pair.insert(idx, r.split);
    }
    for (i, chunk) in records.chunks_mut(2).enumerate() {
        for r in chunk {
            r.split = split_of_pair[&i];
        }
    }

    let manifest = DatasetManifest {
        records,
        source_id: "synth".into(),
        seed: cfg.seed,
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;

    let clean_manifest_path = out_dir.join("manifest_clean.jsonl");
    let degraded_manifest_path = out_dir.join("manifest_degraded.jsonl");
    DatasetManifest {
        records: manifest
            .records
            .iter()
            .filter(|r| r.quality == 1)
            .cloned()
            .collect(),
        source_id: "synth-clean".into(),
        seed: cfg.seed,
        base_dir: out_dir.to_path_buf(),
    }
    .save(&clean_manifest_path)?;
    DatasetManifest {
        records: manifest
            .records
            .iter()
            .filter(|r| r.quality == 0)
            .cloned()
            .collect(),
        source_id: "synth-degraded".into(),
        seed: cfg.seed,
        base_dir: out_dir.to_path_buf(),
    }
    .save(&degraded_manifest_path)?;

    let pairing_path = out_dir.join("pairing.json");
    let text = serde_json::to_string_pretty(&pairing).map_err(|e| Error::json(&pairing_path, e))?;
    std::fs::write(&pairing_path, text).map_err(|e| Error::io(&pairing_path, e))?;

    Ok(SynthCorpus {
        manifest_path,
        clean_manifest_path,
        degraded_manifest_path,
        pairing_path,
        manifest,
    })
}

pub fn load_pairing(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Draw a retina-like image: a warm circular field with radial shading, a
/// bright disc, dark branching vessels, and optionally small lesion blobs.
/// Intensities are built in [0, 1] per channel and mapped to [-1, 1].
pub fn generate_fundus_like(size: usize, rng: &mut ChaCha8Rng, lesions: bool) -> ImageTensor {
    let s = size as f64;
    let mut intensity = vec![[0.03f64, 0.02, 0.02]; size * size];

    let cx = s * (0.5 + rng.random_range(-0.03..0.03));
    let cy = s * (0.5 + rng.random_range(-0.03..0.03));
    let field_r = s * rng.random_range(0.42..0.47);
    let base = [
        rng.random_range(0.55..0.72),
        rng.random_range(0.30..0.44),
        rng.random_range(0.14..0.24),
    ];

    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let inside = 1.0 - smoothstep(field_r - 1.5, field_r + 0.5, d);
            if inside > 0.0 {
                let shade = 1.0 - 0.35 * (d / field_r).powi(2);
                let px = &mut intensity[y * size + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - inside) + base[c] * shade * inside;
                }
            }
        }
    }

    // Optic disc: a bright ellipse off-center.
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let disc_d = field_r * rng.random_range(0.45..0.65);
    let disc_x = cx + disc_d * theta.cos();
    let disc_y = cy + disc_d * 0.6 * theta.sin();
    let disc_r = field_r * rng.random_range(0.10..0.15);
    splat(
        &mut intensity,
        size,
        (disc_x, disc_y),
        disc_r,
        [0.95, 0.82, 0.55],
        0.85,
    );

    // Vessels: random walks out of the disc, darkening the field.
    let n_vessels = rng.random_range(5..9);
    for _ in 0..n_vessels {
        let mut px = disc_x;
        let mut py = disc_y;
        let mut dir = rng.random_range(0.0..std::f64::consts::TAU);
        let steps = (field_r * rng.random_range(1.2..2.0)) as usize;
        let mut width = s / 64.0 * rng.random_range(1.0..2.0);
        for _ in 0..steps {
            dir += rng.random_range(-0.25..0.25);
            px += dir.cos();
            py += dir.sin();
            let d_center = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            if d_center > field_r - 1.0 {
                break;
            }
            splat(
                &mut intensity,
                size,
                (px, py),
                width.max(0.7),
                [0.30, 0.08, 0.06],
                0.65,
            );
            width *= 0.998;
        }
    }

    if lesions {
        let n = rng.random_range(4..9);
        for _ in 0..n {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.15..0.85) * field_r;
            let lx = cx + dist * ang.cos();
            let ly = cy + dist * ang.sin();
            let r = s / 64.0 * rng.random_range(1.2..3.0);
            if rng.random_bool(0.5) {
                // Hemorrhage-like dark red blob.
                splat(&mut intensity, size, (lx, ly), r, [0.22, 0.03, 0.03], 0.9);
            } else {
                // Exudate-like bright blob.
                splat(&mut intensity, size, (lx, ly), r, [0.92, 0.88, 0.55], 0.9);
            }
        }
    }

    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        (2.0 * intensity[y * size + x][c] - 1.0) as f32
    })
}

/// Blend a soft disc of `color` into the buffer with the given opacity.
fn splat(
    buf: &mut [[f64; 3]],
    size: usize,
    center: (f64, f64),
    radius: f64,
    color: [f64; 3],
    opacity: f64,
) {
    let (cx, cy) = center;
    let lo_y = (cy - radius - 1.0).floor().max(0.0) as usize;
    let hi_y = ((cy + radius + 1.0).ceil() as usize).min(size.saturating_sub(1));
    let lo_x = (cx - radius - 1.0).floor().max(0.0) as usize;
    let hi_x = ((cx + radius + 1.0).ceil() as usize).min(size.saturating_sub(1));
    for y in lo_y..=hi_y {
        for x in lo_x..=hi_x {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let a = opacity * (1.0 - smoothstep(radius * 0.6, radius, d));
            if a > 0.0 {
                let px = &mut buf[y * size + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn corpus_has_expected_counts_and_pairing() {
        let dir = tempdir().unwrap();
        let cfg = SynthDataConfig {
            count: 10,
            size: 32,
            seed: 4,
            ..SynthDataConfig::default()
        };
        let corpus = generate_corpus(&cfg, dir.path()).unwrap();
        let (low, high) = corpus.manifest.quality_counts();
        assert_eq!((low, high), (10, 10));
        for record in &corpus.manifest.records {
            assert!(corpus.manifest.resolve(record).is_file());
        }
        let pairing = load_pairing(&corpus.pairing_path).unwrap();
        assert_eq!(pairing.len(), 10);
        for (deg, clean) in &pairing {
            assert!(dir.path().join(deg).is_file());
            assert!(dir.path().join(clean).is_file());
        }
        // Each degraded file maps to exactly one clean file (bijection).
        let clean_targets: std::collections::BTreeSet<_> = pairing.values().collect();
        assert_eq!(clean_targets.len(), 10);
    }

    #[test]
    fn pairs_share_split_and_dr_label() {
        let dir = tempdir().unwrap();
        let cfg = SynthDataConfig {
            count: 12,
            size: 32,
            seed: 9,
            ..SynthDataConfig::default()
        };
        let corpus = generate_corpus(&cfg, dir.path()).unwrap();
        for pair in corpus.manifest.records.chunks(2) {
            assert_eq!(pair[0].split, pair[1].split);
            assert_eq!(pair[0].dr, pair[1].dr);
            assert_ne!(pair[0].quality, pair[1].quality);
        }
    }

    #[test]
    fn neutral_profile_yields_identical_pixels() {
        let dir = tempdir().unwrap();
        let cfg = SynthDataConfig {
            count: 3,
            size: 32,
            seed: 2,
            profile: DegradationProfile::neutral(),
            ..SynthDataConfig::default()
        };
        let corpus = generate_corpus(&cfg, dir.path()).unwrap();
        let pairing = load_pairing(&corpus.pairing_path).unwrap();
        for (deg, clean) in &pairing {
            let a = std::fs::read(dir.path().join(deg)).unwrap();
            let b = std::fs::read(dir.path().join(clean)).unwrap();
            let da = image::load_from_memory(&a).unwrap().to_rgb8();
            let db = image::load_from_memory(&b).unwrap().to_rgb8();
            assert_eq!(da.as_raw(), db.as_raw());
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        let a = generate_fundus_like(32, &mut r1, true);
        let b = generate_fundus_like(32, &mut r2, true);
        assert_eq!(a, b);
    }
}
