use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Relative weights of the cycle-consistency (lambda) and identity (beta) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub beta_ide: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            beta_ide: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cyc", self.lambda_cyc), ("beta_ide", self.beta_ide)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How fresh network weights are drawn.
///
/// `Uniform` draws every weight from U[-epsilon, epsilon] with one global
/// epsilon. `FanIn` uses the per-tensor bound 1/sqrt(fan_in), the usual
/// default for convolutional stacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitSpec {
    Uniform { epsilon: f64 },
    FanIn,
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        if let InitSpec::Uniform { epsilon } = self {
            if !epsilon.is_finite() || *epsilon <= 0.0 {
                return Err(Error::Config(format!(
                    "init epsilon must be > 0, got {epsilon}"
                )));
            }
        }
        Ok(())
    }
}

/// Whether each pass after the first starts from the previous pass's best
/// checkpoint or from a fresh random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Ptl,
    Random,
}

/// Architecture hyperparameters shared by every network in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Working resolution; images are resized to size x size.
    pub image_size: usize,
    pub in_channels: usize,
    /// Down-sampling (and up-sampling) blocks in the generator.
    pub gen_depth: usize,
    pub gen_base_channels: usize,
    pub disc_base_channels: usize,
    pub classifier_channels: [usize; 3],
    pub classifier_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            gen_depth: 7,
            gen_base_channels: 64,
            disc_base_channels: 64,
            classifier_channels: [16, 32, 64],
            classifier_hidden: 128,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gen_depth == 0 {
            return Err(Error::Config("gen_depth must be >= 1".into()));
        }
        if !self.image_size.is_multiple_of(1 << self.gen_depth) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 2^depth = {}",
                self.image_size,
                1 << self.gen_depth
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} below the discriminator minimum of 16",
                self.image_size
            )));
        }
        if self.in_channels == 0
            || self.gen_base_channels == 0
            || self.disc_base_channels == 0
            || self.classifier_hidden == 0
            || self.classifier_channels.contains(&0)
        {
            return Err(Error::Config("channel widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// One CycleGAN pass's training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Epochs held at `lr_initial` before decay starts.
    pub lr_constant_epochs: usize,
    /// Epochs over which the rate falls linearly to `lr_final`.
    pub lr_decay_epochs: usize,
    /// Epochs excluded from best-epoch selection.
    pub warmup_exclusion: usize,
    pub weights: LossWeights,
    pub init: InitSpec,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Apply the seeded augmentation pipeline to each training sample.
    pub augment: bool,
    /// Oversample the low-quality set to this many visits per epoch; visits
    /// beyond the base set are always augmented.
    pub train_lq_target: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 1,
            lr_initial: 2e-4,
            lr_final: 1e-5,
            lr_constant_epochs: 100,
            lr_decay_epochs: 100,
            warmup_exclusion: 100,
            weights: LossWeights::default(),
            init: InitSpec::FanIn,
            seed: 0,
            checkpoint_every: 1,
            augment: false,
            train_lq_target: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_initial.is_finite() && self.lr_final.is_finite()) {
            return Err(Error::Config("learning rates must be finite".into()));
        }
        if self.lr_final <= 0.0 || self.lr_initial < self.lr_final {
            return Err(Error::Config(format!(
                "need lr_initial >= lr_final > 0, got {} and {}",
                self.lr_initial, self.lr_final
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.weights.validate()?;
        self.init.validate()
    }
}

/// Per-pass hyperparameter overrides; unset fields inherit the base schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PassOverride {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_initial: Option<f64>,
    pub lr_final: Option<f64>,
    pub lr_constant_epochs: Option<usize>,
    pub lr_decay_epochs: Option<usize>,
    pub warmup_exclusion: Option<usize>,
    pub lambda_cyc: Option<f64>,
    pub beta_ide: Option<f64>,
}

impl PassOverride {
    fn apply(&self, base: &TrainingConfig) -> TrainingConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_initial {
            cfg.lr_initial = v;
        }
        if let Some(v) = self.lr_final {
            cfg.lr_final = v;
        }
        if let Some(v) = self.lr_constant_epochs {
            cfg.lr_constant_epochs = v;
        }
        if let Some(v) = self.lr_decay_epochs {
            cfg.lr_decay_epochs = v;
        }
        if let Some(v) = self.warmup_exclusion {
            cfg.warmup_exclusion = v;
        }
        if let Some(v) = self.lambda_cyc {
            cfg.weights.lambda_cyc = v;
        }
        if let Some(v) = self.beta_ide {
            cfg.weights.beta_ide = v;
        }
        cfg
    }
}

/// Full configuration of a multi-pass run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Stable identifier for the run directory; derived from the digest when unset.
    pub run_id: Option<String>,
    pub seed: u64,
    pub n_passes: usize,
    pub init_mode: InitMode,
    pub network: NetworkConfig,
    pub training: TrainingConfig,
    pub pass_overrides: BTreeMap<usize, PassOverride>,
    /// Restore the validation low-quality images between passes so pass-i
    /// validation scores pass-(i-1) outputs.
    pub restore_val_between_passes: bool,
    /// Manifest of the source dataset (written by `prepare` or `synth-data`).
    pub manifest: PathBuf,
    /// Directory that holds run directories.
    pub output_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            seed: 0,
            n_passes: 3,
            init_mode: InitMode::Ptl,
            network: NetworkConfig::default(),
            training: TrainingConfig::default(),
            pass_overrides: BTreeMap::new(),
            restore_val_between_passes: true,
            manifest: PathBuf::from("manifest.jsonl"),
            output_root: PathBuf::from("runs"),
        }
    }
}

/// The digest covers every field that affects numeric behaviour; paths and the
/// run id are excluded so artifacts stay portable across hosts.
#[derive(Serialize)]
struct DigestView<'a> {
    seed: u64,
    n_passes: usize,
    init_mode: &'a InitMode,
    network: &'a NetworkConfig,
    training: &'a TrainingConfig,
    pass_overrides: &'a BTreeMap<usize, PassOverride>,
    restore_val_between_passes: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_passes == 0 {
            return Err(Error::Config("n_passes must be >= 1".into()));
        }
        self.network.validate()?;
        self.training.validate()?;
        for (pass, ov) in &self.pass_overrides {
            self.training_for_pass(*pass).validate().map_err(|e| {
                Error::Config(format!("pass {pass} override {ov:?} is invalid: {e}"))
            })?;
        }
        Ok(())
    }

    /// Effective schedule for one pass: base config, overrides applied, and the
    /// pass-specific RNG seed. Deriving the seed per pass keeps a resumed pass
    /// identical to the uninterrupted one.
    pub fn training_for_pass(&self, pass_index: usize) -> TrainingConfig {
        let mut cfg = match self.pass_overrides.get(&pass_index) {
            Some(ov) => ov.apply(&self.training),
            None => self.training.clone(),
        };
        cfg.seed = derive_seed(self.seed, &format!("pass-{pass_index}"));
        cfg
    }

    /// Hex SHA-256 of the canonical serialized config (numeric fields only).
    pub fn digest(&self) -> String {
        let view = DigestView {
            seed: self.seed,
            n_passes: self.n_passes,
            init_mode: &self.init_mode,
            network: &self.network,
            training: &self.training,
            pass_overrides: &self.pass_overrides,
            restore_val_between_passes: self.restore_val_between_passes,
        };
        let canonical = serde_json::to_string(&view).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_digest(&hasher.finalize())
    }

    pub fn run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => format!("run-{}", &self.digest()[..12]),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(self.run_id())
    }

    /// Small preset that trains in minutes on a laptop CPU: 64x64 images,
    /// depth-6 generator, 8 base channels, short two-phase schedule.
    pub fn desk_scale() -> Self {
        Self {
            network: NetworkConfig {
                image_size: 64,
                gen_depth: 6,
                gen_base_channels: 8,
                disc_base_channels: 8,
                ..NetworkConfig::default()
            },
            training: TrainingConfig {
                epochs: 16,
                lr_constant_epochs: 8,
                lr_decay_epochs: 8,
                warmup_exclusion: 4,
                ..TrainingConfig::default()
            },
            n_passes: 2,
            ..Self::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Deterministic seed for a named substream of `base`.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let bytes = hasher.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
