//! Command-line pipeline: dataset preparation, synthetic corpora,
//! multi-pass orchestration, cascaded restoration, evaluation, and latency
//! benchmarks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fundusptl::config::{InitMode, RunConfig};
use fundusptl::data_pipeline::image_ops::{load_tensor, save_png};
use fundusptl::data_pipeline::synth::{generate_corpus, SynthDataConfig};
use fundusptl::data_pipeline::{
    build_splits, load_manifest, DatasetManifest, DegradationProfile, Split,
};
use fundusptl::evaluation::{
    benchmark_inference, evaluate_run, render_comparison_grid, ClassifierTrainConfig, EvalMode,
    EvalSetup, GridRow,
};
use fundusptl::ptl_orchestrator::{
    cascade_restore_stages, load_cascade, run_passes, RunOptions, RunRecord,
};
use fundusptl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fundusptl",
    version,
    about = "Multi-pass blind fundus image restoration with progressive transfer learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Classifier,
    Psnr,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitModeArg {
    Ptl,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Build a split manifest from an image directory and its label file.
    Prepare {
        /// Directory holding the images.
        #[arg(long)]
        root: PathBuf,
        /// Label file: `filename,quality[,dr]` CSV with a header line.
        #[arg(long)]
        labels: PathBuf,
        /// Manifest file to write.
        #[arg(long)]
        out: PathBuf,
        /// Train,val,test fractions.
        #[arg(long, default_value = "0.7,0.15,0.15")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep low-quality records out of the test split.
        #[arg(long)]
        test_high_only: bool,
    },
    /// Generate a paired clean/degraded synthetic corpus with manifests.
    SynthData {
        /// Number of clean/degraded pairs.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Named profile (neutral|mild|moderate|heavy) or a JSON profile file.
        #[arg(long, default_value = "moderate")]
        degradation_profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "0.6,0.2,0.2")]
        fractions: String,
    },
    /// Write a config file template.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Start from the desk-scale preset (64x64, depth 6, 8 channels).
        #[arg(long)]
        desk_scale: bool,
    },
    /// Run the multi-pass training protocol.
    Orchestrate {
        /// Run configuration file; defaults come from the preset otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Stop after this pass, leaving a resumable run.
        #[arg(long)]
        stop_after_pass: Option<usize>,
        /// Use the desk-scale preset as the config baseline.
        #[arg(long)]
        desk_scale: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        output_root: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_passes: Option<usize>,
        #[arg(long)]
        init_mode: Option<InitModeArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Cascade-restore images with a finished run's checkpoints.
    Restore {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// Use the first k passes; defaults to all.
        #[arg(long)]
        passes: Option<usize>,
        /// Input image file or directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also render a comparison grid with the intermediate stages.
        #[arg(long)]
        grid: bool,
        /// Directory of reference images matched by filename for the grid.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Compare Original against each pass's restorations.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Degraded-to-clean pairing file (defaults to pairing.json beside the manifest).
        #[arg(long)]
        pairing: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        classifier_epochs: usize,
    },
    /// Measure per-image cascade latency.
    Bench {
        #[arg(long)]
        run: PathBuf,
        /// Image file or directory to time.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_fractions(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "fractions must be three comma-separated numbers, got {text:?}"
        )));
    }
    let mut vals = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("bad fraction {p:?}")))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

fn collect_images(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    matches!(
                        e.to_ascii_lowercase().as_str(),
                        "png" | "jpg" | "jpeg" | "bmp"
                    )
                })
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!(
            "no images found under {}",
            path.display()
        )));
    }
    Ok(files)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            root,
            labels,
            out,
            fractions,
            seed,
            test_high_only,
        } => {
            let fractions = parse_fractions(&fractions)?;
            let manifest = load_manifest(&root, &labels, seed)?;
            let split = build_splits(&manifest, fractions, seed, test_high_only)?;
            split.save(&out)?;
            let (low, high) = split.quality_counts();
            println!(
                "manifest written to {}: {} records ({low} low-quality, {high} high-quality)",
                out.display(),
                split.records.len()
            );
            for s in [Split::Train, Split::Val, Split::Test] {
                println!("  {s:?}: {}", split.records_in(s).count());
            }
            Ok(())
        }
        Command::SynthData {
            count,
            size,
            degradation_profile,
            seed,
            out,
            fractions,
        } => {
            let profile = resolve_profile(&degradation_profile)?;
            let cfg = SynthDataConfig {
                count,
                size,
                profile,
                seed,
                dr_fraction: 0.5,
                fractions: parse_fractions(&fractions)?,
            };
            let corpus = generate_corpus(&cfg, &out)?;
            let (low, high) = corpus.manifest.quality_counts();
            println!(
                "synthetic corpus under {}: {low} degraded + {high} clean images",
                out.display()
            );
            println!("  combined manifest: {}", corpus.manifest_path.display());
            println!("  pairing: {}", corpus.pairing_path.display());
            Ok(())
        }
        Command::InitConfig { out, desk_scale } => {
            let cfg = if desk_scale {
                RunConfig::desk_scale()
            } else {
                RunConfig::default()
            };
            cfg.save(&out)?;
            println!("config template written to {}", out.display());
            Ok(())
        }
        Command::Orchestrate {
            config,
            resume,
            stop_after_pass,
            desk_scale,
            manifest,
            output_root,
            run_id,
            seed,
            n_passes,
            init_mode,
            epochs,
        } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path)?,
                None if desk_scale => RunConfig::desk_scale(),
                None => RunConfig::default(),
            };
            if desk_scale && config.is_some() {
                // Overlay the preset's architecture and schedule on the file.
                let desk = RunConfig::desk_scale();
                cfg.network = desk.network;
                cfg.training = desk.training;
            }
            if let Some(m) = manifest {
                cfg.manifest = m;
            }
            // Precedence: flag, then FUNDUSPTL_OUTPUT_ROOT, then config file.
            if let Some(o) = output_root {
                cfg.output_root = o;
            } else if let Ok(env_root) = std::env::var("FUNDUSPTL_OUTPUT_ROOT") {
                if !env_root.is_empty() {
                    cfg.output_root = PathBuf::from(env_root);
                }
            }
            if let Some(id) = run_id {
                cfg.run_id = Some(id);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_passes {
                cfg.n_passes = n;
            }
            if let Some(m) = init_mode {
                cfg.init_mode = match m {
                    InitModeArg::Ptl => InitMode::Ptl,
                    InitModeArg::Random => InitMode::Random,
                };
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if !cfg.manifest.is_file() {
                return Err(Error::MissingFile(cfg.manifest.clone()));
            }
            let record = run_passes(
                &cfg,
                &RunOptions {
                    resume,
                    stop_after_pass,
                },
            )?;
            println!(
                "run {} [{}]: {} of {} passes complete",
                record.run_id,
                cfg.digest(),
                record.passes.len(),
                record.n_passes
            );
            for pass in &record.passes {
                println!(
                    "  pass {}: best epoch {} (validation adv1 {:.6}){}",
                    pass.pass_index,
                    pass.best_epoch,
                    pass.val_adv1,
                    if pass.fallback {
                        " [warmup fallback]"
                    } else {
                        ""
                    }
                );
            }
            Ok(())
        }
        Command::Restore {
            run,
            passes,
            input,
            out,
            grid,
            reference,
        } => {
            let checkpoints = load_cascade(&run, passes)?;
            let refs: Vec<_> = checkpoints.iter().collect();
            let size = checkpoints[0].meta.network.image_size;
            let inputs = collect_images(&input)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut rows = Vec::new();
            for path in &inputs {
                let tensor = load_tensor(path, (size, size))?;
                let stages = cascade_restore_stages(&refs, &tensor)?;
                let final_stage = stages.last().expect("nonempty cascade");
                let name = path.file_name().expect("input has a filename");
                save_png(final_stage, &out.join(name))?;
                if grid {
                    let reference_tensor = match &reference {
                        Some(dir) => {
                            let candidate = dir.join(name);
                            candidate
                                .is_file()
                                .then(|| load_tensor(&candidate, (size, size)))
                                .transpose()?
                        }
                        None => None,
                    };
                    rows.push(GridRow {
                        original: tensor,
                        passes: stages,
                        reference: reference_tensor,
                    });
                }
            }
            println!(
                "restored {} images through {} passes into {}",
                inputs.len(),
                checkpoints.len(),
                out.display()
            );
            if grid {
                let grid_path = out.join("grid.png");
                render_comparison_grid(&rows, &grid_path)?;
                println!("comparison grid: {}", grid_path.display());
            }
            Ok(())
        }
        Command::Evaluate {
            run,
            manifest,
            mode,
            seed,
            pairing,
            classifier_epochs,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let report = evaluate_run(EvalSetup {
                run_dir: &run,
                manifest: &manifest,
                mode: match mode {
                    ModeArg::Classifier => EvalMode::Classifier,
                    ModeArg::Psnr => EvalMode::Psnr,
                    ModeArg::Both => EvalMode::Both,
                },
                classifier: ClassifierTrainConfig {
                    epochs: classifier_epochs,
                    seed,
                    ..ClassifierTrainConfig::default()
                },
                pairing,
            })?;
            report.save_json(&run.join("report.json"))?;
            report.save_markdown(&run.join("report.md"))?;
            print!("{}", report.to_markdown());
            println!("report written to {}", run.join("report.json").display());
            Ok(())
        }
        Command::Bench { run, images, reps } => {
            let checkpoints = load_cascade(&run, None)?;
            let refs: Vec<_> = checkpoints.iter().collect();
            let size = checkpoints[0].meta.network.image_size;
            let paths = collect_images(&images)?;
            let mut tensors = Vec::with_capacity(paths.len());
            for p in &paths {
                tensors.push(load_tensor(p, (size, size))?);
            }
            let stats = benchmark_inference(&refs, &tensors, reps)?;
            let json = serde_json::to_string_pretty(&stats)
                .map_err(|e| Error::json(run.join("bench.json"), e))?;
            std::fs::write(run.join("bench.json"), &json)
                .map_err(|e| Error::io(run.join("bench.json"), e))?;
            println!("{json}");
            println!(
                "median full-cascade latency: {:.6} s/image over {} images x {} reps on {}",
                stats.full_cascade.median_s, stats.image_count, stats.repetitions, stats.hardware
            );
            // The run record's pass count should match the stage count.
            let record = RunRecord::load(&run)?;
            println!(
                "stages: {} (run has {} passes)",
                stats.per_stage.len(),
                record.passes.len()
            );
            Ok(())
        }
    }
}

fn resolve_profile(arg: &str) -> Result<DegradationProfile> {
    if let Some(profile) = DegradationProfile::by_name(arg) {
        return Ok(profile);
    }
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: DegradationProfile =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        return Ok(profile);
    }
    Err(Error::Config(format!(
        "unknown degradation profile {arg:?} (expected neutral|mild|moderate|heavy or a JSON file)"
    )))
}
