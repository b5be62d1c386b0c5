// Desk-scale tuning harness: synthesizes a corpus, runs a 2-pass
// orchestration, and prints held-out PSNR per pass. Used to calibrate the
// acceptance configuration; not part of the test suite.

use std::path::PathBuf;

use fundusptl::config::RunConfig;
use fundusptl::data_pipeline::synth::{generate_corpus, SynthDataConfig};
use fundusptl::data_pipeline::{DatasetManifest, DegradationProfile, Split};
use fundusptl::evaluation::{psnr, psnr_stats};
use fundusptl::ptl_orchestrator::{cascade_restore_stages, load_cascade, run_passes, RunOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let count: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);

    let root = std::env::temp_dir().join(format!("ptl-tune-{seed}-{epochs}"));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();

    let synth = SynthDataConfig {
        count,
        size: 64,
        seed: 12345,
        profile: DegradationProfile::moderate(),
        ..SynthDataConfig::default()
    };
    let corpus = generate_corpus(&synth, &root.join("data")).unwrap();

    let mut cfg = RunConfig::desk_scale();
    cfg.seed = seed;
    cfg.n_passes = 2;
    cfg.training.epochs = epochs;
    cfg.training.lr_constant_epochs = epochs / 2;
    cfg.training.lr_decay_epochs = epochs - epochs / 2;
    cfg.training.warmup_exclusion = epochs / 4;
    cfg.manifest = corpus.manifest_path.clone();
    cfg.output_root = root.join("runs");

    let t0 = std::time::Instant::now();
    let record = run_passes(&cfg, &RunOptions::default()).unwrap();
    println!(
        "run took {:.1}s; best epochs: {:?}",
        t0.elapsed().as_secs_f64(),
        record
            .passes
            .iter()
            .map(|p| p.best_epoch)
            .collect::<Vec<_>>()
    );

    let manifest = DatasetManifest::load(&corpus.manifest_path).unwrap();
    let pairing = fundusptl::data_pipeline::synth::load_pairing(&corpus.pairing_path).unwrap();
    let checkpoints = load_cascade(&cfg.run_dir(), None).unwrap();
    let refs: Vec<_> = checkpoints.iter().collect();

    let mut base = Vec::new();
    let mut pass_vals: Vec<Vec<f64>> = vec![Vec::new(); checkpoints.len()];
    for r in manifest.records_in(Split::Test).filter(|r| r.quality == 0) {
        let key = r.path.to_string_lossy().into_owned();
        let clean: PathBuf = manifest.base_dir.join(&pairing[&key]);
        let reference = fundusptl::data_pipeline::image_ops::load_tensor(&clean, (64, 64)).unwrap();
        let degraded =
            fundusptl::data_pipeline::image_ops::load_tensor(&manifest.resolve(r), (64, 64))
                .unwrap();
        base.push(psnr(&reference, &degraded).unwrap());
        let stages = cascade_restore_stages(&refs, &degraded).unwrap();
        for (k, s) in stages.iter().enumerate() {
            pass_vals[k].push(psnr(&reference, s).unwrap());
        }
    }
    let stats = psnr_stats(&base);
    println!(
        "degraded baseline: {:?} dB (n={})",
        stats.mean_db, stats.count
    );
    for (k, vals) in pass_vals.iter().enumerate() {
        println!("pass {}: {:?} dB", k + 1, psnr_stats(vals).mean_db);
    }
}
