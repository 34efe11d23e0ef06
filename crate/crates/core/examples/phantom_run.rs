//! Generates a phantom dataset and runs the full pipeline on it.
//!
//! cargo run --release --example phantom_run -- <out_dir> [n_images] [config.toml]

use std::time::Instant;

use specseg::config::PipelineConfig;
use specseg::manifest::DatasetManifest;
use specseg::phantom::{write_dataset, PhantomParams};
use specseg::pipeline::RunContext;

fn main() -> specseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPECSEG_LOG", "info")).init();
    let args: Vec<String> = std::env::args().collect();
    let out = std::path::PathBuf::from(args.get(1).map(String::as_str).unwrap_or("phantom_run"));
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut cfg = match args.get(3) {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.semantic.n_classes.get_or_insert(2);
    let manifest_path = write_dataset(out.join("data"), n, 0, &PhantomParams::default())?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let ctx = RunContext::new(manifest, cfg, out.join("run"), 0)?;
    let t = Instant::now();
    let summary = ctx.run_all()?;
    if let Some(r) = &summary.report {
        print!("{}", r.to_table());
    }
    println!("failed: {:?}", summary.failed_images());
    println!("elapsed: {:.1?}", t.elapsed());
    Ok(())
}
