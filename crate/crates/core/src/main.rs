use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use specseg::config::PipelineConfig;
use specseg::manifest::DatasetManifest;
use specseg::pipeline::{evaluate_run, write_report, Baseline, MaskSource, RunContext, RunLayout, StageReport};

#[derive(Parser)]
#[command(name = "specseg", version, about = "Unsupervised spectral segmentation of grayscale ultrasound images")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML). Defaults to <out>/config.toml when it
    /// exists, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset manifest (TSV: image, optional ground truth, optional features).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides `spectral.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Step1,
    Slic,
    Fz,
}

impl From<Source> for MaskSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Step1 => MaskSource::Step1,
            Source::Slic => MaskSource::Baseline(Baseline::Slic),
            Source::Fz => MaskSource::Baseline(Baseline::Fz),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Slic,
    Fz,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, blur and equalize every image.
    Preprocess,
    /// Step I: per-image eigensegments.
    Segment,
    /// Step II: dataset-wide clustering of segments into classes.
    Cluster {
        #[arg(long, value_enum, default_value = "step1")]
        from: Source,
    },
    /// CRF refinement of step-II masks.
    Postprocess {
        #[arg(long, value_enum, default_value = "step1")]
        from: Source,
    },
    /// Classical oversegmentation baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        /// SLIC: number of superpixels.
        #[arg(long)]
        n_superpixels: Option<usize>,
        /// SLIC: intensity/space trade-off.
        #[arg(long)]
        compactness: Option<f64>,
        /// SLIC: iterations.
        #[arg(long)]
        max_iters: Option<usize>,
        /// FZ: merge threshold constant.
        #[arg(long)]
        scale: Option<f64>,
        /// FZ: pre-blur sigma.
        #[arg(long)]
        sigma: Option<f64>,
        /// FZ: minimum component size.
        #[arg(long)]
        min_size: Option<usize>,
    },
    /// Scores every finished stage against the ground truth.
    Evaluate,
    /// All stages, then evaluation.
    Run,
}

fn load_config(g: &Global) -> specseg::Result<PipelineConfig> {
    let resolved = g.out.join("config.toml");
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None if resolved.exists() => PipelineConfig::load(&resolved)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.spectral.seed = seed;
    }
    Ok(cfg)
}

fn report(stages: &[StageReport]) -> bool {
    let mut ok = true;
    for s in stages {
        for f in &s.failures {
            error!("{}: {}: {}", s.stage, f.id, f.message);
            ok = false;
        }
    }
    ok
}

fn run(cli: Cli) -> specseg::Result<bool> {
    let g = &cli.global;
    let manifest_path = g
        .manifest
        .as_ref()
        .ok_or_else(|| specseg::Error::Config("--manifest is required".into()))?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let mut cfg = load_config(g)?;

    if let Command::Evaluate = cli.command {
        cfg.validate()?;
        let layout = RunLayout::new(&g.out);
        let r = evaluate_run(&layout, &manifest, &cfg)?;
        write_report(&layout, &r)?;
        print!("{}", r.to_table());
        return Ok(true);
    }

    if let Command::Baseline {
        method,
        n_superpixels,
        compactness,
        max_iters,
        scale,
        sigma,
        min_size,
    } = &cli.command
    {
        if *method == Method::Fz && (n_superpixels.is_some() || compactness.is_some() || max_iters.is_some()) {
            return Err(specseg::Error::Config("SLIC flags given with --method fz".into()));
        }
        if *method == Method::Slic && (scale.is_some() || sigma.is_some() || min_size.is_some()) {
            return Err(specseg::Error::Config("FZ flags given with --method slic".into()));
        }
        let s = &mut cfg.slic;
        s.n_superpixels = n_superpixels.unwrap_or(s.n_superpixels);
        s.compactness = compactness.unwrap_or(s.compactness);
        s.max_iters = max_iters.unwrap_or(s.max_iters);
        let f = &mut cfg.fz;
        f.scale = scale.unwrap_or(f.scale);
        f.sigma = sigma.unwrap_or(f.sigma);
        f.min_size = min_size.unwrap_or(f.min_size);
    }

    let ctx = RunContext::new(manifest, cfg, &g.out, g.jobs)?;
    let stages = match cli.command {
        Command::Preprocess => vec![ctx.preprocess()],
        Command::Segment => vec![ctx.segment()],
        Command::Cluster { from } => vec![ctx.cluster(from.into())],
        Command::Postprocess { from } => vec![ctx.postprocess(from.into())],
        Command::Baseline { method, .. } => vec![ctx.baseline(match method {
            Method::Slic => Baseline::Slic,
            Method::Fz => Baseline::Fz,
        })],
        Command::Run => {
            let summary = ctx.run_all()?;
            if let Some(r) = &summary.report {
                print!("{}", r.to_table());
            }
            summary.stages
        }
        Command::Evaluate => unreachable!(),
    };
    Ok(report(&stages))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPECSEG_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}
