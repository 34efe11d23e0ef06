//! Dataset runs: the per-image and dataset-level stages over a manifest, all
//! persisted under one run directory, and evaluation of a finished run.
//!
//! ```text
//! <out>/config.toml                  resolved configuration, written first
//! <out>/cropped/<id>.dst             cropped input, the default CRF guide
//! <out>/preprocessed/<id>.dst|.png   cropped, enhanced image
//! <out>/masks_step1/<id>.png|.txt    step-I oversegmentation + legend
//! <out>/eigensegments/<id>.dst       eigenvectors [n, n_h, n_w]
//! <out>/eigensegments/<id>.values.dst
//! <out>/segments/<id>.tsv            step-II segment records
//! <out>/segments/classes.tsv
//! <out>/crop_features/<id>__seg<label>.dst   (extractor output, read)
//! <out>/masks_step2/<id>.png|.txt    semantic masks
//! <out>/masks_final/<id>.png|.txt    after CRF refinement
//! <out>/masks_slic/, masks_fz/       baselines, with matching _slic/_fz
//!                                    step2/final directories
//! <out>/reports/report.json|.txt
//! <out>/cache/                       stage keys for resuming
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::affinity::build_affinity;
use crate::baselines::{felzenszwalb, slic};
use crate::config::{CrfGuide, CropFeatures, Matching, PipelineConfig};
use crate::error::{Error, Result};
use crate::gray::{load_image, multiple_crop_window, GrayImage};
use crate::kmeans::KMeansParams;
use crate::manifest::{DatasetManifest, ManifestEntry};
use crate::mask::SegmentationMask;
use crate::metrics::{
    boundary_recall, dice, hungarian_match, label_consistency, majority_match, mean_std,
    undersegmentation_error, LabelConsistency, MatchMethod, MatchResult,
};
use crate::postprocess::{crf_refine, upscale_mask};
use crate::preprocess::{gaussian_blur, preprocess};
use crate::semantic::{
    cluster_dataset, extract_segments, fuse, histogram_features, position_embedding,
    records_to_tsv, render_semantic_mask, shape_embedding, SegmentRecord,
};
use crate::spectral::segment_affinity;
use crate::tensor::{read_feature_map, read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Baseline {
    Slic,
    Fz,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Slic => "slic",
            Baseline::Fz => "fz",
        }
    }
}

/// Which per-image partition feeds step II.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Step1,
    Baseline(Baseline),
}

impl MaskSource {
    /// Stage name of the partition itself.
    pub fn stage(self) -> &'static str {
        match self {
            MaskSource::Step1 => "step1",
            MaskSource::Baseline(b) => b.name(),
        }
    }

    fn suffix(self) -> String {
        match self {
            MaskSource::Step1 => String::new(),
            MaskSource::Baseline(b) => format!("_{}", b.name()),
        }
    }

    pub fn step2(self) -> String {
        format!("step2{}", self.suffix())
    }

    pub fn final_stage(self) -> String {
        format!("final{}", self.suffix())
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn preprocessed(&self, id: &str) -> PathBuf {
        self.root.join("preprocessed").join(format!("{id}.dst"))
    }

    /// Input image after the patch-multiple crop, before any filtering.
    pub fn cropped(&self, id: &str) -> PathBuf {
        self.root.join("cropped").join(format!("{id}.dst"))
    }

    pub fn preview(&self, id: &str) -> PathBuf {
        self.root.join("preprocessed").join(format!("{id}.png"))
    }

    /// Mask of `stage` (`step1`, `step2`, `final`, `slic`, `step2_slic`, ...).
    pub fn mask(&self, stage: &str, id: &str) -> PathBuf {
        self.root.join(format!("masks_{stage}")).join(format!("{id}.png"))
    }

    pub fn eigenvectors(&self, id: &str) -> PathBuf {
        self.root.join("eigensegments").join(format!("{id}.dst"))
    }

    pub fn eigenvalues(&self, id: &str) -> PathBuf {
        self.root.join("eigensegments").join(format!("{id}.values.dst"))
    }

    pub fn segments_dir(&self, source: MaskSource) -> PathBuf {
        self.root.join(format!("segments{}", source.suffix()))
    }

    pub fn segments(&self, source: MaskSource, id: &str) -> PathBuf {
        self.segments_dir(source).join(format!("{id}.tsv"))
    }

    pub fn crop_feature(&self, id: &str, label: u32) -> PathBuf {
        self.root.join("crop_features").join(format!("{id}__seg{label}.dst"))
    }

    pub fn mask_feature(&self, id: &str, label: u32) -> PathBuf {
        self.root.join("crop_features").join(format!("{id}__seg{label}.mask.dst"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("reports").join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("reports").join("report.txt")
    }

    fn cache_key(&self, stage: &str, id: &str) -> PathBuf {
        self.root.join("cache").join(stage).join(format!("{id}.key"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn save_mask(mask: &SegmentationMask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    mask.save_with_legend(path)
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    GrayImage::from_tensor(&read_tensor(path)?)
}

/// Length-prefixed SHA-256 over several byte strings.
#[derive(Default)]
struct KeyHasher(Sha256);

impl KeyHasher {
    fn part(mut self, bytes: &[u8]) -> Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

fn toml_of<T: Serialize>(v: &T) -> Vec<u8> {
    toml::to_string(v).expect("config sections serialize").into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFailure {
    pub id: String,
    pub message: String,
}

/// Outcome of one stage over the dataset.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub stage: String,
    pub computed: Vec<String>,
    pub cached: Vec<String>,
    pub failures: Vec<ImageFailure>,
}

impl StageReport {
    fn new(stage: impl Into<String>) -> Self {
        StageReport {
            stage: stage.into(),
            ..Default::default()
        }
    }

    pub fn succeeded(&self) -> BTreeSet<String> {
        self.computed.iter().chain(&self.cached).cloned().collect()
    }

    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, id: &str, outcome: Result<bool>) {
        match outcome {
            Ok(true) => self.computed.push(id.to_string()),
            Ok(false) => self.cached.push(id.to_string()),
            Err(e) => {
                warn!("{}: {id}: {e}", self.stage);
                self.failures.push(ImageFailure {
                    id: id.to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
}

/// Manifest, resolved configuration and run directory.
pub struct RunContext {
    pub manifest: DatasetManifest,
    pub config: PipelineConfig,
    pub layout: RunLayout,
    pool: rayon::ThreadPool,
}

impl RunContext {
    /// Validates the configuration and writes it to `<out>/config.toml`
    /// before anything else. `jobs == 0` uses one worker per core.
    pub fn new(
        manifest: DatasetManifest,
        config: PipelineConfig,
        out: impl Into<PathBuf>,
        jobs: usize,
    ) -> Result<Self> {
        config.validate()?;
        let layout = RunLayout::new(out);
        write_text(&layout.config(), &config.to_toml_string())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Run(format!("worker pool: {e}")))?;
        Ok(RunContext {
            manifest,
            config,
            layout,
            pool,
        })
    }

    /// Runs `f` on every manifest entry in the worker pool; results keep
    /// manifest order.
    fn per_image(&self, stage: &str, f: impl Fn(&ManifestEntry) -> Result<bool> + Sync) -> StageReport {
        let outcomes: Vec<Result<bool>> = self
            .pool
            .install(|| self.manifest.entries.par_iter().map(&f).collect());
        let mut report = StageReport::new(stage);
        for (e, o) in self.manifest.entries.iter().zip(outcomes) {
            report.record(&e.id, o);
        }
        info!(
            "{stage}: {} computed, {} cached, {} failed",
            report.computed.len(),
            report.cached.len(),
            report.failures.len()
        );
        report
    }

    /// True when the stored key matches and every output exists.
    fn is_cached(&self, stage: &str, id: &str, key: &str, outputs: &[PathBuf]) -> bool {
        let path = self.layout.cache_key(stage, id);
        fs::read_to_string(path).is_ok_and(|k| k == key) && outputs.iter().all(|p| p.exists())
    }

    fn store_key(&self, stage: &str, id: &str, key: &str) -> Result<()> {
        write_text(&self.layout.cache_key(stage, id), key)
    }

    pub fn preprocess(&self) -> StageReport {
        self.per_image("preprocess", |e| self.preprocess_one(e))
    }

    fn preprocess_one(&self, e: &ManifestEntry) -> Result<bool> {
        let key = KeyHasher::default()
            .part(&read_bytes(&e.image_path)?)
            .part(&self.config.patch_size.to_le_bytes())
            .part(&toml_of(&self.config.preprocess))
            .finish();
        let out = self.layout.preprocessed(&e.id);
        let preview = self.layout.preview(&e.id);
        let cropped_path = self.layout.cropped(&e.id);
        if self.is_cached("preprocess", &e.id, &key, &[out.clone(), preview.clone(), cropped_path.clone()]) {
            return Ok(false);
        }
        let img = load_image(&e.image_path)?;
        if img.width() % self.config.patch_size != 0 || img.height() % self.config.patch_size != 0 {
            warn!(
                "{}: {}x{} is not a multiple of {}, center-cropping",
                e.id,
                img.width(),
                img.height(),
                self.config.patch_size
            );
        }
        let cropped = img.crop_to_multiple(self.config.patch_size)?;
        let pre = preprocess(&cropped, &self.config.preprocess);
        ensure_parent(&cropped_path)?;
        write_tensor(&cropped.to_tensor(), &cropped_path)?;
        ensure_parent(&out)?;
        write_tensor(&pre.to_tensor(), &out)?;
        pre.save_png(&preview)?;
        self.store_key("preprocess", &e.id, &key)?;
        Ok(true)
    }

    pub fn segment(&self) -> StageReport {
        self.per_image("segment", |e| self.segment_one(e))
    }

    fn segment_one(&self, e: &ManifestEntry) -> Result<bool> {
        let cfg = &self.config;
        let pre_path = self.layout.preprocessed(&e.id);
        if !pre_path.exists() {
            return Err(Error::Run(format!(
                "{} is missing; run the preprocess stage first",
                pre_path.display()
            )));
        }
        let feature_path = e.feature_path.as_ref().filter(|_| cfg.affinity.use_features);
        if let Some(p) = feature_path.filter(|p| !p.exists()) {
            return Err(Error::MissingFeatures {
                path: p.clone(),
                kind: "dense",
            });
        }
        let mut key = KeyHasher::default()
            .part(&read_bytes(&pre_path)?)
            .part(&cfg.patch_size.to_le_bytes())
            .part(&toml_of(&cfg.affinity))
            .part(&toml_of(&cfg.spectral));
        if let Some(p) = feature_path {
            key = key.part(&read_bytes(p)?);
        }
        let key = key.finish();
        let outputs = [
            self.layout.mask("step1", &e.id),
            self.layout.eigenvectors(&e.id),
            self.layout.eigenvalues(&e.id),
        ];
        if self.is_cached("segment", &e.id, &key, &outputs) {
            return Ok(false);
        }
        let pre = load_gray(&pre_path)?;
        let features = feature_path.map(read_feature_map).transpose()?;
        let k = cfg.patch_size;
        let w = build_affinity(&pre, k, features.as_ref(), &cfg.affinity)?;
        let grid = (pre.height() / k, pre.width() / k);
        let (dec, grid_mask) = segment_affinity(
            &w,
            cfg.spectral.n_eigensegments,
            grid,
            cfg.spectral.solver,
            cfg.spectral.seed,
            cfg.spectral.kmeans_restarts,
        )?;
        let full = upscale_mask(&grid_mask, pre.width(), pre.height())?;
        save_mask(&full, &outputs[0])?;

        let n_eig = dec.eigenvalues.len();
        let mut vecs = Vec::with_capacity(n_eig * grid.0 * grid.1);
        for c in 0..n_eig {
            vecs.extend(dec.eigenvectors.column(c).iter().map(|&v| v as f32));
        }
        ensure_parent(&outputs[1])?;
        write_tensor(&Tensor::new(vec![n_eig, grid.0, grid.1], vecs)?, &outputs[1])?;
        let vals = dec.eigenvalues.iter().map(|&v| v as f32).collect();
        write_tensor(&Tensor::new(vec![n_eig], vals)?, &outputs[2])?;
        self.store_key("segment", &e.id, &key)?;
        Ok(true)
    }

    pub fn baseline(&self, method: Baseline) -> StageReport {
        self.per_image(method.name(), |e| self.baseline_one(e, method))
    }

    fn baseline_one(&self, e: &ManifestEntry, method: Baseline) -> Result<bool> {
        let pre_path = self.layout.preprocessed(&e.id);
        let params = match method {
            Baseline::Slic => toml_of(&self.config.slic),
            Baseline::Fz => toml_of(&self.config.fz),
        };
        let key = KeyHasher::default()
            .part(&read_bytes(&pre_path)?)
            .part(&params)
            .finish();
        let out = self.layout.mask(method.name(), &e.id);
        if self.is_cached(method.name(), &e.id, &key, std::slice::from_ref(&out)) {
            return Ok(false);
        }
        let pre = load_gray(&pre_path)?;
        let mask = match method {
            Baseline::Slic => slic(&pre, &self.config.slic)?,
            Baseline::Fz => felzenszwalb(&pre, &self.config.fz)?,
        };
        save_mask(&mask, &out)?;
        self.store_key(method.name(), &e.id, &key)?;
        Ok(true)
    }

    /// Step II over every image whose `source` partition is available.
    pub fn cluster(&self, source: MaskSource) -> StageReport {
        let stage = source.step2();
        let mut report = StageReport::new(stage.clone());
        match self.cluster_inner(source, &mut report) {
            Ok(()) => {}
            Err(e) => {
                warn!("{stage}: {e}");
                let failed: BTreeSet<String> =
                    report.failures.iter().map(|f| f.id.clone()).collect();
                report.computed.clear();
                report.cached.clear();
                for entry in &self.manifest.entries {
                    if !failed.contains(&entry.id) {
                        report.failures.push(ImageFailure {
                            id: entry.id.clone(),
                            message: e.to_string(),
                        });
                    }
                }
            }
        }
        report
    }

    fn cluster_inner(&self, source: MaskSource, report: &mut StageReport) -> Result<()> {
        let cfg = &self.config;
        let sem = &cfg.semantic;
        let n_classes = sem.n_classes.ok_or_else(|| {
            Error::Config("semantic.n_classes must be set for the clustering stage".into())
        })?;
        let stage = source.step2();

        struct Loaded {
            id: String,
            pre: GrayImage,
            records: Vec<SegmentRecord>,
            descriptors: Vec<Vec<f64>>,
            key_bytes: Vec<Vec<u8>>,
        }
        let load = |e: &ManifestEntry| -> Result<Loaded> {
            let pre_path = self.layout.preprocessed(&e.id);
            let mask_path = self.layout.mask(source.stage(), &e.id);
            let mut key_bytes = vec![
                e.id.clone().into_bytes(),
                read_bytes(&pre_path)?,
                read_bytes(&mask_path)?,
            ];
            let pre = load_gray(&pre_path)?;
            let mask = SegmentationMask::load_png(&mask_path)?;
            let records = extract_segments(&e.id, &mask, &pre, sem.split_components)?;
            // written first: the crop extractor reads these
            write_text(&self.layout.segments(source, &e.id), &records_to_tsv(&records))?;
            let mut descriptors = Vec::with_capacity(records.len());
            for r in &records {
                let (f_image, f_mask) = match sem.crop_features {
                    CropFeatures::Histogram => (histogram_features(r, &pre), shape_embedding(r)),
                    CropFeatures::Sidecar => {
                        let crop = self.layout.crop_feature(&e.id, r.segment_label);
                        if !crop.exists() {
                            return Err(Error::MissingFeatures {
                                path: crop,
                                kind: "crops",
                            });
                        }
                        key_bytes.push(read_bytes(&crop)?);
                        let f_image = flat_features(&read_tensor(&crop)?);
                        let mask_feat = self.layout.mask_feature(&e.id, r.segment_label);
                        let f_mask = if mask_feat.exists() {
                            key_bytes.push(read_bytes(&mask_feat)?);
                            flat_features(&read_tensor(&mask_feat)?)
                        } else {
                            shape_embedding(r)
                        };
                        (f_image, f_mask)
                    }
                };
                let d = fuse(
                    Some(&f_image),
                    &f_mask,
                    &position_embedding(r),
                    sem.lambda_mask,
                    sem.lambda_pos,
                )?;
                descriptors.push(d.fused);
            }
            Ok(Loaded {
                id: e.id.clone(),
                pre,
                records,
                descriptors,
                key_bytes,
            })
        };
        let loaded: Vec<Result<Loaded>> = self
            .pool
            .install(|| self.manifest.entries.par_iter().map(load).collect());
        let mut images = Vec::new();
        for (e, l) in self.manifest.entries.iter().zip(loaded) {
            match l {
                Ok(l) => images.push(l),
                Err(err) => report.record(&e.id, Err(err)),
            }
        }
        if images.is_empty() {
            return Err(Error::Run(format!("{stage}: no image has its inputs ready")));
        }

        let mut key = KeyHasher::default()
            .part(&toml_of(sem))
            .part(&cfg.spectral.seed.to_le_bytes());
        for l in &images {
            for b in &l.key_bytes {
                key = key.part(b);
            }
        }
        let key = key.finish();
        let outputs: Vec<PathBuf> = images.iter().map(|l| self.layout.mask(&stage, &l.id)).collect();
        if self.is_cached("cluster", &stage, &key, &outputs) {
            images.iter().for_each(|l| report.record(&l.id, Ok(false)));
            return Ok(());
        }

        let all: Vec<Vec<f64>> = images.iter().flat_map(|l| l.descriptors.iter().cloned()).collect();
        let params = KMeansParams {
            n_init: sem.kmeans_restarts,
            ..KMeansParams::default()
        };
        let classes = cluster_dataset(&all, n_classes, cfg.spectral.seed, &params)?;
        let mut offset = 0;
        let mut listing = String::from("image\tlabel\tclass\n");
        for (l, out) in images.iter().zip(&outputs) {
            let n = l.records.len();
            let cls = &classes[offset..offset + n];
            offset += n;
            for (r, c) in l.records.iter().zip(cls) {
                let _ = writeln!(listing, "{}\t{}\t{c}", l.id, r.segment_label);
            }
            let refs: Vec<&SegmentRecord> = l.records.iter().collect();
            let (w, h) = l.pre.dims();
            let mask = render_semantic_mask(&refs, cls, w, h, n_classes, 0)?;
            save_mask(&mask, out)?;
        }
        write_text(&self.layout.segments_dir(source).join("classes.tsv"), &listing)?;
        self.store_key("cluster", &stage, &key)?;
        images.iter().for_each(|l| report.record(&l.id, Ok(true)));
        Ok(())
    }

    /// CRF refinement (or a plain copy when disabled) of step-II masks.
    pub fn postprocess(&self, source: MaskSource) -> StageReport {
        self.per_image(&source.final_stage(), |e| self.postprocess_one(e, source))
    }

    fn postprocess_one(&self, e: &ManifestEntry, source: MaskSource) -> Result<bool> {
        let guide_path = match self.config.crf.guide {
            CrfGuide::Original => self.layout.cropped(&e.id),
            CrfGuide::Preprocessed => self.layout.preprocessed(&e.id),
        };
        let in_path = self.layout.mask(&source.step2(), &e.id);
        let key = KeyHasher::default()
            .part(&read_bytes(&guide_path)?)
            .part(&read_bytes(&in_path)?)
            .part(&toml_of(&self.config.crf))
            .finish();
        let stage = source.final_stage();
        let out = self.layout.mask(&stage, &e.id);
        if self.is_cached(&stage, &e.id, &key, std::slice::from_ref(&out)) {
            return Ok(false);
        }
        let mask = SegmentationMask::load_png(&in_path)?;
        let refined = if self.config.crf.enabled {
            let guide = gaussian_blur(&load_gray(&guide_path)?, self.config.crf.guide_sigma);
            crf_refine(&mask, &guide, &self.config.crf)?
        } else {
            mask
        };
        save_mask(&refined, &out)?;
        self.store_key(&stage, &e.id, &key)?;
        Ok(true)
    }

    /// Every stage in order, then evaluation when ground truth exists.
    pub fn run_all(&self) -> Result<RunSummary> {
        let mut stages = vec![self.preprocess(), self.segment()];
        stages.push(self.cluster(MaskSource::Step1));
        stages.push(self.postprocess(MaskSource::Step1));
        let report = if self.manifest.entries.iter().any(|e| e.gt_mask_path.is_some()) {
            let r = evaluate_run(&self.layout, &self.manifest, &self.config)?;
            write_report(&self.layout, &r)?;
            Some(r)
        } else {
            info!("no ground truth in the manifest; evaluation skipped");
            None
        };
        Ok(RunSummary { stages, report })
    }
}

fn flat_features(t: &Tensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageReport>,
    pub report: Option<DatasetReport>,
}

impl RunSummary {
    /// Ids that failed in any stage, in first-failure order.
    pub fn failed_images(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.stages
            .iter()
            .flat_map(|s| &s.failures)
            .filter(|f| seen.insert(f.id.clone()))
            .map(|f| f.id.clone())
            .collect()
    }

    pub fn is_ok(&self) -> bool {
        self.stages.iter().all(StageReport::is_ok)
    }
}

/// Scores of one mask against the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskScores {
    /// DICE per ground-truth class present in the image.
    pub class_dice: BTreeMap<u32, f64>,
    /// Mean over the non-background classes, when there are any.
    pub mean_dice: Option<f64>,
    pub ue: f64,
    pub br: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScores {
    pub id: String,
    pub stages: BTreeMap<String, MaskScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSummary {
    pub images: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Mean DICE per ground-truth class over the images containing it.
    pub class_dice: BTreeMap<u32, f64>,
    pub ue_mean: f64,
    pub ue_std: f64,
    pub br_mean: f64,
    pub br_std: f64,
    /// Semantic stages only.
    pub lc: Option<LabelConsistency>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub matching: MatchMethod,
    pub boundary_distance: usize,
    pub background_label: Option<u32>,
    pub stages: BTreeMap<String, StageSummary>,
    pub images: Vec<ImageScores>,
    /// Images left out for lack of ground truth.
    pub skipped: Vec<String>,
}

fn foreground_mean(class_dice: &BTreeMap<u32, f64>, background: Option<u32>) -> Option<f64> {
    let v: Vec<f64> = class_dice
        .iter()
        .filter(|(g, _)| Some(**g) != background)
        .map(|(_, d)| *d)
        .collect();
    (!v.is_empty()).then(|| mean_std(&v).0)
}

/// For every ground-truth class, the best DICE any single segment reaches.
fn best_segment_dice(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<BTreeMap<u32, f64>> {
    let segments = pred.distinct();
    let mut out = BTreeMap::new();
    for g in gt.distinct() {
        let gb = gt.binary(g);
        let mut best: f64 = 0.0;
        for &s in &segments {
            best = best.max(dice(&pred.binary(s), &gb)?);
        }
        out.insert(g, best);
    }
    Ok(out)
}

fn semantic_stage(stage: &str) -> bool {
    stage.starts_with("step2") || stage.starts_with("final")
}

const STAGE_ORDER: [&str; 9] = [
    "step1", "step2", "final", "slic", "step2_slic", "final_slic", "fz", "step2_fz", "final_fz",
];

/// Scores every mask stage present in the run directory. Step-I style
/// partitions (step1 and baselines) get the best single-segment DICE per
/// class; semantic stages are matched to the ground truth and also get
/// label consistency.
pub fn evaluate_run(
    layout: &RunLayout,
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
) -> Result<DatasetReport> {
    let ev = &cfg.eval;
    let stages: Vec<&str> = STAGE_ORDER
        .iter()
        .copied()
        .filter(|s| manifest.entries.iter().any(|e| layout.mask(s, &e.id).exists()))
        .collect();
    if stages.is_empty() {
        return Err(Error::Run(format!(
            "no masks found under {}",
            layout.root().display()
        )));
    }
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut matches: BTreeMap<&str, Vec<MatchResult>> = BTreeMap::new();
    for e in &manifest.entries {
        let Some(gt_path) = &e.gt_mask_path else {
            warn!("{}: no ground truth, metrics skipped", e.id);
            skipped.push(e.id.clone());
            continue;
        };
        let gt_full = SegmentationMask::load_png(gt_path)?;
        let (x0, y0, w, h) = multiple_crop_window(gt_full.width(), gt_full.height(), cfg.patch_size)?;
        let gt = gt_full.crop(x0, y0, w, h)?;
        let mut scores = BTreeMap::new();
        for &stage in &stages {
            let path = layout.mask(stage, &e.id);
            if !path.exists() {
                warn!("{}: {} missing, not scored", e.id, path.display());
                continue;
            }
            let pred = SegmentationMask::load_png(&path)?;
            if pred.dims() != gt.dims() {
                return Err(Error::Shape(format!(
                    "{}: {stage} mask is {:?}, cropped ground truth is {:?}",
                    e.id,
                    pred.dims(),
                    gt.dims()
                )));
            }
            let class_dice = if semantic_stage(stage) {
                let m = match ev.matching {
                    Matching::Hungarian => hungarian_match(&pred, &gt)?,
                    Matching::Majority => majority_match(&pred, &gt)?,
                };
                let d = m.class_dice.clone();
                matches.entry(stage).or_default().push(m);
                d
            } else {
                best_segment_dice(&pred, &gt)?
            };
            let mean_dice = foreground_mean(&class_dice, ev.background_label);
            scores.insert(
                stage.to_string(),
                MaskScores {
                    class_dice,
                    mean_dice,
                    ue: undersegmentation_error(&pred, &gt)?,
                    br: boundary_recall(&pred, &gt, ev.boundary_distance)?,
                },
            );
        }
        images.push(ImageScores {
            id: e.id.clone(),
            stages: scores,
        });
    }
    if images.is_empty() {
        return Err(Error::Run("no manifest entry has a ground-truth mask".into()));
    }

    let mut summaries = BTreeMap::new();
    for &stage in &stages {
        let per: Vec<&MaskScores> = images.iter().filter_map(|i| i.stages.get(stage)).collect();
        if per.is_empty() {
            continue;
        }
        let dices: Vec<f64> = per.iter().filter_map(|s| s.mean_dice).collect();
        let (dice_mean, dice_std) = mean_std(&dices);
        let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for s in &per {
            for (g, d) in &s.class_dice {
                by_class.entry(*g).or_default().push(*d);
            }
        }
        let (ue_mean, ue_std) = mean_std(&per.iter().map(|s| s.ue).collect::<Vec<_>>());
        let (br_mean, br_std) = mean_std(&per.iter().map(|s| s.br).collect::<Vec<_>>());
        let lc = matches
            .get(stage)
            .map(|m| label_consistency(m, ev.background_label))
            .transpose()?;
        summaries.insert(
            stage.to_string(),
            StageSummary {
                images: per.len(),
                dice_mean,
                dice_std,
                class_dice: by_class.into_iter().map(|(g, v)| (g, mean_std(&v).0)).collect(),
                ue_mean,
                ue_std,
                br_mean,
                br_std,
                lc,
            },
        );
    }
    Ok(DatasetReport {
        matching: match ev.matching {
            Matching::Hungarian => MatchMethod::Hungarian,
            Matching::Majority => MatchMethod::Majority,
        },
        boundary_distance: ev.boundary_distance,
        background_label: ev.background_label,
        stages: summaries,
        images,
        skipped,
    })
}

impl DatasetReport {
    /// Table with one row per stage; DICE, LC and BR in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>6} {:>16} {:>16} {:>16} {:>16}\n",
            "stage", "images", "DICE", "LC", "UE", "BR"
        );
        let order = STAGE_ORDER
            .iter()
            .filter_map(|k| self.stages.get_key_value(*k));
        for (name, st) in order {
            let lc = st
                .lc
                .as_ref()
                .map(|l| format!("{:.2} ± {:.2}", l.overall, l.std))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>16} {:>16} {:>16} {:>16}",
                name,
                st.images,
                format!("{:.2} ± {:.2}", 100.0 * st.dice_mean, 100.0 * st.dice_std),
                lc,
                format!("{:.4} ± {:.4}", st.ue_mean, st.ue_std),
                format!("{:.2} ± {:.2}", 100.0 * st.br_mean, 100.0 * st.br_std),
            );
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped (no ground truth): {}", self.skipped.join(", "));
        }
        s
    }
}

pub fn write_report(layout: &RunLayout, report: &DatasetReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    write_text(&layout.report_json(), &(json + "\n"))?;
    write_text(&layout.report_txt(), &report.to_table())
}
