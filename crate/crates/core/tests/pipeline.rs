use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use specseg::config::{CropFeatures, PipelineConfig};
use specseg::manifest::DatasetManifest;
use specseg::phantom::{write_dataset, PhantomParams};
use specseg::pipeline::{MaskSource, RunContext};
use specseg::tensor::{read_feature_map, read_tensor, write_tensor, Tensor};
use specseg::GrayImage;

fn small() -> PhantomParams {
    PhantomParams {
        width: 64,
        height: 64,
        semi_axis: (7.0, 12.0),
        ..PhantomParams::default()
    }
}

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.semantic.n_classes = Some(2);
    cfg.crf.bilateral_sigma_xy = 10.0;
    cfg
}

fn dataset(dir: &Path, n: usize) -> (PathBuf, DatasetManifest) {
    let path = write_dataset(dir.join("data"), n, 100, &small()).unwrap();
    let m = DatasetManifest::load(&path).unwrap();
    (path, m)
}

fn count_files(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == ext))
                .count()
        })
        .unwrap_or(0)
}

#[test]
fn three_images_give_three_masks_per_step_and_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = dataset(dir.path(), 3);
    let out = dir.path().join("run");
    let ctx = RunContext::new(manifest, config(), &out, 1).unwrap();
    let summary = ctx.run_all().unwrap();
    assert!(summary.is_ok(), "{:?}", summary.failed_images());
    assert_eq!(count_files(&out.join("masks_step1"), "png"), 3);
    assert_eq!(count_files(&out.join("masks_step2"), "png"), 3);
    assert_eq!(count_files(&out.join("masks_final"), "png"), 3);
    assert_eq!(count_files(&out.join("eigensegments"), "dst"), 6);
    assert_eq!(count_files(&out.join("reports"), "json"), 1);
    assert!(out.join("reports/report.txt").exists());
    assert!(out.join("config.toml").exists());
    let report = summary.report.unwrap();
    assert_eq!(report.stages["step2"].images, 3);

    // eigensegment tensors carry [n, n_h, n_w]
    let t = read_tensor(out.join("eigensegments/phantom_00.dst")).unwrap();
    assert_eq!(t.dims, vec![16, 8, 8]);
}

#[test]
fn rerun_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = dataset(dir.path(), 2);
    let out = dir.path().join("run");
    RunContext::new(manifest.clone(), config(), &out, 1).unwrap().run_all().unwrap();
    let again = RunContext::new(manifest, config(), &out, 1).unwrap().run_all().unwrap();
    for s in &again.stages {
        assert!(s.computed.is_empty(), "{} recomputed {:?}", s.stage, s.computed);
        assert_eq!(s.cached.len(), 2, "{}", s.stage);
    }
}

#[test]
fn mutual_information_only_runs_without_features() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = dataset(dir.path(), 2);
    let mut cfg = config();
    cfg.affinity.c_ssd = 0.0;
    cfg.affinity.c_pos = 0.0;
    cfg.affinity.use_features = false;
    let summary = RunContext::new(manifest, cfg, dir.path().join("run"), 1)
        .unwrap()
        .run_all()
        .unwrap();
    assert!(summary.is_ok());
    assert!(summary.report.is_some());
}

#[test]
fn missing_dense_features_name_the_extractor_and_spare_other_images() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = dataset(dir.path(), 2);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[0].push_str("\tphantom_00.features.dst");
    fs::write(&path, lines.join("\n")).unwrap();
    let manifest = DatasetManifest::load(&path).unwrap();
    let ctx = RunContext::new(manifest, config(), dir.path().join("run"), 1).unwrap();
    ctx.preprocess();
    let seg = ctx.segment();
    assert_eq!(seg.failures.len(), 1);
    assert_eq!(seg.failures[0].id, "phantom_00");
    assert!(seg.failures[0].message.contains("extract dense"), "{}", seg.failures[0].message);
    assert_eq!(seg.computed, vec!["phantom_01".to_string()]);
}

#[test]
fn dense_features_drive_the_affinity() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = dataset(dir.path(), 1);
    // 64x64 at k = 8: an 8x8 grid, one row per patch in raster order
    let rows: Vec<f32> = (0..64)
        .flat_map(|r| {
            let (pr, pc) = (r / 8, r % 8);
            [1.0 + pr as f32, 1.0 + pc as f32, 0.5]
        })
        .collect();
    let feat = dir.path().join("data/phantom_00.features.dst");
    write_tensor(&Tensor::matrix(64, 3, rows).unwrap(), &feat).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("{}\tphantom_00.features.dst\n", text.trim_end())).unwrap();
    let manifest = DatasetManifest::load(&path).unwrap();
    let ctx = RunContext::new(manifest.clone(), config(), dir.path().join("run"), 1).unwrap();
    ctx.preprocess();
    assert!(ctx.segment().is_ok());

    // a dump for the wrong grid is rejected
    write_tensor(&Tensor::matrix(63, 3, vec![1.0; 189]).unwrap(), &feat).unwrap();
    let ctx = RunContext::new(manifest, config(), dir.path().join("run2"), 1).unwrap();
    ctx.preprocess();
    let seg = ctx.segment();
    assert_eq!(seg.failures.len(), 1, "{seg:?}");
}

#[test]
fn sidecar_crops_follow_the_segment_listing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = dataset(dir.path(), 2);
    let mut cfg = config();
    cfg.semantic.crop_features = CropFeatures::Sidecar;
    let out = dir.path().join("run");
    let ctx = RunContext::new(manifest, cfg, &out, 1).unwrap();
    ctx.preprocess();
    ctx.segment();
    let first = ctx.cluster(MaskSource::Step1);
    assert_eq!(first.failures.len(), 2);
    assert!(first.failures[0].message.contains("extract crops"), "{}", first.failures[0].message);

    // play the extractor: one crop and one mask vector per listed segment
    fs::create_dir_all(out.join("crop_features")).unwrap();
    for id in ["phantom_00", "phantom_01"] {
        let listing = fs::read_to_string(out.join(format!("segments/{id}.tsv"))).unwrap();
        let mut n = 0;
        for line in listing.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 10);
            let label: u32 = cols[0].parse().unwrap();
            let pixels: f32 = cols[9].parse().unwrap();
            let crop = Tensor::new(vec![4], vec![1.0, pixels.sqrt(), label as f32, 0.5]).unwrap();
            write_tensor(&crop, out.join(format!("crop_features/{id}__seg{label}.dst"))).unwrap();
            let m = Tensor::new(vec![2], vec![pixels, 1.0]).unwrap();
            write_tensor(&m, out.join(format!("crop_features/{id}__seg{label}.mask.dst"))).unwrap();
            n += 1;
        }
        assert!(n > 0);
    }
    let second = ctx.cluster(MaskSource::Step1);
    assert!(second.is_ok(), "{second:?}");
    assert!(out.join("masks_step2/phantom_01.png").exists());
}

#[test]
fn dense_dump_contract() {
    // 224x224 input at k = 8 has a 28x28 grid
    let img = GrayImage::constant(224, 224, 0.5);
    let grid = specseg::affinity::PatchGrid::from_image(&img, 8).unwrap();
    assert_eq!((grid.n_h, grid.n_w, grid.len()), (28, 28, 784));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dense.dst");
    let data: Vec<f32> = (0..784 * 384).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
    write_tensor(&Tensor::matrix(784, 384, data.clone()).unwrap(), &path).unwrap();
    let fm = read_feature_map(&path).unwrap().with_grid(28, 28).unwrap();
    assert_eq!((fm.n_patches, fm.dim), (784, 384));
    // bit-identical round trip
    assert!(fm.values.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    // row r is patch (r / n_w, r % n_w)
    assert_eq!(fm.row(28 * 3 + 5), &data[(28 * 3 + 5) * 384..(28 * 3 + 6) * 384]);

    // header layout: magic, ndim, u32 LE dims, f32 LE payload
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"DST1");
    assert_eq!(bytes[4], 2);
    assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 784);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 384);
    assert_eq!(bytes.len(), 13 + 784 * 384 * 4);

    // the 3-D form carries its own grid
    let t3 = Tensor::new(vec![28, 28, 2], vec![1.0; 784 * 2]).unwrap();
    write_tensor(&t3, &path).unwrap();
    assert_eq!(read_feature_map(&path).unwrap().grid, Some((28, 28)));

    // files a sidecar must never emit
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_tensor(&path).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(read_tensor(&path).is_err());
}

#[test]
fn cli_exits_nonzero_when_an_image_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = dataset(dir.path(), 2);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("{text}missing.png\n")).unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "[semantic]\nn_classes = 2\n[crf]\nenabled = false\n").unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_specseg"))
            .args(args)
            .arg("--manifest")
            .arg(&path)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("run"))
            .env("SPECSEG_LOG", "off")
            .output()
            .unwrap()
    };
    let out = run(&["run"]);
    assert!(!out.status.success());
    // the other images still went through
    assert!(dir.path().join("run/masks_step2/phantom_01.png").exists());

    fs::write(&path, text).unwrap();
    let ok = run(&["preprocess"]);
    assert!(ok.status.success());
}
