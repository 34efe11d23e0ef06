//! Pipeline configuration, read from `key = value` files grouped in
//! `[section]` headers. Every key is optional; absent keys take the defaults
//! below.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Patch side `k`; must match the backbone that produced the features.
    pub patch_size: usize,
    pub preprocess: PreprocessSpec,
    pub affinity: AffinityConfig,
    pub spectral: SpectralConfig,
    pub semantic: SemanticConfig,
    pub crf: CrfParams,
    pub slic: SlicParams,
    pub fz: FzParams,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            patch_size: 8,
            preprocess: PreprocessSpec::default(),
            affinity: AffinityConfig::default(),
            spectral: SpectralConfig::default(),
            semantic: SemanticConfig::default(),
            crf: CrfParams::default(),
            slic: SlicParams::default(),
            fz: FzParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistEq {
    None,
    Global,
    Clahe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub gaussian_sigma: f64,
    pub hist_eq: HistEq,
    /// Clip limit as a multiple of the uniform bin height.
    pub clahe_clip: f64,
    /// Tiles per side.
    pub clahe_tiles: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            gaussian_sigma: 0.0,
            hist_eq: HistEq::None,
            clahe_clip: 2.0,
            clahe_tiles: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffinityConfig {
    pub c_ssd: f64,
    pub c_mi: f64,
    pub c_pos: f64,
    /// Gaussian kernel rate in `exp(-delta * D)`.
    pub delta: f64,
    pub knn: usize,
    pub mi_bins: usize,
    /// Use dense extractor features when the manifest provides them.
    pub use_features: bool,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            c_ssd: 1.0,
            c_mi: 1.0,
            c_pos: 0.1,
            delta: 1.0,
            knn: 8,
            mi_bins: 32,
            use_features: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralConfig {
    pub n_eigensegments: usize,
    pub solver: Solver,
    pub seed: u64,
    /// k-means++ restarts for the oversegmentation; lowest inertia wins.
    pub kmeans_restarts: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            n_eigensegments: 15,
            solver: Solver::Dense,
            seed: 0,
            kmeans_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropFeatures {
    Sidecar,
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    /// Number of dataset-level classes; required by the clustering stage.
    pub n_classes: Option<usize>,
    pub lambda_mask: f64,
    pub lambda_pos: f64,
    pub split_components: bool,
    pub crop_features: CropFeatures,
    /// k-means++ restarts for the dataset clustering.
    pub kmeans_restarts: usize,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        SemanticConfig {
            n_classes: None,
            lambda_mask: 0.5,
            lambda_pos: 0.5,
            split_components: false,
            crop_features: CropFeatures::Histogram,
            kmeans_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrfGuide {
    /// The input image, cropped like the preprocessed one.
    Original,
    Preprocessed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub enabled: bool,
    /// Image whose intensities drive the bilateral kernel.
    pub guide: CrfGuide,
    /// Gaussian blur applied to the guide before refinement.
    pub guide_sigma: f64,
    pub n_iters: usize,
    pub spatial_sigma: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_int: f64,
    pub w_spatial: f64,
    pub w_bilateral: f64,
    pub unary_confidence: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            enabled: true,
            guide: CrfGuide::Original,
            guide_sigma: 0.0,
            n_iters: 5,
            spatial_sigma: 3.0,
            bilateral_sigma_xy: 40.0,
            bilateral_sigma_int: 0.1,
            w_spatial: 3.0,
            w_bilateral: 5.0,
            unary_confidence: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicParams {
    pub n_superpixels: usize,
    pub compactness: f64,
    pub max_iters: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            n_superpixels: 100,
            compactness: 10.0,
            max_iters: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FzParams {
    /// Merge threshold constant; larger values give larger components.
    pub scale: f64,
    pub sigma: f64,
    pub min_size: usize,
}

impl Default for FzParams {
    fn default() -> Self {
        FzParams {
            scale: 1.0,
            sigma: 0.8,
            min_size: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    Hungarian,
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub matching: Matching,
    pub boundary_distance: usize,
    /// Ground-truth label treated as background; it takes part in matching
    /// but is left out of DICE and LC averages.
    pub background_label: Option<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            matching: Matching::Hungarian,
            boundary_distance: 3,
            background_label: Some(0),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        check(self.patch_size >= 1, "patch_size must be >= 1")?;

        let p = &self.preprocess;
        check(finite_nonneg(p.gaussian_sigma), "preprocess.gaussian_sigma must be >= 0")?;
        check(p.clahe_clip.is_finite() && p.clahe_clip > 0.0, "preprocess.clahe_clip must be > 0")?;
        check(p.clahe_tiles >= 1, "preprocess.clahe_tiles must be >= 1")?;

        let a = &self.affinity;
        check(
            finite_nonneg(a.c_ssd) && finite_nonneg(a.c_mi) && finite_nonneg(a.c_pos),
            "affinity coefficients must be >= 0",
        )?;
        check(a.delta.is_finite() && a.delta > 0.0, "affinity.delta must be > 0")?;
        check(a.knn >= 1, "affinity.knn must be >= 1")?;
        check(a.mi_bins >= 2, "affinity.mi_bins must be >= 2")?;

        check(
            self.spectral.n_eigensegments >= 2,
            "spectral.n_eigensegments must be >= 2",
        )?;

        check(
            self.spectral.kmeans_restarts >= 1,
            "spectral.kmeans_restarts must be >= 1",
        )?;

        let s = &self.semantic;
        check(s.kmeans_restarts >= 1, "semantic.kmeans_restarts must be >= 1")?;
        if let Some(n) = s.n_classes {
            check(n >= 1, "semantic.n_classes must be >= 1")?;
        }
        check(
            finite_nonneg(s.lambda_mask) && finite_nonneg(s.lambda_pos),
            "semantic weights must be >= 0",
        )?;

        let c = &self.crf;
        check(
            c.spatial_sigma > 0.0 && c.bilateral_sigma_xy > 0.0 && c.bilateral_sigma_int > 0.0,
            "crf sigmas must be > 0",
        )?;
        check(
            finite_nonneg(c.w_spatial) && finite_nonneg(c.w_bilateral),
            "crf weights must be >= 0",
        )?;
        check(finite_nonneg(c.guide_sigma), "crf.guide_sigma must be >= 0")?;
        check(
            c.unary_confidence > 0.0 && c.unary_confidence < 1.0,
            "crf.unary_confidence must lie strictly between 0 and 1",
        )?;

        check(self.slic.n_superpixels >= 1, "slic.n_superpixels must be >= 1")?;
        check(
            self.slic.compactness.is_finite() && self.slic.compactness > 0.0,
            "slic.compactness must be > 0",
        )?;
        check(self.fz.scale > 0.0, "fz.scale must be > 0")?;
        check(finite_nonneg(self.fz.sigma), "fz.sigma must be >= 0")?;
        check(self.fz.min_size >= 1, "fz.min_size must be >= 1")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.spectral.n_eigensegments, 15);
        assert_eq!((c.affinity.c_ssd, c.affinity.c_mi, c.affinity.c_pos), (1.0, 1.0, 0.1));
        assert_eq!(c.affinity.knn, 8);
        assert_eq!(c.eval.boundary_distance, 3);
        c.validate().unwrap();
    }

    #[test]
    fn sections_override_defaults() {
        let c = PipelineConfig::from_toml_str(
            "patch_size = 16\n[affinity]\nc_mi = 0.0\ndelta = 4.5\n[preprocess]\nhist_eq = \"clahe\"\n[spectral]\nsolver = \"lanczos\"\n",
        )
        .unwrap();
        assert_eq!(c.patch_size, 16);
        assert_eq!(c.affinity.c_mi, 0.0);
        assert_eq!(c.affinity.c_ssd, 1.0);
        assert_eq!(c.affinity.delta, 4.5);
        assert_eq!(c.preprocess.hist_eq, HistEq::Clahe);
        assert_eq!(c.spectral.solver, Solver::Lanczos);
    }

    #[test]
    fn crf_guide_selection() {
        assert_eq!(PipelineConfig::default().crf.guide, CrfGuide::Original);
        let c = PipelineConfig::from_toml_str("[crf]\nguide = \"preprocessed\"\nguide_sigma = 1.5\n").unwrap();
        assert_eq!((c.crf.guide, c.crf.guide_sigma), (CrfGuide::Preprocessed, 1.5));
        assert!(PipelineConfig::from_toml_str("[crf]\nguide = \"blurred\"").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "patch_size = 0",
            "[affinity]\ndelta = 0.0",
            "[affinity]\nc_pos = -1.0",
            "[spectral]\nn_eigensegments = 1",
            "[preprocess]\ngaussian_sigma = -0.5",
            "[crf]\nunary_confidence = 1.0",
            "[crf]\nguide_sigma = -1.0",
            "[affinity]\nbogus = 1",
        ] {
            assert!(PipelineConfig::from_toml_str(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut c = PipelineConfig::default();
        c.semantic.n_classes = Some(6);
        let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
