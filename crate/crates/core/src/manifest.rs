//! Dataset manifests: one `image<TAB>[gt_mask]<TAB>[features]` record per
//! line. Blank lines and lines starting with `#` are skipped; relative paths
//! resolve against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// File stem of the image; names every per-image artifact.
    pub id: String,
    pub image_path: PathBuf,
    pub gt_mask_path: Option<PathBuf>,
    pub feature_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen_paths = HashSet::new();
        let mut seen_ids = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() > 3 {
                return Err(Error::Manifest(format!(
                    "line {}: expected at most 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |s: &str| -> Option<PathBuf> {
                let s = s.trim();
                (!s.is_empty()).then(|| base.join(s))
            };
            let image_path = resolve(fields[0]).ok_or_else(|| {
                Error::Manifest(format!("line {}: empty image path", lineno + 1))
            })?;
            if !seen_paths.insert(image_path.clone()) {
                return Err(Error::Manifest(format!(
                    "line {}: duplicate image path {}",
                    lineno + 1,
                    image_path.display()
                )));
            }
            let id = image_path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| {
                    Error::Manifest(format!("line {}: image path has no file stem", lineno + 1))
                })?
                .to_string();
            if !seen_ids.insert(id.clone()) {
                return Err(Error::Manifest(format!(
                    "line {}: image id {id} is not unique",
                    lineno + 1
                )));
            }
            entries.push(ManifestEntry {
                id,
                image_path,
                gt_mask_path: fields.get(1).and_then(|s| resolve(s)),
                feature_path: fields.get(2).and_then(|s| resolve(s)),
            });
        }
        Ok(DatasetManifest { entries })
    }

    /// Evaluation runs only when at least one entry carries a ground truth.
    pub fn has_ground_truth(&self) -> bool {
        self.entries.iter().any(|e| e.gt_mask_path.is_some())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&rel(&e.image_path));
            out.push('\t');
            if let Some(g) = &e.gt_mask_path {
                out.push_str(&rel(g));
            }
            out.push('\t');
            if let Some(f) = &e.feature_path {
                out.push_str(&rel(f));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_optional_columns_in_order() {
        let text = "# header\nb.png\tb_gt.png\tb.dst\n\na.png\n c.png\t\tc.dst\n";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        let ids: Vec<_> = m.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
        assert_eq!(m.entries[0].gt_mask_path, Some(PathBuf::from("/data/b_gt.png")));
        assert_eq!(m.entries[1].gt_mask_path, None);
        assert_eq!(m.entries[2].gt_mask_path, None);
        assert_eq!(m.entries[2].feature_path, Some(PathBuf::from("/data/c.dst")));
        assert!(m.has_ground_truth());
    }

    #[test]
    fn duplicate_paths_rejected() {
        let err = DatasetManifest::parse("a.png\na.png\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn colliding_ids_rejected() {
        assert!(DatasetManifest::parse("x/a.png\ny/a.png\n", Path::new(".")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let base = Path::new("/d");
        let m = DatasetManifest::parse("a.png\ta_gt.png\t\nb.png\t\tb.dst\n", base).unwrap();
        assert_eq!(DatasetManifest::parse(&m.to_text(base), base).unwrap(), m);
    }
}
