use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Deserialize;
use sidepth::CameraIntrinsics;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    pred: PathBuf,
    gt: PathBuf,
    mask: Option<PathBuf>,
    gt_normals: Option<PathBuf>,
    intrinsics: Option<CameraIntrinsics>,
}

/// One evaluation item with paths resolved against the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub mask: Option<PathBuf>,
    pub gt_normals: Option<PathBuf>,
    pub intrinsics: Option<CameraIntrinsics>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> anyhow::Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(&text).with_context(|| format!("manifest {} is not a JSON array", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let e: RawEntry = serde_json::from_value(v).map_err(|e| anyhow!("manifest entry {i}: {e}"))?;
            let entry = ManifestEntry {
                pred: resolve(base, e.pred),
                gt: resolve(base, e.gt),
                mask: e.mask.map(|p| resolve(base, p)),
                gt_normals: e.gt_normals.map(|p| resolve(base, p)),
                intrinsics: e.intrinsics,
            };
            let files = [("pred", Some(&entry.pred)), ("gt", Some(&entry.gt)), ("mask", entry.mask.as_ref()), ("gt_normals", entry.gt_normals.as_ref())];
            for (name, p) in files {
                if let Some(p) = p {
                    if !p.is_file() {
                        bail!("manifest entry {i}: {name} file {} does not exist", p.display());
                    }
                }
            }
            Ok(entry)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_relative_and_names_bad_entries() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.pfm"), b"x").unwrap();
        let m = dir.path().join("m.json");
        std::fs::write(&m, r#"[{"pred": "a.pfm", "gt": "a.pfm"}]"#).unwrap();
        let entries = read_manifest(&m).unwrap();
        assert_eq!(entries[0].gt, dir.path().join("a.pfm"));

        std::fs::write(&m, r#"[{"pred": "a.pfm", "gt": "a.pfm"}, {"pred": "a.pfm", "gt": "missing.pfm"}]"#).unwrap();
        let err = read_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("entry 1") && err.contains("gt"), "{err}");

        std::fs::write(&m, "[]").unwrap();
        assert!(read_manifest(&m).unwrap().is_empty());
        std::fs::write(&m, "{").unwrap();
        assert!(read_manifest(&m).is_err());
    }
}
