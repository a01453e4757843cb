use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::DataError;

/// One patch file of the public IDC dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub source_path: PathBuf,
    pub patient_id: String,
    pub x: u32,
    pub y: u32,
    /// 0 = IDC-negative, 1 = IDC-positive.
    pub label: u8,
}

impl PatchRecord {
    /// Stable identifier: the file stem.
    pub fn id(&self) -> String {
        self.source_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([^_/]+)_idx(\d+)_x(\d+)_y(\d+)_class([01])\.png$").unwrap())
}

/// Parses `<patient>_idx<k>_x<X>_y<Y>_class<C>.png`.
pub fn parse_patch_filename(path: &Path) -> Option<PatchRecord> {
    let name = path.file_name()?.to_str()?;
    let caps = pattern().captures(name)?;
    Some(PatchRecord {
        source_path: path.to_path_buf(),
        patient_id: caps[1].to_string(),
        x: caps[3].parse().ok()?,
        y: caps[4].parse().ok()?,
        label: caps[5].parse().ok()?,
    })
}

/// Recursively collects patch records under `root`, sorted by path.
///
/// Non-conforming `.png` names are skipped with a warning, or rejected when `strict`.
pub fn scan_dataset(root: &Path, strict: bool) -> Result<Vec<PatchRecord>, DataError> {
    if !root.is_dir() {
        return Err(DataError::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root does not exist"),
        ));
    }
    let mut records = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            DataError::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        match parse_patch_filename(path) {
            Some(r) => records.push(r),
            None if strict => return Err(DataError::UnparseableName(path.to_path_buf())),
            None => log::warn!("skipping {}: unrecognized patch filename", path.display()),
        }
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    records.sort_by(|a, b| a.source_path.cmp(&b.source_path));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_public_naming_convention() {
        let r = parse_patch_filename(Path::new("8863/0/8863_idx5_x51_y1251_class0.png")).unwrap();
        assert_eq!((r.patient_id.as_str(), r.x, r.y, r.label), ("8863", 51, 1251, 0));
        assert_eq!(r.id(), "8863_idx5_x51_y1251_class0");
        assert!(parse_patch_filename(Path::new("foo.png")).is_none());
        assert!(parse_patch_filename(Path::new("1_idx1_x1_y1_class2.png")).is_none());
    }

    #[test]
    fn scan_counts_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("10253/0");
        std::fs::create_dir_all(&sub).unwrap();
        for (i, c) in [0, 0, 0, 1, 1].iter().enumerate() {
            std::fs::write(sub.join(format!("10253_idx{i}_x{}_y0_class{c}.png", i * 50)), b"").unwrap();
        }
        std::fs::write(sub.join("foo.png"), b"").unwrap();
        std::fs::write(sub.join("notes.txt"), b"").unwrap();
        let recs = scan_dataset(dir.path(), false).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs.iter().filter(|r| r.label == 0).count(), 3);
        assert!(recs.windows(2).all(|w| w[0].source_path < w[1].source_path));
        assert!(matches!(scan_dataset(dir.path(), true), Err(DataError::UnparseableName(_))));
    }

    #[test]
    fn empty_and_missing_roots() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path(), false), Err(DataError::EmptyDataset(_))));
        assert!(matches!(
            scan_dataset(&dir.path().join("missing"), false),
            Err(DataError::Io { .. })
        ));
    }
}
