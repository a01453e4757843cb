//! Precomputed embedding vectors, one CSV row per patch: `id,label,f0,f1,...`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::corpus::LabeledItem;
use super::DataError;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: u8,
    pub values: Vec<f32>,
    pub source: PathBuf,
}

impl LabeledItem for FeatureRecord {
    fn item_id(&self) -> String {
        self.id.clone()
    }
    fn label(&self) -> u8 {
        self.label
    }
    fn source(&self) -> String {
        self.source.display().to_string()
    }
}

pub fn read_feature_file(path: &Path) -> Result<Vec<FeatureRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let err = |line: usize, message: String| DataError::Features {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(err(1, "header must start with id,label".into()));
    }
    let dim = cols.len() - 2;
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(err(i + 1, format!("expected {} columns, got {}", dim + 2, fields.len())));
        }
        let label: u8 = match fields[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(i + 1, format!("label {other:?} is not 0 or 1"))),
        };
        let values = fields[2..]
            .iter()
            .map(|v| v.trim().parse::<f32>().map_err(|e| err(i + 1, format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(FeatureRecord {
            id: fields[0].to_string(),
            label,
            values,
            source: path.to_path_buf(),
        });
    }
    if out.is_empty() {
        return Err(err(2, "no feature rows".into()));
    }
    Ok(out)
}

pub fn write_feature_file(path: &Path, records: &[FeatureRecord]) -> Result<(), DataError> {
    let dim = records.first().map(|r| r.values.len()).unwrap_or(0);
    let mut s = String::from("id,label");
    for d in 0..dim {
        write!(s, ",f{d}").unwrap();
    }
    s.push('\n');
    for r in records {
        write!(s, "{},{}", r.id, r.label).unwrap();
        for v in &r.values {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| DataError::io(path, e))
}
