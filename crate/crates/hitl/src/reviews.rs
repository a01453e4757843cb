//! Review records and their append-only JSONL log.
//!
//! Each line of `reviews.jsonl` is a full snapshot of one record; replaying the
//! file and keeping the last snapshot per id reconstructs the current state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pending,
    Agree,
    Disagree,
}

impl std::str::FromStr for Verdict {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Verdict::Pending),
            "agree" => Ok(Verdict::Agree),
            "disagree" => Ok(Verdict::Disagree),
            other => Err(ServiceError::Validation(format!("unknown verdict status {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub review_id: String,
    /// Path of the stored upload, relative to the data directory.
    pub image_ref: String,
    pub predicted_label: u8,
    pub probabilities: [f32; 2],
    pub verdict: Verdict,
    pub corrected_label: Option<u8>,
    pub model_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Retrain job that consumed this correction, once it completed.
    #[serde(default)]
    pub consumed_by: Option<String>,
}

impl ReviewRecord {
    pub fn is_pending_correction(&self) -> bool {
        self.verdict == Verdict::Disagree && self.consumed_by.is_none()
    }
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug)]
pub struct ReviewLog {
    path: PathBuf,
    file: File,
    records: BTreeMap<String, ReviewRecord>,
    next_seq: u64,
}

impl ReviewLog {
    /// Opens (or creates) the log and replays it. A torn final line, as left by a
    /// crash mid-append, is cut off with a warning so later appends stay aligned.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        let mut records = BTreeMap::new();
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| ServiceError::io(path, e))?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            let mut keep = complete;
            let text = String::from_utf8_lossy(&bytes[..complete]);
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ReviewRecord>(line) {
                    Ok(r) => {
                        records.insert(r.review_id.clone(), r);
                    }
                    Err(e) if i + 1 == lines.len() => {
                        log::warn!("{}: dropping unreadable final line: {e}", path.display());
                        keep = complete - line.len() - 1;
                    }
                    Err(e) => {
                        return Err(ServiceError::Internal(format!("{}: line {}: {e}", path.display(), i + 1)));
                    }
                }
            }
            if keep < bytes.len() {
                if complete < bytes.len() {
                    log::warn!("{}: dropping torn final line", path.display());
                }
                let f = OpenOptions::new().write(true).open(path).map_err(|e| ServiceError::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| ServiceError::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::io(path, e))?;
        let next_seq = records
            .keys()
            .filter_map(|k| k.strip_prefix("rev-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |m| m + 1);
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records,
            next_seq,
        })
    }

    pub fn next_id(&mut self) -> String {
        let id = format!("rev-{:06}", self.next_seq);
        self.next_seq += 1;
        id
    }

    /// Appends a snapshot and makes it the current state of that record.
    pub fn put(&mut self, record: ReviewRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(&record).expect("record serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| ServiceError::io(&self.path, e))?;
        self.records.insert(record.review_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ReviewRecord> {
        self.records.get(id)
    }

    pub fn all(&self) -> impl Iterator<Item = &ReviewRecord> {
        self.records.values()
    }

    pub fn pending_corrections(&self) -> Vec<ReviewRecord> {
        self.records.values().filter(|r| r.is_pending_correction()).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(log: &mut ReviewLog) -> ReviewRecord {
        ReviewRecord {
            review_id: log.next_id(),
            image_ref: "images/x.png".into(),
            predicted_label: 0,
            probabilities: [0.8, 0.2],
            verdict: Verdict::Pending,
            corrected_label: None,
            model_version: "v0001".into(),
            created_unix: 1,
            updated_unix: 1,
            consumed_by: None,
        }
    }

    #[test]
    fn replay_keeps_latest_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reviews.jsonl");
        let mut log = ReviewLog::open(&path).unwrap();
        let mut r = record(&mut log);
        log.put(r.clone()).unwrap();
        r.verdict = Verdict::Disagree;
        r.corrected_label = Some(1);
        log.put(r.clone()).unwrap();
        let other = record(&mut log);
        log.put(other).unwrap();
        drop(log);

        let mut log = ReviewLog::open(&path).unwrap();
        assert_eq!(log.get("rev-000001"), Some(&r));
        assert_eq!(log.pending_corrections().len(), 1);
        assert_eq!(log.next_id(), "rev-000003");
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reviews.jsonl");
        let mut log = ReviewLog::open(&path).unwrap();
        let r = record(&mut log);
        log.put(r).unwrap();
        drop(log);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"review_id\":\"rev-0000").unwrap();
        let mut log = ReviewLog::open(&path).unwrap();
        assert_eq!(log.all().count(), 1);
        let r = record(&mut log);
        log.put(r).unwrap();
        drop(log);
        assert_eq!(ReviewLog::open(&path).unwrap().all().count(), 2);
    }
}
