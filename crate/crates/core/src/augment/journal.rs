//! Append-only job journal, `<out>/journal.jsonl`.
//!
//! One line per completed job: the plan hash followed by the
//! [`AugmentationRecord`] fields. Lines are written in completion order.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AugmentError, AugmentationRecord};

pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    plan_hash: String,
    #[serde(flatten)]
    record: AugmentationRecord,
}

pub fn journal_path(out_dir: &Path) -> PathBuf {
    out_dir.join(JOURNAL_FILE)
}

/// Completed records for `plan_hash`, keyed by job index.
///
/// A torn final line (crash mid-append) is ignored. Any other unparsable
/// line, or a line from a different plan, is an error: mixing outputs of two
/// plans in one directory would silently corrupt the result.
pub fn read_journal(
    path: &Path,
    plan_hash: &str,
) -> Result<BTreeMap<u64, AugmentationRecord>, AugmentError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let torn_tail = !text.ends_with('\n');
    let mut out = BTreeMap::new();
    for (i, raw) in lines.iter().enumerate() {
        let line: Line = match serde_json::from_str(raw) {
            Ok(l) => l,
            Err(_) if torn_tail && i + 1 == lines.len() => break,
            Err(e) => {
                return Err(AugmentError::Journal(format!("line {}: {e}", i + 1)));
            }
        };
        if line.plan_hash != plan_hash {
            return Err(AugmentError::Journal(format!(
                "line {} belongs to plan {}, current plan is {plan_hash}; use a fresh output directory",
                i + 1,
                line.plan_hash
            )));
        }
        out.insert(line.record.job_index, line.record);
    }
    Ok(out)
}

pub struct JournalWriter {
    plan_hash: String,
    file: Mutex<File>,
}

impl JournalWriter {
    /// Open for appending. A torn final line is cut off first so the next
    /// record starts on a fresh line.
    pub fn open(path: &Path, plan_hash: &str) -> Result<Self, AugmentError> {
        if let Ok(bytes) = fs::read(path) {
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
                OpenOptions::new()
                    .write(true)
                    .open(path)?
                    .set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            plan_hash: plan_hash.to_string(),
            file: Mutex::new(file),
        })
    }

    pub fn append(&self, record: &AugmentationRecord) -> Result<(), AugmentError> {
        let line = Line {
            plan_hash: self.plan_hash.clone(),
            record: record.clone(),
        };
        let mut bytes = serde_json::to_vec(&line).expect("record serializes");
        bytes.push(b'\n');
        let mut f = self.file.lock().expect("journal lock");
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }
}
