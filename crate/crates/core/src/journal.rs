//! Append-only model journal and the shared model handle.
//!
//! Every mutation of a live model (automatic nominal inserts, feedback
//! inserts, recalibration) is written to the journal while the model write
//! lock is held, so journal order equals application order. Replaying the
//! journal onto the initial model reconstructs the live model exactly.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, MutexGuard, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::FeedbackLabel;
use crate::features::FeatureVector;
use crate::store::{NominalModel, StoreError};

pub const JOURNAL_FORMAT: &str = "seqwatch-journal";
pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal I/O: {0}")]
    Io(#[from] io::Error),
    #[error("journal line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertSource {
    /// Vector observed while the statistic was zero.
    AutoNominal,
    /// Vector sampled from an alarm labeled as a false alarm.
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEntry {
    Header {
        format: String,
        version: u32,
    },
    Insert {
        seq: u64,
        source: InsertSource,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alarm_id: Option<u64>,
        vectors: Vec<FeatureVector>,
    },
    Label {
        seq: u64,
        label: FeedbackLabel,
        inserted: usize,
    },
    Recalibrate {
        seq: u64,
        alpha: f64,
        calibration: Vec<FeatureVector>,
    },
}

/// Line-oriented JSON journal writer.
pub struct Journal {
    out: Box<dyn Write + Send>,
    next_seq: u64,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("next_seq", &self.next_seq).finish()
    }
}

impl Journal {
    /// Opens (or creates) a journal file for appending. Existing entries are
    /// scanned so sequence numbers continue.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, JournalError> {
        let path = path.as_ref();
        let existing = if path.exists() { read_journal(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut journal = Journal { out: Box::new(BufWriter::new(file)), next_seq: 0 };
        if existing.is_empty() {
            journal.write_entry(&JournalEntry::Header {
                format: JOURNAL_FORMAT.into(),
                version: JOURNAL_VERSION,
            })?;
        }
        journal.next_seq = existing.iter().filter_map(entry_seq).max().map_or(0, |s| s + 1);
        Ok(journal)
    }

    /// Journal writing to an arbitrary sink (tests, pipes).
    pub fn to_writer(out: impl Write + Send + 'static) -> Result<Self, JournalError> {
        let mut journal = Journal { out: Box::new(out), next_seq: 0 };
        journal.write_entry(&JournalEntry::Header {
            format: JOURNAL_FORMAT.into(),
            version: JOURNAL_VERSION,
        })?;
        Ok(journal)
    }

    fn write_entry(&mut self, entry: &JournalEntry) -> Result<(), JournalError> {
        let line = serde_json::to_string(entry).map_err(io::Error::other)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    fn take_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn record_insert(
        &mut self,
        source: InsertSource,
        alarm_id: Option<u64>,
        vectors: &[FeatureVector],
    ) -> Result<(), JournalError> {
        let seq = self.take_seq();
        self.write_entry(&JournalEntry::Insert { seq, source, alarm_id, vectors: vectors.to_vec() })
    }

    pub fn record_label(&mut self, label: &FeedbackLabel, inserted: usize) -> Result<(), JournalError> {
        let seq = self.take_seq();
        self.write_entry(&JournalEntry::Label { seq, label: label.clone(), inserted })
    }

    pub fn record_recalibrate(
        &mut self,
        alpha: f64,
        calibration: &[FeatureVector],
    ) -> Result<(), JournalError> {
        let seq = self.take_seq();
        self.write_entry(&JournalEntry::Recalibrate { seq, alpha, calibration: calibration.to_vec() })
    }
}

fn entry_seq(e: &JournalEntry) -> Option<u64> {
    match e {
        JournalEntry::Header { .. } => None,
        JournalEntry::Insert { seq, .. }
        | JournalEntry::Label { seq, .. }
        | JournalEntry::Recalibrate { seq, .. } => Some(*seq),
    }
}

pub fn parse_journal(reader: impl BufRead) -> Result<Vec<JournalEntry>, JournalError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: JournalEntry = serde_json::from_str(&line)
            .map_err(|e| JournalError::Parse { line: i + 1, msg: e.to_string() })?;
        if let JournalEntry::Header { format, version } = &entry {
            if format != JOURNAL_FORMAT || *version != JOURNAL_VERSION {
                return Err(JournalError::Parse {
                    line: i + 1,
                    msg: format!("unsupported journal {format} v{version}"),
                });
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_journal(path: impl AsRef<Path>) -> Result<Vec<JournalEntry>, JournalError> {
    parse_journal(BufReader::new(File::open(path)?))
}

/// Applies journal entries to `model` in order. Returns the number of
/// mutations applied.
pub fn replay<'a>(
    model: &mut NominalModel,
    entries: impl IntoIterator<Item = &'a JournalEntry>,
) -> Result<usize, JournalError> {
    let mut applied = 0;
    for entry in entries {
        match entry {
            JournalEntry::Insert { vectors, .. } => {
                model.insert_nominal(vectors)?;
                applied += 1;
            }
            JournalEntry::Recalibrate { alpha, calibration, .. } => {
                model.recalibrate(calibration, *alpha)?;
                applied += 1;
            }
            JournalEntry::Header { .. } | JournalEntry::Label { .. } => {}
        }
    }
    Ok(applied)
}

/// A model shared between streams: many readers or one writer, with the
/// journal appended inside the write critical section.
#[derive(Debug)]
pub struct ModelHandle {
    model: RwLock<NominalModel>,
    journal: Mutex<Option<Journal>>,
}

impl ModelHandle {
    pub fn new(model: NominalModel, journal: Option<Journal>) -> Self {
        ModelHandle { model: RwLock::new(model), journal: Mutex::new(journal) }
    }

    pub fn read(&self) -> RwLockReadGuard<'_, NominalModel> {
        self.model.read().unwrap_or_else(|e| e.into_inner())
    }

    fn journal(&self) -> MutexGuard<'_, Option<Journal>> {
        self.journal.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Inserts a batch atomically with respect to readers and journals it.
    pub fn insert(
        &self,
        source: InsertSource,
        alarm_id: Option<u64>,
        vectors: &[FeatureVector],
    ) -> Result<usize, JournalError> {
        if vectors.is_empty() {
            return Ok(0);
        }
        let mut model = self.model.write().unwrap_or_else(|e| e.into_inner());
        let n = model.insert_nominal(vectors)?;
        if let Some(j) = self.journal().as_mut() {
            j.record_insert(source, alarm_id, vectors)?;
        }
        Ok(n)
    }

    pub fn recalibrate(&self, calibration: &[FeatureVector], alpha: f64) -> Result<f64, JournalError> {
        let mut model = self.model.write().unwrap_or_else(|e| e.into_inner());
        model.recalibrate(calibration, alpha)?;
        if let Some(j) = self.journal().as_mut() {
            j.record_recalibrate(alpha, calibration)?;
        }
        Ok(model.d_alpha())
    }

    pub fn record_label(&self, label: &FeedbackLabel, inserted: usize) -> Result<(), JournalError> {
        if let Some(j) = self.journal().as_mut() {
            j.record_label(label, inserted)?;
        }
        Ok(())
    }

    /// Clones the current model (for saving snapshots).
    pub fn snapshot(&self) -> NominalModel {
        self.read().clone()
    }
}
