//! Append-only JSONL event log.
//!
//! Each line is one [`EventRecord`]: a sequence number starting at 0, a
//! wall-clock timestamp in milliseconds and the event fields, tagged by
//! `kind`. The log is the source for metrics and for resume checks.

use crate::archive::{AgentNode, DomainScores, NodeId};
use crate::mode::Mode;
use crate::rng::StreamId;
use crate::selection::SelectionPolicy;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Event {
    RunStarted {
        run_id: String,
        mode: Mode,
        config_hash: String,
        iterations: u64,
        seed: u64,
    },
    RootEvaluated {
        node: AgentNode,
        selection_score: f64,
        gated_out: bool,
    },
    Selection {
        iteration: u64,
        /// Agent whose selection routine produced the distribution.
        selector: Option<NodeId>,
        policy: Option<SelectionPolicy>,
        /// Why the configured or agent-provided routine was not used.
        fallback: Option<String>,
        stream: StreamId,
        parents: Vec<NodeId>,
    },
    InstructionGenerated {
        iteration: u64,
        slot: u64,
        parent: NodeId,
        instruction: Option<String>,
        error: Option<String>,
    },
    Generation {
        iteration: u64,
        slot: u64,
        parent: NodeId,
        modifier: NodeId,
        child_payload_ref: String,
        iterations_left: u64,
        stream: StreamId,
        wall_time: f64,
    },
    Validation {
        iteration: u64,
        slot: u64,
        child_payload_ref: String,
        compiled: bool,
        cause: Option<String>,
        validity_log: String,
    },
    Evaluation {
        iteration: u64,
        slot: u64,
        child_payload_ref: String,
        scores: BTreeMap<String, DomainScores>,
        selection_score: f64,
        gated_out: bool,
        incidents: Vec<String>,
    },
    ArchiveAdd {
        iteration: u64,
        slot: u64,
        node: AgentNode,
        /// Sole member dropped in single-agent mode.
        replaced: Option<NodeId>,
    },
    IterationComplete {
        iteration: u64,
        archive_size: usize,
        best_selection_score: f64,
    },
    TestEvaluated {
        node: NodeId,
        scores: BTreeMap<String, f64>,
    },
    RunComplete {
        archive_size: usize,
        best_node: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("event log {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("event log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Writer appending records to a log file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
    bytes: u64,
}

impl EventLog {
    /// Opens `path` for appending, continuing after `next_seq` with the file
    /// cut to `bytes`.
    pub fn open(path: &Path, next_seq: u64, bytes: u64) -> Result<Self, LogError> {
        let io = |source| LogError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        file.set_len(bytes).map_err(io)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            next_seq,
            bytes,
        })
    }

    pub fn append(&mut self, event: Event) -> Result<u64, LogError> {
        let record = EventRecord {
            seq: self.next_seq,
            ts_ms: now_ms(),
            event,
        };
        let mut line = serde_json::to_vec(&record).expect("event serializes");
        line.push(b'\n');
        self.file.write_all(&line).map_err(|source| LogError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.next_seq += 1;
        self.bytes += line.len() as u64;
        Ok(record.seq)
    }

    pub fn sync(&mut self) -> Result<(), LogError> {
        self.file.sync_data().map_err(|source| LogError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Bytes written so far.
    pub fn len(&self) -> u64 {
        self.bytes
    }

    pub fn is_empty(&self) -> bool {
        self.bytes == 0
    }
}

/// Reads every record, checking that sequence numbers are contiguous.
pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    read_log_prefix(path, u64::MAX)
}

/// Reads the records contained in the first `bytes` bytes of the log.
pub fn read_log_prefix(path: &Path, bytes: u64) -> Result<Vec<EventRecord>, LogError> {
    let file = File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut consumed = 0u64;
    let mut line = String::new();
    let mut n = 0usize;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|source| LogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if read == 0 || consumed + read as u64 > bytes {
            break;
        }
        consumed += read as u64;
        n += 1;
        if !line.ends_with('\n') {
            return Err(LogError::Corrupt {
                line: n,
                reason: "unterminated record".into(),
            });
        }
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
            line: n,
            reason: e.to_string(),
        })?;
        if record.seq != out.len() as u64 {
            return Err(LogError::Corrupt {
                line: n,
                reason: format!("sequence {} where {} was expected", record.seq, out.len()),
            });
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_read_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut log = EventLog::open(&path, 0, 0).unwrap();
        log.append(Event::RunComplete {
            archive_size: 1,
            best_node: 0,
        })
        .unwrap();
        let cut = log.len();
        log.append(Event::IterationComplete {
            iteration: 1,
            archive_size: 2,
            best_selection_score: 0.1 + 0.2,
        })
        .unwrap();
        let all = read_log(&path).unwrap();
        assert_eq!(all.len(), 2);
        match &all[1].event {
            Event::IterationComplete {
                best_selection_score,
                ..
            } => assert_eq!(*best_selection_score, 0.1 + 0.2),
            other => panic!("{other:?}"),
        }
        assert_eq!(read_log_prefix(&path, cut).unwrap().len(), 1);

        drop(log);
        let mut log = EventLog::open(&path, 1, cut).unwrap();
        log.append(Event::RunComplete {
            archive_size: 3,
            best_node: 2,
        })
        .unwrap();
        let all = read_log(&path).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].seq, 1);
    }

    #[test]
    fn gaps_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        std::fs::write(
            &path,
            "{\"seq\":0,\"ts_ms\":1,\"kind\":\"run-complete\",\"archive_size\":1,\"best_node\":0}\n{\"seq\":5,\"ts_ms\":1,\"kind\":\"run-complete\",\"archive_size\":1,\"best_node\":0}\n",
        )
        .unwrap();
        assert!(matches!(read_log(&path), Err(LogError::Corrupt { line: 2, .. })));
    }
}
