//! On-disk formats: 1 kHz trajectory logs as JSON lines (one tagged record
//! per line) and plain-text numeric datasets (one whitespace-separated row
//! per line).

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

use crate::physics::{BallState, CollisionEvent};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log format at line {line}: {source}")]
    Format {
        line: usize,
        source: serde_json::Error,
    },
    #[error("row {line} has {got} columns, expected {expected}")]
    BadRow {
        line: usize,
        expected: usize,
        got: usize,
    },
}

/// Paddle state captured alongside the ball at a log step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PaddleRecord {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

/// One 1 ms step of a logged episode.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogSample {
    pub t: f64,
    pub ball: BallState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub paddle: Option<PaddleRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct LogMeta {
    pub seed: u64,
    pub label: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Record {
    Meta(LogMeta),
    Sample(LogSample),
    Event(CollisionEvent),
}

/// A logged episode: metadata, dense 1 kHz samples, and collision events.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub meta: LogMeta,
    pub samples: Vec<LogSample>,
    pub events: Vec<CollisionEvent>,
}

impl TrajectoryLog {
    pub fn ball_states(&self) -> impl Iterator<Item = &BallState> {
        self.samples.iter().map(|s| &s.ball)
    }
}

/// Appends one episode to a JSONL log file (creates it if missing).
pub fn append_trajectory_log(path: &Path, log: &TrajectoryLog) -> Result<(), LogError> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, log)?;
    w.flush()?;
    Ok(())
}

/// Writes episodes to a JSONL log file, replacing any existing content.
pub fn write_trajectory_logs(path: &Path, logs: &[TrajectoryLog]) -> Result<(), LogError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for log in logs {
        write_records(&mut w, log)?;
    }
    w.flush()?;
    Ok(())
}

fn write_records<W: Write>(w: &mut W, log: &TrajectoryLog) -> Result<(), LogError> {
    let meta = serde_json::to_string(&Record::Meta(log.meta.clone()))
        .map_err(|source| LogError::Format { line: 0, source })?;
    writeln!(w, "{}", meta)?;
    for s in &log.samples {
        let line = serde_json::to_string(&Record::Sample(s.clone()))
            .map_err(|source| LogError::Format { line: 0, source })?;
        writeln!(w, "{}", line)?;
    }
    for e in &log.events {
        let line = serde_json::to_string(&Record::Event(e.clone()))
            .map_err(|source| LogError::Format { line: 0, source })?;
        writeln!(w, "{}", line)?;
    }
    Ok(())
}

/// Reads a JSONL log file back into episodes.  Each `Meta` record starts a
/// new episode.
pub fn read_trajectory_logs(path: &Path) -> Result<Vec<TrajectoryLog>, LogError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut logs: Vec<TrajectoryLog> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|source| LogError::Format { line: i + 1, source })?;
        match record {
            Record::Meta(meta) => logs.push(TrajectoryLog {
                meta,
                samples: Vec::new(),
                events: Vec::new(),
            }),
            Record::Sample(s) => {
                if let Some(last) = logs.last_mut() {
                    last.samples.push(s);
                }
            }
            Record::Event(e) => {
                if let Some(last) = logs.last_mut() {
                    last.events.push(e);
                }
            }
        }
    }
    Ok(logs)
}

/// Writes a numeric dataset: one whitespace-separated row per line.
pub fn write_dataset(path: &Path, rows: &[DVector<f64>]) -> Result<(), LogError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let mut first = true;
        for v in row.iter() {
            if !first {
                write!(w, " ")?;
            }
            // RFC-style shortest round-trip float formatting.
            write!(w, "{}", v)?;
            first = false;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric dataset, checking that every row has `columns` entries.
pub fn read_dataset(path: &Path, columns: usize) -> Result<Vec<DVector<f64>>, LogError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| LogError::BadRow {
                line: i + 1,
                expected: columns,
                got: 0,
            })?;
        if vals.len() != columns {
            return Err(LogError::BadRow {
                line: i + 1,
                expected: columns,
                got: vals.len(),
            });
        }
        rows.push(DVector::from_vec(vals));
    }
    Ok(rows)
}
