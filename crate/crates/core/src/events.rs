//! Marked event sequences and the line-delimited JSON sequence format.
//!
//! Each line of a sequence file is one record:
//!
//! ```text
//! {"t_end":100.0,"events":[[0.73,0],[1.91,1]]}
//! ```
//!
//! Marks are 0-based. Data with 1-based marks must be shifted before it is
//! written in this format (see [`EventSequence::from_one_based`]).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// A single event: occurrence time and 0-based type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, usize)", into = "(f64, usize)")]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Self { time, mark }
    }
}

impl From<(f64, usize)> for Event {
    fn from((time, mark): (f64, usize)) -> Self {
        Self { time, mark }
    }
}

impl From<Event> for (f64, usize) {
    fn from(e: Event) -> Self {
        (e.time, e.mark)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("non-finite or negative time at index {index}")]
    InvalidTime { index: usize },
    #[error("non-monotone at index {index}")]
    NonMonotone { index: usize },
    #[error("time exceeds horizon at index {index}")]
    ExceedsHorizon { index: usize },
    #[error("mark {mark} out of range [0, {k}) at index {index}")]
    MarkOutOfRange { index: usize, mark: usize, k: usize },
}

/// Time-sorted events observed on `(0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub t_end: f64,
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn new(events: Vec<Event>, t_end: f64) -> Self {
        Self { t_end, events }
    }

    pub fn empty(t_end: f64) -> Self {
        Self::new(Vec::new(), t_end)
    }

    /// Builds a sequence from externally prepared data whose marks start at 1.
    pub fn from_one_based(events: &[(f64, usize)], t_end: f64) -> Result<Self> {
        let events = events
            .iter()
            .enumerate()
            .map(|(index, &(time, mark))| {
                mark.checked_sub(1)
                    .map(|m| Event::new(time, m))
                    .ok_or(ValidationError::MarkOutOfRange { index, mark, k: 0 })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(events, t_end))
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().map(|e| e.time)
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.time)
    }

    /// Checks every sequence invariant, reporting the first violation.
    pub fn validate(&self, k_cardinality: usize) -> Result<(), ValidationError> {
        validate_events(&self.events, self.t_end, k_cardinality)
    }
}

/// Invariant check shared by [`EventSequence::validate`] and callers that
/// hold raw event slices.
pub fn validate_events(
    events: &[Event],
    t_end: f64,
    k_cardinality: usize,
) -> Result<(), ValidationError> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(ValidationError::InvalidHorizon(t_end));
    }
    let mut prev: Option<f64> = None;
    for (index, e) in events.iter().enumerate() {
        if !e.time.is_finite() || e.time < 0.0 {
            return Err(ValidationError::InvalidTime { index });
        }
        if let Some(p) = prev {
            if e.time <= p {
                return Err(ValidationError::NonMonotone { index });
            }
        }
        if e.time > t_end {
            return Err(ValidationError::ExceedsHorizon { index });
        }
        if e.mark >= k_cardinality {
            return Err(ValidationError::MarkOutOfRange {
                index,
                mark: e.mark,
                k: k_cardinality,
            });
        }
        prev = Some(e.time);
    }
    Ok(())
}

pub fn write_sequences_to<W: Write>(mut w: W, seqs: &[EventSequence]) -> Result<()> {
    for s in seqs {
        let line = serde_json::to_string(s).map_err(|e| Error::json("encoding sequence", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_sequences_from<R: BufRead>(r: R) -> Result<Vec<EventSequence>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: EventSequence = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("line {}", lineno + 1), e))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_sequences(path: impl AsRef<Path>, seqs: &[EventSequence]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_sequences_to(&mut w, seqs)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sequences(path: impl AsRef<Path>) -> Result<Vec<EventSequence>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sequences_from(BufReader::new(f)).map_err(|e| match e {
        Error::Json { context, source } => Error::Json {
            context: format!("{}: {context}", path.display()),
            source,
        },
        other => other,
    })
}
