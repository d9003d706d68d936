//! Line-oriented point record formats shared by the CLI commands.
//!
//! Point files are JSON Lines, one point per line, so processing stays
//! streaming and memory stays proportional to a single scene.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;
use crate::uncertainty::{MultiLevelDistribution, UncertaintyError};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Distribution {
        line: usize,
        source: UncertaintyError,
    },
    #[error("duplicate point id {0}")]
    DuplicateId(u64),
}

/// One point with its per-level prediction vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: u64,
    pub xyz: [f64; 3],
    #[serde(default)]
    pub feat: Vec<f64>,
    pub levels: Vec<Vec<f64>>,
}

/// One scored point, written by `hieract score`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: u64,
    pub score: f64,
    pub u: Vec<f64>,
}

pub fn read_points<R: BufRead>(reader: R) -> Result<Vec<PointRecord>, RecordError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PointRecord = serde_json::from_str(&line).map_err(|source| {
            RecordError::Parse {
                line: idx + 1,
                source,
            }
        })?;
        if !seen.insert(record.id) {
            return Err(RecordError::DuplicateId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

/// Validate each record's level vectors against the hierarchy, fixing up
/// serialization-sized drift from unit mass and rejecting anything worse.
pub fn distributions_for(
    records: &[PointRecord],
    h: &LabelHierarchy,
) -> Result<Vec<MultiLevelDistribution>, RecordError> {
    records
        .iter()
        .enumerate()
        .map(|(idx, r)| {
            let mut d = MultiLevelDistribution::new(r.levels.clone());
            d.validate_and_renormalize(h)
                .map_err(|source| RecordError::Distribution {
                    line: idx + 1,
                    source,
                })?;
            Ok(d)
        })
        .collect()
}

pub fn read_scores<R: BufRead>(reader: R) -> Result<Vec<ScoreRecord>, RecordError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| RecordError::Parse {
                line: idx + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(writer: &mut W, items: &[T]) -> Result<(), RecordError> {
    for item in items {
        serde_json::to_writer(&mut *writer, item)
            .map_err(|e| RecordError::Io(std::io::Error::other(e)))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Labeled-id files are a plain JSON array of point ids.
pub fn read_labeled_ids(text: &str) -> Result<Vec<u64>, serde_json::Error> {
    serde_json::from_str(text)
}
