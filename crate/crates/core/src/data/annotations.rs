//! JSON-lines annotation records.
//!
//! One record per line:
//!
//! ```json
//! {"qid": 7, "query": "a man opens a door", "vid": "abc_60.0_210.0", "duration": 150,
//!  "relevant_windows": [[20, 34]], "saliency_scores": [[4, 3, 4], [2, 2, 3]]}
//! ```
//!
//! `saliency_scores` holds one entry per annotated clip, either a single
//! value or one value per annotator. When `relevant_clip_ids` is present the
//! entries belong to those clips and every other clip scores 0; otherwise
//! entry `i` belongs to clip `i`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{span_to_center_width, Moment};

/// Query ids appear as integers in some releases and strings in others.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Qid {
    Int(i64),
    Str(String),
}

impl fmt::Display for Qid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Qid::Int(i) => write!(f, "{i}"),
            Qid::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClipScore {
    Single(f64),
    Annotators(Vec<f64>),
}

impl ClipScore {
    /// Mean over annotators.
    pub fn mean(&self) -> f64 {
        match self {
            ClipScore::Single(v) => *v,
            ClipScore::Annotators(v) if v.is_empty() => 0.0,
            ClipScore::Annotators(v) => v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub qid: Qid,
    pub query: String,
    pub vid: String,
    pub duration: f64,
    #[serde(default)]
    pub relevant_windows: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_clip_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_scores: Option<Vec<ClipScore>>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(format!("duration {} must be positive", self.duration));
        }
        for &[s, e] in &self.relevant_windows {
            if !(s.is_finite() && e.is_finite() && 0.0 <= s && s < e && e <= self.duration) {
                return Err(format!("window [{s}, {e}] outside [0, {}]", self.duration));
            }
        }
        if let (Some(ids), Some(scores)) = (&self.relevant_clip_ids, &self.saliency_scores) {
            if ids.len() != scores.len() {
                return Err(format!(
                    "{} relevant_clip_ids for {} saliency_scores",
                    ids.len(),
                    scores.len()
                ));
            }
        }
        Ok(())
    }

    /// Windows as normalized moments.
    pub fn moments(&self) -> Result<Vec<Moment>> {
        self.relevant_windows
            .iter()
            .map(|&[s, e]| span_to_center_width(s / self.duration, e / self.duration))
            .collect()
    }

    /// Annotator-averaged per-clip labels for a video of `num_clips` clips.
    pub fn saliency_labels(&self, num_clips: usize) -> Option<Vec<f64>> {
        let scores = self.saliency_scores.as_ref()?;
        let mut labels = vec![0.0; num_clips];
        match &self.relevant_clip_ids {
            Some(ids) => {
                for (&id, s) in ids.iter().zip(scores) {
                    if id < num_clips {
                        labels[id] = s.mean();
                    }
                }
            }
            None => {
                for (l, s) in labels.iter_mut().zip(scores) {
                    *l = s.mean();
                }
            }
        }
        Some(labels)
    }
}

fn annotation_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Annotation {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses every non-blank line; errors name the 1-based line number.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| annotation_err(path, i + 1, e.to_string()))?;
        rec.validate().map_err(|m| annotation_err(path, i + 1, m))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
