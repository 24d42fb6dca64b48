//! Prediction records and metric reports.
//!
//! In-memory evaluation and evaluation of a prediction file both reduce to
//! [`evaluate_records`], so a written and re-read file reproduces the same
//! report.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vtg_core::data::{ClipScore, Qid};
use vtg_core::metrics::{evaluate_highlights, evaluate_moments, HdResult, MrResult, ScoredSpan, Span};
use vtg_core::model::Model;
use vtg_core::params::ParamStore;
use vtg_core::types::GroundingSample;

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Moments from the decoder, clip scores from the saliency head.
    #[default]
    Standard,
    /// Clip scores are the final non-local gate weights; no moments.
    GateSaliency,
}

impl std::str::FromStr for EvalMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EvalMode::Standard),
            "gate_saliency" => Ok(EvalMode::GateSaliency),
            other => Err(HarnessError::Config(format!("unknown eval mode `{other}`"))),
        }
    }
}

/// One line of a prediction file. Predicted windows are
/// `[start_seconds, end_seconds, score]` in rank order; the optional ground
/// truth uses the annotation field names so a prediction file also serves as
/// its own reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub qid: Qid,
    pub vid: String,
    pub duration: f64,
    pub pred_relevant_windows: Vec<[f64; 3]>,
    pub pred_saliency_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevant_windows: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_scores: Option<Vec<ClipScore>>,
}

/// Integer-looking query ids are written back as integers.
pub fn qid_of(s: &str) -> Qid {
    match s.parse::<i64>() {
        Ok(i) if i.to_string() == s => Qid::Int(i),
        _ => Qid::Str(s.to_string()),
    }
}

impl PredictionRecord {
    pub fn from_sample(model: &Model, store: &ParamStore, sample: &GroundingSample, mode: EvalMode, nms_iou: Option<f64>) -> Result<Self> {
        let pred = model.predict(store, sample, nms_iou)?;
        let d = sample.duration;
        let (windows, scores) = match mode {
            EvalMode::Standard => (
                pred.moments
                    .iter()
                    .map(|m| [m.start * d, m.end * d, m.score])
                    .collect(),
                pred.saliency,
            ),
            EvalMode::GateSaliency => (Vec::new(), pred.non_local),
        };
        let valid = sample.video.valid_len();
        Ok(Self {
            qid: qid_of(&sample.qid),
            vid: sample.vid.clone(),
            duration: d,
            pred_relevant_windows: windows,
            pred_saliency_scores: scores[..valid].to_vec(),
            relevant_windows: Some(
                sample
                    .gt_moments
                    .iter()
                    .map(|m| {
                        let (s, e) = m.span();
                        [s * d, e * d]
                    })
                    .collect(),
            ),
            saliency_scores: sample
                .saliency_labels
                .as_ref()
                .map(|l| l[..valid].iter().map(|x| ClipScore::Single(*x)).collect()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub samples: usize,
    /// Absent when no record has ground-truth windows or in gate mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mr: Option<MrResult>,
    /// Absent when no record has saliency labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hd: Option<HdResult>,
}

impl EvalReport {
    /// The model-selection metric; 0 when moments were not evaluated.
    pub fn map_avg(&self) -> f64 {
        self.mr.as_ref().map_or(0.0, |m| m.map_avg)
    }
}

pub fn evaluate_records(records: &[PredictionRecord], mode: EvalMode) -> EvalReport {
    let mr = match mode {
        EvalMode::GateSaliency => None,
        EvalMode::Standard => {
            let with_gt: Vec<&PredictionRecord> = records
                .iter()
                .filter(|r| r.relevant_windows.as_ref().is_some_and(|w| !w.is_empty()))
                .collect();
            (!with_gt.is_empty()).then(|| {
                let preds: Vec<Vec<ScoredSpan>> = with_gt
                    .iter()
                    .map(|r| r.pred_relevant_windows.iter().map(|w| (w[0], w[1], w[2])).collect())
                    .collect();
                let gts: Vec<Vec<Span>> = with_gt
                    .iter()
                    .map(|r| r.relevant_windows.iter().flatten().map(|w| (w[0], w[1])).collect())
                    .collect();
                evaluate_moments(&preds, &gts)
            })
        }
    };
    let (scores, labels): (Vec<Vec<f64>>, Vec<Vec<f64>>) = records
        .iter()
        .filter_map(|r| {
            let labels = r.saliency_scores.as_ref()?;
            Some((r.pred_saliency_scores.clone(), labels.iter().map(ClipScore::mean).collect()))
        })
        .unzip();
    let hd = (!scores.is_empty()).then(|| evaluate_highlights(&scores, &labels));
    EvalReport {
        mode,
        samples: records.len(),
        mr,
        hd,
    }
}

pub fn predict_records(
    model: &Model,
    store: &ParamStore,
    samples: &[GroundingSample],
    mode: EvalMode,
    nms_iou: Option<f64>,
) -> Result<Vec<PredictionRecord>> {
    samples
        .iter()
        .map(|s| PredictionRecord::from_sample(model, store, s, mode, nms_iou))
        .collect()
}

pub fn evaluate_samples(
    model: &Model,
    store: &ParamStore,
    samples: &[GroundingSample],
    mode: EvalMode,
    nms_iou: Option<f64>,
) -> Result<EvalReport> {
    Ok(evaluate_records(&predict_records(model, store, samples, mode, nms_iou)?, mode))
}

pub fn write_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| HarnessError::format(path, e))?;
        w.write_all(b"\n").map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Reads every line, failing on the first malformed one.
pub fn read_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_records_lenient(path)?
        .into_iter()
        .map(|(line, r)| r.map_err(|m| HarnessError::format(path, format!("line {line}: {m}"))))
        .collect()
}

/// Parses each non-blank line on its own, pairing results with 1-based line
/// numbers.
pub fn read_records_lenient(path: &Path) -> Result<Vec<(usize, std::result::Result<PredictionRecord, String>)>> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, serde_json::from_str(&line).map_err(|e| e.to_string())));
    }
    Ok(out)
}

pub fn write_report(path: &Path, report: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| HarnessError::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(qid: i64, pred: Vec<[f64; 3]>, gt: Option<Vec<[f64; 2]>>, labels: Option<Vec<f64>>) -> PredictionRecord {
        PredictionRecord {
            qid: Qid::Int(qid),
            vid: format!("v{qid}"),
            duration: 10.0,
            pred_relevant_windows: pred,
            pred_saliency_scores: vec![0.1, 0.9, 0.3, 0.2],
            relevant_windows: gt,
            saliency_scores: labels.map(|l| l.into_iter().map(ClipScore::Single).collect()),
        }
    }

    #[test]
    fn ground_truth_as_predictions_scores_perfectly() {
        let recs: Vec<_> = (0..5)
            .map(|i| {
                let gt = vec![[1.0 + i as f64, 4.0 + i as f64]];
                record(i, vec![[gt[0][0], gt[0][1], 1.0]], Some(gt), Some(vec![0.0, 4.0, 2.0, 0.0]))
            })
            .collect();
        let rep = evaluate_records(&recs, EvalMode::Standard);
        let mr = rep.mr.unwrap();
        assert_eq!((mr.r1_at_0_5, mr.r1_at_0_7, mr.map_avg), (1.0, 1.0, 1.0));
        assert_eq!(rep.hd.unwrap().map, 1.0);
    }

    #[test]
    fn missing_labels_omit_fields() {
        let recs = vec![record(1, vec![[0.0, 2.0, 0.5]], Some(vec![[0.0, 2.0]]), None)];
        let rep = evaluate_records(&recs, EvalMode::Standard);
        assert!(rep.mr.is_some() && rep.hd.is_none());
        let json = serde_json::to_string(&rep).unwrap();
        assert!(!json.contains("hd"));
        let rep = evaluate_records(&recs, EvalMode::GateSaliency);
        assert!(rep.mr.is_none() && rep.hd.is_none());
    }

    #[test]
    fn report_matches_direct_metric_calls() {
        let recs = vec![
            record(1, vec![[0.0, 2.0, 0.9], [5.0, 8.0, 0.4]], Some(vec![[5.0, 8.0]]), Some(vec![0.0, 4.0, 4.0, 1.0])),
            record(2, vec![[3.0, 6.0, 0.7]], Some(vec![[2.0, 6.0]]), Some(vec![4.0, 0.0, 0.0, 0.0])),
        ];
        let rep = evaluate_records(&recs, EvalMode::Standard);
        let direct = evaluate_moments(
            &[vec![(0.0, 2.0, 0.9), (5.0, 8.0, 0.4)], vec![(3.0, 6.0, 0.7)]],
            &[vec![(5.0, 8.0)], vec![(2.0, 6.0)]],
        );
        assert_eq!(rep.mr.unwrap(), direct);
        let scores = vec![vec![0.1, 0.9, 0.3, 0.2]; 2];
        let labels = vec![vec![0.0, 4.0, 4.0, 1.0], vec![4.0, 0.0, 0.0, 0.0]];
        assert_eq!(rep.hd.unwrap(), evaluate_highlights(&scores, &labels));
    }

    #[test]
    fn records_round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let recs = vec![
            record(7, vec![[0.1 + 0.2, 1.0 / 3.0, 0.123456789012345]], Some(vec![[0.0, 1.0]]), None),
            PredictionRecord {
                qid: Qid::Str("q-a".into()),
                ..record(8, vec![], None, Some(vec![1.0, 4.0, 0.0, 0.0]))
            },
        ];
        write_records(&path, &recs).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, recs);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"qid\":7,"));
        assert_eq!(qid_of("007"), Qid::Str("007".into()));
    }
}
