//! Prediction files from a checkpoint.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::dataset::LoadedRecord;
use crate::error::Result;
use crate::evaluate::{write_records, EvalMode, PredictionRecord};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictSummary {
    pub written: usize,
    /// `(qid, message)` for every record that could not be predicted.
    pub failures: Vec<(String, String)>,
}

/// Predicts every loadable record and writes the successes to `out` in
/// input order. With `nms_iou = None` every record carries all decoder
/// queries.
pub fn predict_to_file(ckpt: &Checkpoint, records: Vec<LoadedRecord>, out: &Path, nms_iou: Option<f64>) -> Result<PredictSummary> {
    let (model, store) = ckpt.restore()?;
    let mut summary = PredictSummary::default();
    let mut lines = Vec::with_capacity(records.len());
    for (qid, sample) in records {
        let rec = sample.and_then(|s| PredictionRecord::from_sample(&model, &store, &s, EvalMode::Standard, nms_iou));
        match rec {
            Ok(r) => lines.push(r),
            Err(e) => summary.failures.push((qid, e.to_string())),
        }
    }
    write_records(out, &lines)?;
    summary.written = lines.len();
    Ok(summary)
}
