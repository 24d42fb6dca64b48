//! SVG figures of prediction records: the clip saliency curve over time,
//! ground-truth windows and the top-k predicted windows.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::evaluate::{read_records_lenient, PredictionRecord};

const WIDTH: u32 = 900;
const HEIGHT: u32 = 360;
const GT_BAND: (f64, f64) = (-0.30, -0.08);
const PRED_TOP: f64 = -0.40;
const PRED_STEP: f64 = 0.18;

/// Axis ranges of one figure.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

pub fn frame(rec: &PredictionRecord, top_k: usize) -> Frame {
    let rows = rec.pred_relevant_windows.len().min(top_k) as f64;
    Frame {
        x: (0.0, rec.duration),
        y: (PRED_TOP - PRED_STEP * rows.max(1.0) - 0.05, 1.08),
    }
}

/// Saliency rescaled to [0, 1] at clip centers. A constant curve sits at 0.5.
fn curve(rec: &PredictionRecord) -> Vec<(f64, f64)> {
    let s = &rec.pred_saliency_scores;
    if s.is_empty() {
        return Vec::new();
    }
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let clip = rec.duration / s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, v)| {
            let y = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            ((i as f64 + 0.5) * clip, y)
        })
        .collect()
}

fn draw(rec: &PredictionRecord, top_k: usize, path: &Path) -> std::result::Result<(), String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let f = frame(rec, top_k);
    let root = SVGBackend::new(path, (WIDTH, HEIGHT)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("qid {} ({})", qid_text(rec), rec.vid), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(32)
        .y_label_area_size(40)
        .build_cartesian_2d(f.x.0..f.x.1, f.y.0..f.y.1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("seconds")
        .y_desc("saliency")
        .disable_y_mesh()
        .draw()
        .map_err(|e| err(&e))?;

    let gt_style = GREEN.mix(0.5).filled();
    for w in rec.relevant_windows.iter().flatten() {
        chart
            .draw_series(std::iter::once(Rectangle::new([(w[0], GT_BAND.0), (w[1], GT_BAND.1)], gt_style)))
            .map_err(|e| err(&e))?;
    }
    for (rank, w) in rec.pred_relevant_windows.iter().take(top_k).enumerate() {
        let top = PRED_TOP - PRED_STEP * rank as f64;
        let (s, e) = (w[0].clamp(0.0, rec.duration), w[1].clamp(0.0, rec.duration));
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(s, top), (e, top - PRED_STEP * 0.8)],
                RED.mix(0.25 + 0.6 * w[2].clamp(0.0, 1.0)).filled(),
            )))
            .map_err(|e| err(&e))?;
    }
    let points = curve(rec);
    if !points.is_empty() {
        chart
            .draw_series(LineSeries::new(points, BLUE.stroke_width(2)))
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))
}

fn qid_text(rec: &PredictionRecord) -> String {
    rec.qid.to_string()
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSummary {
    pub written: Vec<PathBuf>,
    /// `(line, reason)` for records that were not drawn.
    pub skipped: Vec<(usize, String)>,
}

/// Draws `{qid}.svg` into `out_dir` for every well-formed record, or only
/// for the listed qids when `qids` is non-empty.
pub fn plot_file(input: &Path, out_dir: &Path, qids: &[String], top_k: usize) -> Result<PlotSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut summary = PlotSummary::default();
    for (line, rec) in read_records_lenient(input)? {
        let rec = match rec {
            Ok(r) => r,
            Err(m) => {
                summary.skipped.push((line, m));
                continue;
            }
        };
        let qid = qid_text(&rec);
        if !qids.is_empty() && !qids.contains(&qid) {
            continue;
        }
        if !(rec.duration.is_finite() && rec.duration > 0.0) {
            summary.skipped.push((line, format!("duration {} is not positive", rec.duration)));
            continue;
        }
        let path = out_dir.join(format!("{}.svg", sanitize(&qid)));
        match draw(&rec, top_k, &path) {
            Ok(()) => summary.written.push(path),
            Err(m) => summary.skipped.push((line, m)),
        }
    }
    Ok(summary)
}
