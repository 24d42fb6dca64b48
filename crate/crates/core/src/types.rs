//! Shared data model: feature sequences, temporal moments, labels and
//! padded batches.
//!
//! Moments are stored normalized by the video duration; seconds only show up
//! at the file boundary (see [`crate::data`]).

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value marking padded positions in a [`Batch`]. Never read by a loss.
pub const PAD_LABEL: i8 = -1;

/// Saliency labels on the 0–4 scale that count as "Very Good" or better.
pub const VERY_GOOD: f64 = 4.0;

/// A `length × dim` sequence of embeddings with a validity mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    embeddings: Array2<f64>,
    mask: Vec<bool>,
}

impl FeatureSequence {
    /// A fully valid sequence.
    pub fn new(embeddings: Array2<f64>) -> Result<Self> {
        let mask = vec![true; embeddings.nrows()];
        Self::with_mask(embeddings, mask)
    }

    pub fn with_mask(embeddings: Array2<f64>, mask: Vec<bool>) -> Result<Self> {
        if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
            return Err(Error::InvalidSequence(format!(
                "empty shape {:?}",
                embeddings.dim()
            )));
        }
        if mask.len() != embeddings.nrows() {
            return Err(Error::InvalidSequence(format!(
                "mask length {} != sequence length {}",
                mask.len(),
                embeddings.nrows()
            )));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::InvalidSequence("no valid position".into()));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSequence("non-finite embedding".into()));
        }
        Ok(Self { embeddings, mask })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidSequence("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let m = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::InvalidSequence(e.to_string()))?;
        Self::new(m)
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Rows at valid positions, in order.
    pub fn valid_rows(&self) -> Array2<f64> {
        let idx: Vec<usize> = (0..self.len()).filter(|i| self.mask[*i]).collect();
        self.embeddings.select(Axis(0), &idx)
    }

    /// Append `extra` masked-out zero rows.
    pub fn padded_to(&self, len: usize) -> Self {
        assert!(len >= self.len());
        let mut emb = Array2::zeros((len, self.dim()));
        emb.slice_mut(s![..self.len(), ..]).assign(&self.embeddings);
        let mut mask = self.mask.clone();
        mask.resize(len, false);
        Self {
            embeddings: emb,
            mask,
        }
    }

    /// Scale every row to unit L2 norm (zero rows are left alone).
    pub fn l2_normalized(&self) -> Self {
        let mut emb = self.embeddings.clone();
        for mut row in emb.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        Self {
            embeddings: emb,
            mask: self.mask.clone(),
        }
    }
}

/// A temporal span as normalized (center, width).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub center: f64,
    pub width: f64,
}

impl Moment {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        let ok = center.is_finite()
            && width.is_finite()
            && (0.0..=1.0).contains(&center)
            && width > 0.0
            && width <= 1.0;
        if ok {
            Ok(Self { center, width })
        } else {
            Err(Error::InvalidMoment { center, width })
        }
    }

    /// `[start, end]` without clamping to the unit interval.
    pub fn raw_span(&self) -> (f64, f64) {
        (self.center - self.width / 2.0, self.center + self.width / 2.0)
    }

    /// `[start, end]` clamped to `[0, 1]`.
    pub fn span(&self) -> (f64, f64) {
        center_width_to_span(self)
    }

    /// Span in seconds for a video of `duration` seconds.
    pub fn to_seconds(&self, duration: f64) -> (f64, f64) {
        let (s, e) = self.span();
        (s * duration, e * duration)
    }
}

/// Convert a normalized `[start, end]` span to (center, width).
pub fn span_to_center_width(start: f64, end: f64) -> Result<Moment> {
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start >= end {
        return Err(Error::InvalidSpan { start, end });
    }
    Moment::new((start + end) / 2.0, end - start)
}

/// Convert (center, width) back to a span, clamping to `[0, 1]`.
pub fn center_width_to_span(m: &Moment) -> (f64, f64) {
    let (s, e) = m.raw_span();
    (s.clamp(0.0, 1.0), e.clamp(0.0, 1.0))
}

/// Per-clip relevance scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyVector(pub Vec<f64>);

impl SaliencyVector {
    pub fn scores(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Binary per-clip indicator of lying inside a ground-truth moment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceLabels(pub Vec<u8>);

impl RelevanceLabels {
    /// A clip is relevant when its midpoint falls inside some moment.
    ///
    /// Clips are assumed to tile the video uniformly, so clip `i` of `n`
    /// has normalized midpoint `(i + 0.5) / n`.
    pub fn from_moments(num_clips: usize, moments: &[Moment]) -> Self {
        let spans: Vec<(f64, f64)> = moments.iter().map(|m| m.span()).collect();
        let labels = (0..num_clips)
            .map(|i| {
                let mid = (i as f64 + 0.5) / num_clips as f64;
                u8::from(spans.iter().any(|&(s, e)| s <= mid && mid <= e))
            })
            .collect();
        Self(labels)
    }

    pub fn indicators(&self) -> &[u8] {
        &self.0
    }

    pub fn positives(&self) -> usize {
        self.0.iter().filter(|v| **v == 1).count()
    }
}

/// One query-video training or evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub qid: String,
    pub vid: String,
    pub video: FeatureSequence,
    pub text: FeatureSequence,
    pub gt_moments: Vec<Moment>,
    /// Per-clip scores on the 0–4 scale, already averaged over annotators.
    pub saliency_labels: Option<Vec<f64>>,
    pub relevance: RelevanceLabels,
    /// Seconds.
    pub duration: f64,
}

impl GroundingSample {
    /// Build a sample, deriving relevance labels from the moments.
    pub fn new(
        qid: impl Into<String>,
        vid: impl Into<String>,
        video: FeatureSequence,
        text: FeatureSequence,
        gt_moments: Vec<Moment>,
        saliency_labels: Option<Vec<f64>>,
        duration: f64,
    ) -> Result<Self> {
        if let Some(labels) = &saliency_labels {
            if labels.len() != video.len() {
                return Err(Error::Shape(format!(
                    "{} saliency labels for {} clips",
                    labels.len(),
                    video.len()
                )));
            }
        }
        let relevance = RelevanceLabels::from_moments(video.len(), &gt_moments);
        Ok(Self {
            qid: qid.into(),
            vid: vid.into(),
            video,
            text,
            gt_moments,
            saliency_labels,
            relevance,
            duration,
        })
    }
}

/// `M` predicted spans with foreground probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentPredictionSet {
    pub spans: Vec<Moment>,
    pub fg_prob: Vec<f64>,
}

impl MomentPredictionSet {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Samples padded to common lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B × L_v × d_v`
    pub video: Array3<f64>,
    pub video_mask: Array2<bool>,
    /// `B × L_t × d_t`
    pub text: Array3<f64>,
    pub text_mask: Array2<bool>,
    /// `B × L_v`, [`PAD_LABEL`] past each sample's end.
    pub relevance: Array2<i8>,
    /// `B × L_v`, `-1.0` for padding and for samples without saliency labels.
    pub saliency: Array2<f64>,
    pub has_saliency: Vec<bool>,
    pub gt_moments: Vec<Vec<Moment>>,
    pub durations: Vec<f64>,
    pub qids: Vec<String>,
}

fn stack_padded(seqs: &[&FeatureSequence]) -> Result<(Array3<f64>, Array2<bool>)> {
    let dim = seqs[0].dim();
    if let Some(bad) = seqs.iter().find(|s| s.dim() != dim) {
        return Err(Error::Shape(format!(
            "feature dims {} and {} in one batch",
            dim,
            bad.dim()
        )));
    }
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut out = Array3::zeros((seqs.len(), max_len, dim));
    let mut mask = Array2::from_elem((seqs.len(), max_len), false);
    for (b, seq) in seqs.iter().enumerate() {
        out.slice_mut(s![b, ..seq.len(), ..])
            .assign(seq.embeddings());
        for (i, m) in seq.mask().iter().enumerate() {
            mask[[b, i]] = *m;
        }
    }
    Ok((out, mask))
}

/// Pad a list of samples into a [`Batch`].
pub fn collate(samples: &[GroundingSample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let videos: Vec<_> = samples.iter().map(|s| &s.video).collect();
    let texts: Vec<_> = samples.iter().map(|s| &s.text).collect();
    let (video, video_mask) = stack_padded(&videos)?;
    let (text, text_mask) = stack_padded(&texts)?;
    let lv = video.dim().1;
    let mut relevance = Array2::from_elem((samples.len(), lv), PAD_LABEL);
    let mut saliency = Array2::from_elem((samples.len(), lv), -1.0);
    for (b, s) in samples.iter().enumerate() {
        for (i, r) in s.relevance.indicators().iter().enumerate() {
            relevance[[b, i]] = *r as i8;
        }
        if let Some(labels) = &s.saliency_labels {
            for (i, l) in labels.iter().enumerate() {
                saliency[[b, i]] = *l;
            }
        }
    }
    Ok(Batch {
        video,
        video_mask,
        text,
        text_mask,
        relevance,
        saliency,
        has_saliency: samples.iter().map(|s| s.saliency_labels.is_some()).collect(),
        gt_moments: samples.iter().map(|s| s.gt_moments.clone()).collect(),
        durations: samples.iter().map(|s| s.duration).collect(),
        qids: samples.iter().map(|s| s.qid.clone()).collect(),
    })
}

impl Batch {
    pub fn len(&self) -> usize {
        self.video.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sequence(data: &Array3<f64>, mask: &Array2<bool>, b: usize) -> FeatureSequence {
        let emb = data.index_axis(Axis(0), b).to_owned();
        let mask = mask.row(b).to_vec();
        FeatureSequence::with_mask(emb, mask).expect("collated sequences stay valid")
    }

    /// Padded video sequence of sample `b` (mask marks padding).
    pub fn video_seq(&self, b: usize) -> FeatureSequence {
        Self::sequence(&self.video, &self.video_mask, b)
    }

    pub fn text_seq(&self, b: usize) -> FeatureSequence {
        Self::sequence(&self.text, &self.text_mask, b)
    }

    /// Relevance labels of sample `b` over the padded length.
    pub fn relevance_row(&self, b: usize) -> Array1<i8> {
        self.relevance.row(b).to_owned()
    }

    pub fn saliency_row(&self, b: usize) -> Option<Array1<f64>> {
        self.has_saliency[b].then(|| self.saliency.row(b).to_owned())
    }

    /// Valid rows of every video, undoing the padding.
    pub fn uncollate_video(&self) -> Vec<Array2<f64>> {
        (0..self.len())
            .map(|b| masked_rows(self.video.index_axis(Axis(0), b), self.video_mask.row(b)))
            .collect()
    }

    pub fn uncollate_text(&self) -> Vec<Array2<f64>> {
        (0..self.len())
            .map(|b| masked_rows(self.text.index_axis(Axis(0), b), self.text_mask.row(b)))
            .collect()
    }
}

fn masked_rows(data: ArrayView2<f64>, mask: ndarray::ArrayView1<bool>) -> Array2<f64> {
    let idx: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    data.select(Axis(0), &idx)
}
