//! Datasets: the synthetic planted-signal generator and loaders for
//! pre-extracted features with JSON-lines annotations.

pub mod annotations;
pub mod features;
pub mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::GroundingSample;

pub use annotations::{load_annotations, write_annotations, AnnotationRecord, ClipScore, Qid};
pub use features::{feature_path, load_features, read_bin, write_features};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Where a file-backed dataset lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub annotations: PathBuf,
    /// Holds `{vid}.bin` (or `.npz`).
    pub video_dir: PathBuf,
    /// Holds `{qid}.bin` (or `.npz`).
    pub text_dir: PathBuf,
    #[serde(default = "default_clip_duration")]
    pub clip_duration: f64,
    #[serde(default)]
    pub video_dim: Option<usize>,
    #[serde(default)]
    pub text_dim: Option<usize>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_clip_duration() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

impl DatasetManifest {
    /// Resolves relative paths against `root`.
    pub fn rooted(mut self, root: &std::path::Path) -> Self {
        for p in [&mut self.annotations, &mut self.video_dir, &mut self.text_dir] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        self
    }
}

/// Loads every annotated query with its video and text features.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<GroundingSample>> {
    if !(manifest.clip_duration > 0.0) {
        return Err(Error::Config("clip_duration must be positive".into()));
    }
    load_annotations(&manifest.annotations)?
        .iter()
        .map(|rec| load_record(manifest, rec))
        .collect()
}

/// Attaches features to one annotation record.
pub fn load_record(manifest: &DatasetManifest, rec: &AnnotationRecord) -> Result<GroundingSample> {
    let video = load_features(
        &feature_path(&manifest.video_dir, &rec.vid)?,
        manifest.video_dim,
        manifest.normalize,
    )?;
    let text = load_features(
        &feature_path(&manifest.text_dir, &rec.qid.to_string())?,
        manifest.text_dim,
        manifest.normalize,
    )?;
    let labels = rec.saliency_labels(video.len());
    GroundingSample::new(
        rec.qid.to_string(),
        rec.vid.clone(),
        video,
        text,
        rec.moments()?,
        labels,
        rec.duration,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn loads_a_tiny_file_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("video")).unwrap();
        std::fs::create_dir_all(root.join("text")).unwrap();
        std::fs::write(
            root.join("train.jsonl"),
            "{\"qid\": 5, \"query\": \"q\", \"vid\": \"a\", \"duration\": 8, \"relevant_windows\": [[2, 6]], \"saliency_scores\": [0, 4, 4, 0]}\n",
        )
        .unwrap();
        write_features(&root.join("video/a.bin"), &Array2::from_elem((4, 6), 1.0)).unwrap();
        write_features(&root.join("text/5.bin"), &Array2::from_elem((3, 5), 2.0)).unwrap();
        let manifest = DatasetManifest {
            annotations: "train.jsonl".into(),
            video_dir: "video".into(),
            text_dir: "text".into(),
            clip_duration: 2.0,
            video_dim: Some(6),
            text_dim: Some(5),
            normalize: true,
        }
        .rooted(root);
        let data = load_dataset(&manifest).unwrap();
        assert_eq!(data.len(), 1);
        let s = &data[0];
        assert_eq!(s.relevance.0, vec![0, 1, 1, 0]);
        assert_eq!(s.saliency_labels.as_deref(), Some(&[0.0, 4.0, 4.0, 0.0][..]));
        assert!((s.video.embeddings()[[0, 0]] - 1.0 / 6f64.sqrt()).abs() < 1e-7);

        std::fs::remove_file(root.join("text/5.bin")).unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::MissingFeature(_))));
    }
}
