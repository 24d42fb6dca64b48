//! Split selection for synthetic and file-backed data.

use std::path::PathBuf;

use vtg_core::data::{generate_synthetic, load_annotations, load_record, DatasetManifest};
use vtg_core::types::GroundingSample;

use crate::config::{DataSource, FileSplits, RunConfig};
use crate::error::{HarnessError, Result};

pub const DATA_ROOT_VAR: &str = "VTG_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(HarnessError::Split(other.to_string())),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One record of a split: its query id and the loaded sample or the reason
/// it could not be loaded.
pub type LoadedRecord = (String, Result<GroundingSample>);

/// Loads a split, failing on the first bad record.
pub fn load_split(cfg: &RunConfig, split: Split, dims: Option<(usize, usize)>) -> Result<Vec<GroundingSample>> {
    load_split_records(cfg, split, dims)?.into_iter().map(|(_, r)| r).collect()
}

/// Loads a split record by record. Errors that concern the whole split
/// (missing annotation file, bad generator config) are returned directly.
/// `dims` are the expected video and text feature widths, when known.
pub fn load_split_records(cfg: &RunConfig, split: Split, dims: Option<(usize, usize)>) -> Result<Vec<LoadedRecord>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let s = &cfg.data.synthetic;
            let all = generate_synthetic(&s.generator)?;
            let range = match split {
                Split::Train => 0..s.train,
                Split::Val => s.train..s.train + s.val,
                Split::Test => s.train + s.val..s.train + s.val + s.test,
            };
            Ok(all[range].iter().map(|x| (x.qid.clone(), Ok(x.clone()))).collect())
        }
        DataSource::Files => {
            let files = &cfg.data.files;
            let ann = match split {
                Split::Train => &files.train,
                Split::Val => &files.val,
                Split::Test => &files.test,
            }
            .as_ref()
            .ok_or_else(|| HarnessError::Config(format!("data.files.{split} is not set")))?;
            let manifest = manifest(files, ann.clone(), dims);
            let records = load_annotations(&manifest.annotations)?;
            Ok(records
                .iter()
                .map(|rec| (rec.qid.to_string(), load_record(&manifest, rec).map_err(Into::into)))
                .collect())
        }
    }
}

/// `root` joined onto `VTG_DATA_ROOT` when the variable is set and `root`
/// is relative.
pub fn data_root(files: &FileSplits) -> PathBuf {
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(base) if files.root.is_relative() => PathBuf::from(base).join(&files.root),
        _ => files.root.clone(),
    }
}

fn manifest(files: &FileSplits, annotations: PathBuf, dims: Option<(usize, usize)>) -> DatasetManifest {
    DatasetManifest {
        annotations,
        video_dir: files.video_dir.clone(),
        text_dir: files.text_dir.clone(),
        clip_duration: files.clip_duration,
        video_dim: dims.map(|d| d.0),
        text_dim: dims.map(|d| d.1),
        normalize: files.normalize,
    }
    .rooted(&data_root(files))
}
