//! Run configuration: a TOML tree whose dotted keys (`model.dim`,
//! `interaction.layers`, `loss.clip`, ...) are also the ablation grid axes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vtg_core::anchor::AnchorMethod;
use vtg_core::data::SyntheticConfig;
use vtg_core::interaction::GateMode;
use vtg_core::losses::LossWeights;
use vtg_core::model::ModelConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub interaction: InteractionSection,
    pub encoder: LayersSection,
    pub decoder: DecoderSection,
    pub saliency: SaliencySection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            interaction: InteractionSection::default(),
            encoder: LayersSection { layers: 3 },
            decoder: DecoderSection::default(),
            saliency: SaliencySection::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub dropout: f64,
    pub anchor: AnchorMethod,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: 256,
            dropout: 0.1,
            anchor: AnchorMethod::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionSection {
    pub layers: usize,
    /// Heads of every attention block in the model.
    pub heads: usize,
    pub gates: GateMode,
}

impl Default for InteractionSection {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            gates: GateMode::Both,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayersSection {
    pub layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub layers: usize,
    pub queries: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self { layers: 3, queries: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    pub vector_weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    /// Multiplier applied once `lr_decay_epoch` epochs have completed.
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    /// Validate every this many epochs; 0 validates only after the last.
    pub eval_every: usize,
    /// Overlap suppression applied to ranked moments at evaluation.
    pub nms_iou: Option<f64>,
    pub out_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-4,
            lr_decay_epoch: 100,
            lr_decay_factor: 0.1,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            checkpoint_every: 10,
            eval_every: 1,
            nms_iou: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub synthetic: SyntheticSplits,
    pub files: FileSplits,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticSplits::default(),
            files: FileSplits::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

/// A generated set carved into consecutive train/val/test blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSplits {
    pub generator: SyntheticConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSplits {
    fn default() -> Self {
        Self {
            generator: SyntheticConfig::default(),
            train: 800,
            val: 200,
            test: 0,
        }
    }
}

/// Pre-extracted features with one annotation file per split. Relative
/// paths resolve against `root`, which itself resolves against
/// `VTG_DATA_ROOT` when that is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileSplits {
    pub root: PathBuf,
    pub video_dir: PathBuf,
    pub text_dir: PathBuf,
    pub clip_duration: f64,
    pub normalize: bool,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl Default for FileSplits {
    fn default() -> Self {
        Self {
            root: PathBuf::new(),
            video_dir: PathBuf::from("video"),
            text_dir: PathBuf::from("text"),
            clip_duration: 2.0,
            normalize: true,
            train: None,
            val: None,
            test: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.encoder.layers == 0 {
            return bad("encoder.layers must be positive");
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("train.lr must be positive");
        }
        if !(t.lr_decay_factor > 0.0 && t.lr_decay_factor <= 1.0) {
            return bad("train.lr_decay_factor must lie in (0, 1]");
        }
        if t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return bad("train.weight_decay and train.grad_clip must be non-negative");
        }
        if let Some(iou) = t.nms_iou {
            if !(0.0..=1.0).contains(&iou) {
                return bad("train.nms_iou must lie in [0, 1]");
            }
        }
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.data.source == DataSource::Synthetic {
            let s = &self.data.synthetic;
            if s.train + s.val + s.test != s.generator.n_samples {
                return bad("data.synthetic train + val + test must equal generator.n_samples");
            }
            s.generator.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Model configuration for features of the given widths.
    pub fn model_config(&self, video_dim: usize, text_dim: usize) -> ModelConfig {
        ModelConfig {
            video_dim,
            text_dim,
            dim: self.model.dim,
            heads: self.interaction.heads,
            interaction_layers: self.interaction.layers,
            encoder_layers: self.encoder.layers,
            decoder_layers: self.decoder.layers,
            queries: self.decoder.queries,
            dropout: self.model.dropout,
            anchor: self.model.anchor,
            gates: self.interaction.gates,
            saliency_vector_weights: self.saliency.vector_weights,
        }
    }

    /// Replaces the value at a dotted key. The key must already exist in the
    /// serialized configuration, so misspelled axes are rejected.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        let slot = lookup_mut(&mut tree, key).ok_or_else(|| HarnessError::UnknownKey(key.to_string()))?;
        *slot = coerce(slot, value);
        let cfg: Self = tree
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("{key}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn lookup_mut<'a>(tree: &'a mut toml::Value, key: &str) -> Option<&'a mut toml::Value> {
    key.split('.').try_fold(tree, |node, part| node.as_table_mut()?.get_mut(part))
}

/// Integers given for float fields are widened.
fn coerce(current: &toml::Value, value: toml::Value) -> toml::Value {
    match (current, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.encoder.layers, 3);
        assert_eq!(cfg.decoder.layers, 3);
        assert_eq!(cfg.decoder.queries, 10);
        assert_eq!(cfg.model.dim, 256);
        assert_eq!(cfg.interaction.heads, 8);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 3\n[model]\ndim = 32\nanchor = \"max\"\n[interaction]\nlayers = 1\nheads = 4\n[loss]\nclip = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.model.anchor, AnchorMethod::Max);
        assert_eq!(cfg.interaction.layers, 1);
        assert_eq!(cfg.loss.clip, 0.5);
        assert_eq!(cfg.loss.l1, 10.0);
        let m = cfg.model_config(64, 48);
        assert_eq!((m.heads, m.interaction_layers, m.decoder_layers), (4, 1, 3));
    }

    #[test]
    fn unknown_and_invalid_fields_fail() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbatch_size = 0\n").is_err());
        assert!(RunConfig::from_toml("[interaction]\ngates = \"sideways\"\n").is_err());
    }

    #[test]
    fn overrides_follow_dotted_keys() {
        let cfg = RunConfig::default();
        let c = cfg.with_override("loss.frame", toml::Value::Integer(0)).unwrap();
        assert_eq!(c.loss.frame, 0.0);
        let c = cfg.with_override("interaction.gates", "local".into()).unwrap();
        assert_eq!(c.interaction.gates, GateMode::Local);
        let c = cfg.with_override("data.synthetic.generator.noise_std", 0.25.into()).unwrap();
        assert_eq!(c.data.synthetic.generator.noise_std, 0.25);
        assert!(matches!(
            cfg.with_override("loss.nonsense", 1.into()),
            Err(HarnessError::UnknownKey(_))
        ));
        assert!(cfg.with_override("interaction.gates", "sideways".into()).is_err());
    }
}
