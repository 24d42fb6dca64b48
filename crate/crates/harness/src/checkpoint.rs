//! JSON checkpoints: run config, model config, epoch, parameters and the
//! validation report at save time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtg_core::model::{Model, ModelConfig};
use vtg_core::params::ParamStore;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::evaluate::EvalReport;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub params: ParamStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<EvalReport>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| HarnessError::format(path, e))?;
        w.flush().map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| HarnessError::format(path, e))
    }

    /// Rebuilds the model and checks the stored parameters against its
    /// layout.
    pub fn restore(&self) -> Result<(Model, ParamStore)> {
        let (model, mut store) = Model::new(self.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }
}
