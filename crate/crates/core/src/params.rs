//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    /// Whether weight decay applies (false for biases and norm parameters).
    pub decay: bool,
}

/// Flat, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "Vec<Param>", into = "Vec<Param>")]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl From<Vec<Param>> for ParamStore {
    fn from(params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
        Self { params, index }
    }
}

impl From<ParamStore> for Vec<Param> {
    fn from(store: ParamStore) -> Self {
        store.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, decay });
        id
    }

    /// Glorot-uniform weight matrix.
    pub fn add_weight(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit));
        self.add(name, value, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)), false)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::ones((rows, cols)), false)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copy values from `other`, which must have the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.dim() != theirs.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.value.dim(),
                    theirs.name,
                    theirs.value.dim()
                )));
            }
            mine.value.assign(&theirs.value);
        }
        Ok(())
    }
}
