//! Global text anchor: one vector summarizing the whole query.
//!
//! Four pooling methods are available. Mean pooling is the default;
//! `weighted` is a learned single-query attention pool and `transformer`
//! prepends a learned token, runs one encoder layer over it and the text
//! tokens, and reads the token back out. None of them add positional
//! information, so every method is invariant to token order.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, EncoderLayer};
use crate::params::{ParamId, ParamStore};
use crate::types::FeatureSequence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorMethod {
    #[default]
    Mean,
    Max,
    Weighted,
    Transformer,
}

impl AnchorMethod {
    pub const ALL: [AnchorMethod; 4] = [
        AnchorMethod::Mean,
        AnchorMethod::Max,
        AnchorMethod::Weighted,
        AnchorMethod::Transformer,
    ];
}

impl fmt::Display for AnchorMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AnchorMethod::Mean => "mean",
            AnchorMethod::Max => "max",
            AnchorMethod::Weighted => "weighted",
            AnchorMethod::Transformer => "transformer",
        };
        f.write_str(s)
    }
}

impl FromStr for AnchorMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AnchorMethod::Mean),
            "max" => Ok(AnchorMethod::Max),
            "weighted" => Ok(AnchorMethod::Weighted),
            "transformer" => Ok(AnchorMethod::Transformer),
            other => Err(Error::Config(format!("unknown anchor method {other:?}"))),
        }
    }
}

fn check_mask(mask: &[bool]) -> Result<()> {
    if mask.iter().any(|m| *m) {
        Ok(())
    } else {
        Err(Error::AllMasked("text"))
    }
}

/// Mean of the valid rows of `x`, `1 × d`.
pub fn pool_mean(g: &Graph, x: Var, mask: &[bool]) -> Result<Var> {
    check_mask(mask)?;
    Ok(g.masked_mean_rows(x, mask))
}

/// Channel-wise maximum of the valid rows of `x`, `1 × d`.
pub fn pool_max(g: &Graph, x: Var, mask: &[bool]) -> Result<Var> {
    check_mask(mask)?;
    Ok(g.masked_max_rows(x, mask))
}

/// Softmax-weighted sum of the valid rows, weights from `x · score`.
///
/// Returns the anchor and the `1 × L` weight row.
pub fn pool_weighted(g: &Graph, x: Var, mask: &[bool], score: Var) -> Result<(Var, Var)> {
    check_mask(mask)?;
    // score is 1 × d; logits are 1 × L
    let logits = g.matmul_t(score, x);
    let w = g.masked_softmax(logits, mask);
    Ok((g.matmul(w, x), w))
}

/// Learned anchor-token encoder used by [`AnchorMethod::Transformer`].
#[derive(Clone, Debug)]
pub struct AnchorEncoder {
    pub token: ParamId,
    pub layer: EncoderLayer,
}

#[derive(Clone, Debug)]
pub struct TextAnchor {
    pub method: AnchorMethod,
    pub score: Option<ParamId>,
    pub encoder: Option<AnchorEncoder>,
}

/// Anchor vector plus whatever attention weights the method produced.
pub struct PooledAnchor {
    pub anchor: Var,
    pub weights: Vec<Var>,
}

impl TextAnchor {
    pub fn new(
        store: &mut ParamStore,
        method: AnchorMethod,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let score = (method == AnchorMethod::Weighted)
            .then(|| store.add_weight("anchor.score", 1, dim, rng));
        let encoder = (method == AnchorMethod::Transformer).then(|| AnchorEncoder {
            token: store.add_weight("anchor.token", 1, dim, rng),
            layer: EncoderLayer::new(store, "anchor.encoder", dim, heads, 0.0, rng),
        });
        Self {
            method,
            score,
            encoder,
        }
    }

    /// Pool `text` (`L_t × d`) into a `1 × d` anchor.
    pub fn forward(&self, cx: Ctx, text: Var, mask: &[bool]) -> Result<Var> {
        Ok(self.forward_with_weights(cx, text, mask)?.anchor)
    }

    pub fn forward_with_weights(&self, cx: Ctx, text: Var, mask: &[bool]) -> Result<PooledAnchor> {
        let g = cx.graph;
        match self.method {
            AnchorMethod::Mean => Ok(PooledAnchor {
                anchor: pool_mean(g, text, mask)?,
                weights: vec![],
            }),
            AnchorMethod::Max => Ok(PooledAnchor {
                anchor: pool_max(g, text, mask)?,
                weights: vec![],
            }),
            AnchorMethod::Weighted => {
                let score = cx.p(self.score.expect("weighted pooling has a score vector"));
                let (anchor, w) = pool_weighted(g, text, mask, score)?;
                Ok(PooledAnchor {
                    anchor,
                    weights: vec![w],
                })
            }
            AnchorMethod::Transformer => {
                check_mask(mask)?;
                let enc = self.encoder.as_ref().expect("transformer pooling has an encoder");
                let seq = g.concat_rows(&[cx.p(enc.token), text]);
                let mut full_mask = Vec::with_capacity(mask.len() + 1);
                full_mask.push(true);
                full_mask.extend_from_slice(mask);
                let (out, weights) = enc.layer.forward(cx, seq, &full_mask);
                Ok(PooledAnchor {
                    anchor: g.slice_rows(out, 0, 1),
                    weights,
                })
            }
        }
    }
}

fn run_pool(text: &FeatureSequence, f: impl Fn(&Graph, Var, &[bool]) -> Result<Var>) -> Result<Array1<f64>> {
    let g = Graph::new();
    let x = g.constant(text.embeddings().clone());
    let v = f(&g, x, text.mask())?;
    let out = g.value(v).index_axis(Axis(0), 0).to_owned();
    Ok(out)
}

/// Mean pooling on plain values.
pub fn mean_anchor(text: &FeatureSequence) -> Result<Array1<f64>> {
    run_pool(text, pool_mean)
}

/// Max pooling on plain values.
pub fn max_anchor(text: &FeatureSequence) -> Result<Array1<f64>> {
    run_pool(text, pool_max)
}

/// Weighted pooling on plain values with a fixed score vector.
pub fn weighted_anchor(text: &FeatureSequence, score: &Array1<f64>) -> Result<Array1<f64>> {
    let score = score.clone().insert_axis(Axis(0));
    run_pool(text, move |g, x, mask| {
        let s = g.constant(Array2::clone(&score));
        Ok(pool_weighted(g, x, mask, s)?.0)
    })
}
