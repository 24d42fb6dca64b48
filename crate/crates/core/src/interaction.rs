//! Gated cross-attention between video clips and text tokens, steered by the
//! global text anchor.
//!
//! Each layer runs standard cross-attention from clips (queries) to tokens
//! (keys/values) and then modulates the result with two gates:
//!
//! * the **local gate** `g_L = σ(Q W_q^g ⊙ K^G W_k^g)` scores every channel of
//!   every clip against the mean-pooled text key `K^G`;
//! * the **non-local gate** `g_N` is the min-max normalized attention of the
//!   anchor over clips, one scalar per clip.
//!
//! The anchor attention reuses the layer's projections with swapped roles:
//! the anchor goes through `W_K` and acts as the query, the clips go through
//! `W_Q` and act as keys, and `W_V'` projects clip values. Its attention row
//! is computed once and feeds both the non-local gate and the enriched
//! anchor `t̂_a`.
//!
//! The gated attention output `g_N ⊙ (g_L ⊙ F_v')` is added to the layer
//! input, so the residual path always carries the raw clip feature, and then
//! goes through post-norm feedforward scaffolding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{attention, Ctx, FeedForward, LayerNorm, Linear};
use crate::params::ParamStore;

/// Which gates are active (the gate ablation axis).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    None,
    Local,
    #[serde(rename = "nonlocal")]
    NonLocal,
    #[default]
    Both,
}

impl GateMode {
    pub const ALL: [GateMode; 4] = [GateMode::None, GateMode::Local, GateMode::NonLocal, GateMode::Both];

    pub fn local(self) -> bool {
        matches!(self, GateMode::Local | GateMode::Both)
    }

    pub fn non_local(self) -> bool {
        matches!(self, GateMode::NonLocal | GateMode::Both)
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::None => "none",
            GateMode::Local => "local",
            GateMode::NonLocal => "nonlocal",
            GateMode::Both => "both",
        })
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GateMode::None),
            "local" => Ok(GateMode::Local),
            "nonlocal" => Ok(GateMode::NonLocal),
            "both" => Ok(GateMode::Both),
            other => Err(Error::Config(format!("unknown gate mode {other:?}"))),
        }
    }
}

fn require_valid(mask: &[bool], what: &'static str) -> Result<()> {
    if mask.iter().any(|m| *m) {
        Ok(())
    } else {
        Err(Error::AllMasked(what))
    }
}

/// Result of the clip-to-token cross-attention.
pub struct CrossAttention {
    /// Attended video features `F_v'`, `L_v × d`.
    pub output: Var,
    /// Projected clip queries `Q = F_v W_Q`.
    pub query: Var,
    /// Projected token keys `K = F_t W_K`.
    pub key: Var,
    /// Per-head attention rows, `L_v × L_t` each.
    pub weights: Vec<Var>,
}

/// `softmax(QKᵀ/√d_k) V` with `Q = F_v W_Q`, `K = F_t W_K`, `V = F_t W_V`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    g: &Graph,
    video: Var,
    text: Var,
    text_mask: &[bool],
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<CrossAttention> {
    require_valid(text_mask, "text")?;
    let query = g.matmul(video, w_q);
    let key = g.matmul(text, w_k);
    let value = g.matmul(text, w_v);
    let att = attention(g, query, key, value, heads, text_mask);
    Ok(CrossAttention {
        output: att.output,
        query,
        key,
        weights: att.weights,
    })
}

/// Channel-wise clip/text relevance `σ(Q W_q^g ⊙ K^G W_k^g)`, `L_v × d`.
///
/// `key_global` is the `1 × d` mean of the projected text keys.
pub fn local_gate(g: &Graph, query: Var, key_global: Var, gate_q: Var, gate_k: Var) -> Var {
    let q = g.matmul(query, gate_q);
    let k = g.matmul(key_global, gate_k);
    g.sigmoid(g.mul(q, k))
}

/// `g_L ⊙ F_v'`.
pub fn apply_local_gate(g: &Graph, gate: Var, attended: Var) -> Var {
    g.mul(gate, attended)
}

/// Head-averaged attention of the anchor over valid clips, `1 × L_v`.
///
/// `anchor_query` is `t_a W_K` and `clip_keys` is `F_v W_Q`.
pub fn anchor_scores(
    g: &Graph,
    anchor_query: Var,
    clip_keys: Var,
    video_mask: &[bool],
    heads: usize,
) -> Result<Var> {
    require_valid(video_mask, "video")?;
    let d = g.shape(anchor_query).1;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut rows = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qa, ka) = if heads == 1 {
            (anchor_query, clip_keys)
        } else {
            (g.slice_cols(anchor_query, h * dk, dk), g.slice_cols(clip_keys, h * dk, dk))
        };
        let logits = g.scale(g.matmul_t(qa, ka), scale);
        rows.push(g.masked_softmax(logits, video_mask));
    }
    if heads == 1 {
        return Ok(rows[0]);
    }
    let mut acc = rows[0];
    for r in &rows[1..] {
        acc = g.add(acc, *r);
    }
    Ok(g.scale(acc, 1.0 / heads as f64))
}

/// Non-local gate `g_N`: min-max normalized anchor scores as an `L_v × 1`
/// column. Padding maps to 0; all-equal scores map to all ones.
pub fn non_local_weights(g: &Graph, scores: Var, video_mask: &[bool]) -> Result<Var> {
    require_valid(video_mask, "video")?;
    let col = g.transpose(scores);
    Ok(g.min_max_normalize(col, video_mask))
}

/// Enriched anchor `t̂_a = scores · (F_v W_V')`, `1 × d`.
pub fn anchor_query_attention(g: &Graph, scores: Var, video: Var, w_value: Var) -> Var {
    g.matmul(scores, g.matmul(video, w_value))
}

/// Learned parameters of one gated cross-attention layer.
#[derive(Clone, Debug)]
pub struct GatedCrossAttnLayer {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub gate_q: Linear,
    pub gate_k: Linear,
    pub anchor_value: Linear,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
    pub heads: usize,
    pub dropout: f64,
    pub gates: GateMode,
}

/// Everything one layer computes.
pub struct LayerOutput {
    /// Layer output after residual, norm and feedforward (`O_l`).
    pub output: Var,
    /// Gated attention before the residual add, `g_N ⊙ g_L ⊙ F_v'`.
    pub gated: Var,
    pub attended: Var,
    pub local_gate: Option<Var>,
    /// `L_v × 1`, all ones on valid clips when the non-local gate is off.
    pub non_local: Var,
    /// Anchor attention row before min-max normalization.
    pub anchor_scores: Var,
    pub enriched_anchor: Var,
    pub cross_weights: Vec<Var>,
}

impl GatedCrossAttnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        gates: GateMode,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "head count must divide dim");
        let lin = |store: &mut ParamStore, part: &str, rng: &mut _| {
            Linear::new(store, &format!("{name}.{part}"), dim, dim, false, rng)
        };
        Self {
            w_q: lin(store, "w_q", rng),
            w_k: lin(store, "w_k", rng),
            w_v: lin(store, "w_v", rng),
            gate_q: lin(store, "gate_q", rng),
            gate_k: lin(store, "gate_k", rng),
            anchor_value: lin(store, "anchor_value", rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, dropout, rng),
            heads,
            dropout,
            gates,
        }
    }

    /// Anchor-query cross-attention on its own: `(t̂_a, scores)`.
    pub fn anchor_attend(
        &self,
        cx: Ctx,
        anchor: Var,
        video: Var,
        video_mask: &[bool],
    ) -> Result<(Var, Var)> {
        let g = cx.graph;
        let clip_keys = g.matmul(video, cx.p(self.w_q.weight));
        let anchor_query = g.matmul(anchor, cx.p(self.w_k.weight));
        let scores = anchor_scores(g, anchor_query, clip_keys, video_mask, self.heads)?;
        let enriched = anchor_query_attention(g, scores, video, cx.p(self.anchor_value.weight));
        Ok((enriched, scores))
    }

    pub fn forward(
        &self,
        cx: Ctx,
        video: Var,
        video_mask: &[bool],
        text: Var,
        text_mask: &[bool],
        anchor: Var,
    ) -> Result<LayerOutput> {
        let g = cx.graph;
        require_valid(video_mask, "video")?;
        let ca = cross_attention(
            g,
            video,
            text,
            text_mask,
            cx.p(self.w_q.weight),
            cx.p(self.w_k.weight),
            cx.p(self.w_v.weight),
            self.heads,
        )?;

        let (mut gated, local) = if self.gates.local() {
            let key_global = g.masked_mean_rows(ca.key, text_mask);
            let gl = local_gate(
                g,
                ca.query,
                key_global,
                cx.p(self.gate_q.weight),
                cx.p(self.gate_k.weight),
            );
            (apply_local_gate(g, gl, ca.output), Some(gl))
        } else {
            (ca.output, None)
        };

        // The anchor attends with W_K as its query projection over clip keys
        // F_v W_Q, which is exactly the cross-attention query above.
        let anchor_query = g.matmul(anchor, cx.p(self.w_k.weight));
        let scores = anchor_scores(g, anchor_query, ca.query, video_mask, self.heads)?;
        let enriched = anchor_query_attention(g, scores, video, cx.p(self.anchor_value.weight));
        let non_local = if self.gates.non_local() {
            let gn = non_local_weights(g, scores, video_mask)?;
            gated = g.mul(gn, gated);
            gn
        } else {
            let ones = ndarray::Array2::from_shape_fn((video_mask.len(), 1), |(i, _)| {
                f64::from(u8::from(video_mask[i]))
            });
            g.constant(ones)
        };

        let h = g.add(video, g.dropout(gated, self.dropout));
        let h = self.norm.forward(cx, h);
        let output = self.ffn.forward(cx, h);
        Ok(LayerOutput {
            output,
            gated,
            attended: ca.output,
            local_gate: local,
            non_local,
            anchor_scores: scores,
            enriched_anchor: enriched,
            cross_weights: ca.weights,
        })
    }
}

/// Outputs of the whole interaction stack.
pub struct InteractionOutput {
    /// Input of every layer; `layer_inputs[l]` feeds layer `l`.
    pub layer_inputs: Vec<Var>,
    /// `O_1 .. O_N`.
    pub intermediates: Vec<Var>,
    /// Final-layer video output `F̂_v` (same node as the last intermediate).
    pub refined_video: Var,
    /// Final-layer enriched anchor `t̂_a`.
    pub enriched_anchor: Var,
    /// Final-layer non-local gate `g_N`, `L_v × 1`.
    pub non_local_weights: Var,
    pub layers: Vec<LayerOutput>,
}

#[derive(Clone, Debug)]
pub struct InteractionStack {
    pub layers: Vec<GatedCrossAttnLayer>,
}

impl InteractionStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_layers: usize,
        dim: usize,
        heads: usize,
        dropout: f64,
        gates: GateMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::Config("interaction stack needs at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|l| {
                GatedCrossAttnLayer::new(store, &format!("{name}.{l}"), dim, heads, dropout, gates, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn last(&self) -> &GatedCrossAttnLayer {
        self.layers.last().expect("non-empty stack")
    }

    pub fn forward(
        &self,
        cx: Ctx,
        video: Var,
        video_mask: &[bool],
        text: Var,
        text_mask: &[bool],
        anchor: Var,
    ) -> Result<InteractionOutput> {
        let mut x = video;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer_inputs.push(x);
            let out = layer.forward(cx, x, video_mask, text, text_mask, anchor)?;
            x = out.output;
            outs.push(out);
        }
        let last = outs.last().expect("non-empty stack");
        Ok(InteractionOutput {
            layer_inputs,
            intermediates: outs.iter().map(|o| o.output).collect(),
            refined_video: last.output,
            enriched_anchor: last.enriched_anchor,
            non_local_weights: last.non_local,
            layers: outs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let g = Graph::new();
        let video = g.constant(array![[0.3, -1.0], [2.0, 0.5], [0.0, 0.0]]);
        let text = g.constant(array![[1.0, -2.0]]);
        let wv = array![[0.5, 1.0], [2.0, -1.0]];
        let ca = cross_attention(
            &g,
            video,
            text,
            &[true],
            g.constant(eye(2)),
            g.constant(eye(2)),
            g.constant(wv.clone()),
            1,
        )
        .unwrap();
        let expected = array![[1.0, -2.0]].dot(&wv);
        for row in g.value(ca.output).rows() {
            assert_abs_diff_eq!(row.to_owned(), expected.row(0).to_owned(), epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_logits_average_the_values() {
        let g = Graph::new();
        let video = g.constant(Array2::zeros((2, 2)));
        let text = g.constant(array![[1.0, 2.0], [3.0, -4.0], [5.0, 0.0]]);
        let ca = cross_attention(
            &g,
            video,
            text,
            &[true, true, true],
            g.constant(eye(2)),
            g.constant(eye(2)),
            g.constant(eye(2)),
            1,
        )
        .unwrap();
        let out = g.value(ca.output);
        assert_abs_diff_eq!(out[[0, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[[1, 1]], -2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_projection_hand_instance() {
        let g = Graph::new();
        let video = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let text = g.constant(array![[1.0, 2.0], [0.0, -1.0]]);
        let ca = cross_attention(
            &g,
            video,
            text,
            &[true, true],
            g.constant(eye(2)),
            g.constant(eye(2)),
            g.constant(eye(2)),
            1,
        )
        .unwrap();
        let out = g.value(ca.output);
        // row 0: logits (1/√2, 0); row 1: logits (2/√2, -1/√2)
        let w0 = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
        let w1 = 1.0 / (1.0 + (-3.0 / 2f64.sqrt()).exp());
        assert_abs_diff_eq!(out[[0, 0]], w0, epsilon = 1e-6);
        assert_abs_diff_eq!(out[[0, 1]], 2.0 * w0 - (1.0 - w0), epsilon = 1e-6);
        assert_abs_diff_eq!(out[[1, 0]], w1, epsilon = 1e-6);
        assert_abs_diff_eq!(out[[1, 1]], 2.0 * w1 - (1.0 - w1), epsilon = 1e-6);
        assert_abs_diff_eq!(out[[0, 1]], 1.00928, epsilon = 1e-4);
        assert_abs_diff_eq!(out[[1, 1]], 1.67885, epsilon = 1e-4);
    }

    #[test]
    fn all_masked_text_is_rejected() {
        let g = Graph::new();
        let x = g.constant(eye(2));
        let r = cross_attention(&g, x, x, &[false, false], x, x, x, 1);
        assert!(matches!(r, Err(Error::AllMasked("text"))));
    }

    #[test]
    fn local_gate_examples() {
        let g = Graph::new();
        let id = g.constant(eye(2));
        let zero_q = g.constant(Array2::zeros((3, 2)));
        let kg = g.constant(array![[2.0, 2.0]]);
        let gl = local_gate(&g, zero_q, kg, id, id);
        assert!(g.value(gl).iter().all(|v| *v == 0.5));

        let q = g.constant(array![[1.0, -1.0]]);
        let gl = local_gate(&g, q, kg, id, id);
        let v = g.value(gl).clone();
        assert_abs_diff_eq!(v[[0, 0]], sigmoid(2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v[[0, 1]], sigmoid(-2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(v[[0, 0]], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(v[[0, 1]], 0.1192, epsilon = 1e-4);

        let big = g.constant(array![[30.0, 30.0]]);
        let gl = local_gate(&g, big, kg, id, id);
        assert!(g.value(gl).iter().all(|v| *v > 0.999_999));
    }

    #[test]
    fn apply_local_gate_examples() {
        let g = Graph::new();
        let f = array![[1.5, -2.0], [0.25, 4.0]];
        let fv = g.constant(f.clone());
        let ones = g.constant(Array2::ones((2, 2)));
        assert_eq!(*g.value(apply_local_gate(&g, ones, fv)), f);
        let half = g.constant(Array2::from_elem((2, 2), 0.5));
        assert_eq!(*g.value(apply_local_gate(&g, half, fv)), &f * 0.5);
        let gate = g.constant(array![[0.2, 0.9], [0.6, 0.1]]);
        let out = g.value(apply_local_gate(&g, gate, fv)).clone();
        assert_abs_diff_eq!(out, array![[0.3, -1.8], [0.15, 0.4]], epsilon = 1e-12);
    }

    #[test]
    fn non_local_weight_examples() {
        let g = Graph::new();
        let single = g.constant(array![[0.7]]);
        assert_eq!(*g.value(non_local_weights(&g, single, &[true]).unwrap()), array![[1.0]]);
        let flat = g.constant(array![[0.25, 0.25, 0.25, 0.25]]);
        let gn = non_local_weights(&g, flat, &[true; 4]).unwrap();
        assert!(g.value(gn).iter().all(|v| *v == 1.0));
        let raw = g.constant(array![[0.1, 0.3, 0.6]]);
        let gn = g.value(non_local_weights(&g, raw, &[true; 3]).unwrap()).clone();
        assert_eq!(gn[[0, 0]], 0.0);
        assert_abs_diff_eq!(gn[[1, 0]], 0.4, epsilon = 1e-12);
        assert_eq!(gn[[2, 0]], 1.0);
        let raw = g.constant(array![[0.1]]);
        assert!(non_local_weights(&g, raw, &[false]).is_err());
    }

    #[test]
    fn anchor_attention_examples() {
        let g = Graph::new();
        let wv = array![[1.0, 2.0], [-1.0, 0.5]];
        let clip = array![[0.4, -0.3]];
        let video = g.constant(clip.clone());
        let anchor = g.constant(array![[1.0, 1.0]]);
        let id = g.constant(eye(2));
        let keys = g.matmul(video, id);
        let s = anchor_scores(&g, g.matmul(anchor, id), keys, &[true], 1).unwrap();
        let t = anchor_query_attention(&g, s, video, g.constant(wv.clone()));
        assert_abs_diff_eq!(*g.value(t), clip.dot(&wv), epsilon = 1e-12);

        let same = g.constant(array![[0.4, -0.3], [0.4, -0.3], [0.4, -0.3]]);
        let s = anchor_scores(&g, g.matmul(anchor, id), same, &[true; 3], 2).unwrap();
        let t = anchor_query_attention(&g, s, same, g.constant(wv.clone()));
        assert_abs_diff_eq!(*g.value(t), clip.dot(&wv), epsilon = 1e-12);

        // two clips, identity projections, one head
        let video = g.constant(array![[1.0, 0.0], [0.0, 2.0]]);
        let anchor = g.constant(array![[1.0, 1.0]]);
        let s = anchor_scores(&g, anchor, video, &[true, true], 1).unwrap();
        let t = anchor_query_attention(&g, s, video, id);
        let l0 = 1.0 / 2f64.sqrt();
        let l1 = 2.0 / 2f64.sqrt();
        let w0 = l0.exp() / (l0.exp() + l1.exp());
        let t = g.value(t);
        assert_abs_diff_eq!(t[[0, 0]], w0, epsilon = 1e-6);
        assert_abs_diff_eq!(t[[0, 1]], 2.0 * (1.0 - w0), epsilon = 1e-6);
    }

    fn layer(gates: GateMode, heads: usize, seed: u64) -> (ParamStore, GatedCrossAttnLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = GatedCrossAttnLayer::new(&mut store, "l", 4, heads, 0.0, gates, &mut rng);
        (store, layer)
    }

    fn layer_norm_ref(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
        }
        &out * gamma + beta
    }

    fn softmax_ref(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// Straight-line single-head reference of the gated layer.
    fn reference_layer(
        store: &ParamStore,
        l: &GatedCrossAttnLayer,
        video: &Array2<f64>,
        text: &Array2<f64>,
        anchor: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
        let w = |lin: &Linear| store.value(lin.weight).clone();
        let d = video.ncols() as f64;
        let q = video.dot(&w(&l.w_q));
        let k = text.dot(&w(&l.w_k));
        let v = text.dot(&w(&l.w_v));
        let mut attended = Array2::zeros((video.nrows(), video.ncols()));
        for i in 0..video.nrows() {
            let logits: Vec<f64> = (0..text.nrows())
                .map(|j| q.row(i).dot(&k.row(j)) / d.sqrt())
                .collect();
            let p = softmax_ref(&logits);
            for j in 0..text.nrows() {
                let mut row = attended.row_mut(i);
                row.scaled_add(p[j], &v.row(j));
            }
        }
        let kg = k.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let gl = (q.dot(&w(&l.gate_q)) * kg.dot(&w(&l.gate_k))).mapv(sigmoid);
        let qa = anchor.dot(&w(&l.w_k));
        let logits: Vec<f64> = (0..video.nrows())
            .map(|i| qa.row(0).dot(&q.row(i)) / d.sqrt())
            .collect();
        let raw = softmax_ref(&logits);
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gn: Vec<f64> = raw.iter().map(|r| (r - lo) / (hi - lo)).collect();
        let mut gated = &gl * &attended;
        for (i, mut row) in gated.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|x| x * gn[i]);
        }
        let h = layer_norm_ref(&(video + &gated), store.value(l.norm.gamma), store.value(l.norm.beta));
        let f = &l.ffn;
        let up = (h.dot(store.value(f.up.weight)) + store.value(f.up.bias.unwrap())).mapv(|x| x.max(0.0));
        let down = up.dot(store.value(f.down.weight)) + store.value(f.down.bias.unwrap());
        let out = layer_norm_ref(&(&h + &down), store.value(f.norm.gamma), store.value(f.norm.beta));
        let mut raw_v = Array2::zeros((1, video.ncols()));
        let vals = video.dot(&w(&l.anchor_value));
        for i in 0..video.nrows() {
            raw_v.row_mut(0).scaled_add(raw[i], &vals.row(i));
        }
        (out, raw_v, gn)
    }

    #[test]
    fn layer_matches_reference_composition() {
        let (store, l) = layer(GateMode::Both, 1, 11);
        let video = array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.2, 0.8], [-0.4, 0.9, 1.1, -0.6]];
        let text = array![[0.1, 0.2, -0.3, 1.0], [0.7, -0.5, 0.4, 0.2]];
        let anchor = text.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let (vv, tt, aa) = (g.constant(video.clone()), g.constant(text.clone()), g.constant(anchor.clone()));
        let out = l.forward(cx, vv, &[true; 3], tt, &[true; 2], aa).unwrap();
        let (ref_out, ref_anchor, ref_gn) = reference_layer(&store, &l, &video, &text, &anchor);
        assert_abs_diff_eq!(*g.value(out.output), ref_out, epsilon = 1e-10);
        assert_abs_diff_eq!(*g.value(out.enriched_anchor), ref_anchor, epsilon = 1e-10);
        let gn: Vec<f64> = g.value(out.non_local).iter().copied().collect();
        for (a, b) in gn.iter().zip(&ref_gn) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_gate_suppresses_clip_contribution() {
        let (store, l) = layer(GateMode::Both, 2, 5);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let video = g.constant(array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.2, 0.8], [-0.4, 0.9, 1.1, -0.6]]);
        let text = g.constant(array![[0.1, 0.2, -0.3, 1.0], [0.7, -0.5, 0.4, 0.2]]);
        let anchor = g.masked_mean_rows(text, &[true, true]);
        let out = l.forward(cx, video, &[true; 3], text, &[true; 2], anchor).unwrap();
        let gn = g.value(out.non_local).clone();
        let argmin = (0..3).find(|i| gn[[*i, 0]] == 0.0).expect("an exact zero");
        assert!(g.value(out.gated).row(argmin).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gates_off_is_plain_cross_attention() {
        let (store, l) = layer(GateMode::None, 2, 8);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let video = g.constant(array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.2, 0.8]]);
        let text = g.constant(array![[0.1, 0.2, -0.3, 1.0], [0.7, -0.5, 0.4, 0.2]]);
        let anchor = g.masked_mean_rows(text, &[true, true]);
        let out = l.forward(cx, video, &[true; 2], text, &[true; 2], anchor).unwrap();
        assert_eq!(*g.value(out.gated), *g.value(out.attended));
        assert!(out.local_gate.is_none());
    }

    fn stack(layers: usize) -> (ParamStore, InteractionStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let s = InteractionStack::new(&mut store, "x", layers, 4, 2, 0.0, GateMode::Both, &mut rng).unwrap();
        (store, s)
    }

    #[test]
    fn stack_collects_every_layer() {
        let video = array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.2, 0.8], [-0.4, 0.9, 1.1, -0.6]];
        let text = array![[0.1, 0.2, -0.3, 1.0], [0.7, -0.5, 0.4, 0.2]];
        for n in 1..=3 {
            let (store, s) = stack(n);
            let g = Graph::new();
            let cx = Ctx::new(&g, &store);
            let (v, t) = (g.constant(video.clone()), g.constant(text.clone()));
            let a = g.masked_mean_rows(t, &[true, true]);
            let out = s.forward(cx, v, &[true; 3], t, &[true; 2], a).unwrap();
            assert_eq!(out.intermediates.len(), n);
            assert_eq!(*out.intermediates.last().unwrap(), out.refined_video);
        }
    }

    #[test]
    fn stack_equals_sequential_layers() {
        let (store, s) = stack(2);
        let video = array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.2, 0.8], [-0.4, 0.9, 1.1, -0.6]];
        let text = array![[0.1, 0.2, -0.3, 1.0], [0.7, -0.5, 0.4, 0.2]];
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let (v, t) = (g.constant(video.clone()), g.constant(text.clone()));
        let a = g.masked_mean_rows(t, &[true, true]);
        let out = s.forward(cx, v, &[true; 3], t, &[true; 2], a).unwrap();

        let g2 = Graph::new();
        let cx2 = Ctx::new(&g2, &store);
        let (v2, t2) = (g2.constant(video), g2.constant(text));
        let a2 = g2.masked_mean_rows(t2, &[true, true]);
        let first = s.layers[0].forward(cx2, v2, &[true; 3], t2, &[true; 2], a2).unwrap();
        let second = s.layers[1].forward(cx2, first.output, &[true; 3], t2, &[true; 2], a2).unwrap();
        assert_eq!(*g.value(out.refined_video), *g2.value(second.output));
        assert_eq!(*g.value(out.enriched_anchor), *g2.value(second.enriched_anchor));
    }

    #[test]
    fn anchor_attend_matches_layer_internals() {
        let (store, l) = layer(GateMode::Both, 2, 4);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let video = g.constant(array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.2, 0.8]]);
        let text = g.constant(array![[0.1, 0.2, -0.3, 1.0]]);
        let anchor = g.masked_mean_rows(text, &[true]);
        let out = l.forward(cx, video, &[true; 2], text, &[true], anchor).unwrap();
        let (t, s) = l.anchor_attend(cx, anchor, video, &[true; 2]).unwrap();
        assert_eq!(*g.value(t), *g.value(out.enriched_anchor));
        assert_eq!(*g.value(s), *g.value(out.anchor_scores));
    }
}
