//! Composite fusion, transformer encoder, saliency head and the
//! dynamic-anchor moment decoder.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::iou_1d;
use crate::nn::{sinusoid_table, Ctx, EncoderLayer, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::types::{Moment, MomentPredictionSet};

/// Projects the channel-wise concatenation of the interaction input and
/// every intermediate output back to `d`, then appends the enriched anchor
/// as an extra temporal token.
#[derive(Clone, Debug)]
pub struct CompositeFusion {
    pub proj: Linear,
    pub layers: usize,
    pub dim: usize,
}

impl CompositeFusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), dim * (layers + 1), dim, true, rng),
            layers,
            dim,
        }
    }

    /// Returns `O`, an `(L_v + 1) × d` sequence whose last row is `anchor`.
    pub fn forward(&self, cx: Ctx, video: Var, intermediates: &[Var], anchor: Var) -> Result<Var> {
        fuse_composite(cx, video, intermediates, anchor, &self.proj, self.layers, self.dim)
    }
}

/// `O = [f(concat(F_v, O_1, .., O_N)); t̂_a]`.
pub fn fuse_composite(
    cx: Ctx,
    video: Var,
    intermediates: &[Var],
    anchor: Var,
    proj: &Linear,
    layers: usize,
    dim: usize,
) -> Result<Var> {
    let g = cx.graph;
    if intermediates.len() != layers {
        return Err(Error::Shape(format!(
            "expected {layers} intermediate outputs, got {}",
            intermediates.len()
        )));
    }
    let (len, width) = g.shape(video);
    for (i, v) in std::iter::once(&video).chain(intermediates).enumerate() {
        if g.shape(*v) != (len, dim) {
            return Err(Error::Shape(format!(
                "fusion input {i} has shape {:?}, expected ({len}, {dim})",
                g.shape(*v)
            )));
        }
    }
    if width != dim || g.shape(anchor) != (1, dim) {
        return Err(Error::Shape(format!(
            "anchor shape {:?} does not match dim {dim}",
            g.shape(anchor)
        )));
    }
    let mut parts = Vec::with_capacity(layers + 1);
    parts.push(video);
    parts.extend_from_slice(intermediates);
    let fused = proj.forward(cx, g.concat_cols(&parts));
    Ok(g.concat_rows(&[fused, anchor]))
}

/// Self-attention encoder over the composite sequence followed by a
/// token-wise two-layer projection.
#[derive(Clone, Debug)]
pub struct CompositeEncoder {
    pub layers: Vec<EncoderLayer>,
    pub proj: Mlp,
}

impl CompositeEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| EncoderLayer::new(store, &format!("{name}.{l}"), dim, heads, dropout, rng))
                .collect(),
            proj: Mlp::new(store, &format!("{name}.proj"), &[dim, dim, dim], rng),
        }
    }

    /// Encodes `O` (`(L_v+1) × d`). `video_mask` covers the `L_v` clip rows;
    /// the anchor row is always attendable.
    pub fn forward(&self, cx: Ctx, composite: Var, video_mask: &[bool]) -> Result<EncoderOutput> {
        let g = cx.graph;
        let (rows, _) = g.shape(composite);
        if rows != video_mask.len() + 1 {
            return Err(Error::Shape(format!(
                "composite has {rows} rows for {} clips",
                video_mask.len()
            )));
        }
        let mut mask = video_mask.to_vec();
        mask.push(true);
        let mut x = composite;
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(cx, x, &mask);
            x = y;
            weights.push(w);
        }
        Ok(EncoderOutput {
            encoded: self.proj.forward(cx, x),
            weights,
        })
    }
}

pub struct EncoderOutput {
    /// `Ô`, same shape as the composite input.
    pub encoded: Var,
    /// Per layer, per head self-attention weights.
    pub weights: Vec<Vec<Var>>,
}

/// Bilinear saliency head between the encoded anchor and each clip.
#[derive(Clone, Debug)]
pub enum SaliencyHead {
    /// `S_i = (W_s t̂'_a) · (W_v ô_i) / d`.
    Matrix { w_s: ParamId, w_v: ParamId },
    /// `S_i = (w_s ⊙ t̂'_a) · (w_v ⊙ ô_i) / d`.
    Vector { w_s: ParamId, w_v: ParamId },
}

impl SaliencyHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, vector_weights: bool, rng: &mut impl Rng) -> Self {
        if vector_weights {
            SaliencyHead::Vector {
                w_s: store.add_ones(format!("{name}.w_s"), 1, dim),
                w_v: store.add_ones(format!("{name}.w_v"), 1, dim),
            }
        } else {
            SaliencyHead::Matrix {
                w_s: store.add_weight(format!("{name}.w_s"), dim, dim, rng),
                w_v: store.add_weight(format!("{name}.w_v"), dim, dim, rng),
            }
        }
    }

    /// Scores for the first `L_v` rows of `encoded` against its last row,
    /// as an `L_v × 1` column.
    pub fn forward(&self, cx: Ctx, encoded: Var) -> Var {
        let g = cx.graph;
        let (rows, dim) = g.shape(encoded);
        let video = g.slice_rows(encoded, 0, rows - 1);
        let anchor = g.slice_rows(encoded, rows - 1, 1);
        let (a, v) = match self {
            SaliencyHead::Matrix { w_s, w_v } => (g.matmul(anchor, cx.p(*w_s)), g.matmul(video, cx.p(*w_v))),
            SaliencyHead::Vector { w_s, w_v } => (g.mul(anchor, cx.p(*w_s)), g.mul(video, cx.p(*w_v))),
        };
        saliency_scores(g, v, a, dim)
    }
}

/// `S_i = a · v_i / d` for already modulated clip rows `v` and anchor `a`.
pub fn saliency_scores(g: &Graph, video: Var, anchor: Var, dim: usize) -> Var {
    g.scale(g.matmul_t(video, anchor), 1.0 / dim as f64)
}

/// One decoder layer: query self-attention, cross-attention to the encoded
/// clips, feedforward; all post-norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, dropout, rng),
            dropout,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        cx: Ctx,
        tgt: Var,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
        memory_mask: &[bool],
    ) -> Var {
        let g = cx.graph;
        let n = g.shape(tgt).0;
        let q = g.add(tgt, query_pos);
        let sa = self.self_attn.forward(cx, q, q, tgt, &vec![true; n]);
        let tgt = self.norm1.forward(cx, g.add(tgt, g.dropout(sa.output, self.dropout)));
        let ca = self.cross_attn.forward(
            cx,
            g.add(tgt, query_pos),
            g.add(memory, memory_pos),
            memory,
            memory_mask,
        );
        let tgt = self.norm2.forward(cx, g.add(tgt, g.dropout(ca.output, self.dropout)));
        self.ffn.forward(cx, tgt)
    }
}

/// Moment decoder with `M` learnable (center, width) anchor boxes refined
/// additively in logit space by every layer.
#[derive(Clone, Debug)]
pub struct MomentDecoder {
    pub anchors: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub query_pos: Mlp,
    pub span_head: Mlp,
    pub class_head: Linear,
    pub queries: usize,
    pub dim: usize,
}

/// Raw decoder outputs for one sample.
pub struct DecoderOutput {
    /// `M × 2` (center, width) in `[0, 1]`.
    pub spans: Var,
    /// `M × 2` log-probabilities over (foreground, background).
    pub class_log_probs: Var,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl MomentDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        queries: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let init = Array2::from_shape_fn((queries, 2), |(i, c)| {
            if c == 0 {
                logit((i as f64 + 0.5) / queries as f64)
            } else {
                logit(0.1)
            }
        });
        Self {
            anchors: store.add(format!("{name}.anchors"), init, false),
            layers: (0..layers)
                .map(|l| DecoderLayer::new(store, &format!("{name}.{l}"), dim, heads, dropout, rng))
                .collect(),
            query_pos: Mlp::new(store, &format!("{name}.query_pos"), &[dim, dim, dim], rng),
            span_head: Mlp::new(store, &format!("{name}.span"), &[dim, dim, 2], rng),
            class_head: Linear::new(store, &format!("{name}.class"), dim, 2, true, rng),
            queries,
            dim,
        }
    }

    /// Decodes from the encoded clip rows (anchor token excluded).
    pub fn forward(&self, cx: Ctx, memory: Var, memory_mask: &[bool]) -> DecoderOutput {
        let g = cx.graph;
        let len = g.shape(memory).0;
        let memory_pos = g.constant(sinusoid_table(len, self.dim));
        let mut logits = cx.p(self.anchors);
        let mut tgt = g.constant(Array2::zeros((self.queries, self.dim)));
        for layer in &self.layers {
            let pos = self.query_pos.forward(cx, box_embedding(g, g.sigmoid(logits), self.dim));
            tgt = layer.forward(cx, tgt, pos, memory, memory_pos, memory_mask);
            logits = g.add(logits, self.span_head.forward(cx, tgt));
        }
        DecoderOutput {
            spans: g.sigmoid(logits),
            class_log_probs: g.log_softmax(self.class_head.forward(cx, tgt)),
        }
    }
}

/// Sine embedding of normalized boxes: half the channels encode the
/// center, half the width, alternating sin/cos over geometric frequencies.
pub fn box_embedding(g: &Graph, boxes: Var, dim: usize) -> Var {
    let half = dim / 2;
    let freqs = Array2::from_shape_fn((2, dim), |(c, k)| {
        let block = if k < half { 0 } else { 1 };
        if block != c {
            return 0.0;
        }
        let j = (k - block * half) / 2;
        2.0 * PI / 10000f64.powf(2.0 * j as f64 / half.max(1) as f64)
    });
    let parity = |odd: bool| {
        Array2::from_shape_fn((1, dim), |(_, k)| {
            let local = if k < half { k } else { k - half };
            f64::from(u8::from((local % 2 == 1) == odd))
        })
    };
    let phase = g.matmul(boxes, g.constant(freqs));
    let sin = g.mul(g.sin(phase), g.constant(parity(false)));
    let cos = g.mul(g.cos(phase), g.constant(parity(true)));
    g.add(sin, cos)
}

/// Reads a decoder output into a prediction set.
pub fn prediction_set(g: &Graph, out: &DecoderOutput) -> MomentPredictionSet {
    let spans = g.value(out.spans);
    let logp = g.value(out.class_log_probs);
    MomentPredictionSet {
        spans: spans
            .rows()
            .into_iter()
            .map(|r| Moment {
                center: r[0],
                width: r[1],
            })
            .collect(),
        fg_prob: logp.column(0).iter().map(|l| l.exp()).collect(),
    }
}

/// One ranked moment prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedMoment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub query: usize,
}

/// Orders predictions by foreground probability (ties by query index),
/// optionally suppresses overlaps above `nms_iou`, and keeps `top_k`.
pub fn rank_predictions(preds: &MomentPredictionSet, top_k: usize, nms_iou: Option<f64>) -> Vec<RankedMoment> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds.fg_prob[b].total_cmp(&preds.fg_prob[a]).then(a.cmp(&b)));
    let mut kept: Vec<RankedMoment> = Vec::new();
    for q in order {
        let (start, end) = preds.spans[q].span();
        let cand = RankedMoment {
            start,
            end,
            score: preds.fg_prob[q],
            query: q,
        };
        if let Some(thr) = nms_iou {
            if kept.iter().any(|k| iou_1d((k.start, k.end), (start, end)) > thr) {
                continue;
            }
        }
        kept.push(cand);
        if kept.len() == top_k {
            break;
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn fusion_shapes_and_anchor_position() {
        let mut store = ParamStore::new();
        let fusion = CompositeFusion::new(&mut store, "f", 4, 2, &mut rng());
        assert_eq!(store.value(fusion.proj.weight).dim(), (12, 4));
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Array2::from_elem((5, 4), 0.5));
        let a = g.constant(array![[1.0, 2.0, 3.0, 4.0]]);
        let o = fusion.forward(cx, x, &[x, x], a).unwrap();
        assert_eq!(g.shape(o), (6, 4));
        assert_eq!(g.value(o).row(5).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(fusion.forward(cx, x, &[x], a).is_err());
        let bad = g.constant(Array2::zeros((5, 3)));
        assert!(fusion.forward(cx, x, &[x, bad], a).is_err());
    }

    #[test]
    fn zero_projection_keeps_only_anchor() {
        let mut store = ParamStore::new();
        let fusion = CompositeFusion::new(&mut store, "f", 3, 1, &mut rng());
        store.value_mut(fusion.proj.weight).fill(0.0);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Array2::from_elem((2, 3), 0.7));
        let a = g.constant(array![[0.1, -0.2, 0.3]]);
        let o = g.value(fusion.forward(cx, x, &[x], a).unwrap()).clone();
        assert!(o.slice(s![..2, ..]).iter().all(|v| *v == 0.0));
        assert_eq!(o.row(2).to_vec(), vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn fusion_matches_hand_concat_matmul() {
        let mut store = ParamStore::new();
        let fusion = CompositeFusion::new(&mut store, "f", 2, 1, &mut rng());
        let x0 = array![[1.0, 2.0], [3.0, 4.0]];
        let o1 = array![[-1.0, 0.5], [0.0, 2.0]];
        let w = store.value(fusion.proj.weight).clone();
        let b = store.value(fusion.proj.bias.unwrap()).clone();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let a = g.constant(array![[9.0, 9.0]]);
        let o = g.value(fusion.forward(cx, g.constant(x0.clone()), &[g.constant(o1.clone())], a).unwrap()).clone();
        for i in 0..2 {
            let cat = [x0[[i, 0]], x0[[i, 1]], o1[[i, 0]], o1[[i, 1]]];
            for c in 0..2 {
                let expected: f64 = (0..4).map(|k| cat[k] * w[[k, c]]).sum::<f64>() + b[[0, c]];
                assert_abs_diff_eq!(o[[i, c]], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn encoder_preserves_length_and_masks_padding() {
        let mut store = ParamStore::new();
        let enc = CompositeEncoder::new(&mut store, "e", 4, 2, 3, 0.0, &mut rng());
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let o = g.constant(Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        let out = enc.forward(cx, o, &[true, true, false, true]).unwrap();
        assert_eq!(g.shape(out.encoded), (5, 4));
        for layer in &out.weights {
            for w in layer {
                assert!(g.value(*w).column(2).iter().all(|v| *v == 0.0));
            }
        }
        assert!(enc.forward(cx, o, &[true; 3]).is_err());
    }

    #[test]
    fn saliency_hand_instance_with_unit_vectors() {
        let mut store = ParamStore::new();
        let head = SaliencyHead::new(&mut store, "s", 4, true, &mut rng());
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let enc = g.constant(array![
            [1.0, 0.0, 2.0, -1.0],
            [0.0, 1.0, 0.0, 0.0],
            [2.0, 0.0, 4.0, -2.0],
            [0.5, 3.0, 1.0, 1.0]
        ]);
        let s = g.value(head.forward(cx, enc)).clone();
        // anchor (0.5, 3, 1, 1): dots 0.5+2-1=1.5, 3, 3
        assert_abs_diff_eq!(s[[0, 0]], 1.5 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[[1, 0]], 3.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[[2, 0]], 2.0 * s[[0, 0]], epsilon = 1e-15);
        let ortho = g.constant(array![[1.0, -1.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(g.value(head.forward(cx, ortho))[[0, 0]], 0.0);
    }

    #[test]
    fn decoder_outputs_are_well_formed() {
        let mut store = ParamStore::new();
        let dec = MomentDecoder::new(&mut store, "d", 8, 2, 3, 10, 0.0, &mut rng());
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let mem = g.constant(Array2::from_shape_fn((6, 8), |(i, j)| ((i + j) as f64).sin()));
        let out = dec.forward(cx, mem, &[true, true, true, true, false, false]);
        let set = prediction_set(&g, &out);
        assert_eq!(set.len(), 10);
        for (m, p) in set.spans.iter().zip(&set.fg_prob) {
            assert!((0.0..=1.0).contains(&m.center) && (0.0..=1.0).contains(&m.width));
            assert!((0.0..=1.0).contains(p));
        }
        for row in g.value(out.class_log_probs).rows() {
            assert_abs_diff_eq!(row[0].exp() + row[1].exp(), 1.0, epsilon = 1e-12);
        }
    }

    fn set(spans: &[(f64, f64)], probs: &[f64]) -> MomentPredictionSet {
        MomentPredictionSet {
            spans: spans
                .iter()
                .map(|&(s, e)| Moment {
                    center: (s + e) / 2.0,
                    width: e - s,
                })
                .collect(),
            fg_prob: probs.to_vec(),
        }
    }

    #[test]
    fn ranking_sorts_and_clamps() {
        let p = set(&[(0.0, 0.2), (0.3, 0.5), (0.6, 0.9)], &[0.2, 0.9, 0.5]);
        let r = rank_predictions(&p, 10, None);
        assert_eq!(r.iter().map(|m| m.query).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(r.windows(2).all(|w| w[0].score > w[1].score));
        assert_eq!(rank_predictions(&p, 2, None).len(), 2);
        let tied = set(&[(0.0, 0.2), (0.3, 0.5)], &[0.5, 0.5]);
        assert_eq!(rank_predictions(&tied, 2, None)[0].query, 0);
    }

    #[test]
    fn nms_removes_duplicates_and_follows_hand_trace() {
        let dup = set(&[(0.1, 0.4), (0.1, 0.4)], &[0.3, 0.8]);
        let r = rank_predictions(&dup, 10, Some(0.5));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].query, 1);

        // A=[0,0.4] 0.9, B=[0.1,0.5] 0.8, C=[0.35,0.7] 0.7
        // IoU(A,B)=0.3/0.5=0.6 → B suppressed; IoU(A,C)=0.05/0.7 → C kept
        let p = set(&[(0.0, 0.4), (0.1, 0.5), (0.35, 0.7)], &[0.9, 0.8, 0.7]);
        let r = rank_predictions(&p, 10, Some(0.5));
        assert_eq!(r.iter().map(|m| m.query).collect::<Vec<_>>(), vec![0, 2]);
    }
}
