//! The full grounding model and its batch objective.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorMethod, TextAnchor};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::heads::{
    prediction_set, rank_predictions, CompositeEncoder, CompositeFusion, DecoderOutput, MomentDecoder,
    RankedMoment, SaliencyHead,
};
use crate::interaction::{anchor_query_attention, anchor_scores, GateMode, InteractionOutput, InteractionStack};
use crate::losses::{
    clip_consistency_loss, frame_relevance_loss, margin_terms, moment_retrieval_loss, pick_margin_clips,
    rank_contrastive_loss, rank_groups, total_loss, LossTerms, LossWeights, MarginPick,
};
use crate::matching::{hungarian_match, MatchResult};
use crate::nn::{sinusoid_table, Ctx, Mlp};
use crate::params::ParamStore;
use crate::types::GroundingSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub dim: usize,
    /// Attention heads in every attention block.
    pub heads: usize,
    pub interaction_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    pub dropout: f64,
    pub anchor: AnchorMethod,
    pub gates: GateMode,
    pub saliency_vector_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_dim: 2816,
            text_dim: 512,
            dim: 256,
            heads: 8,
            interaction_layers: 2,
            encoder_layers: 3,
            decoder_layers: 3,
            queries: 10,
            dropout: 0.1,
            anchor: AnchorMethod::Mean,
            gates: GateMode::Both,
            saliency_vector_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.video_dim == 0 || self.text_dim == 0 || self.dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide dim ({})", self.heads, self.dim));
        }
        if self.interaction_layers == 0 || self.decoder_layers == 0 || self.queries == 0 {
            return bad("interaction layers, decoder layers and queries must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub video_proj: Mlp,
    pub text_proj: Mlp,
    pub anchor: TextAnchor,
    pub interaction: InteractionStack,
    pub fusion: CompositeFusion,
    pub encoder: CompositeEncoder,
    pub saliency: SaliencyHead,
    pub decoder: MomentDecoder,
}

/// Every intermediate of one sample's forward pass.
pub struct SampleOutput {
    /// Projected video with positions, `L_v × d`.
    pub video: Var,
    pub text: Var,
    /// Pooled anchor `t_a`.
    pub anchor: Var,
    pub interaction: InteractionOutput,
    /// `Ô`, `(L_v + 1) × d`.
    pub encoded: Var,
    /// `L_v × 1`.
    pub saliency: Var,
    pub decoder: DecoderOutput,
}

impl Model {
    /// Builds the model and initializes its parameters.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let c = &config;
        let d = c.dim;
        let mut store = ParamStore::new();
        let s = &mut store;
        let model = Self {
            video_proj: Mlp::new(s, "video_proj", &[c.video_dim, d, d], rng),
            text_proj: Mlp::new(s, "text_proj", &[c.text_dim, d, d], rng),
            anchor: TextAnchor::new(s, c.anchor, d, c.heads, rng),
            interaction: InteractionStack::new(s, "interaction", c.interaction_layers, d, c.heads, c.dropout, c.gates, rng)?,
            fusion: CompositeFusion::new(s, "fusion", d, c.interaction_layers, rng),
            encoder: CompositeEncoder::new(s, "encoder", d, c.heads, c.encoder_layers, c.dropout, rng),
            saliency: SaliencyHead::new(s, "saliency", d, c.saliency_vector_weights, rng),
            decoder: MomentDecoder::new(s, "decoder", d, c.heads, c.decoder_layers, c.queries, c.dropout, rng),
            config,
        };
        Ok((model, store))
    }

    pub fn forward(
        &self,
        cx: Ctx,
        video: &Array2<f64>,
        video_mask: &[bool],
        text: &Array2<f64>,
        text_mask: &[bool],
    ) -> Result<SampleOutput> {
        let g = cx.graph;
        let c = &self.config;
        if video.ncols() != c.video_dim || text.ncols() != c.text_dim {
            return Err(Error::Shape(format!(
                "features are {}/{} wide, model expects {}/{}",
                video.ncols(),
                text.ncols(),
                c.video_dim,
                c.text_dim
            )));
        }
        if video.nrows() != video_mask.len() || text.nrows() != text_mask.len() {
            return Err(Error::Shape("mask length does not match sequence".into()));
        }
        let len = video.nrows();
        let pos = g.constant(sinusoid_table(len, c.dim));
        let v = g.add(self.video_proj.forward(cx, g.constant(video.clone())), pos);
        let t = self.text_proj.forward(cx, g.constant(text.clone()));
        let anchor = self.anchor.forward(cx, t, text_mask)?;
        let inter = self.interaction.forward(cx, v, video_mask, t, text_mask, anchor)?;
        let composite = self.fusion.forward(cx, v, &inter.intermediates, inter.enriched_anchor)?;
        let encoded = self.encoder.forward(cx, composite, video_mask)?.encoded;
        let saliency = self.saliency.forward(cx, encoded);
        let memory = g.slice_rows(encoded, 0, len);
        let decoder = self.decoder.forward(cx, memory, video_mask);
        Ok(SampleOutput {
            video: v,
            text: t,
            anchor,
            interaction: inter,
            encoded,
            saliency,
            decoder,
        })
    }

    pub fn forward_sample(&self, cx: Ctx, s: &GroundingSample) -> Result<SampleOutput> {
        self.forward(
            cx,
            s.video.embeddings(),
            s.video.mask(),
            s.text.embeddings(),
            s.text.mask(),
        )
    }

    /// Averaged loss terms over `samples` and their weighted total.
    pub fn batch_loss(
        &self,
        cx: Ctx,
        samples: &[&GroundingSample],
        weights: &LossWeights,
        rng: &mut impl Rng,
    ) -> Result<BatchLoss> {
        self.batch_loss_planned(cx, samples, weights, None, rng)
    }

    /// Like [`Model::batch_loss`], but replays the discrete choices of
    /// `plan` when given instead of making them from the current outputs.
    pub fn batch_loss_planned(
        &self,
        cx: Ctx,
        samples: &[&GroundingSample],
        weights: &LossWeights,
        plan: Option<&BatchPlan>,
        rng: &mut impl Rng,
    ) -> Result<BatchLoss> {
        let g = cx.graph;
        let b = samples.len();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if plan.is_some_and(|p| p.matchings.len() != b || p.margin.len() != b) {
            return Err(Error::Shape("plan does not cover the batch".into()));
        }
        let outs = samples
            .iter()
            .map(|s| self.forward_sample(cx, s))
            .collect::<Result<Vec<_>>>()?;

        let mut used = BatchPlan::default();
        let mut margin = Vec::with_capacity(b);
        let mut rank = Vec::with_capacity(b);
        let mut mr = Vec::with_capacity(b);
        let mut frame = Vec::with_capacity(b);
        for (n, (s, out)) in samples.iter().zip(&outs).enumerate() {
            let mask = s.video.mask();
            let rel = s.relevance.indicators();
            let inside: Vec<bool> = rel.iter().map(|r| *r == 1).collect();
            frame.push(frame_relevance_loss(g, out.interaction.refined_video, out.anchor, rel, mask)?);

            let pick = match plan {
                Some(p) => p.margin[n],
                None => {
                    let values: Vec<f64> = g.value(out.saliency).iter().copied().collect();
                    pick_margin_clips(&values, &inside, mask, rng)
                }
            };
            margin.push(match pick {
                Some(pick) => margin_terms(g, out.saliency, pick, weights.margin),
                None => g.scalar_constant(0.0),
            });
            used.margin.push(pick);

            let labels = match &s.saliency_labels {
                Some(labels) => labels.clone(),
                None => inside.iter().map(|x| f64::from(u8::from(*x))).collect(),
            };
            rank.push(rank_contrastive_loss(g, out.saliency, &rank_groups(&labels, mask), mask, weights.tau));

            let matching = match plan {
                Some(p) => p.matchings[n].clone(),
                None => hungarian_match(&s.gt_moments, &prediction_set(g, &out.decoder), weights)?,
            };
            mr.push(moment_retrieval_loss(
                g,
                &s.gt_moments,
                out.decoder.spans,
                out.decoder.class_log_probs,
                &matching,
                weights,
            ));
            used.matchings.push(matching);
        }

        let anchors: Vec<Var> = outs.iter().map(|o| o.anchor).collect();
        let clip = clip_consistency_loss(g, &anchors, &self.cross_table(cx, samples, &outs)?)?;
        let mean = |v: &[Var]| {
            let mut acc = v[0];
            for x in &v[1..] {
                acc = g.add(acc, *x);
            }
            g.scale(acc, 1.0 / v.len() as f64)
        };
        let terms = LossTerms {
            margin: mean(&margin),
            rank: mean(&rank),
            mr: mean(&mr),
            clip,
            frame: mean(&frame),
        };
        Ok(BatchLoss {
            total: total_loss(g, &terms, weights),
            terms,
            plan: used,
            outputs: outs,
        })
    }

    /// `t̂_a^{ij}`: anchor `i` attending over the last interaction layer's
    /// input for video `j`, with that layer's parameters.
    fn cross_table(&self, cx: Ctx, samples: &[&GroundingSample], outs: &[SampleOutput]) -> Result<Vec<Vec<Var>>> {
        let g = cx.graph;
        let layer = self.interaction.last();
        let w_q = cx.p(layer.w_q.weight);
        let w_k = cx.p(layer.w_k.weight);
        let w_v = cx.p(layer.anchor_value.weight);
        let keys: Vec<(Var, Var)> = outs
            .iter()
            .map(|o| {
                let x = *o.interaction.layer_inputs.last().expect("non-empty stack");
                (g.matmul(x, w_q), x)
            })
            .collect();
        outs.iter()
            .map(|oi| {
                let query = g.matmul(oi.anchor, w_k);
                keys.iter()
                    .zip(samples)
                    .map(|(&(k, x), s)| {
                        let scores = anchor_scores(g, query, k, s.video.mask(), layer.heads)?;
                        Ok(anchor_query_attention(g, scores, x, w_v))
                    })
                    .collect()
            })
            .collect()
    }

    /// Inference on one sample.
    pub fn predict(&self, store: &ParamStore, sample: &GroundingSample, nms_iou: Option<f64>) -> Result<SamplePrediction> {
        let g = Graph::new();
        let cx = Ctx::new(&g, store);
        let out = self.forward_sample(cx, sample)?;
        let preds = prediction_set(&g, &out.decoder);
        let column = |v: Var| -> Vec<f64> { g.value(v).iter().copied().collect() };
        Ok(SamplePrediction {
            moments: rank_predictions(&preds, self.config.queries, nms_iou),
            saliency: column(out.saliency),
            non_local: column(out.interaction.non_local_weights),
        })
    }
}

/// Discrete choices made while forming a batch loss: the Hungarian
/// assignment and the margin clips of every sample. Gradients treat them as
/// constants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchPlan {
    pub matchings: Vec<MatchResult>,
    pub margin: Vec<Option<MarginPick>>,
}

/// Loss of one batch, kept on the graph for backpropagation.
pub struct BatchLoss {
    pub total: Var,
    pub terms: LossTerms<Var>,
    pub plan: BatchPlan,
    pub outputs: Vec<SampleOutput>,
}

impl BatchLoss {
    pub fn values(&self, g: &Graph) -> LossTerms<f64> {
        LossTerms {
            margin: g.scalar(self.terms.margin),
            rank: g.scalar(self.terms.rank),
            mr: g.scalar(self.terms.mr),
            clip: g.scalar(self.terms.clip),
            frame: g.scalar(self.terms.frame),
        }
    }
}

/// Ranked normalized moments plus per-clip scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub moments: Vec<RankedMoment>,
    pub saliency: Vec<f64>,
    /// Final-layer non-local gate weights.
    pub non_local: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            video_dim: 6,
            text_dim: 5,
            dim: 8,
            heads: 2,
            queries: 4,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn data() -> Vec<GroundingSample> {
        generate_synthetic(&SyntheticConfig {
            n_samples: 3,
            video_len: (5, 7),
            text_len: (2, 4),
            video_dim: 6,
            text_dim: 5,
            moment_width: (0.2, 0.4),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn forward_shapes() {
        let (model, store) = Model::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        for s in data() {
            let out = model.forward_sample(cx, &s).unwrap();
            let l = s.video.len();
            assert_eq!(g.shape(out.encoded), (l + 1, 8));
            assert_eq!(g.shape(out.saliency), (l, 1));
            assert_eq!(g.shape(out.decoder.spans), (4, 2));
        }
    }

    #[test]
    fn batch_loss_is_finite_and_consistent() {
        let (model, store) = Model::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let samples = data();
        let refs: Vec<&GroundingSample> = samples.iter().collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let w = LossWeights::default();
        let loss = model.batch_loss(cx, &refs, &w, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let terms = loss.values(&g);
        let total = g.scalar(loss.total);
        assert!(total.is_finite() && total > 0.0);
        assert!((terms.total(&w) - total).abs() < 1e-12);
        let g2 = Graph::new();
        let replay = model
            .batch_loss_planned(Ctx::new(&g2, &store), &refs, &w, Some(&loss.plan), &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        assert_eq!(g2.scalar(replay.total), total);
        for v in [terms.margin, terms.rank, terms.mr, terms.clip, terms.frame] {
            assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn diagonal_of_cross_table_matches_layer_anchor() {
        let (model, store) = Model::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let samples = data();
        let refs: Vec<&GroundingSample> = samples.iter().collect();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let outs: Vec<SampleOutput> = refs.iter().map(|s| model.forward_sample(cx, s).unwrap()).collect();
        let table = model.cross_table(cx, &refs, &outs).unwrap();
        for (i, o) in outs.iter().enumerate() {
            let a = g.value(table[i][i]).clone();
            let b = g.value(o.interaction.enriched_anchor).clone();
            assert!((a - b).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(Model::new(ModelConfig { heads: 3, ..tiny() }, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let (model, store) = Model::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let v = Array2::zeros((4, 7));
        let t = Array2::zeros((2, 5));
        assert!(model.forward(cx, &v, &[true; 4], &t, &[true; 2]).is_err());
    }

    #[test]
    fn prediction_is_ranked_and_complete() {
        let (model, store) = Model::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let s = &data()[0];
        let p = model.predict(&store, s, None).unwrap();
        assert_eq!(p.moments.len(), 4);
        assert!(p.moments.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(p.saliency.len(), s.video.len());
        assert!(p.non_local.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
