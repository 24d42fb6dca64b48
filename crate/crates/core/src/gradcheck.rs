//! Finite-difference verification of the reverse-mode gradients.
//!
//! Every tensor the closure reads through the store is perturbed on a
//! random subset of its coordinates and compared with central differences.
//! ReLU, abs and max/min make the losses piecewise smooth; a coordinate
//! whose stencil straddles a breakpoint gives a central difference that
//! moves when the step is halved. Such coordinates are counted and compared
//! against a difference taken with a hundredth of the step.

use ndarray::{array, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::data::{generate_synthetic, SyntheticConfig};
use crate::error::Result;
use crate::heads::{prediction_set, DecoderOutput};
use crate::losses::{
    clip_consistency_loss, frame_relevance_loss, margin_loss, moment_retrieval_loss, rank_contrastive_loss,
    rank_groups, span_loss_graph, LossWeights,
};
use crate::matching::hungarian_match;
use crate::model::{Model, ModelConfig};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::types::{GroundingSample, Moment};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; tensors at most this large are
    /// checked exhaustively.
    pub coords_per_tensor: usize,
    /// Norms below this are treated as this when forming relative errors.
    pub floor: f64,
    /// Relative disagreement that triggers the half-step retry, and that
    /// marks a coordinate as non-smooth when the two estimates differ by it.
    /// Non-smooth coordinates are measured with `step / 100`.
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coords_per_tensor: 24,
            floor: 1e-6,
            kink_tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    /// Coordinates whose stencil crossed a breakpoint.
    pub refined: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the sampled coordinates.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn coords(&self) -> usize {
        self.tensors.iter().map(|t| t.coords).sum()
    }

    pub fn refined(&self) -> usize {
        self.tensors.iter().map(|t| t.refined).sum()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic and central-difference gradients of the scalar that
/// `loss` records. The closure must be deterministic in the store values.
pub fn check_gradients<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = loss(&g, store)?;
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let v = loss(&g, s)?;
        Ok(g.scalar(v))
    };

    let mut tensors = Vec::new();
    for (id, param) in store.iter() {
        let Some(analytic) = grads.param(id) else {
            continue;
        };
        let n = param.value.len();
        let picks: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_tensor).into_vec()
        };
        let cols = param.value.ncols();
        let (mut diff, mut a2, mut n2, mut refined) = (0.0, 0.0, 0.0, 0);
        let differs = |x: f64, y: f64| (x - y).abs() > opts.kink_tol * x.abs().max(y.abs()).max(opts.floor);
        for flat in &picks {
            let idx = (flat / cols, flat % cols);
            let mut numeric = central_difference(&mut work, id, idx, opts.step, &eval)?;
            let a = analytic[idx];
            if differs(a, numeric) {
                let half = central_difference(&mut work, id, idx, opts.step / 2.0, &eval)?;
                if differs(numeric, half) {
                    refined += 1;
                    numeric = central_difference(&mut work, id, idx, opts.step / 100.0, &eval)?;
                }
            }
            diff += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let (a_norm, n_norm) = (a2.sqrt(), n2.sqrt());
        tensors.push(TensorCheck {
            name: param.name.clone(),
            coords: picks.len(),
            refined,
            analytic_norm: a_norm,
            numeric_norm: n_norm,
            rel_error: diff.sqrt() / a_norm.max(n_norm).max(opts.floor),
        });
    }
    Ok(GradCheckReport { tensors })
}

fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    idx: (usize, usize),
    step: f64,
    eval: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let orig = store.value(id)[idx];
    store.value_mut(id)[idx] = orig + step;
    let plus = eval(store);
    store.value_mut(id)[idx] = orig - step;
    let minus = eval(store);
    store.value_mut(id)[idx] = orig;
    Ok((plus? - minus?) / (2.0 * step))
}

/// One case of [`loss_suite`].
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type LossFn = Box<dyn Fn(&Graph, &ParamStore) -> Result<Var>>;

/// Instance sizes of the standard suite.
pub const SUITE_DIM: usize = 8;
pub const SUITE_CLIPS: usize = 6;
pub const SUITE_TOKENS: usize = 4;
pub const SUITE_BATCH: usize = 3;
pub const SUITE_QUERIES: usize = 4;

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Moves every parameter off its structured initialization. Zero biases
/// feeding a zero decoder target leave layer norms at zero variance, where
/// central differences lose accuracy.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (r, c) = store.value(id).dim();
        *store.value_mut(id) += &gaussian(r, c, 0.05, rng);
    }
}

/// Gradient checks of every training loss on its own inputs, of the full
/// batch objective, and of a random projection of the forward outputs.
pub fn loss_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<SuiteCase>> {
    let (d, l, b, m) = (SUITE_DIM, SUITE_CLIPS, SUITE_BATCH, SUITE_QUERIES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut cases: Vec<(&'static str, ParamStore, LossFn)> = Vec::new();

    {
        let mut s = ParamStore::new();
        let anchors: Vec<ParamId> = (0..b).map(|i| s.add(format!("anchor.{i}"), gaussian(1, d, 0.5, &mut rng), true)).collect();
        let table: Vec<Vec<ParamId>> = (0..b)
            .map(|i| (0..b).map(|j| s.add(format!("table.{i}.{j}"), gaussian(1, d, 0.5, &mut rng), true)).collect())
            .collect();
        cases.push((
            "clip",
            s,
            Box::new(move |g, s| {
                let a: Vec<Var> = anchors.iter().map(|id| g.param(s, *id)).collect();
                let t: Vec<Vec<Var>> = table.iter().map(|r| r.iter().map(|id| g.param(s, *id)).collect()).collect();
                clip_consistency_loss(g, &a, &t)
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let video = s.add("video", gaussian(l, d, 0.5, &mut rng), true);
        let anchor = s.add("anchor", gaussian(1, d, 0.5, &mut rng), true);
        let labels: Vec<u8> = (0..l).map(|_| rng.gen_range(0..2)).collect();
        let mask = vec![true; l];
        cases.push((
            "frame",
            s,
            Box::new(move |g, s| frame_relevance_loss(g, g.param(s, video), g.param(s, anchor), &labels, &mask)),
        ));
    }
    {
        let mut s = ParamStore::new();
        let scores = s.add("scores", gaussian(l, 1, 0.3, &mut rng), true);
        let inside: Vec<bool> = (0..l).map(|i| (1..4).contains(&i)).collect();
        let mask = vec![true; l];
        cases.push((
            "margin",
            s,
            Box::new(move |g, s| {
                let mut picks = ChaCha8Rng::seed_from_u64(seed);
                Ok(margin_loss(g, g.param(s, scores), &inside, &mask, 1.0, &mut picks))
            }),
        ));
    }
    {
        let mut s = ParamStore::new();
        let scores = s.add("scores", gaussian(l, 1, 0.5, &mut rng), true);
        let labels: Vec<f64> = (0..l).map(|i| (i % 5) as f64).collect();
        let mask = vec![true; l];
        let groups = rank_groups(&labels, &mask);
        cases.push((
            "rank",
            s,
            Box::new(move |g, s| Ok(rank_contrastive_loss(g, g.param(s, scores), &groups, &mask, w.tau))),
        ));
    }
    {
        let mut s = ParamStore::new();
        let pred = s.add("pred", array![[0.46, 0.27]] + gaussian(1, 2, 0.01, &mut rng), true);
        let target = Moment::new(0.5, 0.3)?;
        cases.push(("span", s, Box::new(move |g, s| Ok(span_loss_graph(g, &target, g.param(s, pred), &w)))));
    }
    {
        let mut s = ParamStore::new();
        let span_logits = s.add("span_logits", gaussian(m, 2, 1.0, &mut rng), true);
        let class_logits = s.add("class_logits", gaussian(m, 2, 1.0, &mut rng), true);
        let gt = vec![Moment::new(0.25, 0.2)?, Moment::new(0.7, 0.3)?];
        cases.push((
            "moment",
            s,
            Box::new(move |g, s| {
                let out = DecoderOutput {
                    spans: g.sigmoid(g.param(s, span_logits)),
                    class_log_probs: g.log_softmax(g.param(s, class_logits)),
                };
                let matching = hungarian_match(&gt, &prediction_set(g, &out), &w)?;
                Ok(moment_retrieval_loss(g, &gt, out.spans, out.class_log_probs, &matching, &w))
            }),
        ));
    }

    let cfg = ModelConfig {
        video_dim: d,
        text_dim: d,
        dim: d,
        heads: 2,
        queries: m,
        dropout: 0.0,
        ..Default::default()
    };
    let samples = generate_synthetic(&SyntheticConfig {
        n_samples: b,
        video_len: (l, l),
        text_len: (SUITE_TOKENS, SUITE_TOKENS),
        video_dim: d,
        text_dim: d,
        moment_width: (0.2, 0.4),
        seed,
        ..Default::default()
    })?;
    {
        let (model, mut store) = Model::new(cfg.clone(), &mut rng)?;
        jitter(&mut store, &mut rng);
        let samples = samples.clone();
        let plan = {
            let g = Graph::new();
            let refs: Vec<&GroundingSample> = samples.iter().collect();
            let mut picks = ChaCha8Rng::seed_from_u64(seed);
            model.batch_loss(Ctx::new(&g, &store), &refs, &w, &mut picks)?.plan
        };
        cases.push((
            "total",
            store,
            Box::new(move |g, s| {
                let refs: Vec<&GroundingSample> = samples.iter().collect();
                let mut unused = ChaCha8Rng::seed_from_u64(seed);
                Ok(model.batch_loss_planned(Ctx::new(g, s), &refs, &w, Some(&plan), &mut unused)?.total)
            }),
        ));
    }
    {
        let (model, mut store) = Model::new(cfg, &mut rng)?;
        jitter(&mut store, &mut rng);
        let probes: Vec<[Array2<f64>; 4]> = samples
            .iter()
            .map(|_| {
                [
                    gaussian(l, 1, 1.0, &mut rng),
                    gaussian(m, 2, 1.0, &mut rng),
                    gaussian(m, 2, 1.0, &mut rng),
                    gaussian(1, d, 1.0, &mut rng),
                ]
            })
            .collect();
        cases.push((
            "forward",
            store,
            Box::new(move |g, s| {
                let cx = Ctx::new(g, s);
                let mut acc = g.scalar_constant(0.0);
                for (sample, probe) in samples.iter().zip(&probes) {
                    let out = model.forward_sample(cx, sample)?;
                    let parts = [
                        out.saliency,
                        out.decoder.spans,
                        out.decoder.class_log_probs,
                        out.interaction.enriched_anchor,
                    ];
                    for (v, p) in parts.into_iter().zip(probe) {
                        acc = g.add(acc, g.sum(g.mul(v, g.constant(p.clone()))));
                    }
                }
                Ok(acc)
            }),
        ));
    }

    cases
        .into_iter()
        .map(|(name, store, f)| {
            Ok(SuiteCase {
                name,
                report: check_gradients(&store, f, opts)?,
            })
        })
        .collect()
}
