//! Transformer building blocks on top of [`crate::autograd`].

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// A graph paired with the parameters it reads.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore) -> Self {
        Self { graph, store }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_weight(format!("{name}.weight"), input, output, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, output));
        Self { weight, bias }
    }

    /// `x · W (+ b)` for `x` of shape `n × input`.
    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        let y = cx.graph.matmul(x, cx.p(self.weight));
        match self.bias {
            Some(b) => cx.graph.add(y, cx.p(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), 1, dim),
            beta: store.add_zeros(format!("{name}.beta"), 1, dim),
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        cx.graph.layer_norm(x, cx.p(self.gamma), cx.p(self.beta))
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h);
            if i + 1 < self.layers.len() {
                h = cx.graph.relu(h);
            }
        }
        h
    }
}

/// Position-wise feedforward with residual and post-norm.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            dropout,
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Var {
        let g = cx.graph;
        let h = g.relu(self.up.forward(cx, x));
        let h = g.dropout(h, self.dropout);
        let h = g.dropout(self.down.forward(cx, h), self.dropout);
        self.norm.forward(cx, g.add(x, h))
    }
}

/// Output of scaled dot-product attention.
pub struct Attended {
    /// Concatenated head outputs, `n_q × d`.
    pub output: Var,
    /// Per-head attention weights, each `n_q × n_k`.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention on already projected inputs.
///
/// `q` is `n_q × d`, `k` and `v` are `n_k × d`; `key_mask` marks valid keys.
pub fn attention(g: &Graph, q: Var, k: Var, v: Var, heads: usize, key_mask: &[bool]) -> Attended {
    let d = g.shape(q).1;
    assert_eq!(d % heads, 0, "head count must divide the model dimension");
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk),
                g.slice_cols(k, h * dk, dk),
                g.slice_cols(v, h * dk, dk),
            )
        };
        let scores = g.scale(g.matmul_t(qh, kh), scale);
        let w = g.masked_softmax(scores, key_mask);
        outs.push(g.matmul(w, vh));
        weights.push(w);
    }
    let output = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Attended { output, weights }
}

/// Standard multi-head attention block with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward(&self, cx: Ctx, q_in: Var, k_in: Var, v_in: Var, key_mask: &[bool]) -> Attended {
        let q = self.query.forward(cx, q_in);
        let k = self.key.forward(cx, k_in);
        let v = self.value.forward(cx, v_in);
        let att = attention(cx.graph, q, k, v, self.heads, key_mask);
        Attended {
            output: self.out.forward(cx, att.output),
            weights: att.weights,
        }
    }
}

/// Post-norm self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, dropout, rng),
            dropout,
        }
    }

    pub fn forward(&self, cx: Ctx, x: Var, mask: &[bool]) -> (Var, Vec<Var>) {
        let g = cx.graph;
        let att = self.attn.forward(cx, x, x, x, mask);
        let h = self
            .norm
            .forward(cx, g.add(x, g.dropout(att.output, self.dropout)));
        (self.ffn.forward(cx, h), att.weights)
    }
}

/// Fixed sinusoidal position table, `len × dim`, over normalized clip
/// centers `(i + 0.5) / len` scaled by `2π`, so positions read as
/// fractions of the video like the decoder's anchor boxes.
pub fn sinusoid_table(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = 2.0 * std::f64::consts::PI * (pos as f64 + 0.5) / len as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn attention_rows_are_distributions_over_valid_keys() {
        let g = Graph::new();
        let q = g.constant(array![[1.0, 0.5, -0.2, 0.3], [0.1, 0.2, 0.3, 0.4]]);
        let k = g.constant(array![
            [0.3, 0.1, 0.0, 1.0],
            [1.0, -1.0, 2.0, 0.5],
            [7.0, 7.0, 7.0, 7.0]
        ]);
        let att = attention(&g, q, k, k, 2, &[true, true, false]);
        for w in att.weights {
            let w = g.value(w);
            for row in w.rows() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
                assert_eq!(row[2], 0.0);
            }
        }
    }

    #[test]
    fn sinusoid_uses_normalized_positions() {
        let t = sinusoid_table(4, 4);
        let tau = 2.0 * std::f64::consts::PI;
        assert_abs_diff_eq!(t[[0, 0]], (tau / 8.0).sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(t[[0, 1]], (tau / 8.0).cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(t[[2, 0]], (tau * 5.0 / 8.0).sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(t[[1, 2]], (tau * 3.0 / 8.0 / 100.0).sin(), epsilon = 1e-15);
    }
}
