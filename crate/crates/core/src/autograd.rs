//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D matrix; vectors are `1 × n` rows or
//! `m × 1` columns and scalars are `1 × 1`. A [`Graph`] records operations
//! as they are evaluated and [`Graph::backward`] walks the tape in reverse.
//! Parameters enter the tape through [`Graph::param`], which caches one leaf
//! per parameter so gradients from every use accumulate in one place.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sin(Var),
    Cos(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
    },
    MaskedMaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MinMaxNorm {
        x: Var,
        argmin: usize,
        argmax: usize,
        range: f64,
        mask: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// A recording tape of matrix operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf node (constants and parameters). Interior
    /// gradients are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a parameter, `None` if it did not take part.
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// All parameter gradients sorted by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Mat)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn expand(m: &Mat, to: (usize, usize)) -> Mat {
    if shape(m) == to {
        m.clone()
    } else {
        m.broadcast(to).expect("broadcastable").to_owned()
    }
}

/// Sum a gradient down to the shape of the operand it flows into.
fn reduce_to(g: Mat, to: (usize, usize)) -> Mat {
    let mut g = g;
    if to.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if to.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn row_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_EPS: f64 = 1e-5;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// An inference-mode graph (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// A training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.value(v))
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(shape(&m), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.constant(store.value(id).clone());
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).mapv(f);
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let to = broadcast_shape(shape(&va), shape(&vb));
            let mut out = expand(&va, to);
            out.zip_mut_with(&vb.broadcast(to).expect("broadcastable"), |x, &y| {
                *x = f(*x, y)
            });
            out
        };
        self.push(value, op)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push(value, Op::Transpose(x))
    }

    /// Element-wise sum with row/column/scalar broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + k` for a constant `k`.
    pub fn offset(&self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::Offset(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    /// Row-wise softmax. Entries equal to `-inf` get exactly zero weight.
    pub fn softmax(&self, x: Var) -> Var {
        let value = row_softmax(&self.value(x));
        self.push(value, Op::Softmax(x))
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let value = row_log_softmax(&self.value(x));
        self.push(value, Op::LogSoftmax(x))
    }

    /// Row-wise softmax restricted to the columns where `mask` is true.
    pub fn masked_softmax(&self, x: Var, mask: &[bool]) -> Var {
        let bias = self.constant(column_mask_bias(mask));
        let biased = self.add(x, bias);
        self.softmax(biased)
    }

    /// Layer normalization over each row with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, inv_std) = {
            let vx = self.value(x);
            let (g, b) = (self.value(gamma), self.value(beta));
            let n = vx.ncols() as f64;
            let mut xhat = vx.clone();
            let mut inv_std = Vec::with_capacity(vx.nrows());
            for mut row in xhat.rows_mut() {
                let mean = row.sum() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let is = 1.0 / (var + LN_EPS).sqrt();
                row.mapv_inplace(|v| (v - mean) * is);
                inv_std.push(is);
            }
            let value = &xhat * &*g + &*b;
            (value, xhat, inv_std)
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = {
            let v = self.value(x);
            (v.nrows() * v.ncols()) as f64
        };
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums as a `1 × n` row.
    pub fn sum_rows(&self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumRows(x))
    }

    /// Row sums as an `m × 1` column.
    pub fn sum_cols(&self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(x))
    }

    /// Mean over rows whose mask entry is true, `1 × n`.
    pub fn masked_mean_rows(&self, x: Var, mask: &[bool]) -> Var {
        let value = {
            let vx = self.value(x);
            assert_eq!(vx.nrows(), mask.len());
            let count = mask.iter().filter(|m| **m).count();
            assert!(count > 0, "masked mean over zero rows");
            let mut acc = Array2::zeros((1, vx.ncols()));
            for (row, _) in vx.rows().into_iter().zip(mask).filter(|(_, m)| **m) {
                acc.row_mut(0).scaled_add(1.0, &row);
            }
            acc / count as f64
        };
        self.push(
            value,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
        )
    }

    /// Channel-wise maximum over rows whose mask entry is true, `1 × n`.
    /// Ties resolve to the lowest row index.
    pub fn masked_max_rows(&self, x: Var, mask: &[bool]) -> Var {
        let (value, argmax) = {
            let vx = self.value(x);
            assert_eq!(vx.nrows(), mask.len());
            let mut value = Array2::from_elem((1, vx.ncols()), f64::NEG_INFINITY);
            let mut argmax = vec![usize::MAX; vx.ncols()];
            for (i, row) in vx.rows().into_iter().enumerate() {
                if !mask[i] {
                    continue;
                }
                for (j, &v) in row.iter().enumerate() {
                    if v > value[[0, j]] {
                        value[[0, j]] = v;
                        argmax[j] = i;
                    }
                }
            }
            assert!(argmax.iter().all(|&i| i != usize::MAX), "max over zero rows");
            (value, argmax)
        };
        self.push(value, Op::MaskedMaxRows { x, argmax })
    }

    /// Min-max normalization of an `m × 1` column over its valid entries.
    ///
    /// Invalid entries map to 0. When every valid entry is equal the output
    /// is all ones on valid entries.
    pub fn min_max_normalize(&self, x: Var, mask: &[bool]) -> Var {
        let (value, argmin, argmax, range) = {
            let vx = self.value(x);
            assert_eq!(vx.ncols(), 1);
            assert_eq!(vx.nrows(), mask.len());
            let mut argmin = usize::MAX;
            let mut argmax = usize::MAX;
            for i in (0..mask.len()).filter(|i| mask[*i]) {
                if argmin == usize::MAX || vx[[i, 0]] < vx[[argmin, 0]] {
                    argmin = i;
                }
                if argmax == usize::MAX || vx[[i, 0]] > vx[[argmax, 0]] {
                    argmax = i;
                }
            }
            assert!(argmin != usize::MAX, "min-max over zero entries");
            let (lo, hi) = (vx[[argmin, 0]], vx[[argmax, 0]]);
            let range = hi - lo;
            let mut value = Array2::zeros(vx.raw_dim());
            for i in 0..mask.len() {
                if mask[i] {
                    value[[i, 0]] = if range > 0.0 {
                        (vx[[i, 0]] - lo) / range
                    } else {
                        1.0
                    };
                }
            }
            (value, argmin, argmax, range)
        };
        self.push(
            value,
            Op::MinMaxNorm {
                x,
                argmin,
                argmax,
                range,
                mask: mask.to_vec(),
            },
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(1), &views).expect("row counts agree")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(0), &views).expect("column counts agree")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(x, start))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(x, start))
    }

    pub fn gather_rows(&self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        self.push(value, Op::GatherRows(x, rows.to_vec()))
    }

    /// Single entry as a `1 × 1` node.
    pub fn entry(&self, x: Var, row: usize, col: usize) -> Var {
        let r = self.slice_rows(x, row, 1);
        self.slice_cols(r, col, 1)
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let dims = self.shape(x);
        let mask = {
            let mut rng = self.rng.borrow_mut();
            Array2::from_shape_simple_fn(dims, || {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Back-propagate from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Array2::ones(self.shape(output));
        self.backward_from(&[(output, seed)])
    }

    /// Back-propagate from several outputs with explicit upstream gradients.
    pub fn backward_from(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    accumulate(&mut grads, *a, g.dot(val(*b)));
                    accumulate(&mut grads, *b, g.t().dot(val(*a)));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), shape(val(*a))));
                    accumulate(&mut grads, *b, reduce_to(g, shape(val(*b))));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), shape(val(*a))));
                    accumulate(&mut grads, *b, reduce_to(-g, shape(val(*b))));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    accumulate(&mut grads, *a, reduce_to(&g * vb, shape(va)));
                    accumulate(&mut grads, *b, reduce_to(&g * va, shape(vb)));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    accumulate(&mut grads, *a, reduce_to(&g / vb, shape(va)));
                    let gb = -(&g * &node.value) / vb;
                    accumulate(&mut grads, *b, reduce_to(gb, shape(vb)));
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, g * d);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, *a, g / val(*a)),
                Op::Abs(a) => {
                    let d = val(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, g * d);
                }
                Op::Sin(a) => accumulate(&mut grads, *a, g * val(*a).mapv(f64::cos)),
                Op::Cos(a) => accumulate(&mut grads, *a, g * val(*a).mapv(|x| -x.sin())),
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let to = shape(&node.value);
                    let (ea, eb) = (expand(va, to), expand(vb, to));
                    let pick_max = matches!(node.op, Op::Maximum(..));
                    let mut ga = g.clone();
                    let mut gb = g;
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&ea)
                        .and(&eb)
                        .for_each(|ga, gb, &x, &y| {
                            let take_a = if pick_max { x >= y } else { x <= y };
                            if take_a {
                                *gb = 0.0;
                            } else {
                                *ga = 0.0;
                            }
                        });
                    accumulate(&mut grads, *a, reduce_to(ga, shape(va)));
                    accumulate(&mut grads, *b, reduce_to(gb, shape(vb)));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, y * &(&g - &dot));
                }
                Op::LogSoftmax(a) => {
                    let p = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &g - &(&p * &gsum));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = val(*gamma);
                    accumulate(&mut grads, *beta, reduce_to(g.clone(), shape(vg)));
                    accumulate(&mut grads, *gamma, reduce_to(&g * xhat, shape(vg)));
                    let gx_hat = &g * vg;
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let gh = gx_hat.row(r);
                        let xh = xhat.row(r);
                        let mean_g = gh.sum() / n;
                        let mean_gx = gh.dot(&xh) / n;
                        let mut out = gx.row_mut(r);
                        for c in 0..xhat.ncols() {
                            out[c] = inv_std[r] * (gh[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    accumulate(&mut grads, *a, Array2::from_elem(shape(val(*a)), k));
                }
                Op::SumRows(a) | Op::SumCols(a) => {
                    accumulate(&mut grads, *a, expand(&g, shape(val(*a))));
                }
                Op::MaskedMeanRows { x, mask } => {
                    let count = mask.iter().filter(|m| **m).count() as f64;
                    let mut gx = Array2::zeros(shape(val(*x)));
                    for (r, m) in mask.iter().enumerate() {
                        if *m {
                            gx.row_mut(r).assign(&(&g.row(0) / count));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaskedMaxRows { x, argmax } => {
                    let mut gx = Array2::zeros(shape(val(*x)));
                    for (c, &r) in argmax.iter().enumerate() {
                        gx[[r, c]] += g[[0, c]];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MinMaxNorm {
                    x,
                    argmin,
                    argmax,
                    range,
                    mask,
                } => {
                    let mut gx = Array2::zeros(shape(val(*x)));
                    if *range > 0.0 {
                        let y = &node.value;
                        let mut to_min = 0.0;
                        let mut to_max = 0.0;
                        for i in 0..mask.len() {
                            if !mask[i] {
                                continue;
                            }
                            let gi = g[[i, 0]];
                            gx[[i, 0]] += gi / range;
                            // y_i = (x_i - lo) / range
                            to_min += gi * (y[[i, 0]] - 1.0) / range;
                            to_max -= gi * y[[i, 0]] / range;
                        }
                        gx[[*argmin, 0]] += to_min;
                        gx[[*argmax, 0]] += to_max;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        accumulate(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(shape(val(*a)));
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(shape(val(*a)));
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(shape(val(*a)));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// Additive bias row that sends masked-out columns to `-inf`.
pub fn column_mask_bias(mask: &[bool]) -> Mat {
    Array2::from_shape_fn((1, mask.len()), |(_, j)| {
        if mask[j] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}
