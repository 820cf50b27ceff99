//! Eager reverse-mode autodiff on a flat tape.
//!
//! Operations compute their values when recorded, so routing decisions can
//! inspect intermediate results mid-forward. `backward` walks the tape once
//! in reverse (the record order is a topological order by construction) and
//! accumulates gradients additively, so a node feeding several consumers
//! receives the sum of all path gradients.
//!
//! Shape violations are contract bugs and panic at record time with a
//! message naming the op and both shapes. Scalar reductions accumulate in
//! f64 with a fixed left-to-right order; see `kernel` for the matmul order
//! contract.

use std::collections::HashMap;

use super::kernel;
use super::scalar::Scalar;
use super::tensor::{ParamId, ParamStore, Parameter};
use crate::error::{Error, Result};

pub const GELU_TANH_COEFF: f64 = 0.797_884_560_8;
pub const GELU_CUBIC_COEFF: f64 = 0.044_715;
pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Const,
    Matmul { a: NodeId, b: NodeId },
    /// C = A * B^T with A `m x k`, B `n x k`.
    MatmulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    MulScalar { a: NodeId, c: F },
    Gelu { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    GatherRows { a: NodeId, ids: Vec<usize> },
    ScatterAddRows { a: NodeId, ids: Vec<usize> },
    SelectPerRow { a: NodeId, cols: Vec<usize> },
    ScaleRows { a: NodeId, w: NodeId },
    StackRows { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    Sum { a: NodeId },
    Mean { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    SoftCrossEntropy { logits: NodeId, teacher: NodeId },
}

struct Node<F: Scalar> {
    shape: Vec<usize>,
    values: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Rows/width view of a shape, treating the last axis as the width and
/// everything before it as rows. A 1-d shape is `n` rows of width 1.
fn rows_width(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (0, 1),
        1 => (shape[0], 1),
        _ => {
            let w = *shape.last().unwrap();
            (shape.iter().product::<usize>() / w, w)
        }
    }
}

/// Last-axis view: width is the final axis, rows is everything before it.
/// A 1-d shape is a single row. Softmax-family ops normalize along this axis.
fn lastaxis(shape: &[usize]) -> (usize, usize) {
    let w = *shape.last().expect("lastaxis: rank-0 shape");
    (shape.iter().product::<usize>() / w, w)
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    bindings: Vec<(ParamId, NodeId)>,
    bound: HashMap<ParamId, NodeId>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of the last `backward` with respect to node `id`, if any
    /// reached it. Only leaf gradients are retained after backward.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ───── leaves ─────

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<F>, needs_grad: bool) -> NodeId {
        self.push(shape, values, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<F>) -> NodeId {
        self.push(shape, values, Op::Const, false)
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(vec![1], vec![v])
    }

    /// Bind a parameter as a leaf. Frozen parameters still enter the graph
    /// (their values participate in the forward and gradients flow through
    /// them to upstream nodes); only their own gradient is skipped.
    pub fn param(&mut self, p: &Parameter<F>) -> NodeId {
        assert!(
            !self.bound.contains_key(&p.id),
            "param {} bound twice on one tape",
            p.name
        );
        let id = self.leaf(p.tensor.shape.clone(), p.tensor.values.clone(), p.trainable);
        self.bindings.push((p.id, id));
        self.bound.insert(p.id, id);
        id
    }

    pub fn binding(&self, pid: ParamId) -> Option<NodeId> {
        self.bound.get(&pid).copied()
    }

    // ───── binary elementwise ─────

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId, allow_suffix: bool) {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let scalar_b = sb == &[1];
        let ok = sa == sb || (allow_suffix && (scalar_b || (sa.len() > sb.len() && sa.ends_with(sb))));
        assert!(ok, "{op}: shape mismatch between {sa:?} and {sb:?}");
    }

    /// Elementwise addition; `b` may broadcast as a suffix of `a`'s shape
    /// (leading axes broadcast), covering bias adds.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes("add", a, b, true);
        let bn = self.nodes[b.0].values.len();
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[b.0].values[i % bn])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, values, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes("sub", a, b, false);
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, values, Op::Sub { a, b }, ng)
    }

    /// Elementwise product; `b` may suffix-broadcast like `add`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes("mul", a, b, true);
        let bn = self.nodes[b.0].values.len();
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.nodes[b.0].values[i % bn])
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, values, Op::Mul { a, b }, ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shapes("div", a, b, false);
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, values, Op::Div { a, b }, ng)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let values: Vec<F> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(shape, values, Op::MulScalar { a, c }, ng)
    }

    // ───── matmul ─────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: shape mismatch between {sa:?} and {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = kernel::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], values, Op::Matmul { a, b }, ng)
    }

    /// `a (m x k)` times `b (n x k)` transposed; used for attention scores
    /// and the weight-tied output projection.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[1],
            "matmul_bt: shape mismatch between {sa:?} and {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut values = vec![F::zero(); m * n];
        kernel::matmul_bt_add(
            &mut values,
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            m,
            k,
            n,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![m, n], values, Op::MatmulBt { a, b }, ng)
    }

    // ───── nonlinearities ─────

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = F::from_f64(GELU_TANH_COEFF);
        let q = F::from_f64(GELU_CUBIC_COEFF);
        let half = F::from_f64(0.5);
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| {
                let u = c * (x + q * x * x * x);
                half * x * (F::one() + u.tanh())
            })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.needs(a);
        self.push(shape, values, Op::Gelu { a }, ng)
    }

    /// Softmax over the last axis, stabilized by max subtraction; row sums
    /// accumulate in f64.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, w) = lastaxis(&shape);
        let mut values = vec![F::zero(); rows * w];
        for r in 0..rows {
            let row = &self.nodes[a.0].values[r * w..(r + 1) * w];
            softmax_row(row, &mut values[r * w..(r + 1) * w]);
        }
        let ng = self.needs(a);
        self.push(shape, values, Op::Softmax { a }, ng)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let (rows, w) = lastaxis(&shape);
        let mut values = vec![F::zero(); rows * w];
        for r in 0..rows {
            let row = &self.nodes[a.0].values[r * w..(r + 1) * w];
            let lse = log_sum_exp(row);
            for (o, &x) in values[r * w..(r + 1) * w].iter_mut().zip(row) {
                *o = F::from_f64(x.as_f64() - lse);
            }
        }
        let ng = self.needs(a);
        self.push(shape, values, Op::LogSoftmax { a }, ng)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let (rows, w) = lastaxis(&shape);
        let sg = &self.nodes[gamma.0].shape;
        assert!(
            sg.len() == 1 && sg[0] == w && self.nodes[beta.0].shape == *sg,
            "layer_norm: shape mismatch between {shape:?} and {sg:?}"
        );
        let mut values = vec![F::zero(); rows * w];
        for r in 0..rows {
            let row = &self.nodes[x.0].values[r * w..(r + 1) * w];
            let mut mean = 0.0f64;
            for &v in row {
                mean += v.as_f64();
            }
            mean /= w as f64;
            let mut var = 0.0f64;
            for &v in row {
                let d = v.as_f64() - mean;
                var += d * d;
            }
            var /= w as f64;
            let inv = F::from_f64(1.0 / (var + LAYERNORM_EPS).sqrt());
            let mu = F::from_f64(mean);
            for j in 0..w {
                let xhat = (row[j] - mu) * inv;
                values[r * w + j] =
                    xhat * self.nodes[gamma.0].values[j] + self.nodes[beta.0].values[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(shape, values, Op::LayerNorm { x, gamma, beta }, ng)
    }

    // ───── gather / scatter / reshapeish ─────

    /// Rows of `a` selected by `ids` (embedding lookup, token grouping).
    pub fn gather_rows(&mut self, a: NodeId, ids: Vec<usize>) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let (rows, w) = rows_width(&sa);
        for &i in &ids {
            assert!(i < rows, "gather_rows: index {i} out of {rows} rows of {sa:?}");
        }
        let mut values = vec![F::zero(); ids.len() * w];
        for (o, &src) in ids.iter().enumerate() {
            values[o * w..(o + 1) * w]
                .copy_from_slice(&self.nodes[a.0].values[src * w..(src + 1) * w]);
        }
        let shape = if sa.len() == 1 {
            vec![ids.len()]
        } else {
            vec![ids.len(), w]
        };
        let ng = self.needs(a);
        self.push(shape, values, Op::GatherRows { a, ids }, ng)
    }

    /// Rows of `a` added into a zero matrix of `out_rows` rows at positions
    /// `ids` (inverse of `gather_rows`).
    pub fn scatter_add_rows(&mut self, a: NodeId, ids: Vec<usize>, out_rows: usize) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let (rows, w) = rows_width(&sa);
        assert_eq!(
            rows,
            ids.len(),
            "scatter_add_rows: {rows} rows of {sa:?} vs {} ids",
            ids.len()
        );
        let mut values = vec![F::zero(); out_rows * w];
        for (r, &dst) in ids.iter().enumerate() {
            assert!(dst < out_rows, "scatter_add_rows: index {dst} out of {out_rows}");
            let src = &self.nodes[a.0].values[r * w..(r + 1) * w];
            for (o, &v) in values[dst * w..(dst + 1) * w].iter_mut().zip(src) {
                *o = *o + v;
            }
        }
        let shape = if sa.len() == 1 {
            vec![out_rows]
        } else {
            vec![out_rows, w]
        };
        let ng = self.needs(a);
        self.push(shape, values, Op::ScatterAddRows { a, ids }, ng)
    }

    /// One element per row: `out[i] = a[i, cols[i]]`.
    pub fn select_per_row(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        assert!(sa.len() == 2, "select_per_row: shape mismatch between {sa:?} and [n, m]");
        let (rows, w) = (sa[0], sa[1]);
        assert_eq!(cols.len(), rows, "select_per_row: {} cols for {rows} rows", cols.len());
        let mut values = vec![F::zero(); rows];
        for (r, &c) in cols.iter().enumerate() {
            assert!(c < w, "select_per_row: column {c} out of {w}");
            values[r] = self.nodes[a.0].values[r * w + c];
        }
        let ng = self.needs(a);
        self.push(vec![rows], values, Op::SelectPerRow { a, cols }, ng)
    }

    /// Scale row `i` of `a` by `w[i]` (top-2 combine weighting).
    pub fn scale_rows(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        let (rows, width) = rows_width(&sa);
        assert!(
            sw.len() == 1 && sw[0] == rows,
            "scale_rows: shape mismatch between {sa:?} and {sw:?}"
        );
        let mut values = vec![F::zero(); rows * width];
        for r in 0..rows {
            let s = self.nodes[w.0].values[r];
            for j in 0..width {
                values[r * width + j] = self.nodes[a.0].values[r * width + j] * s;
            }
        }
        let ng = self.needs(a) || self.needs(w);
        self.push(sa, values, Op::ScaleRows { a, w }, ng)
    }

    /// Stack 1-d vectors of equal length into a matrix (gate rows).
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack_rows: no parts");
        let w = self.nodes[parts[0].0].values.len();
        let mut values = Vec::with_capacity(parts.len() * w);
        let mut ng = false;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            assert!(
                sp.len() == 1 && sp[0] == w,
                "stack_rows: shape mismatch between {:?} and {:?}",
                vec![w],
                sp
            );
            values.extend_from_slice(&self.nodes[p.0].values);
            ng |= self.needs(p);
        }
        self.push(vec![parts.len(), w], values, Op::StackRows { parts: parts.to_vec() }, ng)
    }

    /// Concatenate along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let first = self.nodes[parts[0].0].shape.clone();
        let (_, w) = rows_width(&first);
        let mut values = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            let sp = self.nodes[p.0].shape.clone();
            let (r, wp) = rows_width(&sp);
            assert!(
                wp == w && sp.len() == first.len(),
                "concat_rows: shape mismatch between {first:?} and {sp:?}"
            );
            values.extend_from_slice(&self.nodes[p.0].values);
            rows += r;
            ng |= self.needs(p);
        }
        let shape = if first.len() == 1 { vec![rows] } else { vec![rows, w] };
        self.push(shape, values, Op::ConcatRows { parts: parts.to_vec() }, ng)
    }

    /// Concatenate along the last axis (reassembling attention heads).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = rows_width(&self.nodes[parts[0].0].shape).0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut ng = false;
        for &p in parts {
            let sp = self.nodes[p.0].shape.clone();
            let (r, w) = rows_width(&sp);
            assert!(
                r == rows && sp.len() == 2,
                "concat_cols: shape mismatch between rows {rows} and {sp:?}"
            );
            widths.push(w);
            ng |= self.needs(p);
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![F::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for r in 0..rows {
                values[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].values[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(vec![rows, total], values, Op::ConcatCols { parts: parts.to_vec() }, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        assert!(sa.len() == 2, "slice_cols: shape mismatch between {sa:?} and [n, m]");
        let (rows, w) = (sa[0], sa[1]);
        assert!(start + len <= w, "slice_cols: {start}+{len} out of width {w}");
        let mut values = vec![F::zero(); rows * len];
        for r in 0..rows {
            values[r * len..(r + 1) * len]
                .copy_from_slice(&self.nodes[a.0].values[r * w + start..r * w + start + len]);
        }
        let ng = self.needs(a);
        self.push(vec![rows, len], values, Op::SliceCols { a, start, len }, ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let sa = self.nodes[a.0].shape.clone();
        let (rows, w) = rows_width(&sa);
        assert!(start + len <= rows, "slice_rows: {start}+{len} out of {rows} rows");
        let values = self.nodes[a.0].values[start * w..(start + len) * w].to_vec();
        let shape = if sa.len() == 1 { vec![len] } else { vec![len, w] };
        let ng = self.needs(a);
        self.push(shape, values, Op::SliceRows { a, start, len }, ng)
    }

    // ───── reductions & losses ─────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in &self.nodes[a.0].values {
            acc += v.as_f64();
        }
        let ng = self.needs(a);
        self.push(vec![1], vec![F::from_f64(acc)], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].values.len();
        assert!(n > 0, "mean: empty input");
        let mut acc = 0.0f64;
        for &v in &self.nodes[a.0].values {
            acc += v.as_f64();
        }
        let ng = self.needs(a);
        self.push(vec![1], vec![F::from_f64(acc / n as f64)], Op::Mean { a }, ng)
    }

    /// Mean next-token negative log-likelihood over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let sl = self.nodes[logits.0].shape.clone();
        assert!(
            sl.len() == 2 && sl[0] == targets.len(),
            "cross_entropy: shape mismatch between {sl:?} and {} targets",
            targets.len()
        );
        let (rows, w) = (sl[0], sl[1]);
        assert!(rows > 0, "cross_entropy: empty batch");
        let mut acc = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < w, "cross_entropy: target {t} out of vocab {w}");
            let row = &self.nodes[logits.0].values[r * w..(r + 1) * w];
            acc += log_sum_exp(row) - row[t].as_f64();
        }
        let ng = self.needs(logits);
        self.push(
            vec![1],
            vec![F::from_f64(acc / rows as f64)],
            Op::CrossEntropy { logits, targets },
            ng,
        )
    }

    /// Mean over rows of `-sum_v teacher[v] * log softmax(logits)[v]`; the
    /// teacher node carries probabilities and is typically a constant.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, teacher: NodeId) -> NodeId {
        let sl = self.nodes[logits.0].shape.clone();
        let st = self.nodes[teacher.0].shape.clone();
        assert!(
            sl == st && sl.len() == 2,
            "soft_cross_entropy: shape mismatch between {sl:?} and {st:?}"
        );
        let (rows, w) = (sl[0], sl[1]);
        assert!(rows > 0, "soft_cross_entropy: empty batch");
        let mut acc = 0.0f64;
        for r in 0..rows {
            let srow = &self.nodes[logits.0].values[r * w..(r + 1) * w];
            let trow = &self.nodes[teacher.0].values[r * w..(r + 1) * w];
            let lse = log_sum_exp(srow);
            let mut row_acc = 0.0f64;
            for (s, t) in srow.iter().zip(trow) {
                row_acc += t.as_f64() * (lse - s.as_f64());
            }
            acc += row_acc;
        }
        let ng = self.needs(logits) || self.needs(teacher);
        self.push(
            vec![1],
            vec![F::from_f64(acc / rows as f64)],
            Op::SoftCrossEntropy { logits, teacher },
            ng,
        )
    }

    // ───── backward ─────

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<F> {
        let len = self.nodes[id.0].values.len();
        self.grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn accum(&mut self, id: NodeId, delta: &[F]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = self.grad_buf(id);
        for (o, &d) in buf.iter_mut().zip(delta) {
            *o = *o + d;
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every leaf
    /// with `needs_grad` reachable from `loss`; intermediate gradients are
    /// dropped as soon as they have been consumed.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf | Op::Const) {
                continue; // leaf grads are kept for readback
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(NodeId(i), &g, &op);
        }
        Ok(())
    }

    fn backprop_node(&mut self, node: NodeId, g: &[F], op: &Op<F>) {
        match op {
            Op::Leaf | Op::Const => {}

            Op::Matmul { a, b } => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA += dC * B^T
                    let bvals = std::mem::take(&mut self.nodes[b.0].values);
                    kernel::matmul_bt_add(self.grad_buf(*a), g, &bvals, m, n, k);
                    self.nodes[b.0].values = bvals;
                }
                if self.needs(*b) {
                    // dB += A^T * dC
                    let avals = std::mem::take(&mut self.nodes[a.0].values);
                    kernel::matmul_at_add(self.grad_buf(*b), &avals, g, k, m, n);
                    self.nodes[a.0].values = avals;
                }
            }

            Op::MatmulBt { a, b } => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.needs(*a) {
                    // dA += dC * B
                    let bvals = std::mem::take(&mut self.nodes[b.0].values);
                    kernel::matmul_add(self.grad_buf(*a), g, &bvals, m, n, k);
                    self.nodes[b.0].values = bvals;
                }
                if self.needs(*b) {
                    // dB += dC^T * A
                    let avals = std::mem::take(&mut self.nodes[a.0].values);
                    kernel::matmul_at_add(self.grad_buf(*b), g, &avals, n, m, k);
                    self.nodes[a.0].values = avals;
                }
            }

            Op::Add { a, b } => {
                self.accum(*a, g);
                if self.needs(*b) {
                    let bn = self.nodes[b.0].values.len();
                    if bn == g.len() {
                        self.accum(*b, g);
                    } else {
                        let mut db = vec![F::zero(); bn];
                        for (i, &gi) in g.iter().enumerate() {
                            db[i % bn] = db[i % bn] + gi;
                        }
                        self.accum(*b, &db);
                    }
                }
            }

            Op::Sub { a, b } => {
                self.accum(*a, g);
                if self.needs(*b) {
                    let db: Vec<F> = g.iter().map(|&x| -x).collect();
                    self.accum(*b, &db);
                }
            }

            Op::Mul { a, b } => {
                let bn = self.nodes[b.0].values.len();
                if self.needs(*a) {
                    let da: Vec<F> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * self.nodes[b.0].values[i % bn])
                        .collect();
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); bn];
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % bn] = db[i % bn] + gi * self.nodes[a.0].values[i];
                    }
                    self.accum(*b, &db);
                }
            }

            Op::Div { a, b } => {
                if self.needs(*a) {
                    let da: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b.0].values)
                        .map(|(&gi, &bi)| gi / bi)
                        .collect();
                    self.accum(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let bi = self.nodes[b.0].values[i];
                            -gi * self.nodes[a.0].values[i] / (bi * bi)
                        })
                        .collect();
                    self.accum(*b, &db);
                }
            }

            Op::MulScalar { a, c } => {
                let da: Vec<F> = g.iter().map(|&gi| gi * *c).collect();
                self.accum(*a, &da);
            }

            Op::Gelu { a } => {
                let c = F::from_f64(GELU_TANH_COEFF);
                let q = F::from_f64(GELU_CUBIC_COEFF);
                let half = F::from_f64(0.5);
                let three = F::from_f64(3.0);
                let da: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[a.0].values)
                    .map(|(&gi, &x)| {
                        let u = c * (x + q * x * x * x);
                        let t = u.tanh();
                        let du = c * (F::one() + three * q * x * x);
                        gi * (half * (F::one() + t) + half * x * (F::one() - t * t) * du)
                    })
                    .collect();
                self.accum(*a, &da);
            }

            Op::Softmax { a } => {
                let (rows, w) = lastaxis(&self.nodes[node.0].shape);
                let y = &self.nodes[node.0].values;
                let mut da = vec![F::zero(); rows * w];
                for r in 0..rows {
                    let mut dot = 0.0f64;
                    for j in 0..w {
                        dot += (g[r * w + j] * y[r * w + j]).as_f64();
                    }
                    let dot = F::from_f64(dot);
                    for j in 0..w {
                        da[r * w + j] = y[r * w + j] * (g[r * w + j] - dot);
                    }
                }
                self.accum(*a, &da);
            }

            Op::LogSoftmax { a } => {
                let (rows, w) = lastaxis(&self.nodes[node.0].shape);
                let y = &self.nodes[node.0].values;
                let mut da = vec![F::zero(); rows * w];
                for r in 0..rows {
                    let mut gsum = 0.0f64;
                    for j in 0..w {
                        gsum += g[r * w + j].as_f64();
                    }
                    let gsum = F::from_f64(gsum);
                    for j in 0..w {
                        let p = y[r * w + j].exp();
                        da[r * w + j] = g[r * w + j] - p * gsum;
                    }
                }
                self.accum(*a, &da);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let (rows, w) = lastaxis(&self.nodes[x.0].shape);
                let wf = w as f64;
                let mut dx = vec![F::zero(); rows * w];
                let mut dgamma = vec![F::zero(); w];
                let mut dbeta = vec![F::zero(); w];
                for r in 0..rows {
                    let row = &self.nodes[x.0].values[r * w..(r + 1) * w];
                    let mut mean = 0.0f64;
                    for &v in row {
                        mean += v.as_f64();
                    }
                    mean /= wf;
                    let mut var = 0.0f64;
                    for &v in row {
                        let d = v.as_f64() - mean;
                        var += d * d;
                    }
                    var /= wf;
                    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    // xhat, gg = g * gamma; means of gg and gg*xhat
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    let mut xhat = vec![0.0f64; w];
                    for j in 0..w {
                        xhat[j] = (row[j].as_f64() - mean) * inv;
                        let gg =
                            (g[r * w + j] * self.nodes[gamma.0].values[j]).as_f64();
                        m1 += gg;
                        m2 += gg * xhat[j];
                    }
                    m1 /= wf;
                    m2 /= wf;
                    for j in 0..w {
                        let gg =
                            (g[r * w + j] * self.nodes[gamma.0].values[j]).as_f64();
                        dx[r * w + j] = F::from_f64((gg - m1 - xhat[j] * m2) * inv);
                        dgamma[j] =
                            dgamma[j] + F::from_f64(g[r * w + j].as_f64() * xhat[j]);
                        dbeta[j] = dbeta[j] + g[r * w + j];
                    }
                }
                self.accum(*x, &dx);
                self.accum(*gamma, &dgamma);
                self.accum(*beta, &dbeta);
            }

            Op::GatherRows { a, ids } => {
                if !self.needs(*a) {
                    return;
                }
                let (_, w) = rows_width(&self.nodes[node.0].shape);
                let buf_len = self.nodes[a.0].values.len();
                let mut da = vec![F::zero(); buf_len];
                for (r, &src) in ids.iter().enumerate() {
                    for j in 0..w {
                        da[src * w + j] = da[src * w + j] + g[r * w + j];
                    }
                }
                self.accum(*a, &da);
            }

            Op::ScatterAddRows { a, ids } => {
                if !self.needs(*a) {
                    return;
                }
                let (_, w) = rows_width(&self.nodes[a.0].shape);
                let mut da = vec![F::zero(); ids.len() * w];
                for (r, &dst) in ids.iter().enumerate() {
                    da[r * w..(r + 1) * w].copy_from_slice(&g[dst * w..(dst + 1) * w]);
                }
                self.accum(*a, &da);
            }

            Op::SelectPerRow { a, cols } => {
                if !self.needs(*a) {
                    return;
                }
                let w = self.nodes[a.0].shape[1];
                let mut da = vec![F::zero(); self.nodes[a.0].values.len()];
                for (r, &c) in cols.iter().enumerate() {
                    da[r * w + c] = g[r];
                }
                self.accum(*a, &da);
            }

            Op::ScaleRows { a, w } => {
                let (rows, width) = rows_width(&self.nodes[a.0].shape);
                if self.needs(*a) {
                    let mut da = vec![F::zero(); rows * width];
                    for r in 0..rows {
                        let s = self.nodes[w.0].values[r];
                        for j in 0..width {
                            da[r * width + j] = g[r * width + j] * s;
                        }
                    }
                    self.accum(*a, &da);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); rows];
                    for r in 0..rows {
                        let mut acc = 0.0f64;
                        for j in 0..width {
                            acc += (g[r * width + j] * self.nodes[a.0].values[r * width + j])
                                .as_f64();
                        }
                        dw[r] = F::from_f64(acc);
                    }
                    self.accum(*w, &dw);
                }
            }

            Op::StackRows { parts } => {
                let w = self.nodes[node.0].shape[1];
                for (r, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        self.accum(p, &g[r * w..(r + 1) * w]);
                    }
                }
            }

            Op::ConcatRows { parts } => {
                let (_, w) = rows_width(&self.nodes[node.0].shape);
                let mut off = 0;
                for &p in parts {
                    let (r, _) = rows_width(&self.nodes[p.0].shape);
                    if self.needs(p) {
                        self.accum(p, &g[off * w..(off + r) * w]);
                    }
                    off += r;
                }
            }

            Op::ConcatCols { parts } => {
                let (rows, total) = rows_width(&self.nodes[node.0].shape);
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.needs(p) {
                        let mut dp = vec![F::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accum(p, &dp);
                    }
                    off += w;
                }
            }

            Op::SliceCols { a, start, len } => {
                if !self.needs(*a) {
                    return;
                }
                let (rows, w) = rows_width(&self.nodes[a.0].shape);
                let mut da = vec![F::zero(); rows * w];
                for r in 0..rows {
                    da[r * w + start..r * w + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(*a, &da);
            }

            Op::SliceRows { a, start, len } => {
                if !self.needs(*a) {
                    return;
                }
                let (_, w) = rows_width(&self.nodes[a.0].shape);
                let rows_total = rows_width(&self.nodes[a.0].shape).0;
                let mut da = vec![F::zero(); rows_total * w];
                da[start * w..(start + len) * w].copy_from_slice(g);
                self.accum(*a, &da);
            }

            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[a.0].values.len()];
                self.accum(*a, &da);
            }

            Op::Mean { a } => {
                let n = self.nodes[a.0].values.len();
                let s = g[0] * F::from_f64(1.0 / n as f64);
                let da = vec![s; n];
                self.accum(*a, &da);
            }

            Op::CrossEntropy { logits, targets } => {
                if !self.needs(*logits) {
                    return;
                }
                let (rows, w) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let scale = g[0] * F::from_f64(1.0 / rows as f64);
                let mut da = vec![F::zero(); rows * w];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &self.nodes[logits.0].values[r * w..(r + 1) * w];
                    softmax_row(row, &mut da[r * w..(r + 1) * w]);
                    for (j, d) in da[r * w..(r + 1) * w].iter_mut().enumerate() {
                        let delta = if j == t { F::one() } else { F::zero() };
                        *d = (*d - delta) * scale;
                    }
                }
                self.accum(*logits, &da);
            }

            Op::SoftCrossEntropy { logits, teacher } => {
                // d/ds = (softmax(s) * sum(p_T) - p_T) / rows; exact even for
                // teacher rows that do not sum precisely to one.
                if !self.needs(*logits) && !self.needs(*teacher) {
                    return;
                }
                let (rows, w) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let scale = g[0] * F::from_f64(1.0 / rows as f64);
                if self.needs(*logits) {
                    let mut da = vec![F::zero(); rows * w];
                    for r in 0..rows {
                        let srow = &self.nodes[logits.0].values[r * w..(r + 1) * w];
                        let trow = &self.nodes[teacher.0].values[r * w..(r + 1) * w];
                        let mut tsum = 0.0f64;
                        for &t in trow {
                            tsum += t.as_f64();
                        }
                        let tsum = F::from_f64(tsum);
                        softmax_row(srow, &mut da[r * w..(r + 1) * w]);
                        for (j, d) in da[r * w..(r + 1) * w].iter_mut().enumerate() {
                            *d = (*d * tsum - trow[j]) * scale;
                        }
                    }
                    self.accum(*logits, &da);
                }
                if self.needs(*teacher) {
                    // dL/dp_T[v] = lse(s) - s_v, scaled.
                    let mut dt = vec![F::zero(); rows * w];
                    for r in 0..rows {
                        let srow = &self.nodes[logits.0].values[r * w..(r + 1) * w];
                        let lse = log_sum_exp(srow);
                        for j in 0..w {
                            dt[r * w + j] =
                                F::from_f64(lse - srow[j].as_f64()) * scale;
                        }
                    }
                    self.accum(*teacher, &dt);
                }
            }
        }
    }

    /// Accumulate leaf gradients into the bound parameters of `store`.
    /// Parameters never bound on this tape are left untouched (their
    /// gradient stays whatever it was, typically zero).
    pub fn accumulate_param_grads<S: ParamStore<F>>(&self, store: &mut S) {
        let mut by_id: HashMap<ParamId, &[F]> = HashMap::new();
        for (pid, node) in &self.bindings {
            if let Some(g) = self.grad(*node) {
                by_id.insert(*pid, g);
            }
        }
        store.for_each_param_mut(&mut |p| {
            if let Some(g) = by_id.get(&p.id) {
                p.tensor.accumulate_grad(g);
            }
        });
    }
}

/// Stabilized softmax of one row into `out`; the normalizer accumulates in
/// f64, left to right.
fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut maxv = row[0];
    for &v in row {
        if v > maxv {
            maxv = v;
        }
    }
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - maxv).exp();
        *o = e;
        sum += e.as_f64();
    }
    for o in out.iter_mut() {
        *o = F::from_f64(o.as_f64() / sum);
    }
}

/// log(sum(exp(row))) with max subtraction, accumulated in f64.
fn log_sum_exp<F: Scalar>(row: &[F]) -> f64 {
    let mut maxv = row[0];
    for &v in row {
        if v > maxv {
            maxv = v;
        }
    }
    if maxv.as_f64().is_infinite() && maxv < F::zero() {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0f64;
    for &v in row {
        sum += (v - maxv).as_f64().exp();
    }
    maxv.as_f64() + sum.ln()
}
