//! Sparsely activated mixture-of-experts layer with learnable top-2 gating.
//!
//! Each MoE layer owns `E` independent feed-forward experts and one gating
//! row per expert (the `E x M` gate weight, stored row-wise so rows can be
//! frozen and appended independently). Per token, the gate softmax picks the
//! two highest-probability experts; their outputs are combined with weights
//! renormalized over the selected pair, so the output scale is stable as `E`
//! grows. Only the selected experts are evaluated.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Parameter;

/// One expert: a two-layer GELU feed-forward block.
///
/// All four parameters share one origin phase and one trainable flag; the
/// accessors below keep them in lock-step.
#[derive(Debug, Clone)]
pub struct FeedForwardExpert<F: Scalar> {
    pub w1: Parameter<F>, // [M, H]
    pub b1: Parameter<F>, // [H]
    pub w2: Parameter<F>, // [H, M]
    pub b2: Parameter<F>, // [M]
}

impl<F: Scalar> FeedForwardExpert<F> {
    pub fn origin_phase(&self) -> usize {
        debug_assert!(
            self.w1.origin_phase == self.b1.origin_phase
                && self.w1.origin_phase == self.w2.origin_phase
                && self.w1.origin_phase == self.b2.origin_phase
        );
        self.w1.origin_phase
    }

    pub fn trainable(&self) -> bool {
        self.w1.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.w1.trainable = trainable;
        self.b1.trainable = trainable;
        self.w2.trainable = trainable;
        self.b2.trainable = trainable;
    }

    pub fn params(&self) -> [&Parameter<F>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Plain (untaped) forward for a single token, used by routing oracles
    /// and duplication checks.
    pub fn apply(&self, x: &[F]) -> Vec<F> {
        let m = self.w1.shape()[0];
        let h = self.w1.shape()[1];
        assert_eq!(x.len(), m, "expert input dim mismatch");
        let mut hidden = vec![F::zero(); h];
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut acc = self.b1.values()[j];
            for p in 0..m {
                acc = acc + x[p] * self.w1.values()[p * h + j];
            }
            *hj = gelu_scalar(acc);
        }
        let mut out = vec![F::zero(); m];
        for (j, oj) in out.iter_mut().enumerate() {
            let mut acc = self.b2.values()[j];
            for p in 0..h {
                acc = acc + hidden[p] * self.w2.values()[p * m + j];
            }
            *oj = acc;
        }
        out
    }

    /// Taped forward over a matrix of gathered token features.
    pub fn forward(&self, g: &mut Graph<F>, xs: NodeId) -> NodeId {
        let w1 = g.param(&self.w1);
        let b1 = g.param(&self.b1);
        let w2 = g.param(&self.w2);
        let b2 = g.param(&self.b2);
        let h = g.matmul(xs, w1);
        let h = g.add(h, b1);
        let h = g.gelu(h);
        let out = g.matmul(h, w2);
        g.add(out, b2)
    }
}

fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::from_f64(crate::numerics::graph::GELU_TANH_COEFF);
    let q = F::from_f64(crate::numerics::graph::GELU_CUBIC_COEFF);
    let half = F::from_f64(0.5);
    let u = c * (x + q * x * x * x);
    half * x * (F::one() + u.tanh())
}

/// Expert list plus one gating row per expert. Expert order is stable;
/// expansion only appends, and the two vectors grow together.
#[derive(Debug, Clone)]
pub struct MoeLayer<F: Scalar> {
    experts: Vec<FeedForwardExpert<F>>,
    gate_rows: Vec<Parameter<F>>, // each [M]; row e pairs with expert e
}

impl<F: Scalar> MoeLayer<F> {
    pub fn new(experts: Vec<FeedForwardExpert<F>>, gate_rows: Vec<Parameter<F>>) -> Self {
        assert_eq!(
            experts.len(),
            gate_rows.len(),
            "expert count must equal gating rows"
        );
        assert!(experts.len() >= 2, "top-2 routing requires at least 2 experts");
        MoeLayer { experts, gate_rows }
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[FeedForwardExpert<F>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [FeedForwardExpert<F>] {
        &mut self.experts
    }

    pub fn gate_rows(&self) -> &[Parameter<F>] {
        &self.gate_rows
    }

    pub fn gate_rows_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.gate_rows
    }

    pub fn experts_and_rows_mut(
        &mut self,
    ) -> (&mut [FeedForwardExpert<F>], &mut [Parameter<F>]) {
        (&mut self.experts, &mut self.gate_rows)
    }

    /// Append an expert together with its gating row; the only growth path.
    pub fn push_expert(&mut self, expert: FeedForwardExpert<F>, gate_row: Parameter<F>) {
        self.experts.push(expert);
        self.gate_rows.push(gate_row);
    }
}

/// Routing outcome for a single token.
#[derive(Debug, Clone)]
pub struct GateDecision<F: Scalar> {
    /// Full gate distribution, length `E`, sums to one.
    pub probs: Vec<F>,
    /// Selected experts, highest probability first; ties break toward the
    /// lower index.
    pub top2: (usize, usize),
    /// Combine weights renormalized over the selected pair; they sum to one.
    pub combine: (F, F),
}

/// Per-batch routing statistics (expert load accounting).
#[derive(Debug, Clone, Default)]
pub struct BatchGateStats {
    /// Tokens that selected expert `e` in their top-2.
    pub load_counts: Vec<usize>,
    /// Tokens whose top-1 is expert `e`.
    pub top1_counts: Vec<usize>,
    pub tokens: usize,
}

/// Top-2 of one probability row with lower-index tie-breaking.
pub(crate) fn top2_of_row<F: Scalar>(probs: &[F]) -> (usize, usize) {
    debug_assert!(probs.len() >= 2);
    let mut i1 = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[i1] {
            i1 = i;
        }
    }
    let mut i2 = usize::MAX;
    for (i, &p) in probs.iter().enumerate() {
        if i == i1 {
            continue;
        }
        if i2 == usize::MAX || p > probs[i2] {
            i2 = i;
        }
    }
    (i1, i2)
}

/// Route one token through the gate: softmax over expert logits, take the
/// best two, renormalize their weights.
pub fn gate_route<F: Scalar>(
    x: &[F],
    layer: &MoeLayer<F>,
    layer_label: &str,
) -> Result<GateDecision<F>> {
    let e = layer.expert_count();
    let m = x.len();
    let mut logits = Vec::with_capacity(e);
    for row in layer.gate_rows() {
        assert_eq!(row.values().len(), m, "gate row width mismatch");
        let mut acc = F::zero();
        for (xv, wv) in x.iter().zip(row.values()) {
            acc = acc + *xv * *wv;
        }
        logits.push(acc);
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gate logits in layer {layer_label}"),
        });
    }
    let probs = softmax_slice(&logits);
    let (i1, i2) = top2_of_row(&probs);
    let denom = probs[i1] + probs[i2];
    let w1 = probs[i1] / denom;
    let w2 = probs[i2] / denom;
    Ok(GateDecision {
        probs,
        top2: (i1, i2),
        combine: (w1, w2),
    })
}

/// Sparse forward of one token: evaluates only the two selected experts.
pub fn moe_forward<F: Scalar>(
    x: &[F],
    layer: &MoeLayer<F>,
    layer_label: &str,
) -> Result<Vec<F>> {
    let decision = gate_route(x, layer, layer_label)?;
    let (i1, i2) = decision.top2;
    let (w1, w2) = decision.combine;
    let o1 = layer.experts()[i1].apply(x);
    let o2 = layer.experts()[i2].apply(x);
    Ok(o1
        .iter()
        .zip(&o2)
        .map(|(&a, &b)| w1 * a + w2 * b)
        .collect())
}

/// GShard-style balance penalty before any coefficient:
/// `E * sum_e f_e * mean_prob_e` with `f_e` the fraction of tokens whose
/// top-1 is `e`. Uniform routing gives exactly 1.
pub fn load_balance_aux(top1_counts: &[usize], mean_probs: &[f64]) -> f64 {
    assert_eq!(top1_counts.len(), mean_probs.len());
    let e = top1_counts.len() as f64;
    let tokens: usize = top1_counts.iter().sum();
    if tokens == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (&c, &p) in top1_counts.iter().zip(mean_probs) {
        acc += (c as f64 / tokens as f64) * p;
    }
    e * acc
}

/// Output of the batched taped MoE forward.
pub struct MoeForwardNodes {
    pub output: NodeId,
    /// Balance penalty before the config coefficient, when requested.
    pub aux: Option<NodeId>,
    pub stats: BatchGateStats,
}

/// Batched taped forward over `x` of shape `[n_tokens, M]`.
///
/// `visible_experts` restricts routing to the first `k` experts (old-phase
/// experts are always a prefix, so a restricted forward is the model as it
/// existed before expansion). Gradients flow through the combine weights and
/// the selected experts; the selected index set is treated as constant.
pub fn moe_layer_forward<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    layer: &MoeLayer<F>,
    layer_label: &str,
    visible_experts: Option<usize>,
    with_aux: bool,
) -> Result<MoeForwardNodes> {
    let e_total = layer.expert_count();
    let e = visible_experts.unwrap_or(e_total).min(e_total);
    assert!(e >= 2, "top-2 routing requires at least 2 visible experts");
    let n = g.shape(x)[0];

    let row_nodes: Vec<NodeId> = layer.gate_rows()[..e].iter().map(|r| g.param(r)).collect();
    let gate = g.stack_rows(&row_nodes);
    let logits = g.matmul_bt(x, gate); // [n, e]
    if g.values(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("gate logits in layer {layer_label}"),
        });
    }
    let probs = g.softmax(logits);

    let mut top1 = Vec::with_capacity(n);
    let mut top2 = Vec::with_capacity(n);
    let mut stats = BatchGateStats {
        load_counts: vec![0; e],
        top1_counts: vec![0; e],
        tokens: n,
    };
    for r in 0..n {
        let row = &g.values(probs)[r * e..(r + 1) * e];
        let (i1, i2) = top2_of_row(row);
        stats.load_counts[i1] += 1;
        stats.load_counts[i2] += 1;
        stats.top1_counts[i1] += 1;
        top1.push(i1);
        top2.push(i2);
    }

    let p1 = g.select_per_row(probs, top1.clone());
    let p2 = g.select_per_row(probs, top2.clone());
    let denom = g.add(p1, p2);
    let w1 = g.div(p1, denom);
    let w2 = g.div(p2, denom);

    let mut output: Option<NodeId> = None;
    for ex in 0..e {
        let ids1: Vec<usize> = (0..n).filter(|&r| top1[r] == ex).collect();
        let ids2: Vec<usize> = (0..n).filter(|&r| top2[r] == ex).collect();
        if ids1.is_empty() && ids2.is_empty() {
            continue;
        }
        let mut ids = ids1.clone();
        ids.extend_from_slice(&ids2);
        let xs = g.gather_rows(x, ids.clone());
        let expert_out = layer.experts()[ex].forward(g, xs);
        let mut weight_parts = Vec::new();
        if !ids1.is_empty() {
            weight_parts.push(g.gather_rows(w1, ids1));
        }
        if !ids2.is_empty() {
            weight_parts.push(g.gather_rows(w2, ids2));
        }
        let weights = g.concat_rows(&weight_parts);
        let weighted = g.scale_rows(expert_out, weights);
        let scattered = g.scatter_add_rows(weighted, ids, n);
        output = Some(match output {
            Some(acc) => g.add(acc, scattered),
            None => scattered,
        });
    }
    let output = output.expect("every token routes to two experts");

    let aux = if with_aux {
        let ones = g.constant(vec![1, n], vec![F::one(); n]);
        let colsum = g.matmul(ones, probs); // [1, e]
        let mean_probs = g.mul_scalar(colsum, F::from_f64(1.0 / n as f64));
        let fracs: Vec<F> = stats
            .top1_counts
            .iter()
            .map(|&c| F::from_f64(c as f64 / n as f64))
            .collect();
        let f_const = g.constant(vec![1, e], fracs);
        let prod = g.mul(mean_probs, f_const);
        let s = g.sum(prod);
        Some(g.mul_scalar(s, F::from_f64(e as f64)))
    } else {
        None
    };

    Ok(MoeForwardNodes {
        output,
        aux,
        stats,
    })
}

fn softmax_slice<F: Scalar>(logits: &[F]) -> Vec<F> {
    let mut maxv = logits[0];
    for &v in logits {
        if v > maxv {
            maxv = v;
        }
    }
    let mut sum = 0.0f64;
    let mut out: Vec<F> = logits
        .iter()
        .map(|&v| {
            let e = (v - maxv).exp();
            sum += e.as_f64();
            e
        })
        .collect();
    for o in out.iter_mut() {
        *o = F::from_f64(o.as_f64() / sum);
    }
    out
}
