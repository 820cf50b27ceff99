//! Decoder-only transformer language model with interleaved MoE layers.
//!
//! Pre-layernorm blocks, learned positional embeddings, causal masking, and
//! an output projection weight-tied to the token embedding. By default the
//! feed-forward of every odd-indexed block is a top-2 MoE layer and
//! even-indexed blocks keep a dense feed-forward.

pub mod moe;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::{ParamId, ParamStore, Parameter, Tensor};
use crate::seeds;
pub use moe::{
    gate_route, load_balance_aux, moe_forward, moe_layer_forward, BatchGateStats,
    FeedForwardExpert, GateDecision, MoeLayer,
};

/// Which blocks carry an MoE feed-forward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MoePlacement {
    Pattern(MoePattern),
    Blocks(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoePattern {
    /// MoE in blocks 1, 3, 5, ... ("every other" layer).
    Odd,
    Even,
    All,
    /// Dense model, no MoE layers.
    None,
}

impl Default for MoePlacement {
    fn default() -> Self {
        MoePlacement::Pattern(MoePattern::Odd)
    }
}

impl MoePlacement {
    pub fn is_moe_block(&self, block: usize) -> bool {
        match self {
            MoePlacement::Pattern(MoePattern::Odd) => block % 2 == 1,
            MoePlacement::Pattern(MoePattern::Even) => block % 2 == 0,
            MoePlacement::Pattern(MoePattern::All) => true,
            MoePlacement::Pattern(MoePattern::None) => false,
            MoePlacement::Blocks(list) => list.contains(&block),
        }
    }
}

fn default_aux_coefficient() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer blocks (L).
    pub blocks: usize,
    /// Feature dimension (M).
    pub model_dim: usize,
    /// Feed-forward hidden dimension (H).
    pub ffn_hidden: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Experts per MoE layer at phase 0.
    pub experts_initial: usize,
    #[serde(default)]
    pub moe_blocks: MoePlacement,
    /// Coefficient on the load-balance penalty; 0 disables it.
    #[serde(default = "default_aux_coefficient")]
    pub aux_coefficient: f64,
}

impl ModelConfig {
    /// Collect every violated invariant (empty = valid).
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.blocks == 0 {
            errs.push("model.blocks must be >= 1".into());
        }
        if self.n_heads * self.d_head != self.model_dim {
            errs.push(format!(
                "model.n_heads ({}) * model.d_head ({}) must equal model.model_dim ({})",
                self.n_heads, self.d_head, self.model_dim
            ));
        }
        if self.experts_initial < 2 {
            errs.push(format!(
                "model.experts_initial ({}) must be >= 2 for top-2 routing",
                self.experts_initial
            ));
        }
        if self.vocab_size == 0 {
            errs.push("model.vocab_size must be >= 1".into());
        }
        if self.max_seq_len == 0 {
            errs.push("model.max_seq_len must be >= 1".into());
        }
        if self.aux_coefficient < 0.0 {
            errs.push("model.aux_coefficient must be >= 0".into());
        }
        errs
    }

    pub fn moe_block_indices(&self) -> Vec<usize> {
        (0..self.blocks)
            .filter(|&b| self.moe_blocks.is_moe_block(b))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<F: Scalar> {
    pub gamma: Parameter<F>,
    pub beta: Parameter<F>,
}

#[derive(Debug, Clone)]
pub struct Attention<F: Scalar> {
    pub wq: Parameter<F>,
    pub bq: Parameter<F>,
    pub wk: Parameter<F>,
    pub bk: Parameter<F>,
    pub wv: Parameter<F>,
    pub bv: Parameter<F>,
    pub wo: Parameter<F>,
    pub bo: Parameter<F>,
}

#[derive(Debug, Clone)]
pub struct DenseFfn<F: Scalar> {
    pub w1: Parameter<F>,
    pub b1: Parameter<F>,
    pub w2: Parameter<F>,
    pub b2: Parameter<F>,
}

#[derive(Debug, Clone)]
pub enum FfnLayer<F: Scalar> {
    Dense(DenseFfn<F>),
    Moe(MoeLayer<F>),
}

#[derive(Debug, Clone)]
pub struct Block<F: Scalar> {
    pub ln1: LayerNormParams<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNormParams<F>,
    pub ffn: FfnLayer<F>,
}

#[derive(Debug, Clone)]
pub struct TransformerLM<F: Scalar> {
    pub cfg: ModelConfig,
    pub tok_embed: Parameter<F>,
    pub pos_embed: Parameter<F>,
    pub blocks: Vec<Block<F>>,
    pub final_ln: LayerNormParams<F>,
    next_param_id: u64,
}

/// Nodes produced by one taped forward pass.
pub struct ForwardNodes {
    /// `[batch * seq, vocab]` next-token logits.
    pub logits: NodeId,
    /// Summed balance penalties across MoE layers, before the coefficient.
    pub aux: Option<NodeId>,
    pub gate_stats: Vec<BatchGateStats>,
}

impl<F: Scalar> TransformerLM<F> {
    pub fn new(cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        let mut builder = ParamBuilder {
            next_id: 0,
            init_seed,
            origin_phase: 0,
        };
        let m = cfg.model_dim;
        let h = cfg.ffn_hidden;
        let tok_embed = builder.normal("embed.tok", vec![cfg.vocab_size, m]);
        let pos_embed = builder.normal("embed.pos", vec![cfg.max_seq_len, m]);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let prefix = format!("block{b}");
            let ln1 = builder.layer_norm(&format!("{prefix}.ln1"), m);
            let attn = Attention {
                wq: builder.normal(&format!("{prefix}.attn.wq"), vec![m, m]),
                bq: builder.zeros(&format!("{prefix}.attn.bq"), vec![m]),
                wk: builder.normal(&format!("{prefix}.attn.wk"), vec![m, m]),
                bk: builder.zeros(&format!("{prefix}.attn.bk"), vec![m]),
                wv: builder.normal(&format!("{prefix}.attn.wv"), vec![m, m]),
                bv: builder.zeros(&format!("{prefix}.attn.bv"), vec![m]),
                wo: builder.normal(&format!("{prefix}.attn.wo"), vec![m, m]),
                bo: builder.zeros(&format!("{prefix}.attn.bo"), vec![m]),
            };
            let ln2 = builder.layer_norm(&format!("{prefix}.ln2"), m);
            let ffn = if cfg.moe_blocks.is_moe_block(b) {
                let mut experts = Vec::with_capacity(cfg.experts_initial);
                let mut gate_rows = Vec::with_capacity(cfg.experts_initial);
                for e in 0..cfg.experts_initial {
                    experts.push(builder.expert(&format!("{prefix}.moe.expert{e}"), m, h));
                    gate_rows.push(builder.normal(&format!("{prefix}.moe.gate.row{e}"), vec![m]));
                }
                FfnLayer::Moe(MoeLayer::new(experts, gate_rows))
            } else {
                let e = builder.expert(&format!("{prefix}.ffn"), m, h);
                FfnLayer::Dense(DenseFfn {
                    w1: e.w1,
                    b1: e.b1,
                    w2: e.w2,
                    b2: e.b2,
                })
            };
            blocks.push(Block {
                ln1,
                attn,
                ln2,
                ffn,
            });
        }
        let final_ln = builder.layer_norm("final_ln", m);
        let model = TransformerLM {
            cfg,
            tok_embed,
            pos_embed,
            blocks,
            final_ln,
            next_param_id: builder.next_id,
        };
        model.debug_assert_unique_names();
        Ok(model)
    }

    fn debug_assert_unique_names(&self) {
        #[cfg(debug_assertions)]
        {
            let mut names = std::collections::HashSet::new();
            self.for_each_param(&mut |p| {
                assert!(names.insert(p.name.clone()), "duplicate parameter {}", p.name);
            });
        }
    }

    /// Fresh parameter ids for expansion-created parameters.
    pub fn alloc_param_id(&mut self) -> ParamId {
        let id = ParamId(self.next_param_id);
        self.next_param_id += 1;
        id
    }

    /// Experts per MoE layer (uniform across layers), or 0 for dense models.
    pub fn expert_count(&self) -> usize {
        self.blocks
            .iter()
            .find_map(|b| match &b.ffn {
                FfnLayer::Moe(l) => Some(l.expert_count()),
                FfnLayer::Dense(_) => None,
            })
            .unwrap_or(0)
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MoeLayer<F>)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.ffn {
            FfnLayer::Moe(l) => Some((i, l)),
            FfnLayer::Dense(_) => None,
        })
    }

    pub fn moe_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut MoeLayer<F>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .filter_map(|(i, b)| match &mut b.ffn {
                FfnLayer::Moe(l) => Some((i, l)),
                FfnLayer::Dense(_) => None,
            })
    }

    fn validate_tokens(&self, tokens: &[u32], seq: usize) -> Result<()> {
        if seq > self.cfg.max_seq_len {
            return Err(Error::Other(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.cfg.max_seq_len
            )));
        }
        for (pos, &t) in tokens.iter().enumerate() {
            if t as usize >= self.cfg.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.cfg.vocab_size,
                    position: pos,
                });
            }
        }
        Ok(())
    }

    /// Taped forward over a `[batch, seq]` token matrix (row-major).
    ///
    /// `visible_experts` restricts every MoE layer to its first `k` experts;
    /// `with_aux` requests balance-penalty nodes.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        tokens: &[u32],
        batch: usize,
        seq: usize,
        visible_experts: Option<usize>,
        with_aux: bool,
    ) -> Result<ForwardNodes> {
        assert_eq!(tokens.len(), batch * seq, "token matrix shape mismatch");
        assert!(batch > 0 && seq > 0, "empty batch");
        self.validate_tokens(tokens, seq)?;
        let m = self.cfg.model_dim;
        let n = batch * seq;

        let tok_node = g.param(&self.tok_embed);
        let pos_node = g.param(&self.pos_embed);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.gather_rows(tok_node, ids);
        let pos_ids: Vec<usize> = (0..n).map(|i| i % seq).collect();
        let pos = g.gather_rows(pos_node, pos_ids);
        let mut x = g.add(emb, pos);

        // Causal mask shared by all heads and blocks.
        let mut mask_vals = vec![F::zero(); seq * seq];
        for r in 0..seq {
            for c in (r + 1)..seq {
                mask_vals[r * seq + c] = F::neg_infinity();
            }
        }
        let mask = g.constant(vec![seq, seq], mask_vals);
        let inv_sqrt_dh = F::from_f64(1.0 / (self.cfg.d_head as f64).sqrt());

        let mut gate_stats = Vec::new();
        let mut aux_total: Option<NodeId> = None;
        for (bi, block) in self.blocks.iter().enumerate() {
            // Attention sublayer.
            let g1 = g.param(&block.ln1.gamma);
            let b1 = g.param(&block.ln1.beta);
            let h = g.layer_norm(x, g1, b1);
            let wq = g.param(&block.attn.wq);
            let bq = g.param(&block.attn.bq);
            let wk = g.param(&block.attn.wk);
            let bk = g.param(&block.attn.bk);
            let wv = g.param(&block.attn.wv);
            let bv = g.param(&block.attn.bv);
            let q = g.matmul(h, wq);
            let q = g.add(q, bq);
            let k = g.matmul(h, wk);
            let k = g.add(k, bk);
            let v = g.matmul(h, wv);
            let v = g.add(v, bv);

            let mut batch_rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = g.slice_rows(q, b * seq, seq);
                let kb = g.slice_rows(k, b * seq, seq);
                let vb = g.slice_rows(v, b * seq, seq);
                let mut heads = Vec::with_capacity(self.cfg.n_heads);
                for head in 0..self.cfg.n_heads {
                    let off = head * self.cfg.d_head;
                    let qh = g.slice_cols(qb, off, self.cfg.d_head);
                    let kh = g.slice_cols(kb, off, self.cfg.d_head);
                    let vh = g.slice_cols(vb, off, self.cfg.d_head);
                    let scores = g.matmul_bt(qh, kh);
                    let scaled = g.mul_scalar(scores, inv_sqrt_dh);
                    let masked = g.add(scaled, mask);
                    let probs = g.softmax(masked);
                    heads.push(g.matmul(probs, vh));
                }
                batch_rows.push(g.concat_cols(&heads));
            }
            let mixed = g.concat_rows(&batch_rows);
            let wo = g.param(&block.attn.wo);
            let bo = g.param(&block.attn.bo);
            let attn_out = g.matmul(mixed, wo);
            let attn_out = g.add(attn_out, bo);
            x = g.add(x, attn_out);

            // Feed-forward sublayer.
            let g2 = g.param(&block.ln2.gamma);
            let b2 = g.param(&block.ln2.beta);
            let h2 = g.layer_norm(x, g2, b2);
            let ffn_out = match &block.ffn {
                FfnLayer::Dense(ffn) => {
                    let w1 = g.param(&ffn.w1);
                    let bb1 = g.param(&ffn.b1);
                    let w2 = g.param(&ffn.w2);
                    let bb2 = g.param(&ffn.b2);
                    let f = g.matmul(h2, w1);
                    let f = g.add(f, bb1);
                    let f = g.gelu(f);
                    let f = g.matmul(f, w2);
                    g.add(f, bb2)
                }
                FfnLayer::Moe(layer) => {
                    let nodes = moe_layer_forward(
                        g,
                        h2,
                        layer,
                        &format!("block{bi}.moe"),
                        visible_experts,
                        with_aux && self.cfg.aux_coefficient != 0.0,
                    )?;
                    gate_stats.push(nodes.stats);
                    if let Some(a) = nodes.aux {
                        aux_total = Some(match aux_total {
                            Some(t) => g.add(t, a),
                            None => a,
                        });
                    }
                    nodes.output
                }
            };
            x = g.add(x, ffn_out);
        }

        let gf = g.param(&self.final_ln.gamma);
        let bf = g.param(&self.final_ln.beta);
        let hfinal = g.layer_norm(x, gf, bf);
        // Output projection tied to the token embedding.
        let logits = g.matmul_bt(hfinal, tok_node);
        Ok(ForwardNodes {
            logits,
            aux: aux_total,
            gate_stats,
        })
    }

    /// Untaped convenience forward for one sequence: per-position vocab
    /// logits, row-major `[seq, vocab]`.
    pub fn lm_forward(&self, tokens: &[u32]) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, tokens, 1, tokens.len(), None, false)?;
        Ok(g.values(nodes.logits).to_vec())
    }

    /// Like `lm_forward` but routing only among the first `k` experts.
    pub fn lm_forward_restricted(&self, tokens: &[u32], visible_experts: usize) -> Result<Vec<F>> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, tokens, 1, tokens.len(), Some(visible_experts), false)?;
        Ok(g.values(nodes.logits).to_vec())
    }

    pub fn total_params(&self) -> usize {
        self.value_count()
    }
}

/// Parameter-count breakdown; `per_token_expert_activated` is the per-MoE-
/// layer count of expert parameters a single token activates (two experts),
/// which the expansion schedule never changes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivatedParams {
    pub per_token_expert_activated: usize,
    pub dense: usize,
    pub attention: usize,
    pub gating: usize,
    pub embedding: usize,
}

pub fn count_activated_params<F: Scalar>(model: &TransformerLM<F>) -> ActivatedParams {
    let m = model.cfg.model_dim;
    let h = model.cfg.ffn_hidden;
    let expert_params = 2 * m * h + h + m;
    let per_token_expert_activated = 2 * expert_params;

    let mut dense = 0;
    let mut attention = 0;
    let mut gating = 0;
    model.for_each_param(&mut |p| {
        let name = &p.name;
        if name.contains(".attn.") {
            attention += p.tensor.numel();
        } else if name.contains(".moe.gate.") {
            gating += p.tensor.numel();
        } else if name.contains(".ffn") || name.contains(".ln") || name.starts_with("final_ln") {
            dense += p.tensor.numel();
        }
    });
    let embedding = model.tok_embed.tensor.numel() + model.pos_embed.tensor.numel();
    ActivatedParams {
        per_token_expert_activated,
        dense,
        attention,
        gating,
        embedding,
    }
}

impl<F: Scalar> ParamStore<F> for TransformerLM<F> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<F>)) {
        f(&self.tok_embed);
        f(&self.pos_embed);
        for block in &self.blocks {
            f(&block.ln1.gamma);
            f(&block.ln1.beta);
            f(&block.attn.wq);
            f(&block.attn.bq);
            f(&block.attn.wk);
            f(&block.attn.bk);
            f(&block.attn.wv);
            f(&block.attn.bv);
            f(&block.attn.wo);
            f(&block.attn.bo);
            f(&block.ln2.gamma);
            f(&block.ln2.beta);
            match &block.ffn {
                FfnLayer::Dense(d) => {
                    f(&d.w1);
                    f(&d.b1);
                    f(&d.w2);
                    f(&d.b2);
                }
                FfnLayer::Moe(l) => {
                    for e in l.experts() {
                        f(&e.w1);
                        f(&e.b1);
                        f(&e.w2);
                        f(&e.b2);
                    }
                    for r in l.gate_rows() {
                        f(r);
                    }
                }
            }
        }
        f(&self.final_ln.gamma);
        f(&self.final_ln.beta);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<F>)) {
        f(&mut self.tok_embed);
        f(&mut self.pos_embed);
        for block in &mut self.blocks {
            f(&mut block.ln1.gamma);
            f(&mut block.ln1.beta);
            f(&mut block.attn.wq);
            f(&mut block.attn.bq);
            f(&mut block.attn.wk);
            f(&mut block.attn.bk);
            f(&mut block.attn.wv);
            f(&mut block.attn.bv);
            f(&mut block.attn.wo);
            f(&mut block.attn.bo);
            f(&mut block.ln2.gamma);
            f(&mut block.ln2.beta);
            match &mut block.ffn {
                FfnLayer::Dense(d) => {
                    f(&mut d.w1);
                    f(&mut d.b1);
                    f(&mut d.w2);
                    f(&mut d.b2);
                }
                FfnLayer::Moe(l) => {
                    let (experts, rows) = l.experts_and_rows_mut();
                    for e in experts {
                        f(&mut e.w1);
                        f(&mut e.b1);
                        f(&mut e.w2);
                        f(&mut e.b2);
                    }
                    for r in rows {
                        f(r);
                    }
                }
            }
        }
        f(&mut self.final_ln.gamma);
        f(&mut self.final_ln.beta);
    }
}

/// Builds freshly initialized parameters; init is a pure function of
/// `(seed, parameter name)`, so construction order cannot change it.
pub struct ParamBuilder {
    pub next_id: u64,
    pub init_seed: u64,
    pub origin_phase: usize,
}

impl ParamBuilder {
    fn id(&mut self) -> ParamId {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn normal<F: Scalar>(&mut self, name: &str, shape: Vec<usize>) -> Parameter<F> {
        let values = init_normal(self.init_seed, name, shape.iter().product(), 0.02);
        Parameter::new(self.id(), name, Tensor::new(shape, values), self.origin_phase)
    }

    pub fn zeros<F: Scalar>(&mut self, name: &str, shape: Vec<usize>) -> Parameter<F> {
        Parameter::new(self.id(), name, Tensor::zeros(shape), self.origin_phase)
    }

    pub fn ones<F: Scalar>(&mut self, name: &str, shape: Vec<usize>) -> Parameter<F> {
        let n = shape.iter().product();
        Parameter::new(
            self.id(),
            name,
            Tensor::new(shape, vec![F::one(); n]),
            self.origin_phase,
        )
    }

    pub fn layer_norm<F: Scalar>(&mut self, prefix: &str, dim: usize) -> LayerNormParams<F> {
        LayerNormParams {
            gamma: self.ones(&format!("{prefix}.gamma"), vec![dim]),
            beta: self.zeros(&format!("{prefix}.beta"), vec![dim]),
        }
    }

    pub fn expert<F: Scalar>(&mut self, prefix: &str, m: usize, h: usize) -> FeedForwardExpert<F> {
        FeedForwardExpert {
            w1: self.normal(&format!("{prefix}.w1"), vec![m, h]),
            b1: self.zeros(&format!("{prefix}.b1"), vec![h]),
            w2: self.normal(&format!("{prefix}.w2"), vec![h, m]),
            b2: self.zeros(&format!("{prefix}.b2"), vec![m]),
        }
    }
}

pub fn init_normal<F: Scalar>(init_seed: u64, name: &str, n: usize, std: f64) -> Vec<F> {
    use rand_distr::{Distribution, Normal};
    let mut rng = seeds::rng_for(&[init_seed, seeds::stream::INIT, seeds::hash_str(name)]);
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| F::from_f64(dist.sample(&mut rng))).collect()
}

#[cfg(test)]
mod tests;
