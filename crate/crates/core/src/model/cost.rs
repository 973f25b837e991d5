//! Closed-form multiply-add counts for the toy transformer and the latency model
//! built on top of them.

use serde::{Deserialize, Serialize};

use super::ModelDims;

/// Multiply-adds spent on the Q/K/V projections of the uncached suffix.
pub fn projection_macs(dims: &ModelDims, l_total: usize, l_pre: usize) -> u64 {
    let d = dims.model_dim() as u64;
    dims.layers as u64 * 3 * d * d * l_total.saturating_sub(l_pre) as u64
}

/// Multiply-adds of a prefill over `l_total` tokens reusing `l_pre` cached ones.
///
/// Projection scales with the suffix, attention with `L(L+1)` and the output
/// projection and MLP with the full length.
pub fn prefill_macs(dims: &ModelDims, l_total: usize, l_pre: usize) -> u64 {
    let d = dims.model_dim() as u64;
    let f = dims.ffn_dim as u64;
    let l = l_total as u64;
    let per_layer_rest = d * l * (l + 1) + d * d * l + 2 * d * f * l;
    projection_macs(dims, l_total, l_pre) + dims.layers as u64 * per_layer_rest
}

/// Multiply-adds of greedy decoding `n` tokens after a prompt of `l_total` tokens.
///
/// Each emitted token costs one logit projection; every token but the last is
/// also fed back through the model.
pub fn decode_macs(dims: &ModelDims, l_total: usize, n: usize) -> u64 {
    if n == 0 {
        return 0;
    }
    let d = dims.model_dim() as u64;
    let f = dims.ffn_dim as u64;
    let logits = n as u64 * dims.vocab_size as u64 * d;
    let mut steps = 0u64;
    for j in 0..n as u64 - 1 {
        let ctx = l_total as u64 + j + 1;
        steps += 3 * d * d + 2 * d * ctx + d * d + 2 * d * f;
    }
    logits + dims.layers as u64 * steps
}

/// Fixed per-item costs in model milliseconds, before scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedCosts {
    pub question_match_ms: f64,
    pub retrieval_ms: f64,
    pub qkv_match_ms: f64,
    pub qkv_load_ms: f64,
}

impl Default for FixedCosts {
    fn default() -> Self {
        FixedCosts {
            question_match_ms: 1610.0,
            retrieval_ms: 3940.0,
            qkv_match_ms: 15.0,
            qkv_load_ms: 1030.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub flops_per_ms: f64,
    pub scale: f64,
    pub fixed: FixedCosts,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            flops_per_ms: 1.0e6,
            scale: 1.0,
            fixed: FixedCosts::default(),
        }
    }
}

/// What happened during one inference, as far as cost is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferenceDescriptor {
    pub l_total: usize,
    pub l_pre: usize,
    pub decode_tokens: usize,
    /// The query was embedded and compared against the QA bank.
    pub question_match: bool,
    /// Retrieval and tree matching ran.
    pub retrieval: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub prefill_flops: f64,
    pub decode_flops: f64,
    pub prefill_ms: f64,
    pub decode_ms: f64,
    pub match_ms: f64,
    pub load_ms: f64,
    pub embed_ms: f64,
}

impl CostReport {
    pub fn total_flops(&self) -> f64 {
        self.prefill_flops + self.decode_flops
    }

    pub fn total_ms(&self) -> f64 {
        self.prefill_ms + self.decode_ms + self.match_ms + self.load_ms + self.embed_ms
    }

    pub fn add(&mut self, other: &CostReport) {
        self.prefill_flops += other.prefill_flops;
        self.decode_flops += other.decode_flops;
        self.prefill_ms += other.prefill_ms;
        self.decode_ms += other.decode_ms;
        self.match_ms += other.match_ms;
        self.load_ms += other.load_ms;
        self.embed_ms += other.embed_ms;
    }
}

impl CostModel {
    pub fn flops_ms(&self, flops: f64) -> f64 {
        flops / self.flops_per_ms * self.scale
    }

    pub fn estimate(&self, dims: &ModelDims, ev: &InferenceDescriptor) -> CostReport {
        let mut r = CostReport::default();
        if ev.question_match {
            r.embed_ms = self.fixed.question_match_ms * self.scale;
        }
        if ev.retrieval {
            r.match_ms = (self.fixed.retrieval_ms + self.fixed.qkv_match_ms) * self.scale;
        }
        if ev.l_total > 0 {
            r.prefill_flops = 2.0 * prefill_macs(dims, ev.l_total, ev.l_pre) as f64;
            r.prefill_ms = self.flops_ms(r.prefill_flops);
            if ev.l_pre > 0 {
                r.load_ms = self.fixed.qkv_load_ms * self.scale;
            }
        }
        r.decode_flops = 2.0 * decode_macs(dims, ev.l_total, ev.decode_tokens) as f64;
        r.decode_ms = self.flops_ms(r.decode_flops);
        r
    }
}
