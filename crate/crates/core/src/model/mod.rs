//! Language-model backends: the toy transformer, a scripted variant for prompt
//! driven calls, and the cost model.

pub mod cost;
mod qkv;
mod scripted;
mod toy;

use std::sync::Arc;

pub use cost::{decode_macs, prefill_macs, projection_macs, CostModel, CostReport, FixedCosts, InferenceDescriptor};
pub use qkv::{LayerQkv, QkvPrefix, QkvTensors};
pub use scripted::{scripted_generate, slot_digest, Script, ScriptEntry, ScriptedBackend};
pub use toy::{DecodeOutput, DecodeState, PrefillOutput, ToyModelConfig, ToyTransformer};

use crate::error::Result;
use crate::text::{TokenId, TokenSeq, Tokenizer};

/// Token id that ends generation (the NUL byte).
pub const END_TOKEN: TokenId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub ffn_dim: usize,
}

impl ModelDims {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub macs: u64,
}

/// A filled prompt template sent to the backend outside the serving path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRequest {
    /// Template name, e.g. `knowledge`, `history` or `summarize`.
    pub template: String,
    /// Slot values in template order.
    pub slots: Vec<(String, String)>,
    /// The fully rendered prompt.
    pub text: String,
}

pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> ModelDims;

    fn prefill(&self, tokens: &TokenSeq, prefix: Option<&QkvPrefix>) -> Result<PrefillOutput>;

    fn decode(&self, state: &DecodeState, max_tokens: usize) -> Result<Decoded>;

    /// Free-form completion of a templated prompt; `None` when the backend has no answer.
    fn complete(&self, request: &PromptRequest) -> Option<String>;
}

/// Greedy decoding restricted to the end token, printable ASCII and multi-byte pieces.
pub struct ToyBackend {
    model: ToyTransformer,
    tokenizer: Arc<Tokenizer>,
    allowed: Vec<bool>,
    completion_tokens: usize,
}

impl ToyBackend {
    pub fn new(cfg: ToyModelConfig, tokenizer: Arc<Tokenizer>, completion_tokens: usize) -> Result<Self> {
        let vocab = tokenizer.vocab();
        let cfg = ToyModelConfig {
            vocab_size: vocab.len(),
            ..cfg
        };
        let allowed = (0..vocab.len())
            .map(|id| {
                let bytes = vocab.token_bytes(id as TokenId);
                id as TokenId == END_TOKEN || bytes.len() > 1 || (0x20..0x7f).contains(&bytes[0])
            })
            .collect();
        Ok(ToyBackend {
            model: ToyTransformer::new(cfg)?,
            tokenizer,
            allowed,
            completion_tokens,
        })
    }

    pub fn model(&self) -> &ToyTransformer {
        &self.model
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }
}

impl LlmBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn dims(&self) -> ModelDims {
        self.model.config().dims()
    }

    fn prefill(&self, tokens: &TokenSeq, prefix: Option<&QkvPrefix>) -> Result<PrefillOutput> {
        self.model.prefill(&tokens.tokens, prefix)
    }

    fn decode(&self, state: &DecodeState, max_tokens: usize) -> Result<Decoded> {
        let out = self.model.decode(state, max_tokens.max(1), END_TOKEN, Some(&self.allowed))?;
        let body = match out.tokens.last() {
            Some(&END_TOKEN) => &out.tokens[..out.tokens.len() - 1],
            _ => &out.tokens[..],
        };
        Ok(Decoded {
            text: self.tokenizer.detokenize(body),
            tokens: out.tokens,
            macs: out.macs,
        })
    }

    fn complete(&self, request: &PromptRequest) -> Option<String> {
        let tokens = self.tokenizer.tokenize(&request.text);
        let pre = self.prefill(&tokens, None).ok()?;
        self.decode(&pre.state, self.completion_tokens).ok().map(|d| d.text)
    }
}
