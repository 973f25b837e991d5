//! A small deterministic transformer: pre-norm blocks, one linear map per Q/K/V,
//! rotary position embedding on Q and K, causal attention, ReLU MLP and tied
//! output embeddings.
//!
//! All arithmetic is `f32` with sequential accumulation so that reusing cached
//! projections reproduces a full recomputation bit for bit. Every multiply-add
//! in a dot product is counted; `cost::prefill_macs` and `cost::decode_macs`
//! give the same numbers in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::qkv::{LayerQkv, QkvPrefix, QkvTensors};
use super::ModelDims;
use crate::error::{Error, Result};
use crate::text::TokenId;

const ROPE_BASE: f64 = 10_000.0;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Hidden width of the MLP.
    pub fn ffn_dim(&self) -> usize {
        2 * self.model_dim()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            vocab_size: self.vocab_size,
            ffn_dim: self.ffn_dim(),
        }
    }
}

struct Block {
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
}

/// Attention state after a prefill, ready for greedy decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    /// Final-norm output at the last position.
    pub final_hidden: Vec<f32>,
    /// Number of positions already processed.
    pub position: usize,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    /// Projections computed for the non-prefix suffix only.
    pub suffix: QkvTensors,
    pub state: DecodeState,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Emitted tokens, including a terminating end token if one was produced.
    pub tokens: Vec<TokenId>,
    pub macs: u64,
}

pub struct ToyTransformer {
    cfg: ToyModelConfig,
    embed: Vec<f32>,
    blocks: Vec<Block>,
    inv_freq: Vec<f64>,
}

fn dot(a: &[f32], b: &[f32], macs: &mut u64) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    *macs += a.len() as u64;
    acc
}

/// `out[o] = w[o, :] . x` for a row-major `(out.len(), x.len())` matrix.
fn matvec(w: &[f32], x: &[f32], out: &mut [f32], macs: &mut u64) {
    let n = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = dot(&w[o * n..(o + 1) * n], x, macs);
    }
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let scale = 1.0 / (ss / x.len() as f32 + NORM_EPS).sqrt();
    x.iter().map(|v| v * scale).collect()
}

impl ToyTransformer {
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        if cfg.layers == 0 || cfg.heads == 0 || cfg.head_dim == 0 || cfg.vocab_size == 0 {
            return Err(Error::ShapeMismatch("toy model dimensions must all be >= 1".into()));
        }
        let d = cfg.model_dim();
        let f = cfg.ffn_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = |n: usize, fan_in: usize| -> Vec<f32> {
            let scale = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect()
        };
        // Small embeddings keep the output from echoing the last input token.
        let embed = init(cfg.vocab_size * d, d * d);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                wq: init(d * d, d),
                wk: init(d * d, d),
                wv: init(d * d, d),
                wo: init(d * d, d),
                w1: init(f * d, d),
                w2: init(d * f, f),
            })
            .collect();
        let half = cfg.head_dim / 2;
        let inv_freq = (0..half)
            .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / cfg.head_dim as f64))
            .collect();
        Ok(ToyTransformer {
            cfg,
            embed,
            blocks,
            inv_freq,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    /// Rotates each head of `x` in place for absolute position `pos`.
    fn rope(&self, x: &mut [f32], pos: usize) {
        let hd = self.cfg.head_dim;
        for head in x.chunks_mut(hd) {
            for (i, &f) in self.inv_freq.iter().enumerate() {
                let angle = pos as f64 * f;
                let (s, c) = (angle.sin() as f32, angle.cos() as f32);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    fn embed_row(&self, token: TokenId) -> Result<&[f32]> {
        let d = self.cfg.model_dim();
        let t = token as usize;
        if t >= self.cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(&self.embed[t * d..(t + 1) * d])
    }

    /// Projects one normalized position and applies rotary embedding at `pos`.
    fn project(&self, block: &Block, x: &[f32], pos: usize, macs: &mut u64) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let d = self.cfg.model_dim();
        let n = rms_norm(x);
        let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        matvec(&block.wq, &n, &mut q, macs);
        matvec(&block.wk, &n, &mut k, macs);
        matvec(&block.wv, &n, &mut v, macs);
        self.rope(&mut q, pos);
        self.rope(&mut k, pos);
        (q, k, v)
    }

    /// Causal attention output for query row `q` at position `t`.
    fn attend(&self, q: &[f32], keys: &[f32], values: &[f32], t: usize, macs: &mut u64) -> Vec<f32> {
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim);
        let d = heads * hd;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = vec![0.0f32; d];
        let mut scores = vec![0.0f32; t + 1];
        for h in 0..heads {
            let qh = &q[h * hd..(h + 1) * hd];
            let mut max = f32::NEG_INFINITY;
            for (s, slot) in scores.iter_mut().enumerate() {
                let kh = &keys[s * d + h * hd..s * d + (h + 1) * hd];
                *slot = dot(qh, kh, macs) * scale;
                max = max.max(*slot);
            }
            let mut sum = 0.0f32;
            for slot in scores.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            let oh = &mut out[h * hd..(h + 1) * hd];
            for (s, &w) in scores.iter().enumerate() {
                let p = w / sum;
                let vh = &values[s * d + h * hd..s * d + (h + 1) * hd];
                for i in 0..hd {
                    oh[i] += p * vh[i];
                }
                *macs += hd as u64;
            }
        }
        out
    }

    /// Output projection, residual and MLP for one position.
    fn finish_position(&self, block: &Block, x: &mut [f32], attn: &[f32], macs: &mut u64) {
        let d = self.cfg.model_dim();
        let mut o = vec![0.0; d];
        matvec(&block.wo, attn, &mut o, macs);
        for i in 0..d {
            x[i] += o[i];
        }
        let n = rms_norm(x);
        let mut hidden = vec![0.0; self.cfg.ffn_dim()];
        matvec(&block.w1, &n, &mut hidden, macs);
        for h in &mut hidden {
            *h = h.max(0.0);
        }
        let mut back = vec![0.0; d];
        matvec(&block.w2, &hidden, &mut back, macs);
        for i in 0..d {
            x[i] += back[i];
        }
    }

    /// Runs the prompt, reusing `prefix` projections for its first tokens.
    ///
    /// Only the suffix is projected (rotary positions offset by the prefix length);
    /// attention and the rest of each block run over the full sequence.
    pub fn prefill(&self, tokens: &[TokenId], prefix: Option<&QkvPrefix>) -> Result<PrefillOutput> {
        let total = tokens.len();
        if total == 0 {
            return Err(Error::EmptyPrompt);
        }
        let (layers, d) = (self.cfg.layers, self.cfg.model_dim());
        let cached = match prefix {
            Some(p) => {
                let t = p.tensors();
                if t.layer_count() != layers || t.heads() != self.cfg.heads || t.head_dim() != self.cfg.head_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "prefix is {}x{}x{}, model is {}x{}x{}",
                        t.layer_count(),
                        t.heads(),
                        t.head_dim(),
                        layers,
                        self.cfg.heads,
                        self.cfg.head_dim
                    )));
                }
                Some(t)
            }
            None => None,
        };
        let pre = cached.map_or(0, QkvTensors::token_count);
        if pre > total {
            return Err(Error::PrefixTooLong { prefix: pre, total });
        }

        let mut macs = 0u64;
        let mut x = Vec::with_capacity(total * d);
        for &t in tokens {
            x.extend_from_slice(self.embed_row(t)?);
        }

        let mut suffix_layers = Vec::with_capacity(layers);
        let mut keys_out = Vec::with_capacity(layers);
        let mut values_out = Vec::with_capacity(layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let (mut q, mut k, mut v) = match cached {
                Some(c) => (c.layers[l].q.clone(), c.layers[l].k.clone(), c.layers[l].v.clone()),
                None => (Vec::new(), Vec::new(), Vec::new()),
            };
            q.reserve((total - pre) * d);
            k.reserve((total - pre) * d);
            v.reserve((total - pre) * d);
            for pos in pre..total {
                let (qt, kt, vt) = self.project(block, &x[pos * d..(pos + 1) * d], pos, &mut macs);
                q.extend_from_slice(&qt);
                k.extend_from_slice(&kt);
                v.extend_from_slice(&vt);
            }
            suffix_layers.push(LayerQkv {
                q: q[pre * d..].to_vec(),
                k: k[pre * d..].to_vec(),
                v: v[pre * d..].to_vec(),
            });

            let attn: Vec<Vec<f32>> = (0..total)
                .map(|t| self.attend(&q[t * d..(t + 1) * d], &k, &v, t, &mut macs))
                .collect();
            for (t, a) in attn.iter().enumerate() {
                self.finish_position(block, &mut x[t * d..(t + 1) * d], a, &mut macs);
            }
            keys_out.push(k);
            values_out.push(v);
        }

        let final_hidden = rms_norm(&x[(total - 1) * d..]);
        Ok(PrefillOutput {
            suffix: QkvTensors::from_layers(self.cfg.heads, self.cfg.head_dim, total - pre, suffix_layers)?,
            state: DecodeState {
                keys: keys_out,
                values: values_out,
                final_hidden,
                position: total,
            },
            macs,
        })
    }

    fn logits_argmax(&self, hidden: &[f32], allowed: Option<&[bool]>, macs: &mut u64) -> TokenId {
        let d = self.cfg.model_dim();
        let mut best = (f32::NEG_INFINITY, 0usize);
        let mut first = true;
        for v in 0..self.cfg.vocab_size {
            let score = dot(&self.embed[v * d..(v + 1) * d], hidden, macs);
            if allowed.is_some_and(|m| !m.get(v).copied().unwrap_or(false)) {
                continue;
            }
            if first || score > best.0 {
                best = (score, v);
                first = false;
            }
        }
        best.1 as TokenId
    }

    fn step(&self, state: &mut DecodeState, token: TokenId, macs: &mut u64) -> Result<()> {
        let d = self.cfg.model_dim();
        let pos = state.position;
        let mut x = self.embed_row(token)?.to_vec();
        for (l, block) in self.blocks.iter().enumerate() {
            let (q, k, v) = self.project(block, &x, pos, macs);
            state.keys[l].extend_from_slice(&k);
            state.values[l].extend_from_slice(&v);
            let a = self.attend(&q, &state.keys[l], &state.values[l], pos, macs);
            self.finish_position(block, &mut x[..d], &a, macs);
        }
        state.final_hidden = rms_norm(&x);
        state.position += 1;
        Ok(())
    }

    /// Greedy argmax decoding; stops after `end_token` or `max_tokens` tokens.
    pub fn decode(
        &self,
        state: &DecodeState,
        max_tokens: usize,
        end_token: TokenId,
        allowed: Option<&[bool]>,
    ) -> Result<DecodeOutput> {
        let mut state = state.clone();
        let mut macs = 0u64;
        let mut tokens = Vec::new();
        while tokens.len() < max_tokens {
            let t = self.logits_argmax(&state.final_hidden, allowed, &mut macs);
            tokens.push(t);
            if t == end_token || tokens.len() == max_tokens {
                break;
            }
            self.step(&mut state, t, &mut macs)?;
        }
        Ok(DecodeOutput { tokens, macs })
    }
}
