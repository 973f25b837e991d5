use std::ops::Range;

use crate::error::{Error, Result};

/// Q, K and V for one layer, each `tokens x heads x head_dim`, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerQkv {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Per-layer attention projections for a run of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvTensors {
    heads: usize,
    head_dim: usize,
    token_count: usize,
    pub layers: Vec<LayerQkv>,
}

impl QkvTensors {
    pub fn empty(layers: usize, heads: usize, head_dim: usize) -> Self {
        QkvTensors {
            heads,
            head_dim,
            token_count: 0,
            layers: vec![LayerQkv::default(); layers],
        }
    }

    /// Wraps raw per-layer buffers; every buffer must hold `token_count * heads * head_dim` values.
    pub fn from_layers(heads: usize, head_dim: usize, token_count: usize, layers: Vec<LayerQkv>) -> Result<Self> {
        let want = token_count * heads * head_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.q.len() != want || l.k.len() != want || l.v.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} buffers do not hold {token_count} tokens of width {}",
                    heads * head_dim
                )));
            }
        }
        Ok(QkvTensors {
            heads,
            head_dim,
            token_count,
            layers,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn same_shape(&self, other: &QkvTensors) -> bool {
        self.heads == other.heads && self.head_dim == other.head_dim && self.layers.len() == other.layers.len()
    }

    /// Copies the tokens in `range` (sequence dimension) from every layer.
    pub fn slice(&self, range: Range<usize>) -> QkvTensors {
        assert!(range.end <= self.token_count, "slice past end of tensors");
        let w = self.width();
        let r = range.start * w..range.end * w;
        QkvTensors {
            heads: self.heads,
            head_dim: self.head_dim,
            token_count: range.len(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerQkv {
                    q: l.q[r.clone()].to_vec(),
                    k: l.k[r.clone()].to_vec(),
                    v: l.v[r.clone()].to_vec(),
                })
                .collect(),
        }
    }

    /// Concatenates `other` after `self` along the sequence dimension.
    pub fn append(&mut self, other: &QkvTensors) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "cannot append {}x{}x{} tensors to {}x{}x{}",
                other.layers.len(),
                other.heads,
                other.head_dim,
                self.layers.len(),
                self.heads,
                self.head_dim
            )));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.q.extend_from_slice(&b.q);
            a.k.extend_from_slice(&b.k);
            a.v.extend_from_slice(&b.v);
        }
        self.token_count += other.token_count;
        Ok(())
    }

    pub fn truncate(&mut self, tokens: usize) {
        let tokens = tokens.min(self.token_count);
        let n = tokens * self.width();
        for l in &mut self.layers {
            l.q.truncate(n);
            l.k.truncate(n);
            l.v.truncate(n);
        }
        self.token_count = tokens;
    }

    /// Equality on the raw bit patterns (distinguishes -0.0 and NaN payloads).
    pub fn bitwise_eq(&self, other: &QkvTensors) -> bool {
        fn bits(a: &[f32], b: &[f32]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.same_shape(other)
            && self.token_count == other.token_count
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| bits(&a.q, &b.q) && bits(&a.k, &b.k) && bits(&a.v, &b.v))
    }
}

/// Cached projections for the first `prefix_token_count` tokens of a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvPrefix {
    tensors: QkvTensors,
}

impl QkvPrefix {
    pub fn new(tensors: QkvTensors) -> Self {
        QkvPrefix { tensors }
    }

    pub fn empty(layers: usize, heads: usize, head_dim: usize) -> Self {
        QkvPrefix {
            tensors: QkvTensors::empty(layers, heads, head_dim),
        }
    }

    pub fn prefix_token_count(&self) -> usize {
        self.tensors.token_count()
    }

    pub fn tensors(&self) -> &QkvTensors {
        &self.tensors
    }

    pub fn into_tensors(self) -> QkvTensors {
        self.tensors
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.token_count() == 0
    }
}
