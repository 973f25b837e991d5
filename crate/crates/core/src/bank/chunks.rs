use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::text::{Embedder, Embedding, Tokenizer};

/// Stable chunk identifier: 16 hex chars of the SHA-256 of the text, plus `-n` on collision.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(String);

impl ChunkId {
    pub fn new(s: impl Into<String>) -> Self {
        ChunkId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn content_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Id the store would assign to `text` absent collisions.
pub fn base_chunk_id(text: &str) -> ChunkId {
    ChunkId(hex::encode(content_hash(text))[..16].to_string())
}

#[derive(Debug, Clone)]
pub struct KnowledgeChunk {
    pub chunk_id: ChunkId,
    pub text: String,
    pub embedding: Embedding,
    pub token_count: usize,
}

/// Splits `text` into segments of at most `words` whitespace-separated words.
pub fn chunk_words(text: &str, words: usize) -> Vec<String> {
    let words = words.max(1);
    let all: Vec<&str> = text.split_whitespace().collect();
    all.chunks(words).map(|c| c.join(" ")).collect()
}

#[derive(Serialize, Deserialize)]
struct ChunkLine {
    chunk_id: ChunkId,
    text: String,
    token_count: usize,
}

/// Knowledge chunks in insertion order.
#[derive(Debug, Default, Clone)]
pub struct ChunkStore {
    order: Vec<ChunkId>,
    chunks: HashMap<ChunkId, KnowledgeChunk>,
    by_text: HashMap<String, ChunkId>,
}

impl ChunkStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a chunk unless its exact text is already stored. Returns the id and
    /// whether it was new.
    pub fn insert(&mut self, text: &str, tokenizer: &Tokenizer, embedder: &dyn Embedder) -> (ChunkId, bool) {
        if let Some(id) = self.by_text.get(text) {
            return (id.clone(), false);
        }
        let base = base_chunk_id(text);
        let mut id = base.clone();
        let mut n = 1;
        while self.chunks.contains_key(&id) {
            id = ChunkId(format!("{base}-{n}"));
            n += 1;
        }
        self.insert_with_id(id.clone(), text, tokenizer, embedder);
        (id, true)
    }

    fn insert_with_id(&mut self, id: ChunkId, text: &str, tokenizer: &Tokenizer, embedder: &dyn Embedder) {
        let chunk = KnowledgeChunk {
            chunk_id: id.clone(),
            text: text.to_string(),
            embedding: embedder.embed(text),
            token_count: tokenizer.tokenize(text).len(),
        };
        self.order.push(id.clone());
        self.by_text.insert(text.to_string(), id.clone());
        self.chunks.insert(id, chunk);
    }

    pub fn get(&self, id: &ChunkId) -> Option<&KnowledgeChunk> {
        self.chunks.get(id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeChunk> {
        self.order.iter().map(|id| &self.chunks[id])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for c in self.iter() {
            let line = ChunkLine {
                chunk_id: c.chunk_id.clone(),
                text: c.text.clone(),
                token_count: c.token_count,
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(path, e))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Reloads a chunk store; embeddings and token counts are recomputed.
    pub fn load(path: &Path, tokenizer: &Tokenizer, embedder: &dyn Embedder) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut store = ChunkStore::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ChunkLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            store.insert_with_id(row.chunk_id, &row.text, tokenizer, embedder);
        }
        Ok(store)
    }
}
