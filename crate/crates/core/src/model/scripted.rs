use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{Decoded, DecodeState, LlmBackend, ModelDims, PrefillOutput, PromptRequest, QkvPrefix, ToyBackend};
use crate::error::{Error, Result};
use crate::text::TokenSeq;

/// First 16 hex chars of SHA-256 over `name=value\n` for each slot in order.
pub fn slot_digest(slots: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (name, value) in slots {
        h.update(name.as_bytes());
        h.update(b"=");
        h.update(value.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ScriptEntry {
    pub template: String,
    #[serde(default)]
    pub digest: Option<String>,
    /// Matches when the rendered prompt contains this substring.
    #[serde(default)]
    pub contains: Option<String>,
    pub response: String,
}

impl ScriptEntry {
    fn matches(&self, req: &PromptRequest, digest: &str) -> bool {
        self.template == req.template
            && self.digest.as_deref().is_none_or(|d| d == digest)
            && self.contains.as_deref().is_none_or(|c| req.text.contains(c))
    }
}

/// Response table: digest-pinned entries are tried before the rest, each group in file order.
#[derive(Debug, Default)]
pub struct Script {
    entries: Vec<ScriptEntry>,
    misses: AtomicU64,
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Script {
            entries,
            misses: AtomicU64::new(0),
        }
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Script::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Script::parse(&text, &path.display().to_string())
    }

    pub fn lookup(&self, req: &PromptRequest) -> Option<&str> {
        let digest = slot_digest(&req.slots);
        let pinned = self.entries.iter().filter(|e| e.digest.is_some());
        let open = self.entries.iter().filter(|e| e.digest.is_none());
        let hit = pinned.chain(open).find(|e| e.matches(req, &digest));
        if hit.is_none() {
            self.misses.fetch_add(1, Ordering::Relaxed);
            log::warn!("no scripted response for template {} (digest {digest})", req.template);
        }
        hit.map(|e| e.response.as_str())
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Scripted response, or `fallback` on a miss.
pub fn scripted_generate(req: &PromptRequest, script: &Script, fallback: &str) -> String {
    script.lookup(req).unwrap_or(fallback).to_string()
}

/// Toy model for prefill and decode, scripted table for templated completions.
pub struct ScriptedBackend {
    inner: ToyBackend,
    script: Script,
}

impl ScriptedBackend {
    pub fn new(inner: ToyBackend, script: Script) -> Self {
        ScriptedBackend { inner, script }
    }

    pub fn script(&self) -> &Script {
        &self.script
    }
}

impl LlmBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn dims(&self) -> ModelDims {
        self.inner.dims()
    }

    fn prefill(&self, tokens: &TokenSeq, prefix: Option<&QkvPrefix>) -> Result<PrefillOutput> {
        self.inner.prefill(tokens, prefix)
    }

    fn decode(&self, state: &DecodeState, max_tokens: usize) -> Result<Decoded> {
        self.inner.decode(state, max_tokens)
    }

    fn complete(&self, request: &PromptRequest) -> Option<String> {
        self.script.lookup(request).map(str::to_string)
    }
}
