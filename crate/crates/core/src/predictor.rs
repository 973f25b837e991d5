//! Query prediction from a running knowledge abstract and from recent user queries.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::Serialize;

use crate::bank::ChunkId;
use crate::error::{Error, Result};
use crate::model::{LlmBackend, PromptRequest};

const SUMMARIZE: &str = include_str!("../assets/templates/summarize.txt");
const KNOWLEDGE: &str = include_str!("../assets/templates/knowledge.txt");
const HISTORY: &str = include_str!("../assets/templates/history.txt");

/// Prompt text with `{name}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(name: &str, text: &str) -> Self {
        PromptTemplate {
            name: name.to_string(),
            text: text.to_string(),
        }
    }

    pub fn load(name: &str, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(name, &text))
    }

    pub fn render(&self, slots: &[(&str, String)]) -> PromptRequest {
        let mut text = self.text.clone();
        for (name, value) in slots {
            text = text.replace(&format!("{{{name}}}"), value);
        }
        PromptRequest {
            template: self.name.clone(),
            slots: slots.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub summarize: PromptTemplate,
    pub knowledge: PromptTemplate,
    pub history: PromptTemplate,
}

impl Default for Templates {
    fn default() -> Self {
        Templates {
            summarize: PromptTemplate::new("summarize", SUMMARIZE),
            knowledge: PromptTemplate::new("knowledge", KNOWLEDGE),
            history: PromptTemplate::new("history", HISTORY),
        }
    }
}

impl Templates {
    /// Loads `summarize.txt`, `knowledge.txt` and `history.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Templates {
            summarize: PromptTemplate::load("summarize", &dir.join("summarize.txt"))?,
            knowledge: PromptTemplate::load("knowledge", &dir.join("knowledge.txt"))?,
            history: PromptTemplate::load("history", &dir.join("history.txt"))?,
        })
    }
}

fn strip_marker(item: &str) -> &str {
    let digits = item.len() - item.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    let rest = &item[digits..];
    if digits > 0 && (rest.starts_with('.') || rest.starts_with(')')) {
        rest[1..].trim_start()
    } else {
        item
    }
}

/// Splits a numbered `1. …?; 2. …?` list into at most `stride` questions.
///
/// Items are separated by `;` or newlines; items without a trailing `?` are dropped.
pub fn parse_predictions(response: &str, stride: usize) -> Vec<String> {
    let quotes: &[char] = &['\'', '"', '`'];
    response
        .split([';', '\n'])
        .map(|s| strip_marker(s.trim().trim_matches(quotes).trim()).trim_matches(quotes).trim())
        .filter(|s| s.ends_with('?') && s.len() > 1)
        .map(str::to_string)
        .take(stride)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum View {
    Knowledge,
    History,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionBatch {
    pub queries: Vec<String>,
    pub stride: usize,
    pub view: View,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractSentence {
    pub text: String,
    pub sources: BTreeSet<ChunkId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KnowledgeAbstract {
    pub sentences: Vec<AbstractSentence>,
}

impl KnowledgeAbstract {
    pub fn text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }

    pub fn byte_len(&self) -> usize {
        self.text().len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn source_chunk_ids(&self) -> BTreeSet<ChunkId> {
        self.sentences.iter().flat_map(|s| s.sources.iter().cloned()).collect()
    }

    /// Drops the oldest sentences, then cuts the last one, until `cap` holds.
    fn enforce_cap(&mut self, cap: usize) {
        while self.byte_len() > cap && self.sentences.len() > 1 {
            self.sentences.remove(0);
        }
        if let Some(s) = self.sentences.first_mut() {
            if s.text.len() > cap {
                let mut end = cap;
                while !s.text.is_char_boundary(end) {
                    end -= 1;
                }
                s.text.truncate(end);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    pub stride: usize,
    pub t_batch: u64,
    pub t_quiet: u64,
    pub buffer_size: usize,
    pub abstract_cap: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            stride: 5,
            t_batch: 600,
            t_quiet: 300,
            buffer_size: 20,
            abstract_cap: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PredictorStats {
    pub backend_misses: u64,
    pub parse_failures: u64,
    pub resummaries: u64,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub kb_kind: String,
    templates: Templates,
    summary: KnowledgeAbstract,
    pending: Vec<ChunkId>,
    last_chunk_at: u64,
    knowledge_due: bool,
    buffer: VecDeque<(String, u64)>,
    history_armed: bool,
    last_query_at: u64,
    pub stats: PredictorStats,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, kb_kind: &str, templates: Templates) -> Self {
        Predictor {
            cfg,
            kb_kind: kb_kind.to_string(),
            templates,
            summary: KnowledgeAbstract::default(),
            pending: Vec::new(),
            last_chunk_at: 0,
            knowledge_due: false,
            buffer: VecDeque::new(),
            history_armed: false,
            last_query_at: 0,
            stats: PredictorStats::default(),
        }
    }

    pub fn knowledge_abstract(&self) -> &KnowledgeAbstract {
        &self.summary
    }

    pub fn pending_chunks(&self) -> &[ChunkId] {
        &self.pending
    }

    pub fn buffer(&self) -> impl Iterator<Item = &str> {
        self.buffer.iter().map(|(q, _)| q.as_str())
    }

    /// Queues newly stored chunks for the next abstract update.
    pub fn note_chunks(&mut self, ids: &[ChunkId], now: u64) {
        if ids.is_empty() {
            return;
        }
        for id in ids {
            if !self.pending.contains(id) {
                self.pending.push(id.clone());
            }
        }
        self.last_chunk_at = now;
    }

    /// True once no chunk has arrived for `t_batch`.
    pub fn abstract_due(&self, now: u64) -> bool {
        !self.pending.is_empty() && now.saturating_sub(self.last_chunk_at) >= self.cfg.t_batch
    }

    pub fn knowledge_due(&self) -> bool {
        self.knowledge_due && !self.summary.is_empty()
    }

    fn summarize(&mut self, backend: &dyn LlmBackend, text: String) -> Option<String> {
        let req = self.templates.summarize.render(&[("chunks", text)]);
        match backend.complete(&req) {
            Some(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
            _ => {
                self.stats.backend_misses += 1;
                None
            }
        }
    }

    /// Summarizes the pending chunks into one sentence. `texts` maps the pending
    /// ids to chunk text; on a backend miss the ids stay queued for the next try.
    pub fn update_abstract(&mut self, backend: &dyn LlmBackend, texts: &[(ChunkId, String)]) -> bool {
        let batch: Vec<&(ChunkId, String)> = texts.iter().filter(|(id, _)| self.pending.contains(id)).collect();
        if batch.is_empty() {
            self.pending.clear();
            return false;
        }
        let joined = batch.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" ");
        let Some(sentence) = self.summarize(backend, joined) else {
            return false;
        };
        self.summary.sentences.push(AbstractSentence {
            text: sentence,
            sources: batch.iter().map(|(id, _)| id.clone()).collect(),
        });
        self.pending.clear();
        let cap = self.cfg.abstract_cap;
        if self.summary.byte_len() > cap {
            self.stats.resummaries += 1;
            if let Some(all) = self.summarize(backend, self.summary.text()) {
                self.summary.sentences = vec![AbstractSentence {
                    text: all,
                    sources: self.summary.source_chunk_ids(),
                }];
            }
            self.summary.enforce_cap(cap);
        }
        self.knowledge_due = true;
        true
    }

    fn run(&mut self, backend: &dyn LlmBackend, req: PromptRequest, view: View) -> PredictionBatch {
        let stride = self.cfg.stride;
        let queries = match backend.complete(&req) {
            Some(resp) => {
                let q = parse_predictions(&resp, stride);
                if q.is_empty() {
                    self.stats.parse_failures += 1;
                }
                q
            }
            None => {
                self.stats.backend_misses += 1;
                Vec::new()
            }
        };
        PredictionBatch { queries, stride, view }
    }

    /// Predicts questions about the current abstract.
    pub fn predict_from_knowledge(&mut self, backend: &dyn LlmBackend) -> PredictionBatch {
        self.knowledge_due = false;
        if self.summary.is_empty() {
            return PredictionBatch {
                queries: Vec::new(),
                stride: self.cfg.stride,
                view: View::Knowledge,
            };
        }
        let req = self.templates.knowledge.render(&[
            ("kb_kind", self.kb_kind.clone()),
            ("abstract", self.summary.text()),
            ("stride", self.cfg.stride.to_string()),
        ]);
        self.run(backend, req, View::Knowledge)
    }

    /// Remembers a user query and arms the history trigger.
    pub fn record_query(&mut self, text: &str, now: u64) {
        if self.buffer.len() == self.cfg.buffer_size.max(1) {
            self.buffer.pop_front();
        }
        self.buffer.push_back((text.to_string(), now));
        self.history_armed = true;
        self.last_query_at = now;
    }

    /// True once queries arrived and then none for `t_quiet`.
    pub fn history_due(&self, now: u64) -> bool {
        self.history_armed && !self.buffer.is_empty() && now.saturating_sub(self.last_query_at) >= self.cfg.t_quiet
    }

    /// Predicts follow-up questions in the style of the buffered ones, minus
    /// those for which `known` already holds.
    pub fn predict_from_history(&mut self, backend: &dyn LlmBackend, known: impl Fn(&str) -> bool) -> PredictionBatch {
        self.history_armed = false;
        let history = self.buffer.iter().map(|(q, _)| q.as_str()).collect::<Vec<_>>().join("; ");
        let req = self.templates.history.render(&[
            ("kb_kind", self.kb_kind.clone()),
            ("history", history),
            ("stride", self.cfg.stride.to_string()),
        ]);
        let mut batch = self.run(backend, req, View::History);
        batch.queries.retain(|q| !known(q));
        batch
    }
}
