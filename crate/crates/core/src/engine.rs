//! Query serving, cache population and event dispatch.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bank::{chunk_words, BoundaryPolicy, ChunkId, KnowledgeBank, NodeId, PromptLayout};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{
    decode_macs, prefill_macs, CostModel, CostReport, Decoded, FixedCosts, InferenceDescriptor, LlmBackend, QkvTensors,
};
use crate::predictor::{Predictor, PredictorConfig, Templates, View};
use crate::qa::{EntryId, QaBank};
use crate::registry::{self, BuildContext};
use crate::retrieval::{Bm25Params, Retriever};
use crate::scheduler::{choose_strategy, PopulationStrategy, SchedulerConfig};
use crate::text::{default_vocab, Embedder, Embedding, TokenSeq, Tokenizer, TokenizerVocab};
use crate::trace::{config_value_string, EventKind, EventRecord, TraceEvent};

pub const QA_FILE: &str = "qa.jsonl";

/// Keys that shape the model, the tokenizer or stored data and so cannot change mid-run.
pub const FROZEN_KEYS: &[&str] = &[
    "backend",
    "script",
    "templates",
    "vocab",
    "system_prompt",
    "embedder",
    "slice_store",
    "model_layers",
    "model_heads",
    "model_head_dim",
    "model_seed",
    "embed_seed",
    "embed_dim",
    "bm25_k1",
    "bm25_b",
    "qa_entry_bytes",
    "fallback_response",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPath {
    QaHit,
    QkvPartial(usize),
    ColdMiss,
}

impl QueryPath {
    pub fn label(&self) -> &'static str {
        match self {
            QueryPath::QaHit => "qa_hit",
            QueryPath::QkvPartial(_) => "qkv_partial",
            QueryPath::ColdMiss => "cold_miss",
        }
    }

    pub fn matched_count(&self) -> usize {
        match self {
            QueryPath::QkvPartial(m) => *m,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub answer: String,
    pub path: QueryPath,
    pub cost: CostReport,
    pub best_similarity: f64,
    pub l_pre: usize,
    pub l_total: usize,
    pub decode_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IngestReport {
    /// One id per chunk of the input, repeated text included.
    pub chunk_ids: Vec<ChunkId>,
    pub new_chunks: Vec<ChunkId>,
    pub stale: Vec<EntryId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    Serving,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub queries: u64,
    pub qa_hits: u64,
    /// Model-served queries that reused at least one chunk slice.
    pub qkv_hits: u64,
}

/// A predicted query waiting for population.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPrediction {
    pub query: String,
    pub view: View,
}

/// Retrieval result and tokenized prompt for one query.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub query: String,
    pub embedding: Embedding,
    pub layout: PromptLayout,
    pub tokens: TokenSeq,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub answer: Option<Decoded>,
    /// Tensors for the whole prompt, reused prefix included.
    pub qkv: QkvTensors,
    pub l_pre: usize,
    pub matched_count: usize,
    pub cost: CostReport,
}

/// What a population step wrote.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Populated {
    pub nodes: Vec<NodeId>,
    pub entry: Option<EntryId>,
}

pub struct Engine {
    pub(crate) cfg: Config,
    tokenizer: Arc<Tokenizer>,
    embedder: Box<dyn Embedder>,
    pub(crate) backend: Box<dyn LlmBackend>,
    pub(crate) bank: KnowledgeBank,
    pub(crate) qa: QaBank,
    retriever: Retriever,
    pub(crate) predictor: Predictor,
    pub(crate) cost_model: CostModel,
    phase: Phase,
    last_at: Option<u64>,
    seq: u64,
    pub(crate) deferred: VecDeque<String>,
    pub(crate) population: VecDeque<PendingPrediction>,
    counters: Counters,
    degraded: Vec<NodeId>,
}

fn load_tokenizer(cfg: &Config) -> Result<Arc<Tokenizer>> {
    let vocab = match &cfg.vocab {
        Some(p) => TokenizerVocab::load(p)?,
        None => default_vocab(),
    };
    Ok(Arc::new(Tokenizer::new(vocab)))
}

fn boundary_for(cfg: &Config, tokenizer: &Tokenizer) -> BoundaryPolicy {
    BoundaryPolicy {
        k_boundary: cfg.k_boundary,
        at_system_node: cfg.discard_at_system_node || tokenizer.vocab().spans_byte(b'\n'),
    }
}

fn predictor_config(cfg: &Config) -> PredictorConfig {
    PredictorConfig {
        stride: cfg.prediction_stride,
        t_batch: cfg.t_batch,
        t_quiet: cfg.t_quiet,
        buffer_size: cfg.buffer_size,
        abstract_cap: cfg.abstract_cap_bytes,
    }
}

fn cost_model(cfg: &Config) -> CostModel {
    CostModel {
        flops_per_ms: cfg.flops_per_ms,
        scale: cfg.cost_scale,
        fixed: FixedCosts::default(),
    }
}

fn is_budget_error(e: &Error) -> bool {
    matches!(e, Error::ItemExceedsBudget { .. } | Error::NothingEvictable { .. })
}

impl Engine {
    /// Fresh engine with empty banks.
    pub fn new(cfg: Config) -> Result<Self> {
        Self::build(cfg, None)
    }

    /// Engine over a bank directory written by [`save`](Self::save). A missing
    /// directory gives an empty bank.
    pub fn open(cfg: Config, dir: &Path) -> Result<Self> {
        Self::build(cfg, Some(dir))
    }

    fn build(cfg: Config, dir: Option<&Path>) -> Result<Self> {
        let tokenizer = load_tokenizer(&cfg)?;
        let ctx = BuildContext {
            config: &cfg,
            tokenizer: tokenizer.clone(),
            bank_dir: dir.map(Path::to_path_buf),
        };
        let embedder = registry::embedders().build(&cfg.embedder, &ctx)?;
        let backend = registry::backends().build(&cfg.backend, &ctx)?;
        let dims = backend.dims();
        let boundary = boundary_for(&cfg, &tokenizer);
        let templates = match &cfg.templates {
            Some(d) => Templates::load_dir(d)?,
            None => Templates::default(),
        };
        let mut predictor = Predictor::new(predictor_config(&cfg), &cfg.kb_kind, templates);

        let (bank, qa, degraded) = match dir.filter(|d| d.exists()) {
            Some(d) => {
                let (bank, degraded) = KnowledgeBank::load(
                    d,
                    dims,
                    &cfg.system_prompt,
                    cfg.qkv_limit_bytes,
                    boundary,
                    &tokenizer,
                    embedder.as_ref(),
                )?;
                let qa_path = d.join(QA_FILE);
                let qa = if qa_path.exists() {
                    let mut qa = QaBank::load(&qa_path, cfg.qa_limit_bytes, cfg.qa_entry_bytes, embedder.as_ref())?;
                    qa.set_limit(cfg.qa_limit_bytes);
                    qa
                } else {
                    QaBank::new(cfg.qa_limit_bytes, cfg.qa_entry_bytes)
                };
                (bank, qa, degraded)
            }
            None => {
                let store = registry::slice_stores().build(&cfg.slice_store, &ctx)?;
                let bank = KnowledgeBank::new(dims, &cfg.system_prompt, cfg.qkv_limit_bytes, boundary, store);
                (bank, QaBank::new(cfg.qa_limit_bytes, cfg.qa_entry_bytes), Vec::new())
            }
        };
        let params = Bm25Params {
            k1: cfg.bm25_k1,
            b: cfg.bm25_b,
        };
        let retriever = Retriever::from_store(&bank.chunks, params, cfg.alpha_fusion);
        let loaded: Vec<ChunkId> = bank.chunks.iter().map(|c| c.chunk_id.clone()).collect();
        predictor.note_chunks(&loaded, 0);

        Ok(Engine {
            cost_model: cost_model(&cfg),
            cfg,
            tokenizer,
            embedder,
            backend,
            bank,
            qa,
            retriever,
            predictor,
            phase: Phase::Idle,
            last_at: None,
            seq: 0,
            deferred: VecDeque::new(),
            population: VecDeque::new(),
            counters: Counters::default(),
            degraded,
        })
    }

    /// Writes the knowledge bank and the QA bank under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.bank.save(dir)?;
        self.qa.save(&dir.join(QA_FILE))
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn backend(&self) -> &dyn LlmBackend {
        self.backend.as_ref()
    }

    pub fn bank(&self) -> &KnowledgeBank {
        &self.bank
    }

    pub fn qa(&self) -> &QaBank {
        &self.qa
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost_model
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Nodes whose slices failed to load.
    pub fn degraded(&self) -> &[NodeId] {
        &self.degraded
    }

    pub fn pending_population(&self) -> impl Iterator<Item = &PendingPrediction> {
        self.population.iter()
    }

    pub fn deferred_queries(&self) -> impl Iterator<Item = &str> {
        self.deferred.iter().map(String::as_str)
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig::from(&self.cfg)
    }

    /// Strategy used for the next population; always decode when the scheduler is off.
    pub fn strategy(&self) -> PopulationStrategy {
        if self.cfg.scheduler {
            choose_strategy(&self.scheduler_config())
        } else {
            PopulationStrategy::PrefillAndDecode
        }
    }

    pub(crate) fn require_idle(&self) -> Result<()> {
        match self.phase {
            Phase::Idle => Ok(()),
            Phase::Serving => Err(Error::WrongPhase),
        }
    }

    pub fn embed(&self, text: &str) -> Embedding {
        self.embedder.embed(text)
    }

    /// Retrieves chunks for `query` and tokenizes the assembled prompt.
    pub fn prepare(&self, query: &str, embedding: Embedding) -> Result<Prepared> {
        let ranked = if self.bank.chunks.is_empty() {
            Vec::new()
        } else {
            self.retriever
                .retrieve_top_k(&self.bank.chunks, query, &embedding, self.cfg.retrieval_k)?
        };
        let chunks: Vec<_> = ranked
            .iter()
            .map(|r| self.bank.chunks.get(&r.chunk_id).expect("retrieved chunk is stored"))
            .collect();
        let layout = PromptLayout::assemble(self.bank.system_prompt(), &chunks, query);
        let tokens = self.tokenizer.tokenize(&layout.text);
        Ok(Prepared {
            query: query.to_string(),
            embedding,
            layout,
            tokens,
        })
    }

    /// Reusable prefix length for a prepared prompt, without touching the bank.
    pub fn planned_prefix(&self, p: &Prepared) -> Result<usize> {
        if !self.cfg.caching {
            return Ok(0);
        }
        let chain = self.bank.plan_prompt_match(&p.layout, &p.tokens)?;
        Ok(self.bank.chain_prefix_len(&chain))
    }

    /// Cost of a background inference; decoding is priced at the token cap.
    pub fn estimate_background(&self, p: &Prepared, decode: bool) -> Result<CostReport> {
        let l_pre = self.planned_prefix(p)?;
        Ok(self.cost_model.estimate(
            &self.backend.dims(),
            &InferenceDescriptor {
                l_total: p.tokens.len(),
                l_pre,
                decode_tokens: if decode { self.cfg.max_decode_tokens } else { 0 },
                question_match: false,
                retrieval: true,
            },
        ))
    }

    /// Prefills the prompt, reusing cached slices when caching is on, and optionally decodes.
    pub fn infer(&mut self, p: &Prepared, now: u64, touch: bool, decode: bool, question_match: bool) -> Result<Inference> {
        let dims = self.backend.dims();
        let prefix = if self.cfg.caching {
            Some(self.bank.match_prompt(&p.layout, &p.tokens, now, touch)?)
        } else {
            None
        };
        let (l_pre, matched_count) = prefix.as_ref().map_or((0, 0), |m| (m.l_pre(), m.matched_count));
        let reuse = prefix.as_ref().filter(|m| m.l_pre() > 0).map(|m| &m.prefix);
        let out = self.backend.prefill(&p.tokens, reuse)?;
        debug_assert_eq!(out.macs, prefill_macs(&dims, p.tokens.len(), l_pre));
        let answer = if decode {
            let d = self.backend.decode(&out.state, self.cfg.max_decode_tokens)?;
            debug_assert_eq!(d.macs, decode_macs(&dims, p.tokens.len(), d.tokens.len()));
            Some(d)
        } else {
            None
        };
        let mut qkv = match prefix {
            Some(m) if l_pre > 0 => m.prefix.into_tensors(),
            _ => QkvTensors::empty(dims.layers, dims.heads, dims.head_dim),
        };
        qkv.append(&out.suffix)?;
        let cost = self.cost_model.estimate(
            &dims,
            &InferenceDescriptor {
                l_total: p.tokens.len(),
                l_pre,
                decode_tokens: answer.as_ref().map_or(0, |d| d.tokens.len()),
                question_match,
                retrieval: true,
            },
        );
        Ok(Inference {
            answer,
            qkv,
            l_pre,
            matched_count: if l_pre > 0 { matched_count } else { 0 },
            cost,
        })
    }

    /// Stores the prompt's slices and the QA entry. Budget failures skip the
    /// affected layer with a warning; other errors abort.
    pub fn populate(&mut self, p: &Prepared, inf: &Inference, now: u64) -> Result<Populated> {
        let mut done = Populated::default();
        if !self.cfg.caching {
            return Ok(done);
        }
        match self.bank.slice_and_insert(&p.layout, &p.tokens, &inf.qkv, now) {
            Ok(nodes) => done.nodes = nodes,
            Err(e) if is_budget_error(&e) => log::warn!("slices for `{}` not cached: {e}", p.query),
            Err(e) => return Err(e),
        }
        let answer = inf.answer.as_ref().map(|d| d.text.clone());
        match self.qa.insert(&p.query, p.embedding.clone(), answer, now) {
            Ok(id) => done.entry = Some(id),
            Err(e) if is_budget_error(&e) => log::warn!("QA entry for `{}` not cached: {e}", p.query),
            Err(e) => return Err(e),
        }
        Ok(done)
    }

    /// Serves one user query. No background work runs until it returns.
    pub fn handle_query(&mut self, text: &str, now: u64) -> Result<QueryOutcome> {
        self.phase = Phase::Serving;
        let out = self.serve(text, now);
        self.phase = Phase::Idle;
        let out = out?;
        self.predictor.record_query(text, now);
        Ok(out)
    }

    fn serve(&mut self, text: &str, now: u64) -> Result<QueryOutcome> {
        self.counters.queries += 1;
        let embedding = self.embed(text);
        let mut best_similarity = crate::qa::NO_MATCH;
        if self.cfg.caching {
            let (hit, sim) = self.qa.match_query(&embedding, self.cfg.tau_query, now)?;
            best_similarity = sim;
            if let Some(id) = hit {
                let entry = self.qa.get(id).expect("matched entry");
                let answer = entry.answer.clone().expect("hits are decoded");
                if entry.query != text && !self.deferred.iter().any(|q| q == text) {
                    self.deferred.push_back(text.to_string());
                }
                self.counters.qa_hits += 1;
                let cost = self.cost_model.estimate(
                    &self.backend.dims(),
                    &InferenceDescriptor {
                        l_total: 0,
                        l_pre: 0,
                        decode_tokens: 0,
                        question_match: true,
                        retrieval: false,
                    },
                );
                return Ok(QueryOutcome {
                    answer,
                    path: QueryPath::QaHit,
                    cost,
                    best_similarity,
                    l_pre: 0,
                    l_total: 0,
                    decode_tokens: 0,
                });
            }
        }
        let p = self.prepare(text, embedding)?;
        let inf = self.infer(&p, now, true, true, self.cfg.caching)?;
        self.populate(&p, &inf, now)?;
        let path = if inf.l_pre > 0 {
            QueryPath::QkvPartial(inf.matched_count)
        } else {
            QueryPath::ColdMiss
        };
        if inf.matched_count > 0 {
            self.counters.qkv_hits += 1;
        }
        let decoded = inf.answer.expect("user queries are decoded");
        Ok(QueryOutcome {
            answer: decoded.text,
            path,
            cost: inf.cost,
            best_similarity,
            l_pre: inf.l_pre,
            l_total: p.tokens.len(),
            decode_tokens: decoded.tokens.len(),
        })
    }

    /// Chunks each text, stores new chunks and marks QA entries they affect as stale.
    pub fn ingest(&mut self, texts: &[String], now: u64) -> Result<IngestReport> {
        let mut report = IngestReport::default();
        for text in texts {
            for piece in chunk_words(text, self.cfg.chunk_words) {
                let (id, fresh) = self.bank.chunks.insert(&piece, &self.tokenizer, self.embedder.as_ref());
                if fresh {
                    self.retriever.add(self.bank.chunks.get(&id).expect("just inserted"));
                    report.new_chunks.push(id.clone());
                }
                report.chunk_ids.push(id);
            }
        }
        self.predictor.note_chunks(&report.new_chunks, now);
        if self.cfg.caching && !report.new_chunks.is_empty() {
            let fresh: BTreeSet<ChunkId> = report.new_chunks.iter().cloned().collect();
            report.stale = self.qa.refresh(&fresh, &self.bank.chunks, self.cfg.k_refresh)?;
        }
        Ok(report)
    }

    /// Applies a runtime config change. Limit changes evict immediately.
    pub fn apply_config(&mut self, field: &str, value: &str) -> Result<()> {
        let bad = |reason: String| Error::Config { line: 0, reason };
        if FROZEN_KEYS.contains(&field) {
            return Err(bad(format!("`{field}` cannot change during a run")));
        }
        let mut next = self.cfg.clone();
        next.set(field, value).map_err(bad)?;
        self.cfg = next;
        match field {
            "qkv_limit_bytes" => {
                self.bank.set_limit(self.cfg.qkv_limit_bytes)?;
            }
            "qa_limit_bytes" => {
                self.qa.set_limit(self.cfg.qa_limit_bytes);
            }
            "alpha_fusion" => self.retriever.set_alpha(self.cfg.alpha_fusion),
            "k_boundary" | "discard_at_system_node" => {
                let b = boundary_for(&self.cfg, &self.tokenizer);
                self.bank.set_boundary(b);
            }
            "prediction_stride" | "t_batch" | "t_quiet" | "buffer_size" | "abstract_cap_bytes" => {
                self.predictor.cfg = predictor_config(&self.cfg);
            }
            "kb_kind" => self.predictor.kb_kind = self.cfg.kb_kind.clone(),
            "flops_per_ms" | "cost_scale" => self.cost_model = cost_model(&self.cfg),
            _ => {}
        }
        Ok(())
    }

    fn record(&self, at: u64, event: &str) -> EventRecord {
        let ledger = self.bank.ledger();
        EventRecord {
            seq: self.seq,
            at,
            event: event.to_string(),
            query: None,
            path: None,
            answer: None,
            similarity: None,
            matched_count: None,
            l_pre: None,
            l_total: None,
            decode_tokens: None,
            cost: CostReport::default(),
            chunks_added: None,
            stale_marked: None,
            field: None,
            value: None,
            tick: None,
            strategy: self.strategy().label().to_string(),
            qkv_used_bytes: ledger.used_bytes,
            qkv_limit_bytes: ledger.limit_bytes,
            qa_used_bytes: self.qa.used_bytes(),
            qa_entries: self.qa.len(),
            tree_nodes: self.bank.tree().len(),
            queries: self.counters.queries,
            qa_hits: self.counters.qa_hits,
            qkv_hits: self.counters.qkv_hits,
        }
    }

    /// Processes one trace event and returns its metrics record.
    pub fn apply_event(&mut self, ev: &TraceEvent) -> Result<EventRecord> {
        if let Some(last) = self.last_at {
            if ev.at < last {
                return Err(Error::OutOfOrder { at: ev.at, last });
            }
        }
        self.last_at = Some(ev.at);
        let rec = match &ev.kind {
            EventKind::QueryArrival { text } => {
                let out = self.handle_query(text, ev.at)?;
                let mut r = self.record(ev.at, ev.kind.label());
                r.query = Some(text.clone());
                r.path = Some(out.path.label().to_string());
                r.answer = Some(out.answer);
                r.similarity = Some(out.best_similarity);
                r.matched_count = Some(out.path.matched_count());
                r.l_pre = Some(out.l_pre);
                r.l_total = Some(out.l_total);
                r.decode_tokens = Some(out.decode_tokens);
                r.cost = out.cost;
                r
            }
            EventKind::ChunkArrival { text } => {
                let rep = self.ingest(std::slice::from_ref(text), ev.at)?;
                let mut r = self.record(ev.at, ev.kind.label());
                r.chunks_added = Some(rep.new_chunks.iter().map(ToString::to_string).collect());
                r.stale_marked = Some(rep.stale);
                r
            }
            EventKind::ConfigChange { field, value } => {
                let value = config_value_string(value);
                self.apply_config(field, &value)?;
                let mut r = self.record(ev.at, ev.kind.label());
                r.field = Some(field.clone());
                r.value = Some(value);
                r
            }
            EventKind::IdleTick { budget } => {
                let tick = self.idle_tick(*budget, ev.at)?;
                let mut r = self.record(ev.at, ev.kind.label());
                r.cost = tick.total_cost();
                r.tick = Some(tick);
                r
            }
        };
        self.seq += 1;
        Ok(rec)
    }

    /// Applies every event in order.
    pub fn replay(&mut self, events: &[TraceEvent]) -> Result<Vec<EventRecord>> {
        events.iter().map(|e| self.apply_event(e)).collect()
    }
}
