//! The semantic QA cache: past queries with their embeddings and, when
//! decoded, their answers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::{ChunkId, ChunkStore};
use crate::error::{Error, Result};
use crate::text::{cosine_similarity, Embedder, Embedding};

pub type EntryId = u64;

/// Accounted size of one entry.
pub const DEFAULT_ENTRY_BYTES: u64 = 4096;
pub const DEFAULT_QA_LIMIT_BYTES: u64 = 100 * 1024 * 1024;

/// Best similarity reported for an empty bank.
pub const NO_MATCH: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QaEntry {
    pub id: EntryId,
    pub query: String,
    pub embedding: Embedding,
    pub answer: Option<String>,
    pub use_count: u64,
    pub created_at: u64,
    pub last_used: u64,
    pub stale: bool,
}

impl QaEntry {
    pub fn decoded(&self) -> bool {
        self.answer.is_some()
    }
}

#[derive(Serialize, Deserialize)]
struct QaRow {
    query: String,
    answer: Option<String>,
    decoded: bool,
    use_count: u64,
    created_at: u64,
    last_used: u64,
    stale: bool,
}

#[derive(Debug, Clone)]
pub struct QaBank {
    entries: BTreeMap<EntryId, QaEntry>,
    by_query: HashMap<String, EntryId>,
    next_id: EntryId,
    limit_bytes: u64,
    entry_bytes: u64,
}

impl QaBank {
    pub fn new(limit_bytes: u64, entry_bytes: u64) -> Self {
        QaBank {
            entries: BTreeMap::new(),
            by_query: HashMap::new(),
            next_id: 0,
            limit_bytes,
            entry_bytes: entry_bytes.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn used_bytes(&self) -> u64 {
        self.entries.len() as u64 * self.entry_bytes
    }

    pub fn limit_bytes(&self) -> u64 {
        self.limit_bytes
    }

    pub fn get(&self, id: EntryId) -> Option<&QaEntry> {
        self.entries.get(&id)
    }

    pub fn find(&self, query: &str) -> Option<&QaEntry> {
        self.by_query.get(query).and_then(|id| self.entries.get(id))
    }

    pub fn entries(&self) -> impl Iterator<Item = &QaEntry> {
        self.entries.values()
    }

    /// The most similar eligible entry and its similarity, without recording a use.
    pub fn best(&self, embedding: &Embedding) -> Result<(Option<EntryId>, f64)> {
        let mut best: Option<(&QaEntry, f64)> = None;
        for e in self.entries.values().filter(|e| e.decoded() && !e.stale) {
            let s = cosine_similarity(embedding, &e.embedding)?;
            let better = match best {
                None => true,
                Some((b, bs)) => s > bs || (s == bs && (e.created_at, e.id) < (b.created_at, b.id)),
            };
            if better {
                best = Some((e, s));
            }
        }
        Ok(best.map_or((None, NO_MATCH), |(e, s)| (Some(e.id), s)))
    }

    /// Returns the best entry when its similarity exceeds `tau`, recording the use.
    pub fn match_query(&mut self, embedding: &Embedding, tau: f64, now: u64) -> Result<(Option<EntryId>, f64)> {
        let (id, sim) = self.best(embedding)?;
        match id {
            Some(id) if sim > tau => {
                let e = self.entries.get_mut(&id).expect("entry exists");
                e.use_count += 1;
                e.last_used = now;
                Ok((Some(id), sim))
            }
            _ => Ok((None, sim)),
        }
    }

    /// Bytes an insert of `query` would add.
    pub fn insert_cost(&self, query: &str) -> u64 {
        if self.by_query.contains_key(query) {
            0
        } else {
            self.entry_bytes
        }
    }

    /// Checks that an entry fits once least-used entries are evicted.
    pub fn check_insert(&self, query: &str) -> Result<()> {
        let cost = self.insert_cost(query);
        if cost > self.limit_bytes {
            return Err(Error::ItemExceedsBudget {
                item: cost,
                limit: self.limit_bytes,
            });
        }
        Ok(())
    }

    /// Adds or replaces the entry for `query`.
    ///
    /// A replacement keeps the id, creation time and the larger use count, and
    /// never drops an existing answer for an answer-less one.
    pub fn insert(&mut self, query: &str, embedding: Embedding, answer: Option<String>, now: u64) -> Result<EntryId> {
        if let Some(&id) = self.by_query.get(query) {
            let e = self.entries.get_mut(&id).expect("indexed entry exists");
            if answer.is_some() {
                e.answer = answer;
                e.stale = false;
            }
            e.embedding = embedding;
            e.last_used = now;
            return Ok(id);
        }
        self.check_insert(query)?;
        self.evict_to(self.limit_bytes - self.entry_bytes);
        let id = self.next_id;
        self.next_id += 1;
        self.entries.insert(
            id,
            QaEntry {
                id,
                query: query.to_string(),
                embedding,
                answer,
                use_count: 0,
                created_at: now,
                last_used: now,
                stale: false,
            },
        );
        self.by_query.insert(query.to_string(), id);
        Ok(id)
    }

    fn evict_to(&mut self, target: u64) -> Vec<EntryId> {
        let mut out = Vec::new();
        while self.used_bytes() > target {
            let victim = self
                .entries
                .values()
                .min_by_key(|e| (e.use_count, e.last_used, e.id))
                .map(|e| e.id)
                .expect("non-empty when over target");
            let e = self.entries.remove(&victim).expect("present");
            self.by_query.remove(&e.query);
            out.push(victim);
        }
        out
    }

    pub fn set_limit(&mut self, limit_bytes: u64) -> Vec<EntryId> {
        self.limit_bytes = limit_bytes;
        self.evict_to(limit_bytes)
    }

    pub fn set_answer(&mut self, id: EntryId, answer: String, now: u64) -> bool {
        match self.entries.get_mut(&id) {
            Some(e) => {
                e.answer = Some(answer);
                e.stale = false;
                e.last_used = now;
                true
            }
            None => false,
        }
    }

    /// Answer-less entries, oldest first.
    pub fn answerless(&self) -> Vec<EntryId> {
        let mut v: Vec<&QaEntry> = self.entries.values().filter(|e| !e.decoded()).collect();
        v.sort_by_key(|e| (e.created_at, e.id));
        v.into_iter().map(|e| e.id).collect()
    }

    pub fn stale(&self) -> Vec<EntryId> {
        self.entries.values().filter(|e| e.stale).map(|e| e.id).collect()
    }

    /// Marks decoded entries stale when one of `new_chunks` ranks in their top `k` chunks.
    pub fn refresh(&mut self, new_chunks: &BTreeSet<ChunkId>, store: &ChunkStore, k: usize) -> Result<Vec<EntryId>> {
        if new_chunks.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let mut affected = Vec::new();
        for e in self.entries.values_mut().filter(|e| e.decoded()) {
            let mut ranked = Vec::with_capacity(store.len());
            for c in store.iter() {
                ranked.push((cosine_similarity(&e.embedding, &c.embedding)?, &c.chunk_id));
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            if ranked.iter().take(k).any(|(_, id)| new_chunks.contains(*id)) {
                e.stale = true;
                affected.push(e.id);
            }
        }
        Ok(affected)
    }

    /// (query, answer) pairs, ordered by query; a content fingerprint for comparisons.
    pub fn contents(&self) -> BTreeSet<(String, Option<String>)> {
        self.entries.values().map(|e| (e.query.clone(), e.answer.clone())).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            let row = QaRow {
                query: e.query.clone(),
                answer: e.answer.clone(),
                decoded: e.decoded(),
                use_count: e.use_count,
                created_at: e.created_at,
                last_used: e.last_used,
                stale: e.stale,
            };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, limit_bytes: u64, entry_bytes: u64, embedder: &dyn Embedder) -> Result<Self> {
        let mut bank = QaBank::new(limit_bytes, entry_bytes);
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: QaRow = serde_json::from_str(line).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if row.decoded != row.answer.is_some() {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    reason: "decoded flag disagrees with answer".into(),
                });
            }
            let id = bank.next_id;
            bank.next_id += 1;
            bank.by_query.insert(row.query.clone(), id);
            bank.entries.insert(
                id,
                QaEntry {
                    id,
                    embedding: embedder.embed(&row.query),
                    query: row.query,
                    answer: row.answer,
                    use_count: row.use_count,
                    created_at: row.created_at,
                    last_used: row.last_used,
                    stale: row.stale,
                },
            );
        }
        bank.evict_to(limit_bytes);
        Ok(bank)
    }
}
