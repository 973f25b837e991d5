//! Hybrid lexical + semantic chunk ranking.
//!
//! BM25 and cosine scores are each min-max normalized over the candidate set and
//! blended as `alpha * bm25 + (1 - alpha) * semantic`.

use std::collections::HashMap;

use crate::bank::{ChunkId, ChunkStore, KnowledgeChunk};
use crate::error::{Error, Result};
use crate::text::{cosine_similarity, terms, Embedding};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Per-chunk term frequencies.
#[derive(Debug, Clone, Default)]
pub struct DocTerms {
    pub len: usize,
    pub tf: HashMap<String, u32>,
}

impl DocTerms {
    pub fn from_text(text: &str) -> Self {
        let words = terms(text);
        let mut tf = HashMap::new();
        for w in &words {
            *tf.entry(w.clone()).or_insert(0) += 1;
        }
        DocTerms { len: words.len(), tf }
    }
}

/// Corpus-level statistics, maintained incrementally as chunks arrive.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub total_len: usize,
    pub doc_freq: HashMap<String, u32>,
}

impl CorpusStats {
    pub fn add(&mut self, doc: &DocTerms) {
        self.doc_count += 1;
        self.total_len += doc.len;
        for term in doc.tf.keys() {
            *self.doc_freq.entry(term.clone()).or_insert(0) += 1;
        }
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.doc_count == 0 {
            0.0
        } else {
            self.total_len as f64 / self.doc_count as f64
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

/// BM25 of one chunk for a query term multiset (repeated terms contribute repeatedly).
pub fn bm25_score(query_terms: &[String], doc: &DocTerms, stats: &CorpusStats, params: Bm25Params) -> f64 {
    if stats.doc_count == 0 {
        return 0.0;
    }
    let avg = stats.avg_doc_len();
    let norm = if avg > 0.0 { doc.len as f64 / avg } else { 1.0 };
    query_terms
        .iter()
        .map(|t| {
            let tf = f64::from(doc.tf.get(t).copied().unwrap_or(0));
            if tf == 0.0 {
                return 0.0;
            }
            stats.idf(t) * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedChunk {
    pub chunk_id: ChunkId,
    pub bm25: f64,
    pub semantic: f64,
    pub fused: f64,
}

/// Min-max normalization; an all-equal vector maps to 0.5 everywhere.
pub fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

/// Lexical index over the chunk corpus plus the fusion settings.
#[derive(Debug, Clone)]
pub struct Retriever {
    params: Bm25Params,
    alpha: f64,
    stats: CorpusStats,
    docs: HashMap<ChunkId, DocTerms>,
}

impl Retriever {
    pub fn new(params: Bm25Params, alpha: f64) -> Self {
        Retriever {
            params,
            alpha,
            stats: CorpusStats::default(),
            docs: HashMap::new(),
        }
    }

    pub fn from_store(store: &ChunkStore, params: Bm25Params, alpha: f64) -> Self {
        let mut r = Self::new(params, alpha);
        for c in store.iter() {
            r.add(c);
        }
        r
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Registers a chunk; re-adding a known id is ignored.
    pub fn add(&mut self, chunk: &KnowledgeChunk) {
        if self.docs.contains_key(&chunk.chunk_id) {
            return;
        }
        let doc = DocTerms::from_text(&chunk.text);
        self.stats.add(&doc);
        self.docs.insert(chunk.chunk_id.clone(), doc);
    }

    pub fn bm25(&self, query_terms: &[String], chunk_id: &ChunkId) -> f64 {
        self.docs
            .get(chunk_id)
            .map(|d| bm25_score(query_terms, d, &self.stats, self.params))
            .unwrap_or(0.0)
    }

    /// Top `k` chunks by fused score; ties go to the smaller chunk id.
    pub fn retrieve_top_k(
        &self,
        store: &ChunkStore,
        query: &str,
        query_embedding: &Embedding,
        k: usize,
    ) -> Result<Vec<RankedChunk>> {
        if k == 0 {
            return Err(Error::ZeroRetrievalDepth);
        }
        let query_terms = terms(query);
        let mut ids = Vec::with_capacity(store.len());
        let mut lexical = Vec::with_capacity(store.len());
        let mut semantic = Vec::with_capacity(store.len());
        for chunk in store.iter() {
            ids.push(chunk.chunk_id.clone());
            lexical.push(self.bm25(&query_terms, &chunk.chunk_id));
            semantic.push(cosine_similarity(query_embedding, &chunk.embedding)?);
        }
        let lex_n = min_max(&lexical);
        let sem_n = min_max(&semantic);
        let mut ranked: Vec<RankedChunk> = ids
            .into_iter()
            .enumerate()
            .map(|(i, chunk_id)| RankedChunk {
                chunk_id,
                bm25: lexical[i],
                semantic: semantic[i],
                fused: self.alpha * lex_n[i] + (1.0 - self.alpha) * sem_n[i],
            })
            .collect();
        ranked.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
        ranked.truncate(k);
        Ok(ranked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Embedder, HashEmbedder, Tokenizer, TokenizerVocab};
    use proptest::prelude::*;

    fn store_of(texts: &[&str]) -> ChunkStore {
        let t = Tokenizer::new(TokenizerVocab::from_pieces(Vec::<&str>::new()));
        let e = HashEmbedder::default();
        let mut s = ChunkStore::new();
        for text in texts {
            s.insert(text, &t, &e);
        }
        s
    }

    fn q(s: &str) -> Vec<String> {
        terms(s)
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let s = store_of(&["alpha beta"]);
        let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
        let id = s.iter().next().unwrap().chunk_id.clone();
        assert_eq!(r.bm25(&q("gamma"), &id), 0.0);
    }

    #[test]
    fn empty_corpus_scores_zero() {
        let stats = CorpusStats::default();
        let doc = DocTerms::from_text("alpha");
        assert_eq!(bm25_score(&q("alpha"), &doc, &stats, Bm25Params::default()), 0.0);
    }

    // Single document, tf = 1, doclen = avgdl: score = ln(1 + 1/3) * 2.2 / 2.2.
    // Value from tests/oracles/retrieval_oracle.py.
    #[test]
    fn single_doc_formula() {
        let s = store_of(&["budget"]);
        let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
        let id = s.iter().next().unwrap().chunk_id.clone();
        let got = r.bm25(&q("budget"), &id);
        assert!((got - 0.28768207245178085).abs() < 1e-15, "{got}");
    }

    #[test]
    fn single_chunk_corpus_returns_it() {
        let s = store_of(&["anything at all"]);
        let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
        let e = HashEmbedder::default();
        let out = r.retrieve_top_k(&s, "unrelated", &e.embed("unrelated"), 3).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn zero_k_is_an_error() {
        let s = store_of(&["a"]);
        let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
        let e = HashEmbedder::default();
        assert!(matches!(r.retrieve_top_k(&s, "a", &e.embed("a"), 0), Err(Error::ZeroRetrievalDepth)));
    }

    #[test]
    fn min_max_all_equal_is_half() {
        assert_eq!(min_max(&[2.0, 2.0, 2.0]), [0.5, 0.5, 0.5]);
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), [0.0, 1.0, 0.5]);
    }

    #[test]
    fn identical_scores_order_by_id() {
        // No query term matches and the degenerate query embedding is the same for all.
        let s = store_of(&["x1", "x2", "x3"]);
        let r = Retriever::from_store(&s, Bm25Params::default(), 1.0);
        let e = HashEmbedder::default();
        let out = r.retrieve_top_k(&s, "", &e.embed(""), 3).unwrap();
        let ids: Vec<_> = out.iter().map(|c| c.chunk_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    // Lexical and semantic rankings disagree; expected order and fused scores from
    // tests/oracles/retrieval_oracle.py.
    #[test]
    fn fusion_order_matches_oracle() {
        let texts = [
            "budget budget budget budget review",
            "planning the meeting agenda for the budget team",
            "team lunch on friday",
        ];
        let s = store_of(&texts);
        let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
        let e = HashEmbedder::default();
        let query = "budget planning meeting";
        let out = r.retrieve_top_k(&s, query, &e.embed(query), 3).unwrap();
        let order: Vec<usize> = out
            .iter()
            .map(|c| texts.iter().position(|t| s.get(&c.chunk_id).unwrap().text == *t).unwrap())
            .collect();
        assert_eq!(order, FUSION_ORDER);
        for (c, want) in out.iter().zip(FUSION_SCORES) {
            assert!((c.fused - want).abs() < 1e-12, "{} vs {want}", c.fused);
        }
    }
    // BM25 alone prefers text 1, cosine alone prefers text 0.
    const FUSION_ORDER: [usize; 3] = [0, 1, 2];
    const FUSION_SCORES: [f64; 3] = [0.695070465291193, 0.6677050983124841, 0.0];

    proptest! {
        #[test]
        fn doubling_tf_never_decreases(words in proptest::collection::vec("[a-e]{1,2}", 1..12), pick in 0usize..12) {
            let term = words[pick % words.len()].clone();
            let base = words.join(" ");
            let doubled = format!("{base} {term}");
            let d1 = DocTerms::from_text(&base);
            let mut d2 = DocTerms::from_text(&base);
            // Double the term frequency without changing the corpus statistics.
            *d2.tf.get_mut(&term).unwrap() *= 2;
            let mut stats = CorpusStats::default();
            stats.add(&d1);
            stats.add(&DocTerms::from_text(&doubled));
            let p = Bm25Params::default();
            let qt = vec![term];
            prop_assert!(bm25_score(&qt, &d2, &stats, p) >= bm25_score(&qt, &d1, &stats, p));
        }

        #[test]
        fn ranking_invariants(
            docs in proptest::collection::vec(proptest::collection::vec("[a-f]{1,3}", 1..8), 1..8),
            query in proptest::collection::vec("[a-f]{1,3}", 1..4),
            k in 1usize..6,
            seed in any::<u64>(),
        ) {
            let texts: Vec<String> = docs.iter().map(|d| d.join(" ")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let s = store_of(&refs);
            let e = HashEmbedder::default();
            let query = query.join(" ");
            let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
            let out = r.retrieve_top_k(&s, &query, &e.embed(&query), k).unwrap();
            prop_assert_eq!(out.len(), k.min(s.len()));
            for w in out.windows(2) {
                prop_assert!(w[0].fused > w[1].fused || (w[0].fused == w[1].fused && w[0].chunk_id < w[1].chunk_id));
            }
            for c in &out {
                prop_assert!((0.0..=1.0).contains(&c.fused));
            }

            // Insertion order does not matter.
            let mut shuffled = refs.clone();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            let s2 = store_of(&shuffled);
            let r2 = Retriever::from_store(&s2, Bm25Params::default(), 0.5);
            let out2 = r2.retrieve_top_k(&s2, &query, &e.embed(&query), k).unwrap();
            let a: Vec<_> = out.iter().map(|c| c.chunk_id.clone()).collect();
            let b: Vec<_> = out2.iter().map(|c| c.chunk_id.clone()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn exact_duplicate_of_query_ranks_first(
            docs in proptest::collection::vec(proptest::collection::vec("[a-f]{1,3}", 1..8), 1..8),
            query in proptest::collection::vec("[a-f]{1,3}", 1..5),
        ) {
            let query = query.join(" ");
            let mut texts: Vec<String> = docs.iter().map(|d| d.join(" ")).collect();
            texts.push(query.clone());
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let s = store_of(&refs);
            let e = HashEmbedder::default();
            let r = Retriever::from_store(&s, Bm25Params::default(), 0.5);
            let out = r.retrieve_top_k(&s, &query, &e.embed(&query), 1).unwrap();
            let top = s.get(&out[0].chunk_id).unwrap();
            prop_assert_eq!(e.embed(&top.text), e.embed(&query));
        }
    }
}
