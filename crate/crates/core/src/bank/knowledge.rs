use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::layout::{token_context, PromptLayout};
use super::slice::{decode_slice, encode_slice, slice_byte_size};
use super::store::{MemoryStore, SliceStore};
use super::tree::{CacheTree, NodeId, Step, StorageLedger, TreeNode, ROOT};
use super::{content_hash, ChunkId, ChunkStore};
use crate::error::{Error, Result};
use crate::model::{ModelDims, QkvPrefix, QkvTensors};
use crate::text::{Embedder, TokenSeq, Tokenizer};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const SLICES_DIR: &str = "slices";

pub fn slice_file_name(id: NodeId) -> String {
    format!("n{id:06}.pqkv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryPolicy {
    /// Tokens dropped from the end of the last matched slice.
    pub k_boundary: usize,
    /// Also drop them when only the system prompt matched.
    pub at_system_node: bool,
}

impl Default for BoundaryPolicy {
    fn default() -> Self {
        BoundaryPolicy {
            k_boundary: 4,
            at_system_node: false,
        }
    }
}

impl BoundaryPolicy {
    fn discard(&self, depth: usize, tokens: usize) -> usize {
        if depth == 0 && !self.at_system_node {
            0
        } else {
            self.k_boundary.min(tokens)
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefixMatch {
    /// Root first.
    pub chain: Vec<NodeId>,
    /// Matched chunk slices, not counting the system prompt.
    pub matched_count: usize,
    pub discarded: usize,
    pub prefix: QkvPrefix,
}

impl PrefixMatch {
    pub fn l_pre(&self) -> usize {
        self.prefix.prefix_token_count()
    }
}

/// Chunk store plus the slice tree and its storage.
pub struct KnowledgeBank {
    pub chunks: ChunkStore,
    tree: CacheTree,
    store: Box<dyn SliceStore>,
    dims: ModelDims,
    system_prompt: String,
    boundary: BoundaryPolicy,
}

impl KnowledgeBank {
    pub fn new(dims: ModelDims, system_prompt: &str, limit_bytes: u64, boundary: BoundaryPolicy, store: Box<dyn SliceStore>) -> Self {
        KnowledgeBank {
            chunks: ChunkStore::new(),
            tree: CacheTree::new(limit_bytes),
            store,
            dims,
            system_prompt: system_prompt.to_string(),
            boundary,
        }
    }

    pub fn tree(&self) -> &CacheTree {
        &self.tree
    }

    pub fn ledger(&self) -> StorageLedger {
        self.tree.ledger()
    }

    pub fn system_prompt(&self) -> &str {
        &self.system_prompt
    }

    pub fn boundary(&self) -> BoundaryPolicy {
        self.boundary
    }

    pub fn set_boundary(&mut self, boundary: BoundaryPolicy) {
        self.boundary = boundary;
    }

    fn slice_hash(&self, node: &TreeNode) -> [u8; 32] {
        match &node.chunk_id {
            Some(id) => match self.chunks.get(id) {
                Some(c) => content_hash(&c.text),
                None => content_hash(id.as_str()),
            },
            None => content_hash(&self.system_prompt),
        }
    }

    fn read_slice(&self, id: NodeId) -> Result<QkvTensors> {
        let node = self.tree.node(id).expect("node exists");
        let file = node.slice_file.as_deref().expect("present node");
        let bytes = self.store.get(file)?;
        let (t, hash) = decode_slice(&bytes, file)?;
        let corrupt = |reason: &str| Error::CorruptSlice {
            name: file.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() as u64 != node.byte_size {
            return Err(corrupt("size differs from manifest"));
        }
        if t.layer_count() != self.dims.layers || t.heads() != self.dims.heads || t.head_dim() != self.dims.head_dim {
            return Err(corrupt("shape differs from model"));
        }
        if t.token_count() != node.tokens.len() {
            return Err(corrupt("token count differs from manifest"));
        }
        if hash != self.slice_hash(node) {
            return Err(corrupt("content hash differs from chunk"));
        }
        Ok(t)
    }

    fn drop_slice(&mut self, id: NodeId) -> Result<()> {
        if let Some(file) = self.tree.mark_evicted(id) {
            self.store.remove(&file)?;
        }
        Ok(())
    }

    fn assemble_match(&mut self, chain: Vec<NodeId>, now: u64, touch: bool) -> Result<Option<PrefixMatch>> {
        let mut tensors = QkvTensors::empty(self.dims.layers, self.dims.heads, self.dims.head_dim);
        for &id in &chain {
            match self.read_slice(id) {
                Ok(t) => tensors.append(&t)?,
                Err(e @ (Error::CorruptSlice { .. } | Error::Io { .. })) => {
                    log::warn!("treating node {id} as evicted: {e}");
                    self.drop_slice(id)?;
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        }
        let discarded = match chain.last() {
            Some(&last) => self.boundary.discard(chain.len() - 1, self.tree.node(last).expect("node").token_count()),
            None => 0,
        };
        tensors.truncate(tensors.token_count() - discarded);
        if touch {
            self.tree.touch(&chain, now);
        }
        Ok(Some(PrefixMatch {
            matched_count: chain.len().saturating_sub(1),
            chain,
            discarded,
            prefix: QkvPrefix::new(tensors),
        }))
    }

    /// Longest present chain for `retrieved`, concatenated and trimmed at the boundary.
    pub fn match_prefix(&mut self, retrieved: &[ChunkId], now: u64) -> Result<PrefixMatch> {
        loop {
            let chain = self.tree.match_chain(retrieved, |_, _, _| true);
            if let Some(m) = self.assemble_match(chain, now, true)? {
                return Ok(m);
            }
        }
    }

    /// Chain that [`match_prompt`](Self::match_prompt) would use, without reading slices.
    pub fn plan_prompt_match(&self, layout: &PromptLayout, tokens: &TokenSeq) -> Result<Vec<NodeId>> {
        layout.validate(tokens)?;
        let path = layout.chunk_path();
        let ranges = layout.token_ranges(tokens);
        let boundary = self.boundary;
        Ok(self.tree.match_chain(&path, |node, depth, is_final| {
            let range = ranges[depth].clone();
            if node.context != token_context(&tokens.tokens[..range.start]) {
                return false;
            }
            let mine = &tokens.tokens[range];
            if is_final {
                let keep = node.token_count() - boundary.discard(depth, node.token_count());
                mine.len() >= keep && mine[..keep] == node.tokens[..keep]
            } else {
                mine == node.tokens.as_slice()
            }
        }))
    }

    /// Prefix length a chain yields after the boundary discard.
    pub fn chain_prefix_len(&self, chain: &[NodeId]) -> usize {
        let Some(&last) = chain.last() else {
            return 0;
        };
        let total: usize = chain.iter().map(|id| self.tree.node(*id).expect("node").token_count()).sum();
        total - self.boundary.discard(chain.len() - 1, self.tree.node(last).expect("node").token_count())
    }

    /// Like [`match_prefix`](Self::match_prefix) for a concrete prompt: a slice is only
    /// reused when its tokens and the tokens before it agree with this prompt's.
    /// `touch` records the use for eviction ordering.
    pub fn match_prompt(&mut self, layout: &PromptLayout, tokens: &TokenSeq, now: u64, touch: bool) -> Result<PrefixMatch> {
        loop {
            let chain = self.plan_prompt_match(layout, tokens)?;
            if let Some(m) = self.assemble_match(chain, now, touch)? {
                return Ok(m);
            }
        }
    }

    /// Depth of the deepest chain for `path` regardless of which slices are present.
    pub fn structural_depth(&self, path: &[ChunkId]) -> usize {
        self.tree.structural_chain(path).len() - 1
    }

    /// Bytes the slices of `layout` would add.
    pub fn insert_cost(&self, layout: &PromptLayout, tokens: &TokenSeq) -> u64 {
        let plan = self.tree.plan_insert(&layout.chunk_path());
        let ranges = layout.token_ranges(tokens);
        plan.steps
            .iter()
            .zip(&ranges)
            .filter(|(s, _)| s.writes())
            .map(|(_, r)| self.size_of(r.len()))
            .sum()
    }

    fn size_of(&self, tokens: usize) -> u64 {
        slice_byte_size(self.dims.layers, self.dims.heads, self.dims.head_dim, tokens)
    }

    /// Slices the prompt's tensors per segment and merges the chunk path into the tree.
    ///
    /// Either every needed slice is written or nothing changes. The query segment is not stored.
    pub fn slice_and_insert(&mut self, layout: &PromptLayout, tokens: &TokenSeq, qkv: &QkvTensors, now: u64) -> Result<Vec<NodeId>> {
        layout.validate(tokens)?;
        if qkv.token_count() != tokens.len() {
            return Err(Error::Layout(format!(
                "{} tensor rows for {} tokens",
                qkv.token_count(),
                tokens.len()
            )));
        }
        if qkv.layer_count() != self.dims.layers || qkv.heads() != self.dims.heads || qkv.head_dim() != self.dims.head_dim {
            return Err(Error::ShapeMismatch("prompt tensors do not match the bank's model".into()));
        }
        let ranges = layout.token_ranges(tokens);
        let plan = self.tree.plan_insert(&layout.chunk_path());

        let mut incoming = 0u64;
        let mut encoded = Vec::new();
        for (i, step) in plan.steps.iter().enumerate() {
            if !step.writes() {
                encoded.push(None);
                continue;
            }
            let slice = qkv.slice(ranges[i].clone());
            let hash = match &layout.segments[i].kind {
                super::SegmentKind::Chunk(id) => self
                    .chunks
                    .get(id)
                    .map(|c| content_hash(&c.text))
                    .unwrap_or_else(|| content_hash(id.as_str())),
                _ => content_hash(&self.system_prompt),
            };
            let bytes = encode_slice(&slice, &hash)?;
            incoming += bytes.len() as u64;
            encoded.push(Some(bytes));
        }
        let pinned: BTreeSet<NodeId> = plan
            .steps
            .iter()
            .filter_map(|s| match s {
                Step::Existing { node, .. } => Some(*node),
                Step::New { .. } => None,
            })
            .collect();
        let victims = self.tree.plan_eviction(incoming, &pinned)?;
        for v in victims {
            self.drop_slice(v)?;
        }

        let mut ids: Vec<NodeId> = Vec::with_capacity(plan.steps.len());
        for (i, (step, bytes)) in plan.steps.into_iter().zip(encoded).enumerate() {
            let id = match step {
                Step::Existing { node, .. } => node,
                Step::New { chunk } => self.tree.add_child(*ids.last().unwrap_or(&ROOT), chunk, now),
            };
            if let Some(bytes) = bytes {
                let file = slice_file_name(id);
                self.store.put(&file, &bytes)?;
                let range = ranges[i].clone();
                self.tree.set_slice(
                    id,
                    file,
                    bytes.len() as u64,
                    (range.start, range.end),
                    tokens.tokens[range.clone()].to_vec(),
                    token_context(&tokens.tokens[..range.start]),
                );
            }
            ids.push(id);
        }
        Ok(ids)
    }

    /// Evicts least-frequently-used slices until `incoming` more bytes fit.
    pub fn evict_to_fit(&mut self, incoming: u64) -> Result<Vec<NodeId>> {
        let victims = self.tree.plan_eviction(incoming, &BTreeSet::new())?;
        for &v in &victims {
            self.drop_slice(v)?;
        }
        Ok(victims)
    }

    /// Changes the byte budget, evicting if the bank no longer fits.
    pub fn set_limit(&mut self, limit_bytes: u64) -> Result<Vec<NodeId>> {
        self.tree.set_limit(limit_bytes);
        self.evict_to_fit(0)
    }

    /// Slice payload of a present node.
    pub fn slice_tensors(&self, id: NodeId) -> Result<QkvTensors> {
        self.read_slice(id)
    }

    /// Raw bytes of a present node's slice file.
    pub fn slice_bytes(&self, id: NodeId) -> Option<Vec<u8>> {
        let file = self.tree.node(id)?.slice_file.as_deref()?;
        self.store.get(file).ok()
    }

    pub fn manifest_string(&self) -> String {
        let mut out = String::new();
        for n in self.tree.nodes() {
            out.push_str(&serde_json::to_string(n).expect("node serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes manifest, chunks and every present slice under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let slices = dir.join(SLICES_DIR);
        fs::create_dir_all(&slices).map_err(|e| Error::io(&slices, e))?;
        self.chunks.save(&dir.join(CHUNKS_FILE))?;
        let keep: BTreeSet<String> = self.tree.nodes().filter_map(|n| n.slice_file.clone()).collect();
        for entry in fs::read_dir(&slices).map_err(|e| Error::io(&slices, e))? {
            let entry = entry.map_err(|e| Error::io(&slices, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".pqkv") && !keep.contains(&name) {
                fs::remove_file(entry.path()).map_err(|e| Error::io(&entry.path(), e))?;
            }
        }
        for file in &keep {
            let bytes = self.store.get(file)?;
            let path = slices.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.manifest_string().as_bytes()).map_err(|e| Error::io(&path, e))
    }

    /// Loads a saved bank into memory. Unreadable or inconsistent slices are
    /// logged and their nodes come back evicted; their ids are returned.
    #[allow(clippy::too_many_arguments)]
    pub fn load(
        dir: &Path,
        dims: ModelDims,
        system_prompt: &str,
        limit_bytes: u64,
        boundary: BoundaryPolicy,
        tokenizer: &Tokenizer,
        embedder: &dyn Embedder,
    ) -> Result<(Self, Vec<NodeId>)> {
        let chunks_path = dir.join(CHUNKS_FILE);
        let chunks = if chunks_path.exists() {
            ChunkStore::load(&chunks_path, tokenizer, embedder)?
        } else {
            ChunkStore::new()
        };
        let manifest = dir.join(MANIFEST_FILE);
        let mut rows = Vec::new();
        if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let node: TreeNode = serde_json::from_str(line).map_err(|e| Error::Parse {
                    file: manifest.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                rows.push(node);
            }
        }
        let tree = if rows.is_empty() {
            CacheTree::new(limit_bytes)
        } else {
            CacheTree::from_nodes(rows, limit_bytes)?
        };
        let mut store = MemoryStore::new();
        let slices = dir.join(SLICES_DIR);
        for n in tree.nodes() {
            if let Some(file) = &n.slice_file {
                if let Ok(bytes) = fs::read(slices.join(file)) {
                    store.put(file, &bytes)?;
                }
            }
        }
        let mut bank = KnowledgeBank {
            chunks,
            tree,
            store: Box::new(store),
            dims,
            system_prompt: system_prompt.to_string(),
            boundary,
        };
        let present: Vec<NodeId> = bank.tree.nodes().filter(|n| n.is_present()).map(|n| n.id).collect();
        let mut degraded = Vec::new();
        for id in present {
            if let Err(e) = bank.read_slice(id) {
                log::warn!("node {id} loaded as evicted: {e}");
                bank.drop_slice(id)?;
                degraded.push(id);
            }
        }
        if bank.ledger().used_bytes > limit_bytes {
            bank.evict_to_fit(0)?;
        }
        Ok((bank, degraded))
    }
}
