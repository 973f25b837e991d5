//! The prefix tree of chunk slices. This module only tracks structure and
//! metadata; slice payloads live in a [`SliceStore`](super::SliceStore).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ChunkId;
use crate::error::{Error, Result};
use crate::text::TokenId;

pub type NodeId = u64;

pub const ROOT: NodeId = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// `None` only for the root, which holds the system prompt.
    pub chunk_id: Option<ChunkId>,
    pub retrieval_count: u64,
    pub last_used: u64,
    pub slice_file: Option<String>,
    pub byte_size: u64,
    /// Token range of the slice in the prompt that produced it.
    pub token_span: (usize, usize),
    /// Token ids of the slice.
    pub tokens: Vec<TokenId>,
    /// Digest of the token ids that preceded the slice in that prompt.
    pub context: String,
    #[serde(skip)]
    children: Vec<NodeId>,
}

impl TreeNode {
    fn new(id: NodeId, parent: Option<NodeId>, chunk_id: Option<ChunkId>, now: u64) -> Self {
        TreeNode {
            id,
            parent,
            chunk_id,
            retrieval_count: 0,
            last_used: now,
            slice_file: None,
            byte_size: 0,
            token_span: (0, 0),
            tokens: Vec::new(),
            context: String::new(),
            children: Vec::new(),
        }
    }

    pub fn is_present(&self) -> bool {
        self.slice_file.is_some()
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StorageLedger {
    pub used_bytes: u64,
    pub limit_bytes: u64,
}

impl StorageLedger {
    pub fn free_bytes(&self) -> u64 {
        self.limit_bytes.saturating_sub(self.used_bytes)
    }
}

/// One position of an insertion: the root first, then one per path chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// Reuse a node; `write` means its slice is absent and gets filled.
    Existing { node: NodeId, write: bool },
    /// Create a child of the previous step's node.
    New { chunk: ChunkId },
}

impl Step {
    pub fn writes(&self) -> bool {
        matches!(self, Step::New { .. } | Step::Existing { write: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InsertPlan {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone)]
pub struct CacheTree {
    nodes: BTreeMap<NodeId, TreeNode>,
    next_id: NodeId,
    ledger: StorageLedger,
}

impl CacheTree {
    pub fn new(limit_bytes: u64) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(ROOT, TreeNode::new(ROOT, None, None, 0));
        CacheTree {
            nodes,
            next_id: 1,
            ledger: StorageLedger {
                used_bytes: 0,
                limit_bytes,
            },
        }
    }

    /// Rebuilds a tree from manifest rows.
    pub fn from_nodes(rows: Vec<TreeNode>, limit_bytes: u64) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for mut n in rows {
            n.children.clear();
            if nodes.insert(n.id, n).is_some() {
                return Err(Error::Layout("duplicate node id in manifest".into()));
            }
        }
        match nodes.get(&ROOT) {
            Some(r) if r.parent.is_none() && r.chunk_id.is_none() => {}
            _ => return Err(Error::Layout("manifest has no root node".into())),
        }
        let ids: Vec<NodeId> = nodes.keys().copied().collect();
        for id in &ids {
            let parent = nodes[id].parent;
            if *id == ROOT {
                continue;
            }
            match parent {
                Some(p) if p < *id && nodes.contains_key(&p) => nodes.get_mut(&p).expect("checked").children.push(*id),
                _ => return Err(Error::Layout(format!("node {id} has an invalid parent"))),
            }
            if nodes[id].chunk_id.is_none() {
                return Err(Error::Layout(format!("node {id} has no chunk id")));
            }
        }
        let used_bytes = nodes.values().filter(|n| n.is_present()).map(|n| n.byte_size).sum();
        let next_id = ids.last().copied().unwrap_or(0) + 1;
        Ok(CacheTree {
            nodes,
            next_id,
            ledger: StorageLedger {
                used_bytes,
                limit_bytes,
            },
        })
    }

    pub fn node(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn ledger(&self) -> StorageLedger {
        self.ledger
    }

    pub fn set_limit(&mut self, limit_bytes: u64) {
        self.ledger.limit_bytes = limit_bytes;
    }

    fn is_present(&self, id: NodeId) -> bool {
        self.nodes[&id].is_present()
    }

    /// Chunk ids from the root down to `id`.
    pub fn path_of(&self, id: NodeId) -> Vec<ChunkId> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let n = &self.nodes[&c];
            if let Some(chunk) = &n.chunk_id {
                out.push(chunk.clone());
            }
            cur = n.parent;
        }
        out.reverse();
        out
    }

    fn deepest<F>(&self, id: NodeId, depth: usize, path: &[ChunkId], accept: &mut F, cur: &mut Vec<NodeId>, best: &mut Vec<NodeId>)
    where
        F: FnMut(&TreeNode, usize, bool) -> bool,
    {
        let node = &self.nodes[&id];
        if !accept(node, depth, true) {
            return;
        }
        cur.push(id);
        if cur.len() > best.len() {
            best.clone_from(cur);
        }
        if depth < path.len() && accept(node, depth, false) {
            for &c in &node.children {
                if self.nodes[&c].chunk_id.as_ref() == Some(&path[depth]) {
                    self.deepest(c, depth + 1, path, accept, cur, best);
                }
            }
        }
        cur.pop();
    }

    /// Deepest chain `root, n1, ..` with `n_i` holding `path[i-1]`, ignoring slice presence.
    /// Among equally deep chains the first created wins.
    pub fn structural_chain(&self, path: &[ChunkId]) -> Vec<NodeId> {
        let mut best = Vec::new();
        self.deepest(ROOT, 0, path, &mut |_, _, _| true, &mut Vec::new(), &mut best);
        best
    }

    /// Deepest chain of present slices matching a prefix of `path`.
    ///
    /// `accept(node, depth, is_final)` may veto a node as the end of the chain
    /// (`is_final`) or as an interior node; a node vetoed as the end is not
    /// descended into either.
    pub fn match_chain<F>(&self, path: &[ChunkId], mut accept: F) -> Vec<NodeId>
    where
        F: FnMut(&TreeNode, usize, bool) -> bool,
    {
        let mut best = Vec::new();
        let mut gate = |n: &TreeNode, d: usize, fin: bool| n.is_present() && accept(n, d, fin);
        self.deepest(ROOT, 0, path, &mut gate, &mut Vec::new(), &mut best);
        best
    }

    /// Records a use of every node on `chain`.
    pub fn touch(&mut self, chain: &[NodeId], now: u64) {
        for id in chain {
            if let Some(n) = self.nodes.get_mut(id) {
                n.retrieval_count += 1;
                n.last_used = now;
            }
        }
    }

    /// Decides which nodes an insertion of `path` reuses, fills or creates.
    ///
    /// The longest structurally common chain is shared except for its last
    /// node, which is duplicated when the new prompt continues past it with a
    /// different successor or when its slice came from a prompt that ended there.
    pub fn plan_insert(&self, path: &[ChunkId]) -> InsertPlan {
        let chain = self.structural_chain(path);
        let m = chain.len() - 1;
        let n = path.len();
        let absent = |id: NodeId| !self.is_present(id);
        let leaf = |id: NodeId| self.nodes[&id].children.is_empty();
        let mut steps: Vec<Step> = chain[..m]
            .iter()
            .map(|&id| Step::Existing { node: id, write: absent(id) })
            .collect();
        let last = chain[m];
        let new_from = if m == 0 {
            steps.push(Step::Existing { node: ROOT, write: absent(ROOT) });
            0
        } else if m == n && !absent(last) {
            steps.push(Step::Existing { node: last, write: false });
            n
        } else if leaf(last) && absent(last) {
            steps.push(Step::Existing { node: last, write: true });
            m
        } else {
            m - 1
        };
        steps.extend(path[new_from..].iter().map(|c| Step::New { chunk: c.clone() }));
        InsertPlan { steps }
    }

    /// Creates a child node without a slice.
    pub fn add_child(&mut self, parent: NodeId, chunk: ChunkId, now: u64) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(id, TreeNode::new(id, Some(parent), Some(chunk), now));
        self.nodes.get_mut(&parent).expect("parent exists").children.push(id);
        id
    }

    /// Attaches a slice to `id`, replacing any previous one in the ledger.
    pub fn set_slice(&mut self, id: NodeId, file: String, byte_size: u64, span: (usize, usize), tokens: Vec<TokenId>, context: String) {
        let n = self.nodes.get_mut(&id).expect("node exists");
        if n.is_present() {
            self.ledger.used_bytes -= n.byte_size;
        }
        n.slice_file = Some(file);
        n.byte_size = byte_size;
        n.token_span = span;
        n.tokens = tokens;
        n.context = context;
        self.ledger.used_bytes += byte_size;
    }

    /// Drops the slice of `id`, keeping counts and position; returns its file.
    pub fn mark_evicted(&mut self, id: NodeId) -> Option<String> {
        let n = self.nodes.get_mut(&id)?;
        let file = n.slice_file.take()?;
        self.ledger.used_bytes -= n.byte_size;
        n.byte_size = 0;
        Some(file)
    }

    /// Present nodes outside `pinned` in eviction order: fewest retrievals,
    /// then least recently used, then oldest.
    pub fn eviction_order(&self, pinned: &BTreeSet<NodeId>) -> Vec<NodeId> {
        let mut c: Vec<&TreeNode> = self
            .nodes
            .values()
            .filter(|n| n.is_present() && !pinned.contains(&n.id))
            .collect();
        c.sort_by_key(|n| (n.retrieval_count, n.last_used, n.id));
        c.into_iter().map(|n| n.id).collect()
    }

    /// Victims to evict so that `incoming` more bytes fit, without changing anything.
    pub fn plan_eviction(&self, incoming: u64, pinned: &BTreeSet<NodeId>) -> Result<Vec<NodeId>> {
        let limit = self.ledger.limit_bytes;
        if incoming > limit {
            return Err(Error::ItemExceedsBudget { item: incoming, limit });
        }
        let mut used = self.ledger.used_bytes;
        let mut victims = Vec::new();
        let mut order = self.eviction_order(pinned).into_iter();
        while used + incoming > limit {
            match order.next() {
                Some(id) => {
                    used -= self.nodes[&id].byte_size;
                    victims.push(id);
                }
                None => {
                    return Err(Error::NothingEvictable {
                        used: self.ledger.used_bytes,
                        incoming,
                        limit,
                    })
                }
            }
        }
        Ok(victims)
    }

    /// Ids of present nodes and the chunk path leading to each.
    pub fn present_paths(&self) -> BTreeSet<Vec<ChunkId>> {
        self.nodes
            .values()
            .filter(|n| n.is_present())
            .map(|n| self.path_of(n.id))
            .collect()
    }
}
