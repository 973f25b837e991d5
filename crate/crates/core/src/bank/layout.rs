use std::ops::Range;

use sha2::{Digest, Sha256};

use super::{ChunkId, KnowledgeChunk};
use crate::error::{Error, Result};
use crate::text::{TokenId, TokenSeq};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentKind {
    System,
    Chunk(ChunkId),
    Query,
}

/// A run of prompt bytes; separators belong to the segment before them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub bytes: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub text: String,
    pub segments: Vec<Segment>,
}

impl PromptLayout {
    /// `system \n chunk1 ␠ chunk2 … \n query`.
    pub fn assemble(system: &str, chunks: &[&KnowledgeChunk], query: &str) -> Self {
        let mut text = String::new();
        let mut segments = Vec::with_capacity(chunks.len() + 2);
        let mut push = |text: &mut String, kind: SegmentKind, body: &str, sep: &str| {
            let start = text.len();
            text.push_str(body);
            text.push_str(sep);
            segments.push(Segment {
                kind,
                bytes: start..text.len(),
            });
        };
        push(&mut text, SegmentKind::System, system, "\n");
        for (i, c) in chunks.iter().enumerate() {
            let sep = if i + 1 == chunks.len() { "\n" } else { " " };
            push(&mut text, SegmentKind::Chunk(c.chunk_id.clone()), &c.text, sep);
        }
        push(&mut text, SegmentKind::Query, query, "");
        PromptLayout { text, segments }
    }

    pub fn chunk_path(&self) -> Vec<ChunkId> {
        self.segments
            .iter()
            .filter_map(|s| match &s.kind {
                SegmentKind::Chunk(id) => Some(id.clone()),
                _ => None,
            })
            .collect()
    }

    /// Checks the shape `system, chunk*, query` and exact tiling of `tokens`' source.
    pub fn validate(&self, tokens: &TokenSeq) -> Result<()> {
        let n = self.segments.len();
        if n < 2 || self.segments[0].kind != SegmentKind::System || self.segments[n - 1].kind != SegmentKind::Query {
            return Err(Error::Layout("expected system, chunks, query".into()));
        }
        if self.segments[1..n - 1].iter().any(|s| !matches!(s.kind, SegmentKind::Chunk(_))) {
            return Err(Error::Layout("only chunks may sit between system and query".into()));
        }
        let mut at = 0;
        for s in &self.segments {
            if s.bytes.start != at || s.bytes.end < s.bytes.start {
                return Err(Error::Layout(format!("segment gap at byte {at}")));
            }
            at = s.bytes.end;
        }
        if at != self.text.len() {
            return Err(Error::Layout("segments do not cover the prompt".into()));
        }
        let covered = tokens.byte_spans.last().map_or(0, |s| s.1);
        if covered != self.text.len() {
            return Err(Error::Layout(format!(
                "tokens cover {covered} bytes, prompt has {}",
                self.text.len()
            )));
        }
        Ok(())
    }

    /// Token index range of every segment (tokens belong to the segment holding their first byte).
    pub fn token_ranges(&self, tokens: &TokenSeq) -> Vec<Range<usize>> {
        self.segments
            .iter()
            .map(|s| tokens.tokens_starting_in(s.bytes.start, s.bytes.end))
            .collect()
    }
}

/// Digest of a token id prefix, used to tell whether a slice was computed in the same context.
pub fn token_context(tokens: &[TokenId]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}
