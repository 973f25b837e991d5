//! Knowledge chunks and the prefix tree of their cached attention slices.

mod chunks;
mod knowledge;
mod layout;
mod slice;
mod store;
mod tree;

pub use chunks::{base_chunk_id, chunk_words, content_hash, ChunkId, ChunkStore, KnowledgeChunk};
pub use knowledge::{slice_file_name, BoundaryPolicy, KnowledgeBank, PrefixMatch, CHUNKS_FILE, MANIFEST_FILE, SLICES_DIR};
pub use layout::{token_context, PromptLayout, Segment, SegmentKind};
pub use slice::{decode_slice, encode_slice, slice_byte_size, SLICE_HEADER_BYTES};
pub use store::{DirStore, MemoryStore, SliceStore};
pub use tree::{CacheTree, InsertPlan, NodeId, Step, StorageLedger, TreeNode, ROOT};
