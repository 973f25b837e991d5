//! Deterministic text substrate: tokenization, embeddings and similarity.

mod embed;
mod tokenizer;

pub use embed::{cosine_similarity, Embedder, Embedding, HashEmbedder, DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED};
pub use tokenizer::{TokenId, TokenSeq, Tokenizer, TokenizerVocab, BYTE_TOKENS};

const DEFAULT_VOCAB: &str = include_str!("../../assets/vocab.txt");

/// The bundled vocabulary: frequent 2 to 4 byte pieces, some spanning spaces, none spanning newlines.
pub fn default_vocab() -> TokenizerVocab {
    TokenizerVocab::parse(DEFAULT_VOCAB).expect("bundled vocabulary is canonical")
}

/// Lowercased words split on every non-alphanumeric character.
///
/// Shared by the lexical scorer and the hashed embedder so both see the same terms.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}
