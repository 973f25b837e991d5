use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Every single byte is a fallback token; ids `0..256` are reserved for them.
pub const BYTE_TOKENS: usize = 256;

/// Token ids plus the byte range each token covers in the source text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub byte_spans: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens whose first byte lies in `start..end`.
    pub fn tokens_starting_in(&self, start: usize, end: usize) -> std::ops::Range<usize> {
        let lo = self.byte_spans.partition_point(|&(s, _)| s < start);
        let hi = self.byte_spans.partition_point(|&(s, _)| s < end);
        lo..hi
    }
}

/// Explicit multi-byte vocabulary on top of the 256 byte tokens.
///
/// Multi-byte pieces get ids `256 + index` in canonical order (longest first, then
/// lexicographic), which is also the order of the vocabulary file.
#[derive(Debug, Clone)]
pub struct TokenizerVocab {
    pieces: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, TokenId>,
    max_len: usize,
}

fn canonical_order(a: &[u8], b: &[u8]) -> std::cmp::Ordering {
    b.len().cmp(&a.len()).then_with(|| a.cmp(b))
}

impl TokenizerVocab {
    /// Builds a vocabulary from arbitrary pieces; single bytes and duplicates are folded away.
    pub fn from_pieces<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let mut pieces: Vec<Vec<u8>> = pieces
            .into_iter()
            .map(|p| p.as_ref().to_vec())
            .filter(|p| p.len() > 1)
            .collect();
        pieces.sort_by(|a, b| canonical_order(a, b));
        pieces.dedup();
        Self::from_sorted(pieces)
    }

    fn from_sorted(pieces: Vec<Vec<u8>>) -> Self {
        let lookup = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), (BYTE_TOKENS + i) as TokenId))
            .collect();
        let max_len = pieces.iter().map(Vec::len).max().unwrap_or(1);
        TokenizerVocab {
            pieces,
            lookup,
            max_len,
        }
    }

    /// Parses the one-token-per-line file format. Lines must already be in canonical
    /// order; single-byte lines are accepted and map onto the byte fallbacks.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = Vec::new();
        let mut prev: Option<&[u8]> = None;
        for (idx, line) in text.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let bytes = line.as_bytes();
            if let Some(p) = prev {
                if canonical_order(p, bytes) != std::cmp::Ordering::Less {
                    return Err(Error::Vocab {
                        line: idx + 1,
                        reason: format!("`{line}` breaks longest-first lexicographic order"),
                    });
                }
            }
            prev = Some(bytes);
            if bytes.len() > 1 {
                pieces.push(bytes.to_vec());
            }
        }
        Ok(Self::from_sorted(pieces))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Renders the vocabulary file (multi-byte pieces only, canonical order).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(&String::from_utf8_lossy(p));
            out.push('\n');
        }
        out
    }

    /// Total id space, byte fallbacks included.
    pub fn len(&self) -> usize {
        BYTE_TOKENS + self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Longest token in bytes.
    pub fn max_token_len(&self) -> usize {
        self.max_len
    }

    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        let id = id as usize;
        if id < BYTE_TOKENS {
            &BYTE_TABLE[id..id + 1]
        } else {
            &self.pieces[id - BYTE_TOKENS]
        }
    }

    /// True when some multi-byte token contains `byte`, i.e. tokens may straddle it.
    pub fn spans_byte(&self, byte: u8) -> bool {
        self.pieces.iter().any(|p| p.contains(&byte))
    }

    fn longest_match(&self, rest: &[u8]) -> (TokenId, usize) {
        let upper = self.max_len.min(rest.len());
        for len in (2..=upper).rev() {
            if let Some(&id) = self.lookup.get(&rest[..len]) {
                return (id, len);
            }
        }
        (rest[0] as TokenId, 1)
    }
}

static BYTE_TABLE: [u8; 256] = {
    let mut t = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        t[i] = i as u8;
        i += 1;
    }
    t
};

/// Greedy longest-match tokenizer over a [`TokenizerVocab`].
///
/// Segmentation depends on what follows a boundary, so tokenizing two strings
/// separately can differ from tokenizing their concatenation.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: TokenizerVocab,
}

impl Tokenizer {
    pub fn new(vocab: TokenizerVocab) -> Self {
        Tokenizer { vocab }
    }

    pub fn vocab(&self) -> &TokenizerVocab {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let bytes = text.as_bytes();
        let mut seq = TokenSeq::default();
        let mut pos = 0;
        while pos < bytes.len() {
            let (id, len) = self.vocab.longest_match(&bytes[pos..]);
            seq.tokens.push(id);
            seq.byte_spans.push((pos, pos + len));
            pos += len;
        }
        seq
    }

    /// Concatenated token bytes, lossily decoded.
    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &t in tokens {
            bytes.extend_from_slice(self.vocab.token_bytes(t));
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> Tokenizer {
        Tokenizer::new(TokenizerVocab::from_pieces(["ab", "a", "b", "c", "bc"]))
    }

    fn pieces(t: &Tokenizer, s: &str) -> Vec<String> {
        let seq = t.tokenize(s);
        seq.tokens.iter().map(|&id| t.detokenize(&[id])).collect()
    }

    #[test]
    fn empty_input_gives_empty_sequence() {
        assert!(abc().tokenize("").is_empty());
    }

    #[test]
    fn concatenation_differs_from_whole() {
        let t = abc();
        assert_eq!(pieces(&t, "a"), ["a"]);
        assert_eq!(pieces(&t, "bc"), ["bc"]);
        assert_eq!(pieces(&t, "abc"), ["ab", "c"]);
        let mut joined = t.tokenize("a").tokens;
        joined.extend(t.tokenize("bc").tokens);
        assert_ne!(joined, t.tokenize("abc").tokens);
    }

    #[test]
    fn spans_cover_input() {
        assert_eq!(abc().tokenize("ab").byte_spans, [(0, 2)]);
    }

    #[test]
    fn byte_fallback_for_unknown_and_multibyte_chars() {
        let t = abc();
        let seq = t.tokenize("zé");
        assert_eq!(seq.tokens, [b'z' as u32, 0xC3, 0xA9]);
        assert_eq!(t.detokenize(&seq.tokens), "zé");
    }

    #[test]
    fn parse_requires_canonical_order() {
        assert!(TokenizerVocab::parse("abc\nab\nbc\n").is_ok());
        let err = TokenizerVocab::parse("ab\nabc\n").unwrap_err();
        assert!(matches!(err, Error::Vocab { line: 2, .. }));
        let err = TokenizerVocab::parse("bc\nab\n").unwrap_err();
        assert!(matches!(err, Error::Vocab { line: 2, .. }));
    }

    #[test]
    fn file_round_trip_keeps_ids() {
        let v = TokenizerVocab::from_pieces(["the", " t", "he", "e ", "th"]);
        let back = TokenizerVocab::parse(&v.to_file_string()).unwrap();
        assert_eq!(back.len(), v.len());
        for id in BYTE_TOKENS..v.len() {
            assert_eq!(back.token_bytes(id as u32), v.token_bytes(id as u32));
        }
    }

    #[test]
    fn tokens_starting_in_range() {
        let t = abc();
        let seq = t.tokenize("abcab");
        // ab | c | ab
        assert_eq!(seq.tokens_starting_in(0, 2), 0..1);
        assert_eq!(seq.tokens_starting_in(1, 3), 1..2);
        assert_eq!(seq.tokens_starting_in(2, 5), 1..3);
    }

    proptest! {
        #[test]
        fn span_law_and_determinism(s in "[abc xyz]{0,40}") {
            let t = abc();
            let seq = t.tokenize(&s);
            prop_assert_eq!(&seq, &t.tokenize(&s));
            prop_assert_eq!(seq.tokens.len(), seq.byte_spans.len());
            let mut expect = 0;
            for &(a, b) in &seq.byte_spans {
                prop_assert_eq!(a, expect);
                prop_assert!(b > a);
                expect = b;
            }
            prop_assert_eq!(expect, s.len());
            prop_assert_eq!(t.detokenize(&seq.tokens), s);
        }
    }
}
