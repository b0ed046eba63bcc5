//! Whitespace-and-punctuation tokenizer with char-offset maps.
//!
//! Token ids come from hashing the (optionally lowercased) token text into a
//! fixed-size vocabulary, so no vocabulary file is needed and ids are stable
//! across runs. Configured special strings (the question separator by
//! default) are kept atomic.

use serde::{Deserialize, Serialize};

use crate::types::TokenizerConfig;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED_IDS: u32 = 4;

/// One token: hashed id plus the char range it covers in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyTokenizer {
    config: TokenizerConfig,
    vocab_size: usize,
}

impl TinyTokenizer {
    pub fn new(config: TokenizerConfig, vocab_size: usize) -> Self {
        assert!(
            vocab_size > RESERVED_IDS as usize,
            "vocab_size must exceed the {RESERVED_IDS} reserved ids"
        );
        TinyTokenizer { config, vocab_size }
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    /// Split `text` into tokens with char offsets. Runs of alphanumeric
    /// chars form one token, any other non-whitespace char stands alone, and
    /// configured specials are matched first.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let specials: Vec<Vec<char>> = self
            .config
            .specials
            .iter()
            .map(|s| s.chars().collect())
            .collect();

        let mut tokens = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                i += 1;
                continue;
            }
            if let Some(special) = specials
                .iter()
                .find(|sp| !sp.is_empty() && chars[i..].starts_with(sp))
            {
                let end = i + special.len();
                tokens.push(self.token(&chars[i..end], i, end));
                i = end;
                continue;
            }
            if chars[i].is_alphanumeric() {
                let mut end = i + 1;
                while end < chars.len() && chars[end].is_alphanumeric() {
                    end += 1;
                }
                tokens.push(self.token(&chars[i..end], i, end));
                i = end;
            } else {
                tokens.push(self.token(&chars[i..i + 1], i, i + 1));
                i += 1;
            }
        }
        tokens
    }

    fn token(&self, chars: &[char], start: usize, end: usize) -> Token {
        let mut text: String = chars.iter().collect();
        if self.config.lowercase {
            text = text.to_lowercase();
        }
        Token {
            id: self.hash_id(&text),
            start,
            end,
        }
    }

    fn hash_id(&self, token: &str) -> u32 {
        let bucket = fnv1a(token.as_bytes()) % (self.vocab_size as u64 - RESERVED_IDS as u64);
        RESERVED_IDS + bucket as u32
    }
}

/// FNV-1a, fixed so token ids never depend on process state.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
