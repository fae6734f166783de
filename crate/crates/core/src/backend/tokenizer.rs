//! Character-level tokenizer for the reference backend.
//!
//! The supported alphabet is newline, tab, and printable ASCII. Ids 0 and 1
//! are reserved for the begin- and end-of-sequence markers, which never
//! appear in tokenized text; they exist so the model can score a sequence
//! with an empty prefix and terminate its own samples.

use crate::backend::TokenSequence;
use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;

const FIRST_CHAR_ID: u32 = 2;
const PRINTABLE_START: u32 = 0x20;
const PRINTABLE_END: u32 = 0x7e;

/// 2 specials + '\n' + '\t' + 95 printable ASCII characters.
pub const VOCAB_SIZE: usize = 4 + (PRINTABLE_END - PRINTABLE_START + 1) as usize;

#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl CharTokenizer {
    pub fn char_to_id(c: char) -> Option<u32> {
        match c {
            '\n' => Some(FIRST_CHAR_ID),
            '\t' => Some(FIRST_CHAR_ID + 1),
            _ => {
                let cp = c as u32;
                if (PRINTABLE_START..=PRINTABLE_END).contains(&cp) {
                    Some(FIRST_CHAR_ID + 2 + (cp - PRINTABLE_START))
                } else {
                    None
                }
            }
        }
    }

    pub fn id_to_char(id: u32) -> Option<char> {
        match id {
            BOS | EOS => None,
            _ if id == FIRST_CHAR_ID => Some('\n'),
            _ if id == FIRST_CHAR_ID + 1 => Some('\t'),
            _ if id < VOCAB_SIZE as u32 => {
                char::from_u32(PRINTABLE_START + (id - FIRST_CHAR_ID - 2))
            }
            _ => None,
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut tokens = Vec::with_capacity(text.len());
        for (offset, ch) in text.chars().enumerate() {
            match Self::char_to_id(ch) {
                Some(id) => tokens.push(id),
                None => return Err(Error::UnsupportedChar { ch, offset }),
            }
        }
        Ok(TokenSequence(tokens))
    }

    /// Specials decode to nothing; they never occur in tokenized text and
    /// sampled sequences stop before emitting them.
    pub fn detokenize(&self, tokens: &TokenSequence) -> String {
        tokens.0.iter().filter_map(|&id| Self::id_to_char(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_sequence() {
        let t = CharTokenizer;
        let seq = t.tokenize("").unwrap();
        assert_eq!(seq.len(), 0);
    }

    #[test]
    fn round_trip_identity() {
        let t = CharTokenizer;
        for text in [
            "hello world",
            "Query:\n what is zuvo?\nResponse:\n",
            "tabs\tand\nnewlines",
            "~!@#$%^&*()_+-=[]{}|;':\",./<>?",
        ] {
            let seq = t.tokenize(text).unwrap();
            assert_eq!(t.detokenize(&seq), text);
        }
    }

    #[test]
    fn unsupported_char_names_offset() {
        let t = CharTokenizer;
        match t.tokenize("ok\u{e9}") {
            Err(Error::UnsupportedChar { ch, offset }) => {
                assert_eq!(ch, '\u{e9}');
                assert_eq!(offset, 2);
            }
            other => panic!("expected UnsupportedChar, got {other:?}"),
        }
    }

    #[test]
    fn tokenization_is_stable() {
        let t = CharTokenizer;
        let mut doc = String::new();
        for i in 0..100 {
            doc.push_str(&format!("entity {i} has attribute {}.\n", i * 7 % 13));
        }
        let a = t.tokenize(&doc).unwrap();
        let b = t.tokenize(&doc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), doc.chars().count());
    }

    #[test]
    fn every_id_in_range() {
        let t = CharTokenizer;
        let seq = t.tokenize("any text 123").unwrap();
        assert!(seq.0.iter().all(|&id| (id as usize) < VOCAB_SIZE));
    }
}
