//! Character-level tokenizer over a fixed alphabet with four reserved ids.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const HINT: usize = 3;
const RESERVED: usize = 4;

/// Literal spelling of the soft-prompt placeholder in rendered text.
pub const HINT_MARKER: &str = "<hint>";

const ALPHABET: &str =
    " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,?!:;'\"-[]()/";

#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: [Option<usize>; 128],
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let chars: Vec<char> = ALPHABET.chars().collect();
        let mut index = [None; 128];
        for (i, &c) in chars.iter().enumerate() {
            index[c as usize] = Some(RESERVED + i);
        }
        Tokenizer { chars, index }
    }

    pub fn vocab_size(&self) -> usize {
        RESERVED + self.chars.len()
    }

    /// Encodes `s`; each occurrence of `<hint>` becomes the HINT id.
    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(s.len());
        let mut rest = s;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix(HINT_MARKER) {
                out.push(HINT);
                rest = r;
                continue;
            }
            let ch = rest.chars().next().expect("non-empty");
            let id = self
                .index
                .get(ch as usize)
                .copied()
                .flatten()
                .ok_or(Error::UnknownChar {
                    ch,
                    code: ch as u32,
                    pos: s[..s.len() - rest.len()].chars().count(),
                })?;
            out.push(id);
            rest = &rest[ch.len_utf8()..];
        }
        Ok(out)
    }

    /// Inverse of `encode`; PAD, BOS and EOS render as nothing.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                HINT => s.push_str(HINT_MARKER),
                _ => {
                    let c = self.chars.get(id - RESERVED).ok_or_else(|| {
                        Error::contract(format!("token id {id} outside vocabulary"))
                    })?;
                    s.push(*c);
                }
            }
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_empty() {
        let t = Tokenizer::new();
        let s = "[0.5,0.5,0.9,0.9]";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
        assert!(t.encode("").unwrap().is_empty());
    }

    #[test]
    fn hint_marker_is_one_token() {
        let t = Tokenizer::new();
        let ids = t.encode("a <hint> b").unwrap();
        assert_eq!(ids.iter().filter(|&&i| i == HINT).count(), 1);
        assert_eq!(ids.len(), 5);
        assert_eq!(t.decode(&ids).unwrap(), "a <hint> b");
    }

    #[test]
    fn unknown_char_names_codepoint() {
        let t = Tokenizer::new();
        match t.encode("ab\u{e9}") {
            Err(Error::UnknownChar { ch, code, pos }) => {
                assert_eq!((ch, code, pos), ('\u{e9}', 0xE9, 2));
            }
            other => panic!("{other:?}"),
        }
        assert!(t.encode("a<b").is_err());
    }

    #[test]
    fn ids_are_dense() {
        let t = Tokenizer::new();
        let ids = t.encode(ALPHABET).unwrap();
        let expect: Vec<usize> = (RESERVED..t.vocab_size()).collect();
        assert_eq!(ids, expect);
    }
}
