//! Closed whitespace vocabulary.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const BOS: usize = 3;
pub const EOS: usize = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "[CLS]", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Only the reserved specials.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in SPECIAL_TOKENS {
            v.insert(t);
        }
        v
    }

    /// Specials followed by `tokens` in order; duplicates are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Adds every whitespace token of every text, in first-seen order.
    pub fn from_texts<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut v = Vocabulary::new();
        for text in texts {
            for tok in text.split_whitespace() {
                v.insert(tok);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order, as written to a vocabulary file.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// Unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|tok| match self.index.get(tok) {
                Some(&id) => id,
                None => {
                    log::debug!("unknown token `{tok}`");
                    UNK
                }
            })
            .collect()
    }

    /// Like [`Vocabulary::tokenize`] but fails on unknown words.
    pub fn tokenize_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|tok| {
                self.index
                    .get(tok)
                    .copied()
                    .ok_or_else(|| Error::Validation(alloc::format!("token `{tok}` is not in the vocabulary")))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id).unwrap_or("<unk>"));
        }
        out
    }

    /// Detokenizes generated ids, dropping pad/start and stopping at end.
    pub fn decode_answer(&self, ids: &[usize]) -> String {
        let body: Vec<usize> = ids
            .iter()
            .copied()
            .take_while(|&id| id != EOS)
            .filter(|&id| id != PAD && id != BOS && id != CLS)
            .collect();
        self.detokenize(&body)
    }

    /// Decoder target: `<s> tokens </s>`.
    pub fn target_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(text.len() / 3 + 2);
        ids.push(BOS);
        ids.extend(self.tokenize(text));
        ids.push(EOS);
        ids
    }

    /// Order-sensitive 64-bit fingerprint (FNV-1a) used to match checkpoints to datasets.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(core::iter::once(0u8)) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_reserved_low_ids() {
        let v = Vocabulary::new();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.len(), NUM_SPECIALS);
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::from_texts(["fact : e007 r03 ?"]);
        assert_eq!(v.tokenize(""), Vec::<usize>::new());
        assert_eq!(v.tokenize("zebra"), alloc::vec![UNK]);
        let ids = v.tokenize("fact : e007 r03 ?");
        assert_eq!(v.detokenize(&ids), "fact : e007 r03 ?");
        assert!(v.tokenize_strict("zebra").is_err());
    }

    #[test]
    fn decode_answer_strips_specials() {
        let v = Vocabulary::from_tokens(["yes", "no"]);
        let yes = v.id("yes").unwrap();
        assert_eq!(v.decode_answer(&[yes, EOS, yes]), "yes");
        assert_eq!(v.decode_answer(&[BOS, yes]), "yes");
    }
}
