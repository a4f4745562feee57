//! Numeric-aware character tokenizer over the prompt alphabet.
//!
//! Digits, signs and punctuation are single tokens so every number is spelled
//! character by character; recurring template phrases collapse to one token each.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: usize = 3;

const PIECES: &[&str] = &[
    " will arrive at coordinate ",
    "Where will pedestrian ",
    " after the next ",
    " be in the next ",
    "Pedestrian ",
    " frames.",
    " frames?",
    "), (",
    ": ",
    ", ",
];

const CHARS: &str = "0123456789.-(),: ?abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    /// Token strings indexed by id; the first three are the special tokens.
    vocab: Vec<String>,
    /// Non-special ids, longest token first.
    order: Vec<u32>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_vocab(v)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut vocab: Vec<String> = ["<pad>", "<s>", "</s>"].iter().map(|s| s.to_string()).collect();
        vocab.extend(PIECES.iter().map(|s| s.to_string()));
        vocab.extend(CHARS.chars().map(String::from));
        Self::from_vocab(vocab).expect("built-in vocabulary is valid")
    }
}

impl Tokenizer {
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS || vocab.iter().skip(SPECIALS).any(|t| t.is_empty()) {
            return Err(Error::Config("tokenizer vocabulary is malformed".into()));
        }
        let mut order: Vec<u32> = (SPECIALS as u32..vocab.len() as u32).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(vocab[i as usize].len()));
        Ok(Self { vocab, order })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Greedy longest match. Fails on the first symbol no token covers.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(text.len());
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            let hit = self
                .order
                .iter()
                .find(|&&id| rest.starts_with(self.vocab[id as usize].as_str()))
                .ok_or(Error::OutOfVocabulary(c))?;
            ids.push(*hit);
            rest = &rest[self.vocab[*hit as usize].len()..];
        }
        Ok(TokenSequence { ids })
    }

    fn id_of(&self, tok: &str) -> Option<u32> {
        self.vocab.iter().position(|t| t == tok).map(|i| i as u32)
    }

    /// Numeric layout of each token, from the prefix up to and including it:
    /// `[pair, slot, block, char]`. `pair` counts coordinate pairs within the
    /// current list, `slot` is 0 outside a pair, 1 in an x value and 2 in a y
    /// value, `block` counts "Pedestrian " blocks with the goal sentence's pair
    /// marked by the cap, and `char` is the 1-based position inside the current
    /// number (0 elsewhere). Values are capped at `caps`.
    pub fn structure(&self, ids: &[u32], caps: [u32; 4]) -> Vec<[u32; 4]> {
        let open = self.id_of("(");
        let close = self.id_of(")");
        let next = self.id_of("), (");
        let comma = self.id_of(", ");
        let ped = self.id_of("Pedestrian ");
        let goal = self.id_of(" will arrive at coordinate ");
        let numeric: Vec<bool> = self
            .vocab
            .iter()
            .map(|t| t.len() == 1 && t.chars().all(|c| c.is_ascii_digit() || c == '.' || c == '-'))
            .collect();
        let (mut pair, mut slot, mut block, mut ch) = (0u32, 0u32, 0u32, 0u32);
        let mut seen_ped = false;
        ids.iter()
            .map(|&id| {
                let t = Some(id);
                if numeric.get(id as usize).copied().unwrap_or(false) {
                    ch += 1;
                } else {
                    ch = 0;
                }
                if t == ped {
                    if seen_ped {
                        block += 1;
                    }
                    seen_ped = true;
                    pair = 0;
                    slot = 0;
                } else if t == goal {
                    block = caps[2];
                } else if t == open {
                    slot = 1;
                } else if t == next {
                    pair += 1;
                    slot = 1;
                } else if t == comma && slot == 1 {
                    slot = 2;
                } else if t == close {
                    slot = 0;
                    pair += 1;
                }
                [pair.min(caps[0]), slot.min(caps[1]), block.min(caps[2]), ch.min(caps[3])]
            })
            .collect()
    }

    /// Concatenates token strings, skipping special tokens.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        self.decode_ids(&seq.ids)
    }

    pub fn decode_ids(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id as usize >= SPECIALS)
            .filter_map(|&id| self.vocab.get(id as usize))
            .map(String::as_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string() {
        assert!(Tokenizer::default().tokenize("").unwrap().ids.is_empty());
    }

    #[test]
    fn oov_names_the_symbol() {
        match Tokenizer::default().tokenize("(1, 2) → (3, 4)") {
            Err(Error::OutOfVocabulary(c)) => assert_eq!(c, '→'),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn template_phrases_are_single_tokens() {
        let t = Tokenizer::default();
        let s = "Pedestrian 0 will arrive at coordinate (57, 95) after the next 12 frames.";
        let ids = t.tokenize(s).unwrap().ids;
        // "Pedestrian ", "0", phrase, "(", "5", "7", ", ", "9", "5", ")", phrase, "1", "2", " frames."
        assert_eq!(ids.len(), 14);
        assert_eq!(t.decode_ids(&ids), s);
    }

    #[test]
    fn serde_round_trip() {
        let t = Tokenizer::default();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn structure_tracks_pairs_and_slots() {
        let t = Tokenizer::default();
        let ids = t.tokenize("(1.5, 2), (3, 4)").unwrap().ids;
        let st = t.structure(&ids, [31, 2, 7, 8]);
        let shown: Vec<(String, [u32; 4])> = ids.iter().zip(st).map(|(&i, s)| (t.vocab()[i as usize].clone(), s)).collect();
        let want = [
            ("(", [0, 1, 0, 0]),
            ("1", [0, 1, 0, 1]),
            (".", [0, 1, 0, 2]),
            ("5", [0, 1, 0, 3]),
            (", ", [0, 2, 0, 0]),
            ("2", [0, 2, 0, 1]),
            ("), (", [1, 1, 0, 0]),
            ("3", [1, 1, 0, 1]),
            (", ", [1, 2, 0, 0]),
            ("4", [1, 2, 0, 1]),
            (")", [2, 0, 0, 0]),
        ];
        assert_eq!(shown.len(), want.len());
        for ((tok, s), (wt, ws)) in shown.iter().zip(want) {
            assert_eq!((tok.as_str(), *s), (wt, ws));
        }
        let ids = t.tokenize("Pedestrian 0: (1, 2). Pedestrian 3: (4, 5). Pedestrian 0 will arrive at coordinate (6, 7)").unwrap().ids;
        let st = t.structure(&ids, [31, 2, 7, 8]);
        assert_eq!(st[0][2], 0);
        assert_eq!(st[12][2], 1);
        assert_eq!(st.last().unwrap()[2], 7);
    }

    proptest! {
        #[test]
        fn round_trip(s in "[0-9a-zA-Z .,()?:-]{0,80}") {
            let t = Tokenizer::default();
            prop_assert_eq!(t.detokenize(&t.tokenize(&s).unwrap()), s);
        }
    }
}
