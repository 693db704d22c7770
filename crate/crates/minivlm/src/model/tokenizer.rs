//! Word-level tokenizer and vocabulary.
//!
//! Captions in this pipeline are short English templates, so the tokenizer
//! is deliberately plain: lowercase, split on anything that is not a letter
//! or digit, and look each word up in a vocabulary built from the training
//! corpus. Four control ids are reserved at the bottom of every vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Padding id (unused by the encoder itself; kept for corpus tooling).
pub const PAD_ID: u32 = 0;
/// Beginning-of-sequence id; every encoded caption starts with it.
pub const BOS_ID: u32 = 1;
/// End-of-sequence id; the text tower pools at this position.
pub const EOS_ID: u32 = 2;
/// Id that any out-of-vocabulary word maps to.
pub const UNK_ID: u32 = 3;
/// Number of reserved ids preceding the first corpus word.
pub const RESERVED_TOKENS: usize = 4;

const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

/// Token ↔ id mapping with the four reserved control tokens at ids 0–3.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

impl Vocab {
    /// Builds a vocabulary from an iterator of captions. Words are assigned
    /// ids in alphabetical order after the reserved range, so the same
    /// corpus always yields the same vocabulary.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(captions: I) -> Self {
        let mut words: Vec<String> = captions
            .into_iter()
            .flat_map(|c| split_words(c))
            .collect();
        words.sort_unstable();
        words.dedup();

        let mut id_to_token: Vec<String> =
            RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    /// Builds a vocabulary whose corpus words keep the given order — the
    /// caller decides ranking (e.g. by descending frequency). Reserved
    /// tokens still come first; duplicates are rejected.
    pub fn from_ordered<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut id_to_token: Vec<String> =
            RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word `{tok}`")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    /// Total id count, reserved tokens included. Use this as the model's
    /// `vocab_size`.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        // Reserved ids are always present.
        false
    }

    /// Id for a word, or `UNK_ID` if the word is out of vocabulary.
    pub fn id(&self, word: &str) -> u32 {
        self.token_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Token string for an id, if the id is in range.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Encodes a caption as `[BOS] words… [EOS]`, truncating the words to
    /// fit `max_len` when necessary. An empty caption encodes as the lone
    /// BOS token. Returns the ids and whether truncation happened.
    pub fn encode(&self, text: &str, max_len: usize) -> (Vec<u32>, bool) {
        let words = split_words(text);
        if words.is_empty() {
            return (vec![BOS_ID], false);
        }
        let budget = max_len.saturating_sub(2); // room for BOS and EOS
        let truncated = words.len() > budget;
        let mut ids = Vec::with_capacity(words.len().min(budget) + 2);
        ids.push(BOS_ID);
        ids.extend(words.iter().take(budget).map(|w| self.id(w)));
        ids.push(EOS_ID);
        (ids, truncated)
    }

    /// Writes the vocabulary as `token<TAB>id` lines, one per id, in id
    /// order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (i, tok) in self.id_to_token.iter().enumerate() {
            writeln!(out, "{tok}\t{i}").expect("write to Vec cannot fail");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a vocabulary written by [`Vocab::save`]. Ids must be dense and
    /// in order, with the reserved tokens first.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut id_to_token = Vec::new();
        for (line_no, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!(
                    "vocab line {} has no tab separator",
                    line_no + 1
                ))
            })?;
            let id: usize = id.parse().map_err(|_| {
                Error::Format(format!("vocab line {} has a bad id", line_no + 1))
            })?;
            if id != id_to_token.len() {
                return Err(Error::Format(format!(
                    "vocab ids out of order: expected {}, found {id}",
                    id_to_token.len()
                )));
            }
            id_to_token.push(tok.to_owned());
        }
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*name) {
                return Err(Error::Format(format!(
                    "vocab is missing reserved token {name} at id {i}"
                )));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_lowercases_and_drops_punctuation() {
        assert_eq!(
            split_words("An aerial image of 3 Storage-Tanks."),
            vec!["an", "aerial", "image", "of", "3", "storage", "tanks"]
        );
    }

    #[test]
    fn build_assigns_alphabetical_ids_after_reserved() {
        let v = Vocab::build(["b a", "c a"]);
        assert_eq!(v.len(), RESERVED_TOKENS + 3);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), 6);
        assert_eq!(v.id("zebra"), UNK_ID);
    }

    #[test]
    fn encode_wraps_with_bos_eos_and_truncates() {
        let v = Vocab::build(["a b c d e"]);
        let (ids, truncated) = v.encode("a b", 16);
        assert_eq!(ids, vec![BOS_ID, 4, 5, EOS_ID]);
        assert!(!truncated);

        let (ids, truncated) = v.encode("a b c d e", 5);
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
        assert!(truncated);
    }

    #[test]
    fn empty_caption_is_a_lone_bos() {
        let v = Vocab::build(["a"]);
        let (ids, truncated) = v.encode("", 16);
        assert_eq!(ids, vec![BOS_ID]);
        assert!(!truncated);
        // Punctuation-only text tokenizes to nothing as well.
        let (ids, _) = v.encode("?!", 16);
        assert_eq!(ids, vec![BOS_ID]);
    }

    #[test]
    fn vocab_round_trips_through_tsv() {
        let v = Vocab::build(["runway beside two hangars"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        for id in 0..v.len() as u32 {
            assert_eq!(loaded.token(id), v.token(id));
        }
    }
}
