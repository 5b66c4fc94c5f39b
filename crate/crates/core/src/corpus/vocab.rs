//! Vocabulary with reserved markers and frequency thresholding.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const OOV: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<oov>"];

/// Lowercase and split into word tokens; sentence punctuation becomes its
/// own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = String::new();
        for ch in lower.chars() {
            if matches!(ch, '.' | ',' | ':' | ';' | '?' | '!') {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Inverse of [`tokenize`] up to whitespace: punctuation tokens re-attach to
/// the preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut s = String::new();
    for t in tokens {
        let is_punct = t.len() == 1 && matches!(t.chars().next().unwrap(), '.' | ',' | ':' | ';' | '?' | '!');
        if !s.is_empty() && !is_punct {
            s.push(' ');
        }
        s.push_str(t);
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
    label_ids: BTreeSet<usize>,
    pub min_count: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    /// Token id for a word; unknown words map to [`OOV`].
    pub fn id_of(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(OOV)
    }

    pub fn word_of(&self, id: usize) -> &str {
        &self.id_to_word[id]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    pub fn is_label(&self, id: usize) -> bool {
        self.label_ids.contains(&id)
    }

    /// Diagnosis word ids in ascending id order.
    pub fn label_ids(&self) -> &BTreeSet<usize> {
        &self.label_ids
    }

    pub fn label_words(&self) -> Vec<&str> {
        self.label_ids.iter().map(|&i| self.word_of(i)).collect()
    }

    pub fn colon_id(&self) -> usize {
        self.id_of(":")
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id_of(w)).collect()
    }

    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.word_of(i).to_string()).collect()
    }
}

/// Build a vocabulary from raw description strings. The first token of each
/// description is its diagnosis word; diagnosis words are always retained
/// even below `min_count`. Remaining words are kept iff their corpus
/// frequency reaches `min_count`, ordered by frequency (desc) then
/// lexicographically.
pub fn build_vocabulary(descriptions: &[String], min_count: usize) -> Result<Vocabulary> {
    if descriptions.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    if min_count < 1 {
        return Err(Error::Corpus("min_count must be >= 1".into()));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut label_words: BTreeSet<String> = BTreeSet::new();
    for d in descriptions {
        let toks = tokenize(d);
        if let Some(first) = toks.first() {
            label_words.insert(first.clone());
        }
        for t in toks {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = freq
        .iter()
        .filter(|(w, &c)| c >= min_count || label_words.contains(*w))
        .map(|(w, &c)| (w.clone(), c))
        .collect();
    for w in &label_words {
        if freq.get(w).copied().unwrap_or(0) < min_count {
            eprintln!("corpus: label word `{w}` below min_count, retained");
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut id_to_word: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    id_to_word.extend(kept.into_iter().map(|(w, _)| w));
    let word_to_id: HashMap<String, usize> = id_to_word
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i))
        .collect();
    let label_ids: BTreeSet<usize> = label_words.iter().map(|w| word_to_id[w]).collect();
    Ok(Vocabulary {
        word_to_id,
        id_to_word,
        label_ids,
        min_count,
    })
}
