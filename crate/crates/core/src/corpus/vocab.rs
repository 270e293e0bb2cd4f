use std::collections::HashMap;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

const NOUNS: &[&str] = &[
    "hat", "shirt", "jacket", "pants", "shoes", "bag", "hair", "scarf", "belt", "gloves",
    "glasses", "socks", "coat", "skirt", "vest", "boots",
];

const COLORS: &[&str] = &[
    "red", "blue", "green", "black", "white", "yellow", "gray", "brown", "pink", "purple",
    "orange", "navy",
];

/// Token table with dense ids. Ids 0..3 are reserved for `[PAD]`, `[CLS]` and `[MASK]`.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD_ID: u32 = 0;
    pub const CLS_ID: u32 = 1;
    pub const MASK_ID: u32 = 2;
    pub const N_SPECIAL: u32 = 3;

    /// Builds a vocabulary from plain words, after the reserved tokens.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD.to_string(), CLS.to_string(), MASK.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from a full id-ordered token table (reserved tokens included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::N_SPECIAL as usize
            || tokens[0] != PAD
            || tokens[1] != CLS
            || tokens[2] != MASK
        {
            return Err(Error::Vocabulary(
                "ids 0, 1, 2 must be [PAD], [CLS], [MASK]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary for a corpus with `n_attributes` nouns and `n_values` colors.
    pub fn for_attributes(n_attributes: usize, n_values: usize) -> Result<Self> {
        let mut words: Vec<String> = (0..n_values).map(color_word).collect();
        words.extend((0..n_attributes).map(noun_word));
        Self::from_words(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown word {word:?}")))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < Self::N_SPECIAL
    }

    /// JSON id-to-string table.
    pub fn to_json(&self) -> Result<String> {
        let table: Vec<serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(id, tok)| serde_json::json!({ "id": id, "token": tok }))
            .collect();
        Ok(serde_json::to_string_pretty(&table)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            id: usize,
            token: String,
        }
        let mut entries: Vec<Entry> = serde_json::from_str(s)?;
        entries.sort_by_key(|e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id != i {
                return Err(Error::Vocabulary(format!("ids are not dense: missing {i}")));
            }
        }
        Self::from_tokens(entries.into_iter().map(|e| e.token).collect())
    }
}

pub fn noun_word(attribute: usize) -> String {
    NOUNS
        .get(attribute)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("item{attribute}"))
}

pub fn color_word(value: usize) -> String {
    COLORS
        .get(value)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("color{value}"))
}

/// Encodes words as `[CLS] w1 w2 ...`, truncated or padded with `[PAD]` to `max_len`.
///
/// Returns the ids and a flag per position that is `true` on padding.
pub fn encode_text<S: AsRef<str>>(
    vocab: &Vocab,
    words: &[S],
    max_len: usize,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(Vocab::CLS_ID);
    for w in words {
        let id = vocab.id(w.as_ref())?;
        if ids.len() < max_len {
            ids.push(id);
        }
    }
    let real = ids.len();
    ids.resize(max_len, Vocab::PAD_ID);
    let padding = (0..max_len).map(|i| i >= real).collect();
    Ok((ids, padding))
}
