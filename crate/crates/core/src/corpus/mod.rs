//! Session corpora: vocabulary, sessions, ingestion, preprocessing, splits
//! and synthetic generation.

mod ingest;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, SruError};

pub use ingest::{ingest_log, preprocess, to_raw, FilterMode, PreprocessConfig, RawEvent, RawLog, RawSession};
pub use split::{drop_unseen_items, split, SplitRatios};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Internal item identifier. `0` is reserved for padding.
pub type ItemId = u32;

pub const PAD: ItemId = 0;

/// Bijection between external item tokens and dense internal ids `1..=|V|`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemVocab {
    tokens: Vec<String>,
    index: HashMap<String, ItemId>,
}

impl ItemVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), (i + 1) as ItemId).is_some() {
                return Err(SruError::contract(format!("duplicate item token `{tok}`")));
            }
        }
        Ok(ItemVocab { tokens, index })
    }

    /// Number of real items `|V|` (padding excluded).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<ItemId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: ItemId) -> Option<&str> {
        if id == PAD {
            return None;
        }
        self.tokens.get(id as usize - 1).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Which part of the corpus a dataset holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Unsplit corpus straight out of preprocessing or the generator.
    Full,
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => Split::Full,
            "train" => Split::Train,
            "validation" => Split::Validation,
            "test" => Split::Test,
            _ => return None,
        })
    }
}

/// One interaction session. Items are in chronological order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub items: Vec<ItemId>,
    pub timestamps: Vec<i64>,
    /// Ground-truth cluster for synthetic data.
    pub label: Option<u32>,
}

impl Session {
    pub fn new(id: impl Into<String>, items: Vec<ItemId>) -> Self {
        let timestamps = (0..items.len() as i64).collect();
        Session {
            id: id.into(),
            items,
            timestamps,
            label: None,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// A collection of sessions over a shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionDataset {
    pub sessions: Vec<Session>,
    pub vocab: Arc<ItemVocab>,
    pub split: Split,
    pub max_len: usize,
}

impl SessionDataset {
    pub fn new(
        sessions: Vec<Session>,
        vocab: Arc<ItemVocab>,
        split: Split,
        max_len: usize,
    ) -> Result<Self> {
        let ds = SessionDataset {
            sessions,
            vocab,
            split,
            max_len,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Dataset over the same vocabulary with different sessions.
    pub fn derive(&self, sessions: Vec<Session>, split: Split) -> Self {
        SessionDataset {
            sessions,
            vocab: Arc::clone(&self.vocab),
            split,
            max_len: self.max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    /// Number of (prefix, next item) training pairs.
    pub fn num_pairs(&self) -> usize {
        self.sessions.iter().map(|s| s.len().saturating_sub(1)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 2 {
            return Err(SruError::contract("max_len must be at least 2"));
        }
        let bound = self.vocab.len() + 1;
        for s in &self.sessions {
            if s.items.len() != s.timestamps.len() {
                return Err(SruError::contract(format!(
                    "session `{}` has {} items but {} timestamps",
                    s.id,
                    s.items.len(),
                    s.timestamps.len()
                )));
            }
            if s.timestamps.windows(2).any(|w| w[0] > w[1]) {
                return Err(SruError::contract(format!(
                    "session `{}` timestamps decrease",
                    s.id
                )));
            }
            for &item in &s.items {
                if item == PAD || item as usize >= bound {
                    return Err(SruError::Index {
                        what: "item",
                        index: item as usize,
                        bound,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn same_vocab(&self, other: &SessionDataset) -> bool {
        Arc::ptr_eq(&self.vocab, &other.vocab) || self.vocab == other.vocab
    }
}

/// Right-aligned padded copy of the last `max_len` items.
/// Padding is applied only at consumption time.
pub fn pad_left(items: &[ItemId], max_len: usize) -> Vec<ItemId> {
    let tail = &items[items.len().saturating_sub(max_len)..];
    let mut out = vec![PAD; max_len - tail.len()];
    out.extend_from_slice(tail);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_rejects_duplicates_and_reserves_pad() {
        assert!(ItemVocab::from_tokens(vec!["a".into(), "a".into()]).is_err());
        let v = ItemVocab::from_tokens(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.token(PAD), None);
        assert_eq!(v.token(3), None);
        assert_eq!(v.id("b"), Some(2));
    }

    #[test]
    fn padding_is_left_aligned() {
        assert_eq!(pad_left(&[4, 5], 4), vec![0, 0, 4, 5]);
        assert_eq!(pad_left(&[1, 2, 3, 4, 5], 3), vec![3, 4, 5]);
    }

    #[test]
    fn validate_catches_out_of_range_items() {
        let vocab = Arc::new(ItemVocab::from_tokens(vec!["a".into()]).unwrap());
        let bad = SessionDataset::new(vec![Session::new("s", vec![1, 2])], vocab, Split::Full, 10);
        assert!(matches!(bad, Err(SruError::Index { .. })));
    }

    proptest! {
        #[test]
        fn vocab_round_trips(n in 1usize..200) {
            let tokens: Vec<String> = (0..n).map(|i| format!("tok{i}")).collect();
            let v = ItemVocab::from_tokens(tokens.clone()).unwrap();
            for (i, t) in tokens.iter().enumerate() {
                let id = (i + 1) as ItemId;
                prop_assert_eq!(v.id(t), Some(id));
                prop_assert_eq!(v.token(id), Some(t.as_str()));
            }
        }
    }
}
