use std::collections::HashMap;
use std::io::BufRead;
use std::sync::Arc;

use crate::corpus::{ItemId, ItemVocab, Session, SessionDataset, Split};
use crate::error::{Result, SruError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEvent {
    pub token: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSession {
    pub id: String,
    pub events: Vec<RawEvent>,
}

/// Parsed interaction log, grouped by session in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawLog {
    pub sessions: Vec<RawSession>,
}

impl RawLog {
    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sessions.iter().map(|s| s.events.len()).sum()
    }
}

/// Reads `session_id \t item_token \t timestamp` lines.
///
/// Each session's events are sorted by timestamp; ties keep input order.
/// Blank lines are ignored.
pub fn ingest_log<R: BufRead>(reader: R) -> Result<RawLog> {
    let mut order: HashMap<String, usize> = HashMap::new();
    let mut sessions: Vec<RawSession> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(SruError::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (sid, token, ts) = (fields[0], fields[1], fields[2].trim());
        if sid.is_empty() || token.is_empty() {
            return Err(SruError::Parse {
                line: lineno,
                message: "empty session id or item token".into(),
            });
        }
        let timestamp: i64 = ts.parse().map_err(|_| SruError::Parse {
            line: lineno,
            message: format!("timestamp `{ts}` is not a decimal integer"),
        })?;
        let slot = *order.entry(sid.to_string()).or_insert_with(|| {
            sessions.push(RawSession {
                id: sid.to_string(),
                events: Vec::new(),
            });
            sessions.len() - 1
        });
        sessions[slot].events.push(RawEvent {
            token: token.to_string(),
            timestamp,
        });
    }
    for s in &mut sessions {
        s.events.sort_by_key(|e| e.timestamp);
    }
    Ok(RawLog { sessions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    /// Filter items by count once, then sessions by length once.
    SinglePass,
    /// Repeat the single pass until nothing changes.
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PreprocessConfig {
    pub min_count: usize,
    pub max_len: usize,
    pub mode: FilterMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_count: 5,
            max_len: 10,
            mode: FilterMode::SinglePass,
        }
    }
}

fn filter_pass(sessions: Vec<RawSession>, cfg: &PreprocessConfig) -> Vec<RawSession> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &sessions {
        for e in &s.events {
            *counts.entry(e.token.as_str()).or_default() += 1;
        }
    }
    let keep: std::collections::HashSet<String> = counts
        .into_iter()
        .filter(|&(_, c)| c >= cfg.min_count)
        .map(|(t, _)| t.to_string())
        .collect();
    let min_len = cfg.min_count.max(2);
    sessions
        .into_iter()
        .filter_map(|mut s| {
            s.events.retain(|e| keep.contains(&e.token));
            if s.events.len() < min_len {
                return None;
            }
            let cut = s.events.len().saturating_sub(cfg.max_len);
            s.events.drain(..cut);
            Some(s)
        })
        .collect()
}

/// Core filtering, truncation to the last `max_len` items, and vocabulary
/// construction over the surviving items (ids in order of first appearance).
pub fn preprocess(raw: &RawLog, cfg: &PreprocessConfig) -> Result<SessionDataset> {
    if cfg.max_len < 2 {
        return Err(SruError::contract("max_len must be at least 2"));
    }
    let mut sessions = filter_pass(raw.sessions.clone(), cfg);
    if cfg.mode == FilterMode::Iterative {
        loop {
            let before: usize = sessions.iter().map(|s| s.events.len()).sum();
            sessions = filter_pass(sessions, cfg);
            let after: usize = sessions.iter().map(|s| s.events.len()).sum();
            if before == after {
                break;
            }
        }
    }
    if sessions.is_empty() {
        return Err(SruError::EmptyDataset {
            stage: "preprocessing",
        });
    }
    let mut tokens = Vec::new();
    let mut index: HashMap<&str, ItemId> = HashMap::new();
    for s in &sessions {
        for e in &s.events {
            if !index.contains_key(e.token.as_str()) {
                tokens.push(e.token.clone());
                index.insert(e.token.as_str(), tokens.len() as ItemId);
            }
        }
    }
    let out: Vec<Session> = sessions
        .iter()
        .map(|s| Session {
            id: s.id.clone(),
            items: s.events.iter().map(|e| index[e.token.as_str()]).collect(),
            timestamps: s.events.iter().map(|e| e.timestamp).collect(),
            label: None,
        })
        .collect();
    drop(index);
    let vocab = Arc::new(ItemVocab::from_tokens(tokens)?);
    SessionDataset::new(out, vocab, Split::Full, cfg.max_len)
}

/// Converts a dataset back to raw external tokens.
pub fn to_raw(dataset: &SessionDataset) -> RawLog {
    RawLog {
        sessions: dataset
            .sessions
            .iter()
            .map(|s| RawSession {
                id: s.id.clone(),
                events: s
                    .items
                    .iter()
                    .zip(&s.timestamps)
                    .map(|(&item, &timestamp)| RawEvent {
                        token: dataset.vocab.token(item).unwrap_or_default().to_string(),
                        timestamp,
                    })
                    .collect(),
            })
            .collect(),
    }
}
