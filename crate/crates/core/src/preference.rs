//! Preference records: direct instructions, preferences summarized from
//! scene adjustments, and profile records compressed from both.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::llm_backend::{CallError, Caller, Focus, PromptInput, Stage, StagePayload};
use crate::scene_graph::{RelationChange, SceneGraph};

pub const DEFAULT_TOKEN_BUDGET: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreferenceSource {
    Instruction,
    Adjustment,
    Profile,
}

impl PreferenceSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PreferenceSource::Instruction => "instruction",
            PreferenceSource::Adjustment => "adjustment",
            PreferenceSource::Profile => "profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub id: String,
    pub text: String,
    pub source: PreferenceSource,
    #[serde(default)]
    pub scope_tags: Vec<String>,
    pub created_at: u64,
    #[serde(default)]
    pub derived_from: Vec<String>,
    /// Scene diff an adjustment record was summarized from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<RelationChange>,
    /// Predicate tags reported by the summarizer (`no_stacking`, ...).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predicate_tags: Vec<String>,
    /// Archived records stay retrievable but are no longer prompted.
    #[serde(default)]
    pub archived: bool,
}

impl PreferenceRecord {
    pub fn token_estimate(&self) -> usize {
        estimate_tokens(&self.text)
    }
}

/// ⌈chars / 4⌉.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

const SCOPE_KEYWORDS: &[(&str, &[&str])] = &[
    ("tidy", &["tidy", "table", "laid flat", "stack", "shelf", "desk", "organize", "neat"]),
    ("clean", &["clean", "wipe", "wash", "dish", "sink", "counter", "dust"]),
    ("pack_unpack", &["pack", "suitcase", "backpack", "lunchbox", "bag", "bed", "sleep"]),
    ("load_unload", &["load", "cart", "trunk", "car", "container", "crate"]),
];

/// Task types a preference text applies to, by keyword.
pub fn scope_tags(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    SCOPE_KEYWORDS
        .iter()
        .filter(|(_, words)| words.iter().any(|w| contains_word(&lower, w)))
        .map(|(tag, _)| tag.to_string())
        .collect()
}

/// Phrase match on word boundaries; a plural `s` or `es` is allowed.
pub fn contains_word(haystack: &str, phrase: &str) -> bool {
    let bytes = haystack.as_bytes();
    let mut start = 0;
    while let Some(pos) = haystack[start..].find(phrase) {
        let i = start + pos;
        let j = i + phrase.len();
        let left_ok = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let right_ok = word_ends(bytes, j);
        if left_ok && right_ok {
            return true;
        }
        start = i + 1;
    }
    false
}

/// True when a word may end at `j`, possibly after a plural suffix.
pub fn word_ends(bytes: &[u8], j: usize) -> bool {
    let boundary = |k: usize| bytes.get(k).is_none_or(|b| !b.is_ascii_alphanumeric());
    boundary(j)
        || (bytes[j] == b's' && boundary(j + 1))
        || (bytes[j] == b'e' && bytes.get(j + 1) == Some(&b's') && boundary(j + 2))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreferenceError {
    #[error("preference text is empty")]
    EmptyText,
    #[error("adjustment has no changes")]
    EmptyDiff,
    #[error("token estimate {estimate} does not exceed the budget {budget}")]
    BudgetNotExceeded { estimate: usize, budget: usize },
    #[error("profiling failed: {0}")]
    CompressionFailed(String),
    #[error("embedder failed: {0}")]
    Embedder(String),
    #[error(transparent)]
    Call(#[from] CallError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceStore {
    pub records: Vec<PreferenceRecord>,
    pub token_budget: usize,
    /// Set by an insert that pushed the estimate over budget; cleared by `profile`.
    #[serde(default)]
    pub profile_due: bool,
    #[serde(default)]
    pub next_id: u64,
}

impl Default for PreferenceStore {
    fn default() -> Self {
        Self::new(DEFAULT_TOKEN_BUDGET)
    }
}

impl PreferenceStore {
    pub fn new(token_budget: usize) -> Self {
        Self { records: Vec::new(), token_budget, profile_due: false, next_id: 1 }
    }

    /// Rebuilds a store from persisted records (the last version of each id).
    pub fn from_records(records: Vec<PreferenceRecord>, token_budget: usize) -> Self {
        let next_id = records
            .iter()
            .filter_map(|r| r.id.strip_prefix("pref-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |n| n + 1);
        let mut store = Self { records, token_budget, profile_due: false, next_id };
        store.profile_due = store.needs_profile();
        store
    }

    pub fn get(&self, id: &str) -> Option<&PreferenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    fn allocate_id(&mut self) -> String {
        let id = format!("pref-{}", self.next_id);
        self.next_id += 1;
        id
    }

    fn insert(&mut self, mut record: PreferenceRecord) -> PreferenceRecord {
        record.id = self.allocate_id();
        self.records.push(record.clone());
        if self.needs_profile() {
            self.profile_due = true;
        }
        record
    }

    /// Stores a direct instruction.
    pub fn ingest_instruction(&mut self, text: &str, now: u64) -> Result<PreferenceRecord, PreferenceError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(PreferenceError::EmptyText);
        }
        Ok(self.insert(PreferenceRecord {
            id: String::new(),
            text: text.to_string(),
            source: PreferenceSource::Instruction,
            scope_tags: scope_tags(text),
            created_at: now,
            derived_from: Vec::new(),
            evidence: Vec::new(),
            predicate_tags: Vec::new(),
            archived: false,
        }))
    }

    /// Stores an already summarized adjustment preference.
    pub fn insert_adjustment(
        &mut self,
        text: &str,
        predicate_tags: Vec<String>,
        evidence: Vec<RelationChange>,
        now: u64,
    ) -> Result<PreferenceRecord, PreferenceError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(PreferenceError::EmptyText);
        }
        if evidence.is_empty() {
            return Err(PreferenceError::EmptyDiff);
        }
        Ok(self.insert(PreferenceRecord {
            id: String::new(),
            text: text.to_string(),
            source: PreferenceSource::Adjustment,
            scope_tags: scope_tags(text),
            created_at: now,
            derived_from: Vec::new(),
            evidence,
            predicate_tags,
            archived: false,
        }))
    }

    /// Prompt order: profiles first, then raw records, newest first within each.
    pub fn active(&self) -> Vec<&PreferenceRecord> {
        let mut out: Vec<(usize, &PreferenceRecord)> =
            self.records.iter().enumerate().filter(|(_, r)| !r.archived).collect();
        out.sort_by(|(ia, a), (ib, b)| {
            let pa = a.source != PreferenceSource::Profile;
            let pb = b.source != PreferenceSource::Profile;
            pa.cmp(&pb).then(b.created_at.cmp(&a.created_at)).then(ib.cmp(ia))
        });
        out.into_iter().map(|(_, r)| r).collect()
    }

    pub fn active_cloned(&self) -> Vec<PreferenceRecord> {
        self.active().into_iter().cloned().collect()
    }

    pub fn token_estimate(&self) -> usize {
        self.records.iter().filter(|r| !r.archived).map(PreferenceRecord::token_estimate).sum()
    }

    pub fn needs_profile(&self) -> bool {
        self.token_estimate() > self.token_budget
    }

    /// Compresses the active records into at most ⌈N/3⌉ profile records.
    /// Parents are archived. On failure the store is left unchanged.
    pub fn profile(&mut self, caller: &mut Caller<'_>, now: u64) -> Result<Vec<PreferenceRecord>, PreferenceError> {
        let estimate = self.token_estimate();
        if estimate <= self.token_budget {
            return Err(PreferenceError::BudgetNotExceeded { estimate, budget: self.token_budget });
        }
        let inputs = self.active_cloned();
        let ids: BTreeSet<&str> = inputs.iter().map(|r| r.id.as_str()).collect();
        let limit = inputs.len().div_ceil(3);
        let empty = SceneGraph::new();
        let prompt = PromptInput {
            scene: &empty,
            instruction: "",
            preferences: &[],
            feedback: &[],
            plan: None,
            focus: Focus::Records(&inputs),
        };
        let (items, _) = caller.call(Stage::Profile, &prompt, |p| {
            let StagePayload::Profile(items) = p else {
                return Err("expected a PROFILES block".into());
            };
            if items.is_empty() || items.len() > limit {
                return Err(format!("expected between 1 and {limit} profile records, got {}", items.len()));
            }
            let mut used = BTreeSet::new();
            for item in items {
                if item.parents.len() < 2 {
                    return Err("each profile record needs at least two parents".into());
                }
                for parent in &item.parents {
                    if !ids.contains(parent.as_str()) {
                        return Err(format!("unknown parent `{parent}`"));
                    }
                    if !used.insert(parent.as_str()) {
                        return Err(format!("parent `{parent}` used twice"));
                    }
                }
            }
            Ok(items.clone())
        })?;
        let snapshot = self.clone();
        let mut created = Vec::new();
        for item in items {
            for parent in &item.parents {
                if let Some(r) = self.records.iter_mut().find(|r| &r.id == parent) {
                    r.archived = true;
                }
            }
            let mut tags: Vec<String> = Vec::new();
            for parent in &item.parents {
                for t in &snapshot.get(parent).expect("validated").scope_tags {
                    if !tags.contains(t) {
                        tags.push(t.clone());
                    }
                }
            }
            let id = self.allocate_id();
            let record = PreferenceRecord {
                id,
                text: item.text,
                source: PreferenceSource::Profile,
                scope_tags: tags,
                created_at: now,
                derived_from: item.parents,
                evidence: Vec::new(),
                predicate_tags: Vec::new(),
                archived: false,
            };
            self.records.push(record.clone());
            created.push(record);
        }
        if self.needs_profile() {
            let estimate = self.token_estimate();
            *self = snapshot;
            return Err(PreferenceError::CompressionFailed(format!(
                "estimate {estimate} still exceeds budget {}",
                self.token_budget
            )));
        }
        self.profile_due = false;
        Ok(created)
    }

    /// Runs `profile` when an insert left the store over budget.
    pub fn maintain(&mut self, caller: &mut Caller<'_>, now: u64) -> Result<Vec<PreferenceRecord>, PreferenceError> {
        if self.profile_due && self.needs_profile() {
            self.profile(caller, now)
        } else {
            self.profile_due = false;
            Ok(Vec::new())
        }
    }
}

/// Summarizes a human scene edit into one preference and stores it.
pub fn extract_from_adjustment(
    store: &mut PreferenceStore,
    scene: &SceneGraph,
    changes: &[RelationChange],
    caller: &mut Caller<'_>,
    now: u64,
) -> Result<PreferenceRecord, PreferenceError> {
    if changes.is_empty() {
        return Err(PreferenceError::EmptyDiff);
    }
    let prompt = PromptInput {
        scene,
        instruction: "",
        preferences: &[],
        feedback: &[],
        plan: None,
        focus: Focus::Changes(changes),
    };
    let ((text, tags), _) = caller.call(Stage::SummarizeAdjustment, &prompt, |p| match p {
        StagePayload::Summary { text, tags } => Ok((text.clone(), tags.clone())),
        _ => Err("expected PREFERENCE and TAGS lines".into()),
    })?;
    store.insert_adjustment(&text, tags, changes.to_vec(), now)
}

// ---- similarity ----------------------------------------------------------------

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, PreferenceError>;
}

/// Offline embedder: lower-cased, punctuation-stripped word counts hashed
/// into `2^14` buckets.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedBagOfWords;

pub const HASH_DIMENSIONS: usize = 1 << 14;

/// Lower-cased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_string()).collect()
}

pub fn feature_index(token: &str) -> usize {
    use core::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() as usize) & (HASH_DIMENSIONS - 1)
}

impl Embedder for HashedBagOfWords {
    fn embed(&self, text: &str) -> Result<Vec<f64>, PreferenceError> {
        let mut v = alloc::vec![0.0; HASH_DIMENSIONS];
        for t in tokenize(text) {
            v[feature_index(&t)] += 1.0;
        }
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of the two texts' embeddings.
pub fn similarity(learned: &str, ground_truth: &str, embedder: &dyn Embedder) -> Result<f64, PreferenceError> {
    if learned.trim().is_empty() || ground_truth.trim().is_empty() {
        return Err(PreferenceError::EmptyText);
    }
    if learned == ground_truth {
        return Ok(1.0);
    }
    let a = embedder.embed(learned)?;
    let b = embedder.embed(ground_truth)?;
    if a.len() != b.len() {
        return Err(PreferenceError::Embedder(format!("dimension mismatch {} vs {}", a.len(), b.len())));
    }
    Ok(cosine(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tidy_preference_scope() {
        let mut s = PreferenceStore::default();
        let r = s
            .ingest_instruction("I prefer everything to be laid flat on the table rather than stacked together", 1)
            .unwrap();
        assert_eq!(r.scope_tags, alloc::vec!["tidy".to_string()]);
        assert_eq!(r.source, PreferenceSource::Instruction);
        assert_eq!(s.ingest_instruction("   ", 2), Err(PreferenceError::EmptyText));
        s.ingest_instruction("I prefer everything to be laid flat on the table rather than stacked together", 3)
            .unwrap();
        assert_eq!(s.records.len(), 2);
    }

    #[test]
    fn scope_words_respect_boundaries() {
        assert_eq!(scope_tags("put them in the cart"), alloc::vec!["load_unload".to_string()]);
        assert!(scope_tags("cartoon").is_empty());
        assert_eq!(scope_tags("keep the dishes dry"), alloc::vec!["clean".to_string()]);
    }

    #[test]
    fn active_order_profiles_then_recency() {
        let mut s = PreferenceStore::default();
        s.ingest_instruction("a", 1).unwrap();
        s.ingest_instruction("b", 5).unwrap();
        s.records.push(PreferenceRecord {
            id: "pref-9".into(),
            text: "p".into(),
            source: PreferenceSource::Profile,
            scope_tags: Vec::new(),
            created_at: 0,
            derived_from: alloc::vec!["x".into(), "y".into()],
            evidence: Vec::new(),
            predicate_tags: Vec::new(),
            archived: false,
        });
        let order: Vec<&str> = s.active().iter().map(|r| r.text.as_str()).collect();
        assert_eq!(order, ["p", "b", "a"]);
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens("abcde"), 2);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens(""), 0);
    }

    #[test]
    fn hashed_similarity_values() {
        let e = HashedBagOfWords;
        assert_eq!(similarity("no stacking", "no stacking", &e).unwrap(), 1.0);
        assert_eq!(similarity("red apple", "blue chair", &e).unwrap(), 0.0);
        let v = similarity("no stacking books", "avoid stacking the books", &e).unwrap();
        assert!((v - 2.0 / libm::sqrt(12.0)).abs() < 1e-12);
        assert_eq!(similarity("", "x", &e), Err(PreferenceError::EmptyText));
    }

    #[test]
    fn from_records_continues_ids() {
        let mut s = PreferenceStore::default();
        s.ingest_instruction("a", 1).unwrap();
        s.ingest_instruction("b", 2).unwrap();
        let mut t = PreferenceStore::from_records(s.records.clone(), s.token_budget);
        assert_eq!(t.ingest_instruction("c", 3).unwrap().id, "pref-3");
    }
}
