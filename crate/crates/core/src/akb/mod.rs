//! Adaptive knowledge base: expert tips, their indexes and retrieval.
//!
//! Retrieval is a three-stage cascade. Stage `url` takes every tip with a URL
//! pattern matching the page; stage `keyword` scores the rest by
//! inverse-frequency-weighted keyword overlap with the goal and the top of the
//! accessibility tree; stage `embedding` ranks whatever is left by cosine
//! similarity. Results are concatenated in stage order and cut to `limit`.

pub mod embed;
pub mod pattern;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{Action, ActionPattern};
use crate::model::{Goal, Observation};
pub use embed::{cosine, embedding_digest, Embedder, HashedTrigramEmbedder, HttpEmbedder};
pub use pattern::{glob_match, match_url, BadPattern, UrlPattern};
pub use store::{AkbDocument, AkbStore, AKB_VERSION};

/// Lines of the accessibility tree that count as the "top region" for keyword search.
pub const AX_TOP_LINES: usize = 60;

pub const DEFAULT_RETRIEVAL_LIMIT: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AkbError {
    #[error("knowledge base is frozen")]
    Frozen,
    #[error("tip id {0:?} already exists")]
    DuplicateId(String),
    #[error("invalid tip {id:?}: {reason}")]
    InvalidTip { id: String, reason: String },
    #[error("no tip with id {0:?}")]
    NotFound(String),
    #[error("embedding failed: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardRule {
    Forbid,
    Require,
}

/// Machine-checkable part of a tip: on pages matching `when_url`, the agent's
/// action must (require) or must not (forbid) match `action`.
///
/// `take_note` and `calculate` never violate a `require` guard since they do
/// not touch the page.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guard {
    pub when_url: String,
    pub rule: GuardRule,
    pub action: ActionPattern,
}

impl Guard {
    pub fn violation(&self, planned: &Action, url: &str) -> Option<String> {
        if !glob_match(&self.when_url, url) {
            return None;
        }
        match self.rule {
            GuardRule::Forbid if self.action.matches(planned) => {
                Some(format!("`{planned}` is not allowed on pages matching {}", self.when_url))
            }
            GuardRule::Require if !planned.is_env_neutral() && !self.action.matches(planned) => Some(format!(
                "on pages matching {} the action should match `{}`, but `{planned}` was taken",
                self.when_url, self.action
            )),
            _ => None,
        }
    }
}

/// One expert tip, following the Scope / Action / Constraint / Goal Alignment template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTip {
    pub id: String,
    pub domain_label: String,
    pub scope: String,
    pub action_guidance: String,
    #[serde(default)]
    pub constraint: String,
    #[serde(default)]
    pub goal_alignment: String,
    #[serde(default)]
    pub url_patterns: Vec<String>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<Guard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_failure_id: Option<String>,
    #[serde(default)]
    pub created_at: String,
}

impl KnowledgeTip {
    pub fn validate(&self) -> Result<(), AkbError> {
        let invalid = |reason: String| AkbError::InvalidTip { id: self.id.clone(), reason };
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(invalid("id must be non-empty and use only [A-Za-z0-9._-]".into()));
        }
        if self.domain_label.trim().is_empty() {
            return Err(invalid("domain_label is empty".into()));
        }
        if self.scope.trim().is_empty() {
            return Err(invalid("scope is empty".into()));
        }
        if self.action_guidance.trim().is_empty() {
            return Err(invalid("action_guidance is empty".into()));
        }
        if self.url_patterns.is_empty() && self.keywords.is_empty() {
            return Err(invalid("needs at least one url pattern or keyword".into()));
        }
        for p in &self.url_patterns {
            UrlPattern::parse(p).map_err(|e| invalid(e.to_string()))?;
        }
        for k in &self.keywords {
            if query_terms(k).collect::<Vec<_>>() != [k.as_str()] {
                return Err(invalid(format!("keyword {k:?} must be a single lowercase term")));
            }
        }
        if let Some(g) = &self.guard {
            UrlPattern::parse(&g.when_url).map_err(|e| invalid(format!("guard: {e}")))?;
        }
        Ok(())
    }

    /// Text compared against the query in the embedding stage.
    pub fn embedding_text(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.scope,
            self.action_guidance,
            self.constraint,
            self.goal_alignment,
            self.keywords.join(" ")
        )
    }

    /// Best specificity among URL patterns matching `url`, if any match.
    pub fn url_match_score(&self, url: &str) -> Option<usize> {
        self.url_patterns
            .iter()
            .filter(|p| glob_match(p, url))
            .map(|p| p.chars().filter(|c| *c != '*' && *c != '?').count())
            .max()
    }
}

/// Lowercased alphanumeric runs of two or more characters.
pub fn query_terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Url,
    Keyword,
    Embedding,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Url => "url",
            Stage::Keyword => "keyword",
            Stage::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedTip {
    pub tip: KnowledgeTip,
    pub stage: Stage,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySnapshot {
    pub url: String,
    /// Query terms that occur in the keyword index, sorted.
    pub keywords: Vec<String>,
    pub embedding_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedKnowledge {
    pub items: Vec<RetrievedTip>,
    pub query: QuerySnapshot,
}

impl RetrievedKnowledge {
    pub fn empty(url: impl Into<String>) -> Self {
        RetrievedKnowledge {
            items: Vec::new(),
            query: QuerySnapshot { url: url.into(), keywords: Vec::new(), embedding_digest: String::new() },
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn tips(&self) -> impl Iterator<Item = &KnowledgeTip> {
        self.items.iter().map(|i| &i.tip)
    }
}

fn rank(items: &mut [RetrievedTip]) {
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tip.id.cmp(&b.tip.id)));
}

/// The tip set with its keyword index and cached embeddings.
#[derive(Clone)]
pub struct KnowledgeBase {
    tips: BTreeMap<String, KnowledgeTip>,
    frozen: bool,
    keyword_index: BTreeMap<String, BTreeSet<String>>,
    embeddings: BTreeMap<String, Vec<f32>>,
    embedder: Arc<dyn Embedder>,
}

impl fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeBase")
            .field("tips", &self.tips.len())
            .field("frozen", &self.frozen)
            .field("embedder", &self.embedder.id())
            .finish()
    }
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        KnowledgeBase::new(Arc::new(HashedTrigramEmbedder::default()))
    }
}

impl KnowledgeBase {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        KnowledgeBase {
            tips: BTreeMap::new(),
            frozen: false,
            keyword_index: BTreeMap::new(),
            embeddings: BTreeMap::new(),
            embedder,
        }
    }

    /// Builds a kb holding `tips`, optionally frozen afterwards.
    pub fn from_tips(tips: impl IntoIterator<Item = KnowledgeTip>, frozen: bool) -> Result<Self, AkbError> {
        let mut kb = KnowledgeBase::default();
        for t in tips {
            kb.add_tip(t)?;
        }
        kb.frozen = frozen;
        Ok(kb)
    }

    /// The shipped expert corpus.
    pub fn seed() -> Self {
        KnowledgeBase::from_tips(seed_corpus(), false).expect("seed corpus is valid")
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.tips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tips.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeTip> {
        self.tips.get(id)
    }

    pub fn tips(&self) -> impl Iterator<Item = &KnowledgeTip> {
        self.tips.values()
    }

    pub fn keyword_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.keyword_index
    }

    /// Index recomputed from the tip set alone.
    pub fn rebuild_index(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut idx: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for t in self.tips.values() {
            for k in &t.keywords {
                idx.entry(k.clone()).or_default().insert(t.id.clone());
            }
        }
        idx
    }

    pub fn domain_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for t in self.tips.values() {
            *out.entry(t.domain_label.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn add_tip(&mut self, tip: KnowledgeTip) -> Result<(), AkbError> {
        if self.frozen {
            return Err(AkbError::Frozen);
        }
        tip.validate()?;
        if self.tips.contains_key(&tip.id) {
            return Err(AkbError::DuplicateId(tip.id));
        }
        self.insert(tip)
    }

    pub fn update_tip(&mut self, tip: KnowledgeTip) -> Result<(), AkbError> {
        if self.frozen {
            return Err(AkbError::Frozen);
        }
        tip.validate()?;
        if !self.tips.contains_key(&tip.id) {
            return Err(AkbError::NotFound(tip.id));
        }
        self.unindex(&tip.id);
        self.insert(tip)
    }

    pub fn remove_tip(&mut self, id: &str) -> Result<KnowledgeTip, AkbError> {
        if self.frozen {
            return Err(AkbError::Frozen);
        }
        if !self.tips.contains_key(id) {
            return Err(AkbError::NotFound(id.to_string()));
        }
        self.unindex(id);
        self.embeddings.remove(id);
        Ok(self.tips.remove(id).expect("checked above"))
    }

    fn insert(&mut self, tip: KnowledgeTip) -> Result<(), AkbError> {
        let v = self.embedder.embed(&tip.embedding_text()).map_err(|e| AkbError::Embedding(e.0))?;
        for k in &tip.keywords {
            self.keyword_index.entry(k.clone()).or_default().insert(tip.id.clone());
        }
        self.embeddings.insert(tip.id.clone(), v);
        self.tips.insert(tip.id.clone(), tip);
        Ok(())
    }

    fn unindex(&mut self, id: &str) {
        let Some(old) = self.tips.get(id) else { return };
        for k in &old.keywords {
            if let Some(set) = self.keyword_index.get_mut(k) {
                set.remove(id);
                if set.is_empty() {
                    self.keyword_index.remove(k);
                }
            }
        }
    }

    /// Runs the url → keyword → embedding cascade for one step.
    pub fn retrieve(&self, obs: &Observation, goal: &Goal, limit: usize) -> RetrievedKnowledge {
        let limit = limit.max(1);
        let mut taken: BTreeSet<String> = BTreeSet::new();

        let mut url_stage: Vec<RetrievedTip> = self
            .tips
            .values()
            .filter_map(|t| {
                t.url_match_score(&obs.url)
                    .map(|s| RetrievedTip { tip: t.clone(), stage: Stage::Url, score: s as f64 })
            })
            .collect();
        rank(&mut url_stage);
        taken.extend(url_stage.iter().map(|r| r.tip.id.clone()));

        let top: String = obs.ax_tree.lines().take(AX_TOP_LINES).collect::<Vec<_>>().join("\n");
        let query: BTreeSet<String> = query_terms(&goal.instruction)
            .chain(query_terms(&top))
            .filter(|t| self.keyword_index.contains_key(t))
            .collect();
        let n = self.tips.len() as f64;
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        for term in &query {
            let ids = &self.keyword_index[term];
            let idf = (1.0 + n / ids.len() as f64).ln();
            for id in ids {
                if !taken.contains(id) {
                    *scores.entry(id.as_str()).or_insert(0.0) += idf;
                }
            }
        }
        let mut keyword_stage: Vec<RetrievedTip> = scores
            .into_iter()
            .map(|(id, score)| RetrievedTip { tip: self.tips[id].clone(), stage: Stage::Keyword, score })
            .collect();
        rank(&mut keyword_stage);
        taken.extend(keyword_stage.iter().map(|r| r.tip.id.clone()));

        let query_text = format!("{} {}", obs.url, goal.instruction);
        let (embedding_stage, digest) = match self.embedder.embed(&query_text) {
            Ok(qv) => {
                let mut stage: Vec<RetrievedTip> = self
                    .tips
                    .values()
                    .filter(|t| !taken.contains(&t.id))
                    .map(|t| RetrievedTip {
                        tip: t.clone(),
                        stage: Stage::Embedding,
                        score: cosine(&qv, &self.embeddings[&t.id]),
                    })
                    .collect();
                rank(&mut stage);
                (stage, embedding_digest(&qv))
            }
            Err(e) => {
                log::warn!("embedding stage skipped: {e}");
                (Vec::new(), String::new())
            }
        };

        let items = url_stage
            .into_iter()
            .chain(keyword_stage)
            .chain(embedding_stage)
            .take(limit)
            .collect();
        RetrievedKnowledge {
            items,
            query: QuerySnapshot { url: obs.url.clone(), keywords: query.into_iter().collect(), embedding_digest: digest },
        }
    }

    /// [`retrieve`](Self::retrieve) over many queries, in parallel when the
    /// `parallel` feature is on. Output order matches input order.
    pub fn retrieve_batch(&self, queries: &[(Observation, Goal)], limit: usize) -> Vec<RetrievedKnowledge> {
        crate::par::map(queries, |(obs, goal)| self.retrieve(obs, goal, limit))
    }

    pub fn to_document(&self) -> AkbDocument {
        AkbDocument { v: AKB_VERSION, frozen: self.frozen, tips: self.tips.values().cloned().collect() }
    }

    pub fn from_document(doc: AkbDocument, embedder: Arc<dyn Embedder>) -> Result<Self, AkbError> {
        let mut kb = KnowledgeBase::new(embedder);
        for t in doc.tips {
            kb.add_tip(t)?;
        }
        kb.frozen = doc.frozen;
        Ok(kb)
    }
}

const SEED_JSON: &str = include_str!("../../data/akb_seed.json");

/// Tips shipped with the crate, grouped by site domain.
pub fn seed_corpus() -> Vec<KnowledgeTip> {
    let doc: AkbDocument = serde_json::from_str(SEED_JSON).expect("embedded seed corpus parses");
    doc.tips
}
