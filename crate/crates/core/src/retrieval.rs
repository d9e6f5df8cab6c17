//! Multi-path retrieval: a direct embedding query, a style/occasion query and
//! optional LLM-generated questions, each searched independently and merged
//! with reciprocal rank fusion.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{item_text, Catalog};
use crate::embedstore::{embed, DocFilter, DocKind, EmbeddingProvider, SearchHit, VectorIndex};
use crate::inference::{ChatBackend, ChatMessage, ChatRequest, ContextDoc, Role};

/// Rank offset of reciprocal rank fusion.
pub const RRF_K: f64 = 60.0;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query needs at least one item or free text")]
    EmptyQuery,
    #[error("k_per_path and k_final must be at least 1")]
    InvalidK,
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("every query path failed: {}", .0.join("; "))]
    AllPathsFailed(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Direct,
    StyleOccasion,
    AutoQuestion,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::Direct => "direct",
            PathKind::StyleOccasion => "style_occasion",
            PathKind::AutoQuestion => "auto_question",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryContext {
    #[serde(default)]
    pub query_items: Vec<String>,
    #[serde(default)]
    pub free_text: Option<String>,
    #[serde(default)]
    pub style: Option<String>,
    #[serde(default)]
    pub occasion: Option<String>,
    pub k_per_path: usize,
    pub k_final: usize,
}

impl QueryContext {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let has_text = self
            .free_text
            .as_deref()
            .is_some_and(|t| !t.trim().is_empty());
        if self.query_items.is_empty() && !has_text {
            return Err(RetrievalError::EmptyQuery);
        }
        if self.k_per_path == 0 || self.k_final == 0 {
            return Err(RetrievalError::InvalidK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPath {
    pub kind: PathKind,
    /// Unique within a plan: `direct`, `style_occasion`, `auto_question_1`, ...
    pub label: String,
    pub query_text: String,
    pub filter: Option<DocFilter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub paths: Vec<QueryPath>,
    /// Set when the LLM question step failed and was skipped.
    pub degraded: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerSettings {
    pub model: String,
    pub max_tokens: u32,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings {
            model: "fashion-llm".into(),
            max_tokens: 256,
        }
    }
}

fn non_empty(s: &Option<String>) -> Option<&str> {
    s.as_deref().map(str::trim).filter(|s| !s.is_empty())
}

/// Text of the style/occasion path, e.g.
/// `"casual outfit for brunch pairing with Floral-print pants"`.
pub fn style_occasion_text(style: Option<&str>, occasion: Option<&str>, titles: &[&str]) -> String {
    let mut s = match style {
        Some(st) => format!("{st} outfit"),
        None => "outfit".to_string(),
    };
    if let Some(oc) = occasion {
        s.push_str(&format!(" for {oc}"));
    }
    if !titles.is_empty() {
        s.push_str(&format!(" pairing with {}", titles.join(", ")));
    }
    s
}

fn list_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*•]+|\d+[.)])\s*").unwrap())
}

/// One retrieval question per non-empty line, with list markers removed.
pub fn parse_question_lines(text: &str, limit: usize) -> Vec<String> {
    text.lines()
        .map(|l| list_marker_re().replace(l.trim(), "").trim().to_string())
        .filter(|l| l.chars().any(char::is_alphanumeric))
        .take(limit)
        .collect()
}

/// Builds the query paths for `ctx`. The direct path is always present; the
/// style/occasion path appears when either label is set; one auto-question
/// path per question line appears when `llm` is given. A failing LLM only
/// degrades the plan.
pub fn plan_queries(
    ctx: &QueryContext,
    catalog: &Catalog,
    llm: Option<&dyn ChatBackend>,
    n_questions: usize,
    settings: &PlannerSettings,
) -> Result<QueryPlan, RetrievalError> {
    ctx.validate()?;
    let items = ctx
        .query_items
        .iter()
        .map(|id| {
            catalog
                .item(id)
                .ok_or_else(|| RetrievalError::UnknownItem(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut direct_parts: Vec<String> = items.iter().map(|it| item_text(it)).collect();
    if let Some(t) = non_empty(&ctx.free_text) {
        direct_parts.push(t.to_string());
    }
    let direct_text = direct_parts.join(" ");
    let mut plan = QueryPlan {
        paths: vec![QueryPath {
            kind: PathKind::Direct,
            label: PathKind::Direct.to_string(),
            query_text: direct_text.clone(),
            filter: None,
        }],
        degraded: false,
        warnings: Vec::new(),
    };

    let (style, occasion) = (non_empty(&ctx.style), non_empty(&ctx.occasion));
    if style.is_some() || occasion.is_some() {
        let titles: Vec<&str> = items
            .iter()
            .map(|it| it.title.trim())
            .filter(|t| !t.is_empty())
            .collect();
        plan.paths.push(QueryPath {
            kind: PathKind::StyleOccasion,
            label: PathKind::StyleOccasion.to_string(),
            query_text: style_occasion_text(style, occasion, &titles),
            filter: Some(DocFilter::kinds(&[DocKind::Knowledge, DocKind::Qa])),
        });
    }

    if let (Some(llm), true) = (llm, n_questions > 0) {
        let mut prompt = format!(
            "Write {n_questions} short search questions, one question per line, that would help \
             find fashion items and styling knowledge to complete an outfit with: {direct_text}"
        );
        if let Some(s) = style {
            prompt.push_str(&format!("\nStyle: {s}"));
        }
        if let Some(o) = occasion {
            prompt.push_str(&format!("\nOccasion: {o}"));
        }
        let request = ChatRequest {
            model: settings.model.clone(),
            messages: vec![
                ChatMessage::new(
                    Role::System,
                    "You write search queries for a fashion knowledge base.",
                ),
                ChatMessage::new(Role::User, prompt),
            ],
            temperature: 0.0,
            max_tokens: settings.max_tokens,
        };
        match llm.chat(&request) {
            Ok(resp) => {
                let questions = parse_question_lines(&resp.text, n_questions);
                if questions.is_empty() {
                    plan.warnings
                        .push("LLM returned no usable questions".to_string());
                }
                for (i, q) in questions.into_iter().enumerate() {
                    plan.paths.push(QueryPath {
                        kind: PathKind::AutoQuestion,
                        label: format!("{}_{}", PathKind::AutoQuestion, i + 1),
                        query_text: q,
                        filter: None,
                    });
                }
            }
            Err(e) => {
                log::warn!("question generation failed, planning without it: {e}");
                plan.degraded = true;
                plan.warnings.push(format!("question generation failed: {e}"));
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathHits {
    pub label: String,
    pub kind: PathKind,
    pub hits: Vec<SearchHit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Runs every path of `plan` against `index`. A path whose embedding or
/// search fails comes back empty with a warning; if all paths fail the call
/// fails.
pub fn execute(
    plan: &QueryPlan,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
    k_per_path: usize,
) -> Result<Vec<PathHits>, RetrievalError> {
    if k_per_path == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let results: Vec<PathHits> = plan
        .paths
        .par_iter()
        .map(|path| {
            let outcome = embed(provider, &path.query_text)
                .map_err(|e| e.to_string())
                .and_then(|q| {
                    index
                        .search_topk(&q, k_per_path, path.filter.as_ref())
                        .map_err(|e| e.to_string())
                });
            let (hits, warning) = match outcome {
                Ok(h) => (h, None),
                Err(e) => {
                    log::warn!("path {} failed: {e}", path.label);
                    (Vec::new(), Some(e))
                }
            };
            PathHits {
                label: path.label.clone(),
                kind: path.kind,
                hits,
                warning,
            }
        })
        .collect();
    if !results.is_empty() && results.iter().all(|r| r.warning.is_some()) {
        return Err(RetrievalError::AllPathsFailed(
            results
                .into_iter()
                .map(|r| format!("{}: {}", r.label, r.warning.unwrap_or_default()))
                .collect(),
        ));
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedHit {
    pub doc_id: String,
    pub fused_score: f64,
    /// Labels of the paths that returned the document, in path order.
    pub paths: Vec<String>,
}

/// Reciprocal rank fusion: a document scores Σ 1/(60 + rank) over the paths
/// that returned it (ranks from 1). Contributions are summed smallest rank
/// first, so the score does not depend on path order. Returns the top
/// `k_final`, highest score first, ties by ascending doc id.
pub fn fuse(per_path: &[PathHits], k_final: usize) -> Vec<FusedHit> {
    let mut acc: BTreeMap<&str, (Vec<usize>, Vec<String>)> = BTreeMap::new();
    for path in per_path {
        let mut seen = std::collections::HashSet::new();
        for (i, hit) in path.hits.iter().enumerate() {
            if !seen.insert(hit.doc_id.as_str()) {
                continue;
            }
            let entry = acc.entry(hit.doc_id.as_str()).or_default();
            entry.0.push(i + 1);
            entry.1.push(path.label.clone());
        }
    }
    let mut fused: Vec<FusedHit> = acc
        .into_iter()
        .map(|(doc_id, (mut ranks, paths))| {
            ranks.sort_unstable();
            FusedHit {
                doc_id: doc_id.to_string(),
                fused_score: ranks.iter().map(|&r| 1.0 / (RRF_K + r as f64)).sum(),
                paths,
            }
        })
        .collect();
    fused.sort_by(|a, b| {
        b.fused_score
            .total_cmp(&a.fused_score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    fused.truncate(k_final);
    fused
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub plan: QueryPlan,
    pub per_path: Vec<PathHits>,
    pub fused: Vec<FusedHit>,
}

impl RetrievedContext {
    /// Fused documents resolved against `index`, in fused order.
    pub fn context_docs(&self, index: &VectorIndex) -> Vec<ContextDoc> {
        self.fused
            .iter()
            .filter_map(|f| {
                index.get(&f.doc_id).map(|d| ContextDoc {
                    doc_id: f.doc_id.clone(),
                    text: d.text.clone(),
                    paths: f.paths.clone(),
                })
            })
            .collect()
    }
}

/// plan → execute → fuse.
pub fn retrieve(
    ctx: &QueryContext,
    catalog: &Catalog,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
    llm: Option<&dyn ChatBackend>,
    n_questions: usize,
    settings: &PlannerSettings,
) -> Result<RetrievedContext, RetrievalError> {
    let plan = plan_queries(ctx, catalog, llm, n_questions, settings)?;
    let per_path = execute(&plan, index, provider, ctx.k_per_path)?;
    let fused = fuse(&per_path, ctx.k_final);
    Ok(RetrievedContext {
        plan,
        per_path,
        fused,
    })
}
