//! Wiring of catalog, index, embedder and backend, plus the recommendation
//! flow shared by the HTTP API and the CLI.

use std::path::Path;
use std::time::Instant;

use fllm_core::catalog::{item_text, load_catalog, Catalog, CatalogError, IngestLayout, Item};
use fllm_core::embedstore::{
    embed_many, DocKind, DocTags, DocumentRecord, EmbedError, EmbeddingProvider, HttpEmbedder,
    IndexError, MockEmbedder, VectorIndex,
};
use fllm_core::inference::{
    assemble_prompt, parse_answer, ChatBackend, HttpChatBackend, HttpChatConfig,
    OracleBackend, PromptError, PromptInput, RandomBackend, ScriptedBackend, Task,
};
use fllm_core::qagen::{read_knowledge_jsonl, KnowledgeDoc, KnowledgeSource};
use fllm_core::retrieval::{retrieve, PlannerSettings, QueryContext, RetrievalError, RetrievedContext};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendKind, Config, EmbedderKind, MAX_K};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("knowledge file: {0}")]
    Knowledge(String),
    #[error("index {path} was built with '{index}' but the configured embedder is '{embedder}'")]
    FingerprintMismatch {
        path: String,
        index: String,
        embedder: String,
    },
}

pub fn build_embedder(config: &Config) -> Box<dyn EmbeddingProvider> {
    match (config.embedder.kind, config.embedder.http()) {
        (EmbedderKind::Http, Some(http)) => Box::new(HttpEmbedder::new(http)),
        _ => Box::new(MockEmbedder::new(
            config.embedder.dims.max(1),
            config.embedder.seed,
        )),
    }
}

/// Chat backend of the given kind using the rest of `config.backend`.
pub fn build_backend(config: &Config, kind: BackendKind) -> Box<dyn ChatBackend> {
    let b = &config.backend;
    match kind {
        BackendKind::Scripted => Box::new(ScriptedBackend::new(b.replies.iter().cloned())),
        BackendKind::Oracle => Box::new(OracleBackend::new(MockEmbedder::new(
            config.embedder.dims.max(1),
            config.embedder.seed,
        ))),
        BackendKind::Random => Box::new(RandomBackend::new(b.seed)),
        BackendKind::Http => http_backend(config, b.base_url.as_deref().unwrap_or_default()),
    }
}

pub fn http_backend(config: &Config, base_url: &str) -> Box<dyn ChatBackend> {
    Box::new(HttpChatBackend::new(HttpChatConfig {
        base_url: base_url.to_string(),
        api_key: config.backend.api_key.clone(),
        retry: config.backend.retry(),
    }))
}

pub fn load_configured_catalog(config: &Config) -> Result<Catalog, CatalogError> {
    let root = config.catalog_root();
    load_catalog(root, &IngestLayout::detect(root, config.paths.mode))
}

/// Index documents for catalog items: the doc id is the item id and the text
/// is the canonical item text. Items without text are skipped.
pub fn item_documents(
    catalog: &Catalog,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<DocumentRecord>, EmbedError> {
    let items: Vec<&Item> = catalog
        .items
        .values()
        .filter(|it| !item_text(it).trim().is_empty())
        .collect();
    let texts: Vec<String> = items.iter().map(|it| item_text(it)).collect();
    let vectors = embed_many(embedder, &texts)?;
    Ok(items
        .into_iter()
        .zip(texts)
        .zip(vectors)
        .map(|((item, text), vector)| DocumentRecord {
            doc_id: item.item_id.clone(),
            text,
            vector,
            kind: DocKind::Item,
            tags: DocTags {
                semantic_category: Some(item.semantic_category.clone()),
                ..Default::default()
            },
        })
        .collect())
}

pub fn knowledge_documents(
    docs: &[KnowledgeDoc],
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<DocumentRecord>, EmbedError> {
    let docs: Vec<&KnowledgeDoc> = docs.iter().filter(|d| !d.text.trim().is_empty()).collect();
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let vectors = embed_many(embedder, &texts)?;
    Ok(docs
        .into_iter()
        .zip(vectors)
        .map(|(doc, vector)| DocumentRecord {
            doc_id: doc.doc_id.clone(),
            text: doc.text.clone(),
            vector,
            kind: match doc.tags.source {
                KnowledgeSource::Qa => DocKind::Qa,
                KnowledgeSource::Description => DocKind::Knowledge,
            },
            tags: DocTags {
                style: doc.tags.style.clone(),
                occasion: doc.tags.occasion.clone(),
                semantic_category: None,
            },
        })
        .collect())
}

/// Knowledge documents named by `paths.knowledge`; none when unset.
pub fn load_knowledge(config: &Config) -> Result<Vec<KnowledgeDoc>, EngineError> {
    match &config.paths.knowledge {
        Some(path) => read_knowledge_jsonl(path).map_err(|e| EngineError::Knowledge(e.to_string())),
        None => Ok(Vec::new()),
    }
}

/// Embeds every catalog item and knowledge document into a fresh index.
pub fn build_index(
    catalog: &Catalog,
    knowledge: &[KnowledgeDoc],
    embedder: &dyn EmbeddingProvider,
) -> Result<VectorIndex, EngineError> {
    let mut index = VectorIndex::for_provider(embedder);
    let mut docs = item_documents(catalog, embedder)?;
    docs.extend(knowledge_documents(knowledge, embedder)?);
    index.upsert(docs)?;
    Ok(index)
}

/// Loads the persisted index and checks it matches the configured embedder.
pub fn load_index(path: &Path, embedder: &dyn EmbeddingProvider) -> Result<VectorIndex, EngineError> {
    let index = VectorIndex::load(path)?;
    if index.fingerprint() != embedder.fingerprint() {
        return Err(EngineError::FingerprintMismatch {
            path: path.display().to_string(),
            index: index.fingerprint().to_string(),
            embedder: embedder.fingerprint(),
        });
    }
    Ok(index)
}

/// Everything a request needs, immutable once built.
pub struct Engine {
    pub config: Config,
    pub catalog: Catalog,
    pub index: VectorIndex,
    pub embedder: Box<dyn EmbeddingProvider>,
    pub backend: Box<dyn ChatBackend>,
}

impl Engine {
    /// Loads the catalog and persisted index named by `config`.
    pub fn from_config(config: Config) -> Result<Self, EngineError> {
        let catalog = load_configured_catalog(&config)?;
        let embedder = build_embedder(&config);
        let index = load_index(config.index_path(), embedder.as_ref())?;
        let backend = build_backend(&config, config.backend.kind);
        Ok(Engine {
            config,
            catalog,
            index,
            embedder,
            backend,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RecommendRequest {
    #[serde(default)]
    pub query_item_id: Option<String>,
    #[serde(default)]
    pub free_text: Option<String>,
    #[serde(default)]
    pub style: Option<String>,
    #[serde(default)]
    pub occasion: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item_id: String,
    pub title: String,
    /// Fused retrieval score.
    pub score: f64,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathProvenance {
    pub label: String,
    pub kind: String,
    pub query_text: String,
    pub doc_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub recommendations: Vec<Recommendation>,
    pub provenance: Vec<PathProvenance>,
    /// Documents placed in the prompt, in fused order.
    pub context_doc_ids: Vec<String>,
    pub model: String,
    pub latency_ms: u64,
    /// Set when the query plan or the backend degraded.
    pub degraded: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum RecommendError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("backend failure: {message}")]
    Backend {
        message: String,
        /// Retrieval-only answer, present when fallback is enabled.
        fallback: Option<Box<RecommendResponse>>,
    },
    #[error("retrieval failed: {0}")]
    Retrieval(String),
}

impl RecommendRequest {
    fn query_context(&self, config: &Config) -> Result<(QueryContext, usize), RecommendError> {
        let k = self.k.unwrap_or(config.service.default_k);
        if !(1..=MAX_K).contains(&k) {
            return Err(RecommendError::BadRequest(format!(
                "k must be between 1 and {MAX_K}, got {k}"
            )));
        }
        let text = self.free_text.as_deref().map(str::trim).filter(|t| !t.is_empty());
        let item = self.query_item_id.as_deref().map(str::trim).filter(|t| !t.is_empty());
        if item.is_none() && text.is_none() {
            return Err(RecommendError::BadRequest(
                "query_item_id or free_text is required".into(),
            ));
        }
        let ctx = QueryContext {
            query_items: item.map(|s| vec![s.to_string()]).unwrap_or_default(),
            free_text: text.map(str::to_string),
            style: self.style.clone(),
            occasion: self.occasion.clone(),
            // One extra so excluding the query item still leaves k candidates.
            k_per_path: config.retrieval.k_per_path.max(k + 1),
            k_final: usize::MAX,
        };
        Ok((ctx, k))
    }
}

/// Item recommendations from fused retrieval: item documents in fused order,
/// skipping the query item, with the fused score.
pub fn rank_items(
    retrieved: &RetrievedContext,
    index: &VectorIndex,
    catalog: &Catalog,
    exclude: Option<&str>,
    k: usize,
) -> Vec<Recommendation> {
    retrieved
        .fused
        .iter()
        .filter(|f| Some(f.doc_id.as_str()) != exclude)
        .filter(|f| index.get(&f.doc_id).is_some_and(|d| d.kind == DocKind::Item))
        .filter_map(|f| {
            catalog.item(&f.doc_id).map(|it| Recommendation {
                item_id: it.item_id.clone(),
                title: it.title.clone(),
                score: f.fused_score,
                rationale: None,
            })
        })
        .take(k)
        .collect()
}

pub fn provenance(retrieved: &RetrievedContext) -> Vec<PathProvenance> {
    retrieved
        .plan
        .paths
        .iter()
        .zip(&retrieved.per_path)
        .map(|(p, hits)| PathProvenance {
            label: p.label.clone(),
            kind: p.kind.to_string(),
            query_text: p.query_text.clone(),
            doc_ids: hits.hits.iter().map(|h| h.doc_id.clone()).collect(),
            warning: hits.warning.clone(),
        })
        .collect()
}

/// query → retrieval → item ranking → prompt → backend → rationale.
pub fn recommend(engine: &Engine, req: &RecommendRequest) -> Result<RecommendResponse, RecommendError> {
    let started = Instant::now();
    let cfg = &engine.config;
    let (ctx, k) = req.query_context(cfg)?;
    for id in &ctx.query_items {
        if engine.catalog.item(id).is_none() {
            return Err(RecommendError::UnknownItem(id.clone()));
        }
    }
    let settings = PlannerSettings {
        model: cfg.backend.model.clone(),
        max_tokens: cfg.backend.max_tokens,
    };
    let llm = (cfg.retrieval.n_questions > 0).then_some(engine.backend.as_ref());
    let retrieved = retrieve(
        &ctx,
        &engine.catalog,
        &engine.index,
        engine.embedder.as_ref(),
        llm,
        cfg.retrieval.n_questions,
        &settings,
    )
    .map_err(|e| match e {
        RetrievalError::UnknownItem(id) => RecommendError::UnknownItem(id),
        RetrievalError::EmptyQuery | RetrievalError::InvalidK => {
            RecommendError::BadRequest(e.to_string())
        }
        other => RecommendError::Retrieval(other.to_string()),
    })?;

    let exclude = ctx.query_items.first().map(String::as_str);
    let mut recommendations = rank_items(&retrieved, &engine.index, &engine.catalog, exclude, k);
    let mut context = retrieved.context_docs(&engine.index);
    context.truncate(cfg.retrieval.k_final);
    let items: Vec<Item> = ctx
        .query_items
        .iter()
        .filter_map(|id| engine.catalog.item(id).cloned())
        .collect();
    let input = PromptInput {
        items: &items,
        candidates: None,
        context: &context,
        style: ctx.style.as_deref(),
        occasion: ctx.occasion.as_deref(),
        free_text: ctx.free_text.as_deref(),
    };
    let bundle = assemble_prompt(Task::Recommend, &input, &cfg.prompt.prompt_config())
        .map_err(|e: PromptError| RecommendError::BadRequest(e.to_string()))?;

    let mut response = RecommendResponse {
        recommendations: Vec::new(),
        provenance: provenance(&retrieved),
        context_doc_ids: bundle.context_doc_ids.clone(),
        model: cfg.backend.model.clone(),
        latency_ms: 0,
        degraded: retrieved.plan.degraded,
        warnings: retrieved.plan.warnings.clone(),
    };
    let request = bundle.to_request(&cfg.backend.model, cfg.backend.max_tokens);
    match engine.backend.chat(&request) {
        Ok(reply) => {
            let rationale = parse_answer(Task::Recommend, &reply.text).free_text;
            for r in &mut recommendations {
                r.rationale = rationale.clone();
            }
            response.recommendations = recommendations;
            response.latency_ms = started.elapsed().as_millis() as u64;
            Ok(response)
        }
        Err(e) => {
            let message = e.to_string();
            log::warn!("recommend backend call failed: {message}");
            let fallback = cfg.service.fallback_on_backend_error.then(|| {
                response.recommendations = recommendations;
                response.degraded = true;
                response.warnings.push(format!("backend failure: {message}"));
                response.latency_ms = started.elapsed().as_millis() as u64;
                Box::new(response)
            });
            Err(RecommendError::Backend { message, fallback })
        }
    }
}
