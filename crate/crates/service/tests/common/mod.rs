#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fllm_core::catalog::{Catalog, Item, Outfit, SplitAssignment, SplitMode};
use fllm_core::embedstore::{EmbeddingProvider, MockEmbedder, VectorIndex};
use fllm_core::inference::{BackendError, ChatBackend, ChatRequest, ChatResponse};
use fllm_core::qagen::{KnowledgeDoc, KnowledgeSource, KnowledgeTags};
use fllm_service::config::Config;
use fllm_service::engine::build_index;
use fllm_service::Engine;
use tower::ServiceExt;

pub fn item(id: &str, title: &str, category: &str) -> Item {
    Item {
        item_id: id.into(),
        title: title.into(),
        description: String::new(),
        semantic_category: category.into(),
        fine_category_id: None,
        image_ref: None,
    }
}

pub fn outfit(id: &str, items: &[&str]) -> Outfit {
    Outfit {
        outfit_id: id.into(),
        item_ids: items.iter().map(|s| s.to_string()).collect(),
        source_split: None,
    }
}

/// Every outfit in train.
pub fn train_catalog(items: Vec<Item>, outfits: Vec<Outfit>) -> Catalog {
    let splits = SplitAssignment {
        train: outfits.iter().map(|o| o.outfit_id.clone()).collect::<BTreeSet<_>>(),
        mode: SplitMode::Disjoint,
        ..Default::default()
    };
    Catalog::new(items, outfits, splits).unwrap()
}

pub fn test_config(dir: &Path) -> Config {
    let mut c = Config::default();
    c.paths.catalog_root = Some(dir.join("catalog"));
    c.paths.index = Some(dir.join("index.bin"));
    c.paths.mode = SplitMode::Disjoint;
    c
}

/// Records requests, answers with a fixed reply or fails, and tracks how many
/// calls were in flight at once.
#[derive(Clone, Default)]
pub struct ProbeBackend {
    pub reply: Option<String>,
    pub delay: Duration,
    pub calls: Arc<Mutex<Vec<ChatRequest>>>,
    in_flight: Arc<AtomicUsize>,
    pub max_in_flight: Arc<AtomicUsize>,
}

impl ProbeBackend {
    pub fn replying(text: &str) -> Self {
        ProbeBackend {
            reply: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn failing() -> Self {
        ProbeBackend::default()
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.calls.lock().unwrap().clone()
    }
}

impl ChatBackend for ProbeBackend {
    fn kind(&self) -> &'static str {
        "probe"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        self.calls.lock().unwrap().push(request.clone());
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        match &self.reply {
            Some(r) => Ok(ChatResponse::text(r.clone())),
            None => Err(BackendError::Failed("upstream unavailable".into())),
        }
    }
}

/// Engine over an in-memory catalog with a freshly built index.
pub fn engine_with(
    catalog: Catalog,
    knowledge: &[KnowledgeDoc],
    backend: Box<dyn ChatBackend>,
    config: Config,
) -> Engine {
    let embedder = MockEmbedder::default();
    let index = build_index(&catalog, knowledge, &embedder).unwrap();
    Engine {
        config,
        catalog,
        index,
        embedder: Box::new(embedder),
        backend,
    }
}

pub fn empty_index_engine(catalog: Catalog, backend: Box<dyn ChatBackend>, config: Config) -> Engine {
    let embedder = MockEmbedder::default();
    Engine {
        config,
        catalog,
        index: VectorIndex::for_provider(&embedder as &dyn EmbeddingProvider),
        embedder: Box::new(embedder),
        backend,
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, serde_json::Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, json)
}

pub fn knowledge(id: &str, text: &str, style: Option<&str>, occasion: Option<&str>) -> KnowledgeDoc {
    KnowledgeDoc {
        doc_id: id.into(),
        text: text.into(),
        tags: KnowledgeTags {
            style: style.map(str::to_string),
            occasion: occasion.map(str::to_string),
            item_ids: Vec::new(),
            source: KnowledgeSource::Description,
        },
    }
}

/// Wardrobe fixture: 12 items in 4 outfits plus three knowledge notes.
pub fn wardrobe() -> (Catalog, Vec<KnowledgeDoc>) {
    let items = vec![
        item("i01", "Red silk blouse", "tops"),
        item("i02", "Red silk midi skirt", "bottoms"),
        item("i03", "Red leather ankle boots", "shoes"),
        item("i04", "Blue denim jeans", "bottoms"),
        item("i05", "White cotton tee", "tops"),
        item("i06", "White canvas sneakers", "shoes"),
        item("i07", "Black wool coat", "outerwear"),
        item("i08", "Black leather tote", "bags"),
        item("i09", "Gold hoop earrings", "jewellery"),
        item("i10", "Floral linen sundress", "tops"),
        item("i11", "Straw sun hat", "accessories"),
        item("i12", "Tan leather sandals", "shoes"),
    ];
    let outfits = vec![
        outfit("o1", &["i01", "i02", "i03"]),
        outfit("o2", &["i05", "i04", "i06"]),
        outfit("o3", &["i07", "i08", "i09"]),
        outfit("o4", &["i10", "i11", "i12"]),
    ];
    let docs = vec![
        knowledge("kd-1", "A casual brunch look pairs a silk blouse with light sandals.", Some("casual"), Some("brunch")),
        knowledge("kd-2", "Red pieces work best with one neutral anchor such as denim.", Some("casual"), None),
        knowledge("kd-3", "Formal evening outfits favour wool coats and gold jewellery.", Some("formal"), Some("evening")),
    ];
    (train_catalog(items, outfits), docs)
}
