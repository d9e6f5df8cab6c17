mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use common::*;
use fllm_core::catalog::{item_text, Item};
use fllm_core::embedstore::DocKind;
use fllm_core::inference::{assemble_prompt, PromptInput, Task};
use fllm_core::retrieval::{execute, fuse, plan_queries, PlannerSettings, QueryContext};
use fllm_service::api::router;
use fllm_service::config::Config;
use fllm_service::RecommendResponse;
use serde_json::json;
use sha2::{Digest, Sha256};

fn config() -> Config {
    test_config(std::path::Path::new("/unused"))
}

fn app_with(probe: &ProbeBackend, cfg: Config) -> axum::Router {
    let (cat, docs) = wardrobe();
    router(Arc::new(engine_with(cat, &docs, Box::new(probe.clone()), cfg)))
}

#[tokio::test]
async fn recommend_equals_direct_module_composition() {
    let probe = ProbeBackend::replying("  Pair it with the skirt and boots.  ");
    let cfg = config();
    let app = app_with(&probe, cfg.clone());
    let body = json!({"query_item_id": "i01", "style": "casual", "occasion": "brunch", "k": 4});
    let (status, got) = call(&app, "POST", "/api/recommend", Some(&body.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{got}");
    let mut got: RecommendResponse = serde_json::from_value(got).unwrap();
    got.latency_ms = 0;

    // The same request composed by hand from the library modules.
    let (catalog, docs) = wardrobe();
    let engine = engine_with(catalog.clone(), &docs, Box::new(ProbeBackend::default()), cfg.clone());
    let ctx = QueryContext {
        query_items: vec!["i01".into()],
        free_text: None,
        style: Some("casual".into()),
        occasion: Some("brunch".into()),
        k_per_path: 10,
        k_final: 1000,
    };
    let plan = plan_queries(&ctx, &catalog, None, 0, &PlannerSettings::default()).unwrap();
    assert_eq!(plan.paths.len(), 2);
    let per_path = execute(&plan, &engine.index, engine.embedder.as_ref(), 10).unwrap();
    let fused = fuse(&per_path, 1000);
    let want_items: Vec<(String, f64)> = fused
        .iter()
        .filter(|f| f.doc_id != "i01" && engine.index.get(&f.doc_id).unwrap().kind == DocKind::Item)
        .take(4)
        .map(|f| (f.doc_id.clone(), f.fused_score))
        .collect();
    let got_items: Vec<(String, f64)> = got
        .recommendations
        .iter()
        .map(|r| (r.item_id.clone(), r.score))
        .collect();
    assert_eq!(got_items, want_items);
    for r in &got.recommendations {
        assert_eq!(r.title, catalog.item(&r.item_id).unwrap().title);
        assert_eq!(r.rationale.as_deref(), Some("Pair it with the skirt and boots."));
    }
    for (prov, hits) in got.provenance.iter().zip(&per_path) {
        assert_eq!(prov.label, hits.label);
        let ids: Vec<&str> = hits.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(prov.doc_ids, ids);
    }

    let context: Vec<_> = fllm_core::retrieval::RetrievedContext {
        plan,
        per_path,
        fused,
    }
    .context_docs(&engine.index)
    .into_iter()
    .take(cfg.retrieval.k_final)
    .collect();
    let items: Vec<Item> = vec![catalog.item("i01").unwrap().clone()];
    let bundle = assemble_prompt(
        Task::Recommend,
        &PromptInput {
            items: &items,
            context: &context,
            style: Some("casual"),
            occasion: Some("brunch"),
            ..Default::default()
        },
        &cfg.prompt.prompt_config(),
    )
    .unwrap();
    assert_eq!(got.context_doc_ids, bundle.context_doc_ids);
    assert!(got.context_doc_ids.contains(&"kd-1".to_string()));
    let sent = probe.requests();
    assert_eq!(sent, vec![bundle.to_request(&cfg.backend.model, cfg.backend.max_tokens)]);
    assert_eq!(got.model, cfg.backend.model);
    assert!(!got.degraded);
}

/// Mock embedding computed from scratch: SHA-256(seed LE || token).
fn oracle_vector(text: &str) -> Vec<f64> {
    let mut v = vec![0f64; 256];
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let mut h = Sha256::new();
        h.update(0x5EEDu64.to_le_bytes());
        h.update(tok.to_lowercase().as_bytes());
        let d = h.finalize();
        let slot = (u64::from_le_bytes(d[0..8].try_into().unwrap()) % 256) as usize;
        let w = 0.5 + f64::from(u32::from_le_bytes(d[8..12].try_into().unwrap())) / 4_294_967_296.0;
        v[slot] += f64::from(w as f32);
    }
    v
}

fn oracle_cosine(a: &str, b: &str) -> f64 {
    let (x, y) = (oracle_vector(a), oracle_vector(b));
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let n = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
    dot / (n(&x) * n(&y))
}

#[tokio::test]
async fn nearest_item_ranks_first() {
    let (catalog, _) = wardrobe();
    let query = catalog.item("i01").unwrap();
    let mut expected: Vec<(f64, String)> = catalog
        .items
        .values()
        .filter(|it| it.item_id != "i01")
        .map(|it| (oracle_cosine(&item_text(query), &item_text(it)), it.item_id.clone()))
        .collect();
    expected.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    // Guard against a fixture whose top two are too close to call.
    assert!(expected[0].0 - expected[1].0 > 1e-6);
    assert_eq!(expected[0].1, "i02");

    let probe = ProbeBackend::replying("ok");
    let app = app_with(&probe, config());
    let body = json!({"query_item_id": "i01", "k": 5}).to_string();
    let (status, got) = call(&app, "POST", "/api/recommend", Some(&body)).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = got["recommendations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["item_id"].as_str().unwrap())
        .collect();
    let want: Vec<&str> = expected.iter().take(5).map(|(_, id)| id.as_str()).collect();
    assert_eq!(ids, want);
    let scores: Vec<f64> = got["recommendations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["score"].as_f64().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
}

#[tokio::test]
async fn free_text_only_query_is_accepted() {
    let probe = ProbeBackend::replying("Try the sandals.");
    let app = app_with(&probe, config());
    let body = json!({"free_text": "straw hat for the beach", "k": 3}).to_string();
    let (status, got) = call(&app, "POST", "/api/recommend", Some(&body)).await;
    assert_eq!(status, StatusCode::OK, "{got}");
    assert_eq!(got["recommendations"][0]["item_id"], "i11");
    assert_eq!(got["recommendations"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn recommend_rejects_bad_requests() {
    let probe = ProbeBackend::replying("ok");
    let app = app_with(&probe, config());
    let cases = [
        ("not json", StatusCode::BAD_REQUEST),
        ("{}", StatusCode::BAD_REQUEST),
        (r#"{"free_text": "   "}"#, StatusCode::BAD_REQUEST),
        (r#"{"query_item_id": "i01", "k": 0}"#, StatusCode::BAD_REQUEST),
        (r#"{"query_item_id": "i01", "k": 51}"#, StatusCode::BAD_REQUEST),
        (r#"{"query_item_id": "i01", "k": "three"}"#, StatusCode::BAD_REQUEST),
    ];
    for (body, want) in cases {
        let (status, got) = call(&app, "POST", "/api/recommend", Some(body)).await;
        assert_eq!(status, want, "{body}");
        assert!(got["error"].is_string(), "{body}: {got}");
    }
    let (status, got) = call(&app, "POST", "/api/recommend", Some(r#"{"query_item_id": "i99"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(got["item_id"], "i99");
    assert!(probe.requests().is_empty());
}

#[tokio::test]
async fn backend_failure_returns_502_with_fallback() {
    let probe = ProbeBackend::failing();
    let app = app_with(&probe, config());
    let body = json!({"query_item_id": "i01", "k": 3}).to_string();
    let (status, got) = call(&app, "POST", "/api/recommend", Some(&body)).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(got["degraded"], true);
    assert!(got["error"].as_str().unwrap().contains("upstream unavailable"));
    let recs = got["fallback"]["recommendations"].as_array().unwrap();
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[0]["item_id"], "i02");
    assert!(recs.iter().all(|r| r["rationale"].is_null()));
    assert_eq!(got["fallback"]["degraded"], true);

    let mut cfg = config();
    cfg.service.fallback_on_backend_error = false;
    let app = app_with(&probe, cfg);
    let (status, got) = call(&app, "POST", "/api/recommend", Some(&body)).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(got["degraded"], false);
    assert!(got.get("fallback").is_none());
}

#[tokio::test]
async fn item_lookup() {
    let probe = ProbeBackend::replying("ok");
    let app = app_with(&probe, config());
    let (status, got) = call(&app, "GET", "/api/items/i07", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got["title"], "Black wool coat");
    assert_eq!(got["semantic_category"], "outerwear");
    let (status, got) = call(&app, "GET", "/api/items/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(got["item_id"], "nope");
}

#[tokio::test]
async fn item_listing_pages_and_filters() {
    let items: Vec<Item> = (0..123)
        .map(|i| item(&format!("p{i:03}"), &format!("Piece {i}"), if i % 3 == 0 { "shoes" } else { "tops" }))
        .collect();
    let outfits: Vec<_> = (0..41)
        .map(|o| {
            let ids: Vec<String> = (0..3).map(|j| format!("p{:03}", o * 3 + j)).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            outfit(&format!("o{o}"), &refs)
        })
        .collect();
    let engine = engine_with(
        train_catalog(items, outfits),
        &[],
        Box::new(ProbeBackend::failing()),
        config(),
    );
    let app = router(Arc::new(engine));

    let (status, got) = call(&app, "GET", "/api/items", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got["items"].as_array().unwrap().len(), 50);
    assert_eq!(got["total"], 123);
    assert_eq!(got["page"], 1);
    assert_eq!(got["page_size"], 50);
    assert_eq!(got["items"][0]["item_id"], "p000");

    let (_, got) = call(&app, "GET", "/api/items?page=3", None).await;
    assert_eq!(got["items"].as_array().unwrap().len(), 23);
    let (_, got) = call(&app, "GET", "/api/items?page=4", None).await;
    assert_eq!(got["items"].as_array().unwrap().len(), 0);

    let (_, got) = call(&app, "GET", "/api/items?category=SHOES", None).await;
    assert_eq!(got["total"], 41);
    let (_, got) = call(&app, "GET", "/api/items?query=piece%2012&category=tops", None).await;
    let ids: Vec<&str> = got["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["item_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["p121", "p122"]);

    for uri in ["/api/items?page=0", "/api/items?page=x"] {
        let (status, _) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
    }
}

#[tokio::test]
async fn health_reports_empty_index_without_backend_calls() {
    let probe = ProbeBackend::failing();
    let (catalog, _) = wardrobe();
    let engine = empty_index_engine(catalog, Box::new(probe.clone()), config());
    let app = router(Arc::new(engine));
    let (status, got) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(got["status"], "ok");
    assert_eq!(got["index_size"], 0);
    assert_eq!(got["items"], 12);
    assert_eq!(got["backend"], "probe");
    assert!(probe.requests().is_empty());
}

#[tokio::test]
async fn empty_index_recommends_nothing() {
    let probe = ProbeBackend::replying("nothing to add");
    let (catalog, _) = wardrobe();
    let app = router(Arc::new(empty_index_engine(catalog, Box::new(probe), config())));
    let (status, got) = call(&app, "POST", "/api/recommend", Some(r#"{"query_item_id":"i01"}"#)).await;
    assert_eq!(status, StatusCode::OK, "{got}");
    assert_eq!(got["recommendations"].as_array().unwrap().len(), 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrency_is_capped() {
    let mut probe = ProbeBackend::replying("ok");
    probe.delay = Duration::from_millis(30);
    let mut cfg = config();
    cfg.service.max_concurrency = 2;
    let app = app_with(&probe, cfg);
    let mut tasks = Vec::new();
    for _ in 0..12 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            call(&app, "POST", "/api/recommend", Some(r#"{"query_item_id":"i05","k":2}"#)).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(probe.requests().len(), 12);
    let peak = probe.max_in_flight.load(Ordering::SeqCst);
    assert!((1..=2).contains(&peak), "peak {peak}");
}

#[tokio::test]
async fn formal_request_with_oracle_backend() {
    let (cat, docs) = wardrobe();
    let engine = engine_with(
        cat,
        &docs,
        Box::new(fllm_core::inference::OracleBackend::default()),
        config(),
    );
    let app = router(Arc::new(engine));
    let body = json!({"query_item_id": "i07", "style": "formal", "k": 4}).to_string();
    let (status, got) = call(&app, "POST", "/api/recommend", Some(&body)).await;
    assert_eq!(status, StatusCode::OK, "{got}");
    let recs = got["recommendations"].as_array().unwrap();
    assert!(!recs.is_empty() && recs.len() <= 4);
    let scores: Vec<f64> = recs.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    let paths: Vec<&str> = got["provenance"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["label"].as_str().unwrap())
        .collect();
    assert_eq!(paths, ["direct", "style_occasion"]);
    assert_eq!(got["provenance"][1]["doc_ids"][0], "kd-3");
    assert!(got["latency_ms"].is_u64());
}
