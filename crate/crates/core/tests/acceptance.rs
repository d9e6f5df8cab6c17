//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails. Runs offline (loopback only).

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fllm_core::catalog::{build_disjoint_splits, verify_disjoint, Split};
use fllm_core::embedstore::{
    DocKind, DocTags, DocumentRecord, EmbeddingVector, HttpEmbedder, HttpEmbedderConfig, IndexError, VectorIndex,
};
use fllm_core::evalharness::{
    run_fitb_eval, run_ratio_series, subsample_count, subsample_records, BackendFactory, NoopHook, Pipeline,
    PipelineConfig, RatioSeries, DEFAULT_RATIO_GRID,
};
use fllm_core::inference::{
    assemble_prompt, ChatBackend, ChatMessage, ChatRequest, HttpChatBackend, HttpChatConfig, OracleBackend,
    PromptConfig, PromptInput, PromptTemplates, RandomBackend, Role, Task,
};
use fllm_core::qagen::{gen_fitb_questions, RecordFamily, RecordTags, TrainingRecord};
use fllm_core::retrieval::{fuse, PathHits, PathKind};
use fllm_core::synthetic::{generate_catalog, single_split_catalog, SyntheticSpec};
use fllm_core::RetryPolicy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{check_fitb, item, TestServer};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn disjointness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD15);
    let mut dropped_total = 0;
    for trial in 0..200u64 {
        let spec = SyntheticSpec {
            n_outfits: rng.gen_range(2..=200),
            reuse_probability: rng.gen_range(0.0..0.6),
            seed: trial,
            ..Default::default()
        };
        let cat = generate_catalog(&spec);
        let built = build_disjoint_splits(&cat, [0.8, 0.1, 0.1], trial).map_err(|e| e.to_string())?;
        let report = verify_disjoint(&cat, &built.assignment);
        ensure(report.violations.is_empty(), || {
            format!("trial {trial}: {} violations", report.violations.len())
        })?;
        let a = &built.assignment;
        let retained = a.train.len() + a.valid.len() + a.test.len();
        ensure(retained + built.dropped.len() == cat.outfits.len(), || {
            format!("trial {trial}: retained + dropped != total")
        })?;
        let union: BTreeSet<&String> = a.train.iter().chain(&a.valid).chain(&a.test).collect();
        ensure(union.len() == retained, || format!("trial {trial}: splits overlap"))?;
        dropped_total += built.dropped.len();
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "200 trials, 0 violations, {dropped_total} outfits dropped in total, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn fitb_validity() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_outfits: 1000,
        reuse_probability: 0.2,
        seed: 0xF17B,
        ..Default::default()
    };
    let cat = single_split_catalog(&spec, Split::Test);
    let qs = gen_fitb_questions(&cat, Split::Test, 1).map_err(|e| e.to_string())?;
    ensure(qs.len() >= 1000, || format!("only {} questions", qs.len()))?;
    for q in &qs {
        check_fitb(&cat, q)?;
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "{} questions, all invariants hold, {:.2}s",
        qs.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn random_vec(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dims).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn full_scan(docs: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(q).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            (id.clone(), dot / (norm(v) * norm(q)))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn search_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EA);
    let trials = 1000;
    for t in 0..trials {
        let dims = rng.gen_range(1..=64);
        let n = rng.gen_range(0..=500);
        let mut docs: Vec<(String, Vec<f32>)> = (0..n).map(|i| (format!("d{i}"), random_vec(&mut rng, dims))).collect();
        // Exact duplicates exercise the doc-id tie-break.
        for _ in 0..rng.gen_range(0..3) {
            if docs.len() > 1 {
                let src = docs[rng.gen_range(0..docs.len())].1.clone();
                let i = rng.gen_range(0..docs.len());
                docs[i].1 = src;
            }
        }
        let mut index = VectorIndex::new(dims, "acceptance");
        index
            .upsert(
                docs.iter()
                    .map(|(id, v)| DocumentRecord {
                        doc_id: id.clone(),
                        text: id.clone(),
                        vector: EmbeddingVector::new(v.clone()).unwrap(),
                        kind: DocKind::Item,
                        tags: DocTags::default(),
                    })
                    .collect(),
            )
            .map_err(|e| e.to_string())?;
        let q = random_vec(&mut rng, dims);
        let k = rng.gen_range(1..=20);
        let hits = index
            .search_topk(&EmbeddingVector::new(q.clone()).unwrap(), k, None)
            .map_err(|e| e.to_string())?;
        let want = full_scan(&docs, &q, k);
        let got_ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        let want_ids: Vec<&str> = want.iter().map(|w| w.0.as_str()).collect();
        ensure(got_ids == want_ids, || format!("trial {t}: id/order mismatch"))?;
        ensure(hits.len() == k.min(n), || format!("trial {t}: wrong hit count"))?;
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "{trials} trials (≤500 docs, ≤64 dims), 0 mismatches, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn path_hits(label: &str, ids: &[String]) -> PathHits {
    PathHits {
        label: label.into(),
        kind: PathKind::Direct,
        hits: ids
            .iter()
            .map(|id| fllm_core::embedstore::SearchHit {
                doc_id: id.clone(),
                score: 0.0,
            })
            .collect(),
        warning: None,
    }
}

fn fusion() -> Outcome {
    let worked = fuse(
        &[
            path_hits("a", &["x".into(), "p".into(), "q".into()]),
            path_hits("b", &["r".into(), "s".into(), "x".into()]),
        ],
        10,
    );
    let x = worked.iter().find(|f| f.doc_id == "x").ok_or("x missing")?;
    let expected = 1.0 / 61.0 + 1.0 / 63.0;
    ensure(x.fused_score == expected, || format!("worked value {}", x.fused_score))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xF05E);
    let mut max_err = 0f64;
    for t in 0..500 {
        let n_paths = rng.gen_range(1..=6);
        let paths: Vec<Vec<String>> = (0..n_paths)
            .map(|_| {
                let mut pool: Vec<String> = (0..40).map(|i| format!("d{i:02}")).collect();
                pool.shuffle(&mut rng);
                pool.truncate(rng.gen_range(0..=20));
                pool
            })
            .collect();
        let k = rng.gen_range(1..=30);
        let hits: Vec<PathHits> = paths.iter().enumerate().map(|(i, p)| path_hits(&format!("p{i}"), p)).collect();
        let got = fuse(&hits, k);
        // Brute force over the whole universe of documents.
        let mut oracle: Vec<(String, f64)> = (0..40)
            .map(|i| format!("d{i:02}"))
            .filter_map(|d| {
                let s: f64 = paths
                    .iter()
                    .filter_map(|p| p.iter().position(|x| *x == d))
                    .map(|r| 1.0 / (60.0 + (r + 1) as f64))
                    .sum();
                (s > 0.0).then_some((d, s))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        oracle.truncate(k);
        ensure(got.len() == oracle.len(), || format!("instance {t}: length mismatch"))?;
        for (g, o) in got.iter().zip(&oracle) {
            ensure(g.doc_id == o.0, || format!("instance {t}: order mismatch"))?;
            max_err = max_err.max((g.fused_score - o.1).abs());
        }
    }
    ensure(max_err <= 1e-12, || format!("max score error {max_err:e}"))?;
    Ok(format!(
        "worked value {:.10} exact; 500 instances, max error {max_err:.1e}",
        x.fused_score
    ))
}

fn end_to_end_oracle() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_outfits: 1000,
        seed: 0xE2E,
        ..Default::default()
    };
    let cat = single_split_catalog(&spec, Split::Test);
    let qs = gen_fitb_questions(&cat, Split::Test, 7).map_err(|e| e.to_string())?;
    ensure(qs.len() == 1000, || format!("{} questions", qs.len()))?;
    let backend = OracleBackend::default();
    let pipeline = Pipeline {
        catalog: &cat,
        backend: &backend,
        index: None,
        embedder: None,
    };
    let report = run_fitb_eval(&qs, &pipeline, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    ensure(report.accuracy == 1.0, || {
        format!("accuracy {:.3} ({} / {})", report.accuracy, report.n_correct, report.n_questions)
    })?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "accuracy {:.3} on {} questions, {:.2}s",
        report.accuracy,
        report.n_questions,
        start.elapsed().as_secs_f64()
    ))
}

fn random_baseline() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_outfits: 10_000,
        seed: 0xBA5E,
        ..Default::default()
    };
    let cat = single_split_catalog(&spec, Split::Test);
    let qs = gen_fitb_questions(&cat, Split::Test, 3).map_err(|e| e.to_string())?;
    ensure(qs.len() == 10_000, || format!("{} questions", qs.len()))?;
    let backend = RandomBackend::new(2024);
    let pipeline = Pipeline {
        catalog: &cat,
        backend: &backend,
        index: None,
        embedder: None,
    };
    let report = run_fitb_eval(&qs, &pipeline, &PipelineConfig::default()).map_err(|e| e.to_string())?;
    ensure((0.237..=0.263).contains(&report.accuracy), || {
        format!("accuracy {:.4} outside [0.237, 0.263]", report.accuracy)
    })?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "accuracy {:.4} on 10,000 questions (bound [0.237, 0.263]), {:.2}s",
        report.accuracy,
        start.elapsed().as_secs_f64()
    ))
}

fn ratio_grid() -> Outcome {
    let records: Vec<TrainingRecord> = (0..1000)
        .map(|i| TrainingRecord {
            messages: vec![
                ChatMessage::new(Role::User, format!("Is outfit {i} compatible?")),
                ChatMessage::new(Role::Assistant, if i % 2 == 0 { "yes" } else { "no" }),
            ],
            tags: RecordTags {
                family: RecordFamily::Binary,
                split: Split::Train,
            },
        })
        .collect();
    let counts: Vec<usize> = DEFAULT_RATIO_GRID
        .iter()
        .map(|&r| subsample_records(&records, r, 11).len())
        .collect();
    ensure(counts == [10, 50, 100, 250, 500, 1000], || format!("counts {counts:?}"))?;
    ensure(
        DEFAULT_RATIO_GRID.iter().all(|&r| subsample_count(r, 1000) == subsample_records(&records, r, 11).len()),
        || "count formula mismatch".into(),
    )?;
    for &r in &DEFAULT_RATIO_GRID {
        ensure(subsample_records(&records, r, 11) == subsample_records(&records, r, 11), || {
            format!("ratio {r} not seed-reproducible")
        })?;
    }

    let spec = SyntheticSpec {
        n_outfits: 200,
        seed: 0x4A7,
        ..Default::default()
    };
    let cat = single_split_catalog(&spec, Split::Test);
    let qs = gen_fitb_questions(&cat, Split::Test, 5).map_err(|e| e.to_string())?;
    let backend = RandomBackend::new(77);
    let pipeline = Pipeline {
        catalog: &cat,
        backend: &backend,
        index: None,
        embedder: None,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let factory: Box<BackendFactory<'static>> =
        Box::new(|url: &str| -> Box<dyn ChatBackend> { panic!("no-op hook returned endpoint {url}") });
    let config = PipelineConfig::default();
    let series = RatioSeries {
        ratios: &[1.0],
        records: &records,
        seed: 11,
        questions: &qs,
        hook: &NoopHook,
        work_dir: dir.path(),
        backend_factory: factory.as_ref(),
    };
    let points = run_ratio_series(&series, &pipeline, &config).map_err(|e| e.to_string())?;
    let direct = run_fitb_eval(&qs, &pipeline, &config).map_err(|e| e.to_string())?;
    let point = points.first().ok_or("no point")?;
    ensure(points.len() == 1 && point.n_train_records == 1000, || "wrong point shape".into())?;
    ensure(point.accuracy.map(f64::to_bits) == Some(direct.accuracy.to_bits()), || {
        format!("{:?} vs {}", point.accuracy, direct.accuracy)
    })?;
    ensure(
        point.report.as_ref().map(|r| r.without_timing()) == Some(direct.without_timing()),
        || "ratio 1.0 report differs from direct evaluation".into(),
    )?;
    Ok(format!("counts {counts:?}; ratio 1.0 accuracy {} bit-identical", direct.accuracy))
}

fn wire_golden() -> Outcome {
    let chat_golden = include_str!("golden/chat_request.json");
    let emb_golden = include_str!("golden/embeddings_request.json");

    let context = vec![item("p1", "Floral-print pants", "bottoms")];
    let candidates = vec![
        item("t1", "Linen shirt", "tops"),
        item("b1", "\"Quoted\" tote", "bags"),
        item("s1", "Leather sandals", "shoes"),
        item("a1", "Wool scarf", "accessories"),
    ];
    let templates = PromptTemplates {
        system: "You are a fashion stylist.".into(),
        ..Default::default()
    };
    let request: ChatRequest = assemble_prompt(
        Task::Fitb,
        &PromptInput {
            items: &context,
            candidates: Some(&candidates),
            ..Default::default()
        },
        &PromptConfig::with_token_budget(templates, 1024),
    )
    .map_err(|e| e.to_string())?
    .to_request("fashion-llm", 16);

    let reply = r#"{"choices":[{"message":{"role":"assistant","content":"Answer: A"},"finish_reason":"stop"}]}"#;
    let server = TestServer::start(vec![
        (200, reply.into()),
        (200, r#"{"data":[{"embedding":[1.0,0.0],"index":0},{"embedding":[0.0,1.0],"index":1}]}"#.into()),
    ]);
    let retry = RetryPolicy {
        max_retries: 0,
        backoff_ms: 1,
        timeout_ms: 5_000,
    };
    let chat = HttpChatBackend::new(HttpChatConfig {
        base_url: server.base_url.clone(),
        api_key: None,
        retry: retry.clone(),
    });
    chat.chat(&request).map_err(|e| e.to_string())?;
    let embedder = HttpEmbedder::new(HttpEmbedderConfig {
        base_url: server.base_url.clone(),
        model: "text-embedding-small".into(),
        dims: 2,
        api_key: None,
        batch_size: 8,
        retry,
    });
    use fllm_core::embedstore::EmbeddingProvider;
    embedder
        .embed_batch(&["Floral-print pants. category: bottoms.".into(), "red dress".into()])
        .map_err(|e| e.to_string())?;
    let seen = server.join();
    ensure(seen.len() == 2, || format!("{} requests captured", seen.len()))?;
    ensure(seen[0].body == chat_golden, || format!("chat body differs:\n{}", seen[0].body))?;
    ensure(seen[1].body == emb_golden, || format!("embeddings body differs:\n{}", seen[1].body))?;
    Ok(format!(
        "chat ({} bytes) and embeddings ({} bytes) bodies byte-identical; no volatile fields",
        chat_golden.len(),
        emb_golden.len()
    ))
}

fn persistence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E5);
    let dims = 48;
    let mut index = VectorIndex::new(dims, "mock-hash:dims=48:seed=1");
    index
        .upsert(
            (0..100)
                .map(|i| DocumentRecord {
                    doc_id: format!("doc{i:03}"),
                    text: format!("document {i}"),
                    vector: EmbeddingVector::new(random_vec(&mut rng, dims)).unwrap(),
                    kind: [DocKind::Item, DocKind::Knowledge, DocKind::Qa][i % 3],
                    tags: DocTags::default(),
                })
                .collect(),
        )
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("index.bin");
    index.persist(&path).map_err(|e| e.to_string())?;
    let loaded = VectorIndex::load(&path).map_err(|e| e.to_string())?;
    for i in 0..20 {
        let q = EmbeddingVector::new(random_vec(&mut rng, dims)).unwrap();
        let a = index.search_topk(&q, 10, None).map_err(|e| e.to_string())?;
        let b = loaded.search_topk(&q, 10, None).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("query {i} differs after reload"))?;
    }
    let mut bytes = fs::read(&path).map_err(|e| e.to_string())?;
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    match VectorIndex::load(&path) {
        Err(e @ IndexError::VersionMismatch { found: 99, .. }) => {
            Ok(format!("20 queries identical after reload; version error: {e}"))
        }
        Err(e) => Err(format!("unexpected error {e}")),
        Ok(_) => Err("version-mismatched file loaded".into()),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let started = Instant::now();
    let criteria: [Criterion; 9] = [
        ("disjointness", disjointness),
        ("fitb-question-validity", fitb_validity),
        ("exact-search-oracle", search_oracle),
        ("fusion-arithmetic", fusion),
        ("end-to-end-oracle-accuracy", end_to_end_oracle),
        ("random-baseline", random_baseline),
        ("ratio-harness-mechanics", ratio_grid),
        ("wire-golden-files", wire_golden),
        ("index-persistence", persistence),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match std::panic::catch_unwind(run) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    let total = started.elapsed().as_secs_f64();
    if total < 120.0 {
        println!("PASS offline-suite-runtime: acceptance criteria ran on loopback only in {total:.2}s (< 120s)");
    } else {
        failed += 1;
        println!("FAIL offline-suite-runtime: {total:.2}s");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
