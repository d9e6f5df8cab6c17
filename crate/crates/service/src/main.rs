use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fllm_core::catalog::{
    build_disjoint_splits, load_catalog, verify_disjoint, write_catalog, Catalog, IngestLayout,
    Split, SplitMode,
};
use fllm_core::evalharness::{
    export_report, run_fitb_eval, run_ratio_series, write_curve_csv, CommandHook, NoopHook,
    Pipeline, PipelineConfig, RatioSeries, ReportFormat, RetrievalSettings, TrainerHook,
    DEFAULT_RATIO_GRID,
};
use fllm_core::qagen::{
    binary_record, export_finetune_jsonl, export_knowledge_jsonl, fitb_record, gen_auto_qa,
    gen_binary_qa, gen_fitb_questions, read_jsonl, write_jsonl, AutoQaConfig, FITBQuestion,
    TrainingRecord,
};
use fllm_core::retrieval::{retrieve, PlannerSettings, QueryContext};
use fllm_service::config::BackendKind;
use fllm_service::engine::{
    build_backend, build_embedder, build_index, http_backend, load_configured_catalog, load_index,
    load_knowledge, provenance, rank_items,
};
use fllm_service::{api, Config, Engine};

#[derive(Parser)]
#[command(name = "fllm", version, about = "Outfit compatibility and recommendation pipeline")]
struct Cli {
    /// TOML configuration file; FLLM_<SECTION>__<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect or re-split a catalog.
    #[command(subcommand)]
    Catalog(CatalogCmd),
    /// Generate QA data from the catalog.
    #[command(subcommand)]
    Qagen(QagenCmd),
    /// Convert a Polyvore-style distribution into the flat native layout.
    Ingest {
        /// Source directory.
        source: PathBuf,
        #[arg(long, default_value = "disjoint")]
        mode: SplitMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vector index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Run multi-path retrieval for one query and print JSON.
    Retrieve(RetrieveArgs),
    /// Evaluation runs.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Start the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Args)]
struct CatalogArgs {
    /// Catalog directory; defaults to paths.catalog_root.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    mode: Option<SplitMode>,
}

#[derive(Subcommand)]
enum CatalogCmd {
    /// Load a catalog and report statistics and split disjointness.
    Validate(CatalogArgs),
    /// Build item-disjoint splits and write the catalog to a new directory.
    Split {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum QagenCmd {
    /// Compatibility questions: positives plus corrupted negatives.
    Binary {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = QaFormat::Questions)]
        format: QaFormat,
    },
    /// Fill-in-the-blank questions.
    Fitb {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = QaFormat::Questions)]
        format: QaFormat,
    },
    /// LLM-generated QA pairs and knowledge documents.
    Auto {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 3)]
        per_outfit: usize,
        #[arg(long)]
        max_outfits: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_records: PathBuf,
        #[arg(long)]
        out_knowledge: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum QaFormat {
    /// Question objects with provenance.
    Questions,
    /// Tagged training records, the input of `eval ratios`.
    Records,
    /// Bare `{"messages": [...]}` lines for fine-tuning services.
    Finetune,
}

fn write_records(records: &[TrainingRecord], format: QaFormat, out: &Path) -> Result<()> {
    match format {
        QaFormat::Finetune => export_finetune_jsonl(records, out)?,
        _ => write_jsonl(records, out)?,
    }
    Ok(())
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Embed catalog items and knowledge documents and persist the index.
    Build {
        /// Output path; defaults to paths.index.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    item: Vec<String>,
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    occasion: Option<String>,
    /// Item recommendations to list.
    #[arg(short, long, default_value_t = 10)]
    k: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// FITB accuracy on one split.
    Fitb {
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to backend.kind.
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long, value_enum, default_value_t = OnOff::Off)]
        retrieval: OnOff,
        /// Question-generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use these questions instead of generating them.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: ReportFormat,
    },
    /// Accuracy as a function of training-data ratio.
    Ratios {
        /// Training records as written by `qagen ... --format records`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trainer command; the training file path is appended and the
        /// command must print the trained endpoint URL.
        #[arg(long)]
        hook: Option<String>,
        #[arg(long, default_value = "ratio_runs")]
        work_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        concurrency: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Catalog(cmd) => catalog_cmd(&config, cmd),
        Command::Qagen(cmd) => qagen_cmd(&config, cmd),
        Command::Ingest { source, mode, out } => ingest(&source, mode, &out),
        Command::Index(IndexCmd::Build { out }) => index_build(config, out),
        Command::Retrieve(args) => retrieve_cmd(config, args),
        Command::Eval(cmd) => eval_cmd(config, cmd),
        Command::Serve { bind } => serve(config, bind),
    }
}

fn open_catalog(config: &Config, args: &CatalogArgs) -> Result<Catalog> {
    let mode = args.mode.unwrap_or(config.paths.mode);
    let root = args
        .root
        .clone()
        .or_else(|| config.paths.catalog_root.clone())
        .context("no catalog: pass --root or set paths.catalog_root")?;
    load_catalog(&root, &IngestLayout::detect(&root, mode))
        .with_context(|| format!("loading catalog {}", root.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn catalog_cmd(config: &Config, cmd: CatalogCmd) -> Result<()> {
    match cmd {
        CatalogCmd::Validate(args) => {
            let catalog = open_catalog(config, &args)?;
            let report = verify_disjoint(&catalog, &catalog.splits);
            print_json(&serde_json::json!({
                "stats": catalog.stats(),
                "disjointness": report,
            }))?;
            if catalog.splits.mode == SplitMode::Disjoint && !report.is_disjoint() {
                bail!("{} item(s) shared between splits", report.violations.len());
            }
            Ok(())
        }
        CatalogCmd::Split {
            catalog,
            ratios,
            seed,
            out,
        } => {
            let [a, b, c] = ratios[..] else {
                bail!("--ratios needs three values");
            };
            let cat = open_catalog(config, &catalog)?;
            let split = build_disjoint_splits(&cat, [a, b, c], seed)?;
            log::info!("dropped {} outfit(s) to keep splits disjoint", split.dropped.len());
            let cat = cat.with_splits(split.assignment);
            write_catalog(&cat, &out)?;
            print_json(&serde_json::json!({
                "stats": cat.stats(),
                "dropped": split.dropped,
            }))
        }
    }
}

fn qagen_cmd(config: &Config, cmd: QagenCmd) -> Result<()> {
    let prompts = config.prompt.prompt_config();
    match cmd {
        QagenCmd::Binary {
            catalog,
            split,
            negatives,
            seed,
            out,
            format,
        } => {
            let cat = open_catalog(config, &catalog)?;
            let qas = gen_binary_qa(&cat, split, negatives, seed, &prompts)?;
            if format == QaFormat::Questions {
                write_jsonl(&qas, &out)?;
            } else {
                let records: Vec<TrainingRecord> =
                    qas.iter().map(|q| binary_record(q, split, &prompts)).collect();
                write_records(&records, format, &out)?;
            }
            log::info!("wrote {} binary question(s) to {}", qas.len(), out.display());
        }
        QagenCmd::Fitb {
            catalog,
            split,
            seed,
            out,
            format,
        } => {
            let cat = open_catalog(config, &catalog)?;
            let qs = gen_fitb_questions(&cat, split, seed)?;
            if format == QaFormat::Questions {
                write_jsonl(&qs, &out)?;
            } else {
                let records = qs
                    .iter()
                    .map(|q| fitb_record(&cat, q, &prompts))
                    .collect::<Result<Vec<_>, _>>()?;
                write_records(&records, format, &out)?;
            }
            log::info!("wrote {} FITB question(s) to {}", qs.len(), out.display());
        }
        QagenCmd::Auto {
            catalog,
            split,
            per_outfit,
            max_outfits,
            seed,
            out_records,
            out_knowledge,
        } => {
            let cat = open_catalog(config, &catalog)?;
            let backend = build_backend(config, config.backend.kind);
            let auto = AutoQaConfig {
                per_outfit,
                max_outfits,
                seed,
                model: config.backend.model.clone(),
                ..AutoQaConfig::default()
            };
            let output = gen_auto_qa(backend.as_ref(), &cat, split, &auto)?;
            write_jsonl(&output.records, &out_records)?;
            export_knowledge_jsonl(&output.docs, &out_knowledge)?;
            for f in &output.failures {
                log::warn!("{f}");
            }
            log::info!(
                "{} prompt(s), {} record(s), {} knowledge doc(s), {} failure(s)",
                output.prompts_issued,
                output.records.len(),
                output.docs.len(),
                output.failures.len()
            );
        }
    }
    Ok(())
}

fn ingest(source: &Path, mode: SplitMode, out: &Path) -> Result<()> {
    let layout = IngestLayout::detect(source, mode);
    let catalog = load_catalog(source, &layout)
        .with_context(|| format!("loading {}", source.display()))?;
    write_catalog(&catalog, out)?;
    print_json(&catalog.stats())
}

fn validated(config: Config) -> Result<Config> {
    config.validate()?;
    Ok(config)
}

fn index_build(config: Config, out: Option<PathBuf>) -> Result<()> {
    let mut config = config;
    if out.is_some() {
        config.paths.index = out;
    }
    let config = validated(config)?;
    let catalog = load_configured_catalog(&config)?;
    let knowledge = load_knowledge(&config)?;
    let embedder = build_embedder(&config);
    let index = build_index(&catalog, &knowledge, embedder.as_ref())?;
    index.persist(config.index_path())?;
    log::info!(
        "indexed {} document(s) ({} item(s), {} knowledge) into {}",
        index.len(),
        catalog.items.len(),
        knowledge.len(),
        config.index_path().display()
    );
    Ok(())
}

fn retrieve_cmd(config: Config, args: RetrieveArgs) -> Result<()> {
    let config = validated(config)?;
    let catalog = load_configured_catalog(&config)?;
    let embedder = build_embedder(&config);
    let index = load_index(config.index_path(), embedder.as_ref())?;
    let backend = build_backend(&config, config.backend.kind);
    let r = &config.retrieval;
    let ctx = QueryContext {
        query_items: args.item.clone(),
        free_text: args.text,
        style: args.style,
        occasion: args.occasion,
        k_per_path: r.k_per_path.max(args.k + 1),
        k_final: usize::MAX,
    };
    let settings = PlannerSettings {
        model: config.backend.model.clone(),
        max_tokens: config.backend.max_tokens,
    };
    let llm = (r.n_questions > 0).then_some(backend.as_ref());
    let retrieved = retrieve(&ctx, &catalog, &index, embedder.as_ref(), llm, r.n_questions, &settings)?;
    let items = rank_items(&retrieved, &index, &catalog, args.item.first().map(String::as_str), args.k);
    let mut fused = retrieved.fused.clone();
    fused.truncate(r.k_final);
    print_json(&serde_json::json!({
        "plan": retrieved.plan,
        "paths": provenance(&retrieved),
        "fused": fused,
        "items": items,
    }))
}

fn pipeline_config(config: &Config, retrieval: bool, concurrency: usize, seed: u64) -> PipelineConfig {
    let r = &config.retrieval;
    PipelineConfig {
        dataset: config.paths.mode,
        model: config.backend.model.clone(),
        prompts: config.prompt.prompt_config(),
        retrieval: retrieval.then_some(RetrievalSettings {
            k_per_path: r.k_per_path,
            k_final: r.k_final,
            n_questions: r.n_questions,
        }),
        concurrency,
        seeds: [
            ("questions".to_string(), seed),
            ("backend".to_string(), config.backend.seed),
        ]
        .into(),
        ..PipelineConfig::default()
    }
}

fn eval_cmd(config: Config, cmd: EvalCmd) -> Result<()> {
    let config = validated(config)?;
    let catalog = load_configured_catalog(&config)?;
    let embedder = build_embedder(&config);
    match cmd {
        EvalCmd::Fitb {
            split,
            backend,
            retrieval,
            seed,
            questions,
            concurrency,
            out,
            format,
        } => {
            let questions: Vec<FITBQuestion> = match questions {
                Some(p) => read_jsonl(&p)?,
                None => gen_fitb_questions(&catalog, split, seed)?,
            };
            let use_retrieval = retrieval == OnOff::On;
            let index = if use_retrieval {
                Some(load_index(config.index_path(), embedder.as_ref())?)
            } else {
                None
            };
            let backend = build_backend(&config, backend.unwrap_or(config.backend.kind));
            let pipeline = Pipeline {
                catalog: &catalog,
                backend: backend.as_ref(),
                index: index.as_ref(),
                embedder: Some(embedder.as_ref()),
            };
            let pc = pipeline_config(&config, use_retrieval, concurrency, seed);
            let report = run_fitb_eval(&questions, &pipeline, &pc)?;
            log::info!(
                "accuracy {:.4} over {} question(s){}",
                report.accuracy,
                report.n_questions,
                if report.incomplete { " (incomplete)" } else { "" }
            );
            match out {
                Some(path) => export_report(&report, &path, format)?,
                None => print_json(&report)?,
            }
            Ok(())
        }
        EvalCmd::Ratios {
            records,
            grid,
            split,
            seed,
            hook,
            work_dir,
            concurrency,
            out,
        } => {
            let records: Vec<TrainingRecord> = read_jsonl(&records)?;
            let ratios = grid.unwrap_or_else(|| DEFAULT_RATIO_GRID.to_vec());
            let questions = gen_fitb_questions(&catalog, split, seed)?;
            let hook: Box<dyn TrainerHook> = match hook {
                Some(cmd) => {
                    let mut parts = cmd.split_whitespace().map(str::to_string);
                    let program = parts.next().context("--hook is empty")?;
                    Box::new(CommandHook {
                        program,
                        args: parts.collect(),
                    })
                }
                None => Box::new(NoopHook),
            };
            let backend = build_backend(&config, config.backend.kind);
            let factory = |url: &str| http_backend(&config, url);
            let series = RatioSeries {
                ratios: &ratios,
                records: &records,
                seed,
                questions: &questions,
                hook: hook.as_ref(),
                work_dir: &work_dir,
                backend_factory: &factory,
            };
            let pipeline = Pipeline {
                catalog: &catalog,
                backend: backend.as_ref(),
                index: None,
                embedder: None,
            };
            let points = run_ratio_series(&series, &pipeline, &pipeline_config(&config, false, concurrency, seed))?;
            write_curve_csv(&points, &out)?;
            for p in &points {
                match (&p.accuracy, &p.error) {
                    (Some(a), _) => log::info!("ratio {}: {} record(s), accuracy {a:.4}", p.ratio, p.n_train_records),
                    (None, e) => log::warn!("ratio {}: failed: {}", p.ratio, e.as_deref().unwrap_or("")),
                }
            }
            Ok(())
        }
    }
}

fn serve(mut config: Config, bind: Option<String>) -> Result<()> {
    if let Some(b) = bind {
        config.service.bind = b;
    }
    let config = validated(config)?;
    let bind = config.service.bind.clone();
    let engine = Engine::from_config(config).context("starting service")?;
    log::info!(
        "loaded {} item(s), {} indexed document(s), backend {}",
        engine.catalog.items.len(),
        engine.index.len(),
        engine.backend.kind()
    );
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(api::serve(Arc::new(engine), &bind))?;
    Ok(())
}
