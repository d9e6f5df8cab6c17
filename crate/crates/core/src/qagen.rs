//! Training and evaluation data generation: template binary-compatibility QA,
//! fill-in-the-blank questions, and LLM-generated style QA / knowledge docs.
//!
//! Every generator draws its randomness from a per-outfit ChaCha stream keyed
//! by (seed, outfit position), so outputs are identical regardless of how the
//! work is scheduled across threads.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{item_text, Catalog, Item, Outfit, Split};
use crate::inference::{
    assemble_prompt, ChatBackend, ChatMessage, ChatRequest, PromptConfig, PromptError,
    PromptInput, Role, Task, FITB_LABELS,
};

pub const FITB_CANDIDATES: usize = 4;

pub const STYLE_PRESETS: &[&str] = &[
    "casual", "formal", "sport", "business", "bohemian", "streetwear", "vintage", "minimalist",
    "elegant", "preppy",
];
pub const OCCASION_PRESETS: &[&str] = &[
    "brunch", "office", "evening", "wedding", "party", "beach", "travel", "date", "work",
    "weekend",
];

#[derive(Debug, Error)]
pub enum QaGenError {
    #[error("split {0} has no outfits")]
    EmptySplit(Split),
    #[error("negatives_per_positive must be at least 1")]
    InvalidNegatives,
    #[error("outfit {outfit_id}: no replacement item available in the split")]
    NoReplacement { outfit_id: String },
    #[error("outfit {outfit_id}: only {available} distractor(s) available, need 3")]
    InsufficientDistractors { outfit_id: String, available: usize },
    #[error("official FITB entry {index} has {count} candidates, expected 4")]
    OfficialCandidates { index: usize, count: usize },
    #[error("official FITB entry {index} has negative blank_position")]
    OfficialBlank { index: usize },
    #[error("no prompt templates given")]
    NoTemplates,
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("invalid training record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Json {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, QaGenError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompatLabel {
    Compatible,
    Incompatible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub position: usize,
    pub replaced_item: String,
    pub replacement_item: String,
    /// The replacement came from another category because the item's own
    /// category had no candidates in the split.
    pub fallback_any_category: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryProvenance {
    pub source_outfit_id: String,
    /// `None` for positives.
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryQA {
    pub qa_id: String,
    pub item_ids: Vec<String>,
    pub question_text: String,
    pub label: CompatLabel,
    pub provenance: BinaryProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FitbSource {
    Generated {
        /// Distractors were drawn from any category for lack of same-category items.
        widened: bool,
    },
    Official,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FITBQuestion {
    pub qid: String,
    pub source_outfit_id: Option<String>,
    pub context_item_ids: Vec<String>,
    pub blank_position: usize,
    pub candidates: Vec<String>,
    pub answer_index: usize,
    pub split: Split,
    pub source: FitbSource,
}

impl FITBQuestion {
    pub fn truth(&self) -> &str {
        &self.candidates[self.answer_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFamily {
    Binary,
    Fitb,
    AutoQa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTags {
    pub family: RecordFamily,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub messages: Vec<ChatMessage>,
    pub tags: RecordTags,
}

impl TrainingRecord {
    pub fn validate(&self) -> Result<()> {
        match self.messages.last() {
            Some(m) if m.role == Role::Assistant => {}
            _ => {
                return Err(QaGenError::InvalidRecord(
                    "last message must be from the assistant".into(),
                ))
            }
        }
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return Err(QaGenError::InvalidRecord("empty message content".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Description,
    Qa,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occasion: Option<String>,
    pub item_ids: Vec<String>,
    pub source: KnowledgeSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub doc_id: String,
    pub text: String,
    pub tags: KnowledgeTags,
}

/// Deterministic random stream for the outfit at `position`.
fn outfit_rng(seed: u64, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position as u64);
    rng
}

struct SplitPools<'a> {
    by_category: BTreeMap<&'a str, Vec<&'a str>>,
    all: Vec<&'a str>,
}

impl<'a> SplitPools<'a> {
    fn new(catalog: &'a Catalog, outfits: &[&'a Outfit]) -> Self {
        let mut by_category: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut all = BTreeSet::new();
        for outfit in outfits {
            for id in &outfit.item_ids {
                let item = &catalog.items[id];
                by_category
                    .entry(item.semantic_category.as_str())
                    .or_default()
                    .insert(id.as_str());
                all.insert(id.as_str());
            }
        }
        SplitPools {
            by_category: by_category
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            all: all.into_iter().collect(),
        }
    }

    /// Items of `category` (or all items) that are not in `exclude`. Any such
    /// item necessarily comes from another outfit of the split.
    fn candidates(&self, category: Option<&str>, exclude: &[String]) -> Vec<&'a str> {
        let pool = match category {
            Some(c) => self.by_category.get(c).map(Vec::as_slice).unwrap_or(&[]),
            None => self.all.as_slice(),
        };
        pool.iter()
            .copied()
            .filter(|id| !exclude.iter().any(|e| e == id))
            .collect()
    }
}

fn split_outfits(catalog: &Catalog, split: Split) -> Result<Vec<&Outfit>> {
    let outfits = catalog.split_outfits(split);
    if outfits.is_empty() {
        return Err(QaGenError::EmptySplit(split));
    }
    Ok(outfits)
}

fn outfit_key(ids: &[String]) -> Vec<String> {
    let mut k = ids.to_vec();
    k.sort();
    k
}

fn lookup(catalog: &Catalog, ids: &[String]) -> Result<Vec<Item>> {
    ids.iter()
        .map(|id| {
            catalog
                .item(id)
                .cloned()
                .ok_or_else(|| QaGenError::UnknownItem(id.clone()))
        })
        .collect()
}

/// Text of the binary-compatibility question for `item_ids`, identical to the
/// user turn of the corresponding prompt.
pub fn binary_question_text(catalog: &Catalog, item_ids: &[String], prompts: &PromptConfig) -> Result<String> {
    let items = lookup(catalog, item_ids)?;
    let bundle = assemble_prompt(
        Task::Binary,
        &PromptInput {
            items: &items,
            ..Default::default()
        },
        prompts,
    )?;
    Ok(bundle.user_text)
}

/// One positive per outfit of `split` followed by its negatives. Negatives
/// replace one uniformly chosen item with a uniformly chosen item of the same
/// semantic category drawn from other outfits of the same split.
pub fn gen_binary_qa(
    catalog: &Catalog,
    split: Split,
    negatives_per_positive: usize,
    seed: u64,
    prompts: &PromptConfig,
) -> Result<Vec<BinaryQA>> {
    if negatives_per_positive == 0 {
        return Err(QaGenError::InvalidNegatives);
    }
    let outfits = split_outfits(catalog, split)?;
    let pools = SplitPools::new(catalog, &outfits);
    let real: HashSet<Vec<String>> = catalog
        .outfits
        .iter()
        .map(|o| outfit_key(&o.item_ids))
        .collect();

    let per_outfit: Vec<Result<Vec<BinaryQA>>> = outfits
        .par_iter()
        .enumerate()
        .map(|(pos, outfit)| {
            let mut rng = outfit_rng(seed, pos);
            let mut out = Vec::with_capacity(1 + negatives_per_positive);
            out.push(BinaryQA {
                qa_id: format!("{}-pos", outfit.outfit_id),
                item_ids: outfit.item_ids.clone(),
                question_text: binary_question_text(catalog, &outfit.item_ids, prompts)?,
                label: CompatLabel::Compatible,
                provenance: BinaryProvenance {
                    source_outfit_id: outfit.outfit_id.clone(),
                    corruption: None,
                },
            });
            for n in 0..negatives_per_positive {
                let (item_ids, corruption) = corrupt_outfit(catalog, outfit, &pools, &real, &mut rng)?;
                out.push(BinaryQA {
                    qa_id: format!("{}-neg{n}", outfit.outfit_id),
                    question_text: binary_question_text(catalog, &item_ids, prompts)?,
                    item_ids,
                    label: CompatLabel::Incompatible,
                    provenance: BinaryProvenance {
                        source_outfit_id: outfit.outfit_id.clone(),
                        corruption: Some(corruption),
                    },
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_outfit {
        all.extend(r?);
    }
    Ok(all)
}

fn corrupt_outfit(
    catalog: &Catalog,
    outfit: &Outfit,
    pools: &SplitPools<'_>,
    real: &HashSet<Vec<String>>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<String>, Corruption)> {
    let position = rng.gen_range(0..outfit.item_ids.len());
    // Try the drawn position first, then the rest, so a degenerate slot does not
    // block the negative.
    let mut positions: Vec<usize> = (0..outfit.item_ids.len()).filter(|&p| p != position).collect();
    positions.shuffle(rng);
    positions.insert(0, position);
    for fallback in [false, true] {
        for &pos in &positions {
            let replaced = &outfit.item_ids[pos];
            let category = catalog.items[replaced].semantic_category.as_str();
            let mut pool = pools.candidates((!fallback).then_some(category), &outfit.item_ids);
            pool.shuffle(rng);
            for cand in pool {
                let mut ids = outfit.item_ids.clone();
                ids[pos] = cand.to_string();
                // A swap that happens to recreate a real outfit is not a negative.
                if real.contains(&outfit_key(&ids)) {
                    continue;
                }
                return Ok((
                    ids,
                    Corruption {
                        position: pos,
                        replaced_item: replaced.clone(),
                        replacement_item: cand.to_string(),
                        fallback_any_category: fallback,
                    },
                ));
            }
        }
    }
    Err(QaGenError::NoReplacement {
        outfit_id: outfit.outfit_id.clone(),
    })
}

/// One FITB question per outfit of `split`, or the official questions for the
/// split when the catalog carries them.
pub fn gen_fitb_questions(catalog: &Catalog, split: Split, seed: u64) -> Result<Vec<FITBQuestion>> {
    if let Some(official) = catalog.official_fitb.get(&split) {
        return official
            .iter()
            .enumerate()
            .map(|(index, q)| {
                if q.answers.len() != FITB_CANDIDATES {
                    return Err(QaGenError::OfficialCandidates {
                        index,
                        count: q.answers.len(),
                    });
                }
                let blank_position = usize::try_from(q.blank_position)
                    .map_err(|_| QaGenError::OfficialBlank { index })?;
                Ok(FITBQuestion {
                    qid: format!("{split}-official-{index:06}"),
                    source_outfit_id: None,
                    context_item_ids: q.question.clone(),
                    blank_position,
                    candidates: q.answers.clone(),
                    answer_index: 0,
                    split,
                    source: FitbSource::Official,
                })
            })
            .collect();
    }

    let outfits = split_outfits(catalog, split)?;
    let pools = SplitPools::new(catalog, &outfits);
    outfits
        .par_iter()
        .enumerate()
        .map(|(pos, outfit)| {
            let mut rng = outfit_rng(seed, pos);
            let blank = rng.gen_range(0..outfit.item_ids.len());
            let truth = &outfit.item_ids[blank];
            let category = catalog.items[truth].semantic_category.as_str();
            let mut pool = pools.candidates(Some(category), &outfit.item_ids);
            let mut widened = false;
            if pool.len() < FITB_CANDIDATES - 1 {
                pool = pools.candidates(None, &outfit.item_ids);
                widened = true;
            }
            if pool.len() < FITB_CANDIDATES - 1 {
                return Err(QaGenError::InsufficientDistractors {
                    outfit_id: outfit.outfit_id.clone(),
                    available: pool.len(),
                });
            }
            let mut candidates: Vec<String> = pool
                .choose_multiple(&mut rng, FITB_CANDIDATES - 1)
                .map(|s| s.to_string())
                .collect();
            candidates.shuffle(&mut rng);
            let answer_index = rng.gen_range(0..FITB_CANDIDATES);
            candidates.insert(answer_index, truth.clone());
            let mut context = outfit.item_ids.clone();
            context.remove(blank);
            Ok(FITBQuestion {
                qid: format!("{split}-{}", outfit.outfit_id),
                source_outfit_id: Some(outfit.outfit_id.clone()),
                context_item_ids: context,
                blank_position: blank,
                candidates,
                answer_index,
                split,
                source: FitbSource::Generated { widened },
            })
        })
        .collect()
}

/// Fine-tuning record for a binary QA: system prompt, question, "yes"/"no".
pub fn binary_record(qa: &BinaryQA, split: Split, prompts: &PromptConfig) -> TrainingRecord {
    let answer = match qa.label {
        CompatLabel::Compatible => "yes",
        CompatLabel::Incompatible => "no",
    };
    TrainingRecord {
        messages: vec![
            ChatMessage::new(Role::System, prompts.templates.system.clone()),
            ChatMessage::new(Role::User, qa.question_text.clone()),
            ChatMessage::new(Role::Assistant, answer),
        ],
        tags: RecordTags {
            family: RecordFamily::Binary,
            split,
        },
    }
}

/// Fine-tuning record for a FITB question, using the same prompt rendering as
/// evaluation (without retrieved context).
pub fn fitb_record(catalog: &Catalog, q: &FITBQuestion, prompts: &PromptConfig) -> Result<TrainingRecord> {
    let items = lookup(catalog, &q.context_item_ids)?;
    let candidates = lookup(catalog, &q.candidates)?;
    let bundle = assemble_prompt(
        Task::Fitb,
        &PromptInput {
            items: &items,
            candidates: Some(&candidates),
            ..Default::default()
        },
        prompts,
    )?;
    let mut messages = bundle.messages();
    messages.push(ChatMessage::new(
        Role::Assistant,
        format!("Answer: {}", FITB_LABELS[q.answer_index]),
    ));
    Ok(TrainingRecord {
        messages,
        tags: RecordTags {
            family: RecordFamily::Fitb,
            split: q.split,
        },
    })
}

/// Prompt template for auto-QA. `{items}` expands to the outfit's item texts;
/// a template mentioning `{n}` asks for QA pairs and is skipped when
/// `per_outfit` is 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoQaTemplate {
    pub name: String,
    pub text: String,
}

impl AutoQaTemplate {
    pub fn new(name: &str, text: &str) -> Self {
        AutoQaTemplate {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn asks_for_pairs(&self) -> bool {
        self.text.contains("{n}")
    }

    pub fn render(&self, items: &str, n: usize) -> String {
        self.text.replace("{items}", items).replace("{n}", &n.to_string())
    }
}

pub fn default_auto_templates() -> Vec<AutoQaTemplate> {
    vec![
        AutoQaTemplate::new(
            "describe",
            "Describe the style and fit of an outfit containing: {items}",
        ),
        AutoQaTemplate::new(
            "qa",
            "Write {n} question-answer pairs about the style of this outfit. \
             Start each question line with \"Q:\" and each answer line with \"A:\".\n\
             Outfit: {items}",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoQaConfig {
    pub templates: Vec<AutoQaTemplate>,
    pub per_outfit: usize,
    /// Sample at most this many outfits of the split (seeded); all when `None`.
    pub max_outfits: Option<usize>,
    pub seed: u64,
    /// Maximum concurrent backend calls.
    pub concurrency: usize,
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
    pub system: String,
}

impl Default for AutoQaConfig {
    fn default() -> Self {
        AutoQaConfig {
            templates: default_auto_templates(),
            per_outfit: 3,
            max_outfits: None,
            seed: 0,
            concurrency: 4,
            model: "fashion-llm".into(),
            temperature: 0.7,
            max_tokens: 512,
            system: "You are a fashion expert writing concise, factual styling notes.".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AutoQaOutput {
    pub records: Vec<TrainingRecord>,
    pub docs: Vec<KnowledgeDoc>,
    pub prompts_issued: usize,
    /// Q or A lines that could not be paired.
    pub malformed_dropped: usize,
    pub duplicate_docs_dropped: usize,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedReply {
    pub pairs: Vec<(String, String)>,
    pub prose: String,
    pub malformed: usize,
}

/// Splits a reply into QA pairs and prose. Lines starting with `Q:` and `A:`
/// pair up in order; a `Q:` line may carry its answer inline after `A:`.
/// Unpaired markers are counted as malformed; all other lines are prose.
pub fn parse_qa_reply(text: &str) -> ParsedReply {
    let mut out = ParsedReply::default();
    let mut pending: Option<String> = None;
    let mut prose = Vec::new();
    for line in text.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix("Q:") {
            if pending.take().is_some() {
                out.malformed += 1;
            }
            match rest.split_once("A:") {
                Some((q, a)) => push_pair(&mut out, q, a),
                None => pending = Some(rest.trim().to_string()),
            }
        } else if let Some(rest) = line.strip_prefix("A:") {
            match pending.take() {
                Some(q) => push_pair(&mut out, &q, rest),
                None => out.malformed += 1,
            }
        } else if !line.is_empty() {
            prose.push(line);
        }
    }
    if pending.is_some() {
        out.malformed += 1;
    }
    out.prose = prose.join(" ");
    out
}

fn push_pair(out: &mut ParsedReply, q: &str, a: &str) {
    let (q, a) = (q.trim(), a.trim());
    if q.is_empty() || a.is_empty() {
        out.malformed += 1;
    } else {
        out.pairs.push((q.to_string(), a.to_string()));
    }
}

fn preset_re(presets: &[&str]) -> Regex {
    Regex::new(&format!(r"(?i)\b({})\b", presets.join("|"))).unwrap()
}

/// First style and occasion preset mentioned in `text`, if any.
pub fn detect_style_occasion(text: &str) -> (Option<String>, Option<String>) {
    static RES: OnceLock<(Regex, Regex)> = OnceLock::new();
    let (style, occasion) = RES.get_or_init(|| (preset_re(STYLE_PRESETS), preset_re(OCCASION_PRESETS)));
    let first = |re: &Regex| re.find(text).map(|m| m.as_str().to_lowercase());
    (first(style), first(occasion))
}

struct OutfitAutoQa {
    records: Vec<TrainingRecord>,
    docs: Vec<KnowledgeDoc>,
    prompts: usize,
    malformed: usize,
    failures: Vec<String>,
}

/// Prompts `llm` about sampled outfits of `split` and turns replies into
/// training records (one per QA pair) and knowledge docs (one per QA pair and
/// one per prose description). Backend failures are collected, not fatal.
///
/// Output order follows the catalog order of the sampled outfits.
pub fn gen_auto_qa(
    llm: &dyn ChatBackend,
    catalog: &Catalog,
    split: Split,
    config: &AutoQaConfig,
) -> Result<AutoQaOutput> {
    if config.templates.is_empty() {
        return Err(QaGenError::NoTemplates);
    }
    let mut outfits = split_outfits(catalog, split)?;
    if let Some(max) = config.max_outfits {
        if max < outfits.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut keep = rand::seq::index::sample(&mut rng, outfits.len(), max).into_vec();
            keep.sort_unstable();
            outfits = keep.into_iter().map(|i| outfits[i]).collect();
        }
    }
    let templates: Vec<(usize, &AutoQaTemplate)> = config
        .templates
        .iter()
        .enumerate()
        .filter(|(_, t)| config.per_outfit > 0 || !t.asks_for_pairs())
        .collect();

    let run_one = |outfit: &&Outfit| -> OutfitAutoQa {
        let mut acc = OutfitAutoQa {
            records: Vec::new(),
            docs: Vec::new(),
            prompts: 0,
            malformed: 0,
            failures: Vec::new(),
        };
        let items = outfit
            .item_ids
            .iter()
            .map(|id| item_text(&catalog.items[id]))
            .collect::<Vec<_>>()
            .join("; ");
        for &(t_idx, template) in &templates {
            let request = ChatRequest {
                model: config.model.clone(),
                messages: vec![
                    ChatMessage::new(Role::System, config.system.clone()),
                    ChatMessage::new(Role::User, template.render(&items, config.per_outfit)),
                ],
                temperature: config.temperature,
                max_tokens: config.max_tokens,
            };
            acc.prompts += 1;
            let reply = match llm.chat(&request) {
                Ok(r) => r.text,
                Err(e) => {
                    acc.failures
                        .push(format!("outfit {} template {}: {e}", outfit.outfit_id, template.name));
                    continue;
                }
            };
            let parsed = parse_qa_reply(&reply);
            acc.malformed += parsed.malformed;
            for (p_idx, (q, a)) in parsed.pairs.iter().enumerate() {
                acc.records.push(TrainingRecord {
                    messages: vec![
                        ChatMessage::new(Role::System, config.system.clone()),
                        ChatMessage::new(Role::User, q.clone()),
                        ChatMessage::new(Role::Assistant, a.clone()),
                    ],
                    tags: RecordTags {
                        family: RecordFamily::AutoQa,
                        split,
                    },
                });
                let text = format!("Q: {q} A: {a}");
                acc.docs.push(knowledge_doc(
                    format!("kd-{}-{t_idx}-{p_idx}", outfit.outfit_id),
                    text,
                    outfit,
                    KnowledgeSource::Qa,
                ));
            }
            if !parsed.prose.is_empty() {
                acc.docs.push(knowledge_doc(
                    format!("kd-{}-{t_idx}-desc", outfit.outfit_id),
                    parsed.prose,
                    outfit,
                    KnowledgeSource::Description,
                ));
            }
        }
        acc
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .expect("thread pool");
    let per_outfit: Vec<OutfitAutoQa> = pool.install(|| outfits.par_iter().map(run_one).collect());

    let mut out = AutoQaOutput::default();
    let mut seen_text = HashSet::new();
    for acc in per_outfit {
        out.records.extend(acc.records);
        out.prompts_issued += acc.prompts;
        out.malformed_dropped += acc.malformed;
        out.failures.extend(acc.failures);
        for doc in acc.docs {
            if seen_text.insert(doc.text.clone()) {
                out.docs.push(doc);
            } else {
                out.duplicate_docs_dropped += 1;
            }
        }
    }
    if out.records.is_empty() && out.docs.is_empty() {
        log::warn!("auto-QA produced no parsable output ({} prompts)", out.prompts_issued);
    }
    if !out.failures.is_empty() {
        log::warn!("auto-QA: {} backend failure(s)", out.failures.len());
    }
    Ok(out)
}

fn knowledge_doc(doc_id: String, text: String, outfit: &Outfit, source: KnowledgeSource) -> KnowledgeDoc {
    let (style, occasion) = detect_style_occasion(&text);
    KnowledgeDoc {
        doc_id,
        text,
        tags: KnowledgeTags {
            style,
            occasion,
            item_ids: outfit.item_ids.clone(),
            source,
        },
    }
}

#[derive(Serialize, Deserialize)]
struct FinetuneLine {
    messages: Vec<ChatMessage>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> QaGenError + '_ {
    move |source| QaGenError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one JSON value per line, in input order.
pub fn write_jsonl<T: Serialize>(values: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for v in values {
        let line = serde_json::to_string(v).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| QaGenError::Json {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Chat fine-tuning JSONL: `{"messages":[{"role":..,"content":..}]}` per line.
pub fn export_finetune_jsonl(records: &[TrainingRecord], path: &Path) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    let lines: Vec<FinetuneLine> = records
        .iter()
        .map(|r| FinetuneLine {
            messages: r.messages.clone(),
        })
        .collect();
    write_jsonl(&lines, path)
}

pub fn read_finetune_jsonl(path: &Path) -> Result<Vec<Vec<ChatMessage>>> {
    Ok(read_jsonl::<FinetuneLine>(path)?
        .into_iter()
        .map(|l| l.messages)
        .collect())
}

pub fn export_knowledge_jsonl(docs: &[KnowledgeDoc], path: &Path) -> Result<()> {
    write_jsonl(docs, path)
}

pub fn read_knowledge_jsonl(path: &Path) -> Result<Vec<KnowledgeDoc>> {
    read_jsonl(path)
}
