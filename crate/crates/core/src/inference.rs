//! Prompt assembly, chat backends and answer parsing.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{item_text, Item};
use crate::embedstore::{api_base, EmbeddingVector, MockEmbedder};
use crate::http::{join_url, HttpError, JsonClient, RetryPolicy};

/// Characters per token used to turn a token budget into a character budget.
pub const CHARS_PER_TOKEN: usize = 4;

pub const FITB_LABELS: [char; 4] = ['A', 'B', 'C', 'D'];

const ITEMS_MARKER: &str = "Outfit items:";
const BINARY_MARKER: &str = "Items:";
const QUERY_MARKER: &str = "Query items:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Fitb,
    Binary,
    Recommend,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Fitb => "fitb",
            Task::Binary => "binary",
            Task::Recommend => "recommend",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: Option<String>,
    pub usage: Usage,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            finish_reason: Some("stop".into()),
            usage: Usage::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("scripted backend has no queued response")]
    Exhausted,
    #[error("backend failure: {0}")]
    Failed(String),
}

pub trait ChatBackend: Send + Sync {
    /// Short label: `scripted`, `oracle`, `random` or `http`.
    fn kind(&self) -> &'static str;

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub fn chat(backend: &dyn ChatBackend, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
    backend.chat(request)
}

#[derive(Debug, Clone)]
enum Scripted {
    Reply(String),
    Fail(String),
}

/// Replays queued replies in order and records every request it receives.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Scripted>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        ScriptedBackend {
            queue: Mutex::new(replies.into_iter().map(|r| Scripted::Reply(r.into())).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn push_reply(&self, reply: impl Into<String>) {
        self.queue.lock().unwrap().push_back(Scripted::Reply(reply.into()));
    }

    pub fn push_failure(&self, message: impl Into<String>) {
        self.queue.lock().unwrap().push_back(Scripted::Fail(message.into()));
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn kind(&self) -> &'static str {
        "scripted"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.seen.lock().unwrap().push(request.clone());
        match self.queue.lock().unwrap().pop_front() {
            Some(Scripted::Reply(text)) => Ok(ChatResponse::text(text)),
            Some(Scripted::Fail(msg)) => Err(BackendError::Failed(msg)),
            None => Err(BackendError::Exhausted),
        }
    }
}

/// A FITB question recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptedFitb {
    pub context: Vec<String>,
    pub options: Vec<String>,
}

fn last_user_message(request: &ChatRequest) -> &str {
    request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

fn option_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([ABCD])\) (.*)$").unwrap())
}

/// Extracts the context items and labeled options from a FITB prompt rendered
/// by [`assemble_prompt`]. Only the text after the last item-list marker is
/// read, so retrieved context preceding it cannot interfere.
pub fn parse_fitb_prompt(user_text: &str) -> Option<PromptedFitb> {
    let start = user_text.rfind(ITEMS_MARKER)?;
    let mut context = Vec::new();
    let mut options = Vec::new();
    for line in user_text[start + ITEMS_MARKER.len()..].lines() {
        if let Some(item) = line.strip_prefix("- ") {
            if options.is_empty() {
                context.push(item.to_string());
            }
        } else if let Some(c) = option_line_re().captures(line) {
            options.push(c[2].to_string());
        }
    }
    (options.len() == FITB_LABELS.len() && !context.is_empty()).then_some(PromptedFitb {
        context,
        options,
    })
}

/// Answers FITB prompts with the option whose mock embedding has the highest
/// cosine to the mean of the context-item embeddings (ties go to the earlier
/// label). Binary prompts get "yes"; anything else gets a fixed rationale.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    embedder: MockEmbedder,
}

impl OracleBackend {
    pub fn new(embedder: MockEmbedder) -> Self {
        OracleBackend { embedder }
    }

    pub fn choose(&self, question: &PromptedFitb) -> Option<usize> {
        let dims = self.embedder_dims();
        let mut centroid = vec![0f64; dims];
        for text in &question.context {
            let v = self.embedder.embed_text(text).ok()?;
            for (c, x) in centroid.iter_mut().zip(v.values()) {
                *c += f64::from(*x);
            }
        }
        let n = question.context.len() as f64;
        let centroid =
            EmbeddingVector::new(centroid.iter().map(|c| (c / n) as f32).collect()).ok()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, text) in question.options.iter().enumerate() {
            let Ok(v) = self.embedder.embed_text(text) else {
                continue;
            };
            let Ok(score) = crate::embedstore::cosine(&centroid, &v) else {
                continue;
            };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| i)
    }

    fn embedder_dims(&self) -> usize {
        use crate::embedstore::EmbeddingProvider;
        self.embedder.dims()
    }
}

impl ChatBackend for OracleBackend {
    fn kind(&self) -> &'static str {
        "oracle"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let user = last_user_message(request);
        if let Some(q) = parse_fitb_prompt(user) {
            return match self.choose(&q) {
                Some(i) => Ok(ChatResponse::text(format!("Answer: {}", FITB_LABELS[i]))),
                None => Ok(ChatResponse::text("I cannot tell.")),
            };
        }
        if user.contains(BINARY_MARKER) && !user.contains(QUERY_MARKER) {
            return Ok(ChatResponse::text("Yes, these items are compatible."));
        }
        Ok(ChatResponse::text(
            "These pieces share colors and a consistent level of formality.",
        ))
    }
}

/// Uniform random answers. The draw for a request is seeded from the seed and
/// the request content, so results do not depend on call order.
#[derive(Debug, Clone)]
pub struct RandomBackend {
    seed: u64,
}

impl RandomBackend {
    pub fn new(seed: u64) -> Self {
        RandomBackend { seed }
    }

    fn rng_for(&self, request: &ChatRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for m in &request.messages {
            h.update(m.content.as_bytes());
            h.update([0u8]);
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

impl ChatBackend for RandomBackend {
    fn kind(&self) -> &'static str {
        "random"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut rng = self.rng_for(request);
        let user = last_user_message(request);
        let text = if parse_fitb_prompt(user).is_some() {
            format!("Answer: {}", FITB_LABELS[rng.gen_range(0..FITB_LABELS.len())])
        } else if user.contains(BINARY_MARKER) && !user.contains(QUERY_MARKER) {
            if rng.gen_bool(0.5) { "yes" } else { "no" }.to_string()
        } else {
            "Any of these would work.".to_string()
        };
        Ok(ChatResponse::text(text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpChatConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
}

/// OpenAI-style `POST <base>/v1/chat/completions` client.
pub struct HttpChatBackend {
    url: String,
    client: JsonClient,
}

#[derive(Debug, Deserialize)]
struct CompletionBody {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig) -> Self {
        let url = join_url(&api_base(&config.base_url), "chat/completions");
        HttpChatBackend {
            url,
            client: JsonClient::new(config.retry, config.api_key),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.url
    }

    /// Serialized request body, exactly as sent on the wire.
    pub fn request_body(request: &ChatRequest) -> String {
        serde_json::to_string(request).expect("chat request serializes")
    }
}

impl ChatBackend for HttpChatBackend {
    fn kind(&self) -> &'static str {
        "http"
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let value = self.client.post(&self.url, Self::request_body(request))?;
        let decode = |message: String| {
            BackendError::Http(HttpError::Decode {
                endpoint: self.url.clone(),
                message,
            })
        };
        let body: CompletionBody =
            serde_json::from_value(value).map_err(|e| decode(e.to_string()))?;
        let choice = body
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| decode("no choices in response".into()))?;
        Ok(ChatResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason,
            usage: body.usage.unwrap_or_default(),
        })
    }
}

/// Editable prompt wording. The item-list and option layout is fixed so that
/// prompts stay machine-readable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub system: String,
    pub context_header: String,
    pub fitb_question: String,
    pub fitb_instruction: String,
    pub binary_question: String,
    pub recommend_instruction: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            system: "You are a fashion stylist. You judge whether clothing items form a \
                     well-coordinated outfit and recommend items that complete an outfit."
                .into(),
            context_header: "Retrieved fashion knowledge:".into(),
            fitb_question: "Which completes the outfit?".into(),
            fitb_instruction: "Answer with a single letter: A, B, C or D.".into(),
            binary_question: "Do these items form a compatible outfit? Answer yes or no.".into(),
            recommend_instruction: "Recommend items that complete this outfit and briefly \
                                    explain why they work together."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub templates: PromptTemplates,
    /// Budget on system text plus the rendered user message, in characters.
    pub char_budget: usize,
}

impl PromptConfig {
    pub fn with_token_budget(templates: PromptTemplates, tokens: usize) -> Self {
        PromptConfig {
            templates,
            char_budget: tokens * CHARS_PER_TOKEN,
        }
    }
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self::with_token_budget(PromptTemplates::default(), 2048)
    }
}

/// A retrieved document ready for rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub doc_id: String,
    pub text: String,
    pub paths: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInput<'a> {
    pub items: &'a [Item],
    pub candidates: Option<&'a [Item]>,
    pub context: &'a [ContextDoc],
    pub style: Option<&'a str>,
    pub occasion: Option<&'a str>,
    pub free_text: Option<&'a str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task: Task,
    pub system_text: String,
    pub user_text: String,
    pub context_block: String,
    pub candidate_labels: Option<Vec<char>>,
    pub context_doc_ids: Vec<String>,
    pub truncated: bool,
}

impl PromptBundle {
    pub fn user_message(&self) -> String {
        if self.context_block.is_empty() {
            self.user_text.clone()
        } else {
            format!("{}\n\n{}", self.context_block, self.user_text)
        }
    }

    /// Length counted against the budget: system text plus user message.
    pub fn char_len(&self) -> usize {
        self.system_text.chars().count() + self.user_message().chars().count()
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::new(Role::System, self.system_text.clone()),
            ChatMessage::new(Role::User, self.user_message()),
        ]
    }

    /// Request at temperature 0.
    pub fn to_request(&self, model: &str, max_tokens: u32) -> ChatRequest {
        ChatRequest {
            model: model.to_string(),
            messages: self.messages(),
            temperature: 0.0,
            max_tokens,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("fitb prompts need exactly 4 candidates, got {0}")]
    CandidateCount(usize),
    #[error("{0} prompts need at least one item")]
    NoItems(Task),
    #[error("recommend prompts need query items or free text")]
    EmptyQuery,
    #[error("prompt without context needs {needed} characters, budget is {budget}")]
    OverBudget { needed: usize, budget: usize },
}

fn item_lines(items: &[Item]) -> String {
    items
        .iter()
        .map(|it| format!("- {}\n", item_text(it)))
        .collect()
}

fn render_user_text(
    task: Task,
    input: &PromptInput<'_>,
    t: &PromptTemplates,
) -> Result<(String, Option<Vec<char>>), PromptError> {
    match task {
        Task::Fitb => {
            let candidates = input.candidates.unwrap_or(&[]);
            if candidates.len() != FITB_LABELS.len() {
                return Err(PromptError::CandidateCount(candidates.len()));
            }
            if input.items.is_empty() {
                return Err(PromptError::NoItems(task));
            }
            let mut s = format!("{ITEMS_MARKER}\n{}{}\n", item_lines(input.items), t.fitb_question);
            for (label, cand) in FITB_LABELS.iter().zip(candidates) {
                s.push_str(&format!("{label}) {}\n", item_text(cand)));
            }
            s.push_str(&t.fitb_instruction);
            Ok((s, Some(FITB_LABELS.to_vec())))
        }
        Task::Binary => {
            if input.items.is_empty() {
                return Err(PromptError::NoItems(task));
            }
            Ok((
                format!("{BINARY_MARKER}\n{}{}", item_lines(input.items), t.binary_question),
                None,
            ))
        }
        Task::Recommend => {
            let free = input.free_text.map(str::trim).filter(|s| !s.is_empty());
            if input.items.is_empty() && free.is_none() {
                return Err(PromptError::EmptyQuery);
            }
            let mut s = String::new();
            if !input.items.is_empty() {
                s.push_str(&format!("{QUERY_MARKER}\n{}", item_lines(input.items)));
            }
            if let Some(f) = free {
                s.push_str(&format!("Request: {f}\n"));
            }
            if let Some(style) = input.style {
                s.push_str(&format!("Style: {style}\n"));
            }
            if let Some(occasion) = input.occasion {
                s.push_str(&format!("Occasion: {occasion}\n"));
            }
            s.push_str(&t.recommend_instruction);
            Ok((s, None))
        }
    }
}

fn render_context_line(rank: usize, doc: &ContextDoc) -> String {
    format!(
        "[{rank}] {} (source: {}; paths: {})\n",
        crate::embedstore::normalize_text(&doc.text),
        doc.doc_id,
        doc.paths.join(",")
    )
}

/// Renders a prompt. Retrieved documents are kept in the given (fused) order
/// and dropped from the tail until the prompt fits the character budget.
pub fn assemble_prompt(
    task: Task,
    input: &PromptInput<'_>,
    config: &PromptConfig,
) -> Result<PromptBundle, PromptError> {
    let t = &config.templates;
    let (user_text, candidate_labels) = render_user_text(task, input, t)?;
    let mut bundle = PromptBundle {
        task,
        system_text: t.system.clone(),
        user_text,
        context_block: String::new(),
        candidate_labels,
        context_doc_ids: Vec::new(),
        truncated: false,
    };
    let base = bundle.char_len();
    if base > config.char_budget {
        return Err(PromptError::OverBudget {
            needed: base,
            budget: config.char_budget,
        });
    }
    if input.context.is_empty() {
        return Ok(bundle);
    }
    // "\n\n" separates the context block from the user text.
    let mut block = format!("{}\n", t.context_header);
    let mut used = base + 2 + block.chars().count();
    for (i, doc) in input.context.iter().enumerate() {
        let line = render_context_line(i + 1, doc);
        let len = line.chars().count();
        if used + len > config.char_budget {
            break;
        }
        used += len;
        block.push_str(&line);
        bundle.context_doc_ids.push(doc.doc_id.clone());
    }
    bundle.truncated = bundle.context_doc_ids.len() < input.context.len();
    if !bundle.context_doc_ids.is_empty() {
        bundle.context_block = block.trim_end().to_string();
    }
    debug_assert!(bundle.char_len() <= config.char_budget);
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseConfidence {
    Exact,
    Heuristic,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub task: Task,
    pub choice_index: Option<usize>,
    pub binary: Option<bool>,
    pub free_text: Option<String>,
    pub confidence: ParseConfidence,
}

impl ParsedAnswer {
    fn failed(task: Task) -> Self {
        ParsedAnswer {
            task,
            choice_index: None,
            binary: None,
            free_text: None,
            confidence: ParseConfidence::Failed,
        }
    }
}

struct AnswerPatterns {
    cue: Regex,
    letter: Regex,
    digit: Regex,
    binary: Regex,
}

fn patterns() -> &'static AnswerPatterns {
    static P: OnceLock<AnswerPatterns> = OnceLock::new();
    P.get_or_init(|| AnswerPatterns {
        cue: Regex::new(r"(?i)answer\s*(?:is)?\s*:?|\boption\b").unwrap(),
        letter: Regex::new(r"\b([ABCD])\b").unwrap(),
        digit: Regex::new(r"\b([1-4])\b").unwrap(),
        binary: Regex::new(r"(?i)\b(not compatible|incompatible|compatible|yes|no)\b").unwrap(),
    })
}

/// Extracts the answer for `task` from model output. Never guesses: text
/// without a recognizable cue yields `ParseConfidence::Failed`.
///
/// FITB: the first standalone A–D (searched after an "Answer:"/"option" cue
/// when one is present) is exact; a standalone 1–4 is accepted as a heuristic
/// fallback. Binary: the first of yes/compatible (true) or
/// no/incompatible/not compatible (false); exact when it opens the reply.
pub fn parse_answer(task: Task, text: &str) -> ParsedAnswer {
    let p = patterns();
    match task {
        Task::Fitb => {
            let region = p.cue.find(text).map(|m| &text[m.end()..]);
            for scope in region.into_iter().chain(std::iter::once(text)) {
                if let Some(c) = p.letter.captures(scope) {
                    let idx = (c[1].as_bytes()[0] - b'A') as usize;
                    return ParsedAnswer {
                        choice_index: Some(idx),
                        confidence: ParseConfidence::Exact,
                        ..ParsedAnswer::failed(task)
                    };
                }
                if let Some(c) = p.digit.captures(scope) {
                    let idx = (c[1].as_bytes()[0] - b'1') as usize;
                    return ParsedAnswer {
                        choice_index: Some(idx),
                        confidence: ParseConfidence::Heuristic,
                        ..ParsedAnswer::failed(task)
                    };
                }
            }
            ParsedAnswer::failed(task)
        }
        Task::Binary => match p.binary.find(text) {
            Some(m) => {
                let word = m.as_str().to_ascii_lowercase();
                let value = matches!(word.as_str(), "yes" | "compatible");
                let leading = text[..m.start()]
                    .chars()
                    .all(|c| !c.is_alphanumeric());
                ParsedAnswer {
                    binary: Some(value),
                    confidence: if leading {
                        ParseConfidence::Exact
                    } else {
                        ParseConfidence::Heuristic
                    },
                    ..ParsedAnswer::failed(task)
                }
            }
            None => ParsedAnswer::failed(task),
        },
        Task::Recommend => {
            let trimmed = text.trim();
            if trimmed.is_empty() {
                ParsedAnswer::failed(task)
            } else {
                ParsedAnswer {
                    free_text: Some(trimmed.to_string()),
                    confidence: ParseConfidence::Exact,
                    ..ParsedAnswer::failed(task)
                }
            }
        }
    }
}
