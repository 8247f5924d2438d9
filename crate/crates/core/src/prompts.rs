//! Prompt registry, question generation, prompt assembly and prompt selection.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instruction template of the base retriever; the question is appended after one space.
pub const DEFAULT_WRAPPER: &str = "<|image_1|> Represent the given image with the following question:";

pub const DEFAULT_MAX_TOKENS: u32 = 64;
pub const LLM_URL_ENV: &str = "FACET_LLM_URL";

const SELECTION_SUFFIX: &str =
    "choose the most relevant prompt for verifying the results. Please answer in one letter.";

/// Facet names and questions of the default GPT-written registry.
const GPT_QUESTIONS: [(&str, &str); 8] = [
    ("animals", "Which animals can be seen in this image?"),
    ("scenes", "What type of location is depicted in this image?"),
    ("objects", "Which objects are present in this image?"),
    ("count_of_people", "How many people are present in this image?"),
    ("materials", "What material are the objects in this image made of?"),
    ("times", "What time of day is depicted in this image?"),
    ("weathers", "What is the weather like in this image?"),
    ("gestures", "What gesture are the people making in this image?"),
];

/// Human-written alternative, same facet order.
const HUMAN_QUESTIONS: [(&str, &str); 8] = [
    ("animals", "What animals are in this image?"),
    ("scenes", "What scene is in the image?"),
    ("objects", "What objects are in the image?"),
    ("count_of_people", "How many people are in the image?"),
    ("materials", "What are the objects made of in the image?"),
    ("times", "When is the image taken?"),
    ("weathers", "What is the weather in the image?"),
    ("gestures", "What is the person doing in the image?"),
];

/// Extra words that identify a built-in facet when looking up offline questions.
const FACET_SYNONYMS: [(&str, &[&str]); 8] = [
    ("animals", &["animal", "species", "pet"]),
    ("scenes", &["scene", "location", "place", "setting"]),
    ("objects", &["object", "item", "thing"]),
    ("count_of_people", &["count", "number", "many", "crowd"]),
    ("materials", &["material", "surface", "texture"]),
    ("times", &["time", "day", "hour"]),
    ("weathers", &["weather", "sky", "climate"]),
    ("gestures", &["gesture", "pose", "action", "posture"]),
];

const LOOKUP_STOPWORDS: [&str; 6] = ["of", "the", "a", "an", "in", "people"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSpec {
    pub prompt_id: String,
    pub facet: String,
    pub question: String,
    pub wrapper: String,
    pub full_prompt: String,
}

impl PromptSpec {
    pub fn new(
        prompt_id: impl Into<String>,
        facet: impl Into<String>,
        question: impl Into<String>,
        wrapper: impl Into<String>,
    ) -> Result<Self> {
        let question = question.into();
        let wrapper = wrapper.into();
        let full_prompt = assemble_prompt(&question, &wrapper)?;
        let prompt_id = prompt_id.into();
        if prompt_id.is_empty() {
            return Err(Error::InvalidArgument("prompt_id is empty".into()));
        }
        Ok(Self { prompt_id, facet: facet.into(), question, wrapper, full_prompt })
    }

    /// The full prompt without a leading `<|image_N|>` placeholder, as listed to a selector.
    pub fn display_text(&self) -> &str {
        strip_image_token(&self.full_prompt)
    }
}

fn strip_image_token(s: &str) -> &str {
    let trimmed = s.trim_start();
    if let Some(rest) = trimmed.strip_prefix("<|image_") {
        if let Some(end) = rest.find("|>") {
            if rest[..end].chars().all(|c| c.is_ascii_digit()) {
                return rest[end + 2..].trim_start();
            }
        }
    }
    trimmed
}

/// `wrapper + " " + question`; an empty wrapper yields the bare question.
pub fn assemble_prompt(question: &str, wrapper: &str) -> Result<String> {
    if !question.ends_with('?') {
        return Err(Error::MalformedQuestion(question.to_string()));
    }
    if wrapper.is_empty() {
        Ok(question.to_string())
    } else {
        Ok(format!("{wrapper} {question}"))
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct PromptEntry {
    prompt_id: String,
    facet: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wrapper: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    prompts: Vec<PromptSpec>,
    wrapper_default: String,
}

impl PromptRegistry {
    pub fn new(prompts: Vec<PromptSpec>, wrapper_default: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &prompts {
            if !seen.insert(p.prompt_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate prompt_id `{}`", p.prompt_id)));
            }
        }
        Ok(Self { prompts, wrapper_default: wrapper_default.into() })
    }

    fn from_table(prefix: &str, table: &[(&str, &str)]) -> Self {
        let prompts = table
            .iter()
            .map(|(facet, q)| {
                PromptSpec::new(format!("{prefix}-{facet}"), *facet, *q, DEFAULT_WRAPPER).expect("built-in prompt")
            })
            .collect();
        Self::new(prompts, DEFAULT_WRAPPER).expect("built-in registry")
    }

    /// The eight GPT-written prompts, one per facet.
    pub fn gpt_default() -> Self {
        Self::from_table("gpt", &GPT_QUESTIONS)
    }

    /// The eight human-written prompts, one per facet.
    pub fn human_default() -> Self {
        Self::from_table("human", &HUMAN_QUESTIONS)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let entries: Vec<PromptEntry> =
            serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        let prompts = entries
            .into_iter()
            .map(|e| {
                let wrapper = e.wrapper.unwrap_or_else(|| DEFAULT_WRAPPER.to_string());
                PromptSpec::new(e.prompt_id, e.facet, e.question, wrapper)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(prompts, DEFAULT_WRAPPER)
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<PromptEntry> = self
            .prompts
            .iter()
            .map(|p| PromptEntry {
                prompt_id: p.prompt_id.clone(),
                facet: p.facet.clone(),
                question: p.question.clone(),
                wrapper: (p.wrapper != self.wrapper_default).then(|| p.wrapper.clone()),
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("registry serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn prompts(&self) -> &[PromptSpec] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn wrapper_default(&self) -> &str {
        &self.wrapper_default
    }

    pub fn get(&self, prompt_id: &str) -> Option<&PromptSpec> {
        self.prompts.iter().find(|p| p.prompt_id == prompt_id)
    }

    /// First prompt registered for `facet`.
    pub fn for_facet(&self, facet: &str) -> Option<&PromptSpec> {
        self.prompts.iter().find(|p| p.facet == facet)
    }

    /// Restricts the registry to the given facets, keeping order.
    pub fn subset(&self, facets: &[&str]) -> Self {
        let prompts = self.prompts.iter().filter(|p| facets.contains(&p.facet.as_str())).cloned().collect();
        Self { prompts, wrapper_default: self.wrapper_default.clone() }
    }

    /// Offline stand-in for question generation: the registered question whose
    /// facet best matches the attribute name.
    pub fn question_for_attribute(&self, attribute: &str) -> Option<&PromptSpec> {
        let wanted: HashSet<String> = lookup_stems(attribute);
        let mut best: Option<(&PromptSpec, usize)> = None;
        for p in &self.prompts {
            let mut keys = lookup_stems(&p.facet);
            if let Some((_, syn)) = FACET_SYNONYMS.iter().find(|(f, _)| *f == p.facet) {
                keys.extend(syn.iter().map(|s| stem(s)));
            }
            let score = wanted.intersection(&keys).count();
            if score > 0 && best.is_none_or(|(_, b)| score > b) {
                best = Some((p, score));
            }
        }
        best.map(|(p, _)| p)
    }
}

fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    match w.strip_suffix('s') {
        Some(s) if s.len() >= 3 && !s.ends_with('s') => s.to_string(),
        _ => w,
    }
}

fn lookup_stems(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().filter(|t| !LOOKUP_STOPWORDS.contains(&t.as_str())).map(|t| stem(&t)).collect()
}

/// Lowercase alphanumeric word tokens, deduplicated.
pub fn tokenize(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn token_sequence(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

/// A text-generation backend (an LLM behind some transport).
pub trait TextGenClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], max_tokens: u32) -> Result<String>;
}

#[derive(Serialize)]
struct TextGenRequest<'a> {
    messages: &'a [ChatMessage],
    max_tokens: u32,
}

#[derive(Deserialize)]
struct TextGenResponse {
    text: String,
}

/// JSON-over-HTTP text generation client.
pub struct HttpTextGen {
    url: String,
    agent: ureq::Agent,
}

impl HttpTextGen {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self { url: url.into(), agent }
    }

    /// Reads the endpoint from `FACET_LLM_URL`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(LLM_URL_ENV)
            .map_err(|_| Error::ProviderUnavailable(format!("{LLM_URL_ENV} is not set")))?;
        Ok(Self::new(url, Duration::from_secs(30)))
    }
}

impl TextGenClient for HttpTextGen {
    fn complete(&self, messages: &[ChatMessage], max_tokens: u32) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(TextGenRequest { messages, max_tokens })
            .map_err(crate::providers::map_ureq_error)?;
        let body: TextGenResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::BadResponse(format!("text generation response: {e}")))?;
        Ok(body.text)
    }
}

/// The question-writing instruction for an attribute and its example answers.
pub fn question_request(attribute: &str, answers: &[String]) -> String {
    let listed = answers.iter().map(String::as_str).collect::<Vec<_>>().join(", ");
    format!(
        "Write a question to ask about the {attribute} in a image, with possible answers such as {listed}, \
         and so on. Please answer in one sentence without mentioning any answer."
    )
}

pub enum QuestionSource<'a> {
    External(&'a dyn TextGenClient),
    Offline(&'a PromptRegistry),
}

/// Writes the question used to build a facet's prompt.
///
/// External generations are validated (one sentence, ends in `?`, no example
/// answer) and retried once.
pub fn generate_question(attribute: &str, answers: &[String], source: QuestionSource<'_>) -> Result<String> {
    if attribute.trim().is_empty() {
        return Err(Error::InvalidArgument("attribute name is empty".into()));
    }
    if answers.len() < 2 {
        return Err(Error::InvalidArgument("at least two example answers are required".into()));
    }
    match source {
        QuestionSource::Offline(registry) => registry
            .question_for_attribute(attribute)
            .map(|p| p.question.clone())
            .ok_or_else(|| Error::GeneratorUnavailable(format!("no offline question for `{attribute}`"))),
        QuestionSource::External(client) => {
            let messages = [ChatMessage::user(question_request(attribute, answers))];
            let mut last_problem = String::new();
            for _ in 0..2 {
                let raw = client.complete(&messages, DEFAULT_MAX_TOKENS).map_err(|e| match e {
                    Error::Transport(m) | Error::ProviderUnavailable(m) => Error::GeneratorUnavailable(m),
                    other => other,
                })?;
                let question = clean_generation(&raw);
                match check_question(&question, answers) {
                    Ok(()) => return Ok(question),
                    Err(problem) => last_problem = problem,
                }
            }
            Err(Error::ValidationFailed(last_problem))
        }
    }
}

fn clean_generation(raw: &str) -> String {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    line.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim().to_string()
}

fn check_question(question: &str, answers: &[String]) -> std::result::Result<(), String> {
    if !question.ends_with('?') {
        return Err(format!("`{question}` does not end with '?'"));
    }
    let body = &question[..question.len() - 1];
    let chars: Vec<char> = body.chars().collect();
    if chars.windows(2).any(|w| matches!(w[0], '.' | '?' | '!') && w[1].is_whitespace()) {
        return Err(format!("`{question}` is more than one sentence"));
    }
    let words = token_sequence(question);
    for answer in answers {
        let needle = token_sequence(answer);
        if !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice()) {
            return Err(format!("`{question}` mentions the answer `{answer}`"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    External,
    Lexical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub chosen: String,
    pub method: SelectionMethod,
    pub raw_response: String,
}

pub enum Selector<'a> {
    Lexical,
    External { client: &'a dyn TextGenClient, fallback_to_lexical: bool },
}

/// Prompt-selection message: lettered prompt list followed by the instruction.
pub fn selection_message(registry: &PromptRegistry, query_text: &str) -> Result<String> {
    if registry.len() > 26 {
        return Err(Error::InvalidArgument("selection supports at most 26 prompts".into()));
    }
    let listing = registry
        .prompts()
        .iter()
        .zip('A'..='Z')
        .map(|(p, letter)| format!("{letter}. {}", p.display_text()))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(format!("{listing} Given the instruction {query_text}, {SELECTION_SUFFIX}"))
}

/// Accepts a single letter, optionally followed by a period, in either case.
pub fn parse_letter(answer: &str, options: usize) -> Result<usize> {
    let trimmed = answer.trim();
    let core = trimmed.strip_suffix('.').unwrap_or(trimmed).trim();
    let mut chars = core.chars();
    let unparseable = || Error::UnparseableAnswer { answer: answer.to_string(), options };
    let (Some(c), None) = (chars.next(), chars.next()) else { return Err(unparseable()) };
    if !c.is_ascii_alphabetic() {
        return Err(unparseable());
    }
    let index = (c.to_ascii_uppercase() as u8 - b'A') as usize;
    if index >= options {
        return Err(unparseable());
    }
    Ok(index)
}

/// Token Jaccard similarity as an exact fraction `(intersection, union)`.
fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> (usize, usize) {
    let inter = a.intersection(b).count();
    (inter, a.len() + b.len() - inter)
}

/// Lexical fallback: highest token Jaccard between query and question, first wins ties.
pub fn select_lexical(query_text: &str, registry: &PromptRegistry) -> Result<SelectionOutcome> {
    let query = tokenize(query_text);
    let mut best: Option<(&PromptSpec, (usize, usize))> = None;
    for p in registry.prompts() {
        let score = jaccard(&query, &tokenize(&p.question));
        let better = match best {
            None => true,
            // i1/u1 > i2/u2, compared exactly; empty unions score zero
            Some((_, (bi, bu))) => score.0 * bu.max(1) > bi * score.1.max(1),
        };
        if better {
            best = Some((p, score));
        }
    }
    let (p, _) = best.ok_or(Error::EmptyInput("prompt registry is empty"))?;
    Ok(SelectionOutcome { chosen: p.prompt_id.clone(), method: SelectionMethod::Lexical, raw_response: String::new() })
}

pub fn select_prompt(query_text: &str, registry: &PromptRegistry, selector: &Selector<'_>) -> Result<SelectionOutcome> {
    if registry.is_empty() {
        return Err(Error::EmptyInput("prompt registry is empty"));
    }
    match selector {
        Selector::Lexical => select_lexical(query_text, registry),
        Selector::External { client, fallback_to_lexical } => {
            let message = selection_message(registry, query_text)?;
            match client.complete(&[ChatMessage::user(message)], DEFAULT_MAX_TOKENS) {
                Ok(raw) => {
                    let index = parse_letter(&raw, registry.len())?;
                    Ok(SelectionOutcome {
                        chosen: registry.prompts()[index].prompt_id.clone(),
                        method: SelectionMethod::External,
                        raw_response: raw,
                    })
                }
                Err(e) if e.is_environmental() => {
                    if *fallback_to_lexical {
                        log::warn!("prompt selector unavailable ({e}); using lexical fallback");
                        select_lexical(query_text, registry)
                    } else {
                        Err(Error::SelectorUnavailable(e.to_string()))
                    }
                }
                Err(e) => Err(e),
            }
        }
    }
}
