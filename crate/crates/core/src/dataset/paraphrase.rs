//! Optional LLM rewording of template questions, validated against the gold pair.

use std::collections::BTreeMap;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::QaPair;
use crate::eval::normalize_answer;
use crate::scene::{GraphIndex, SceneGraph};
use crate::templates::{find_template, QuestionTemplate, SlotKind, SlotValue};

/// Environment variable holding the bearer key for the chat endpoint.
pub const LLM_KEY_ENV: &str = "CITY3DQA_LLM_KEY";

/// Generation prompt; `[template]`, `[answer]` and `[graph]` are filled per pair.
pub const DEFAULT_PROMPT: &str = "If you were the multimodal researcher, please generate the question based on the following template: [template]. \n\
The answer is: [answer].\n\
Here, the slots in template are [graph]. \n\
In this process, your generated question-answer pairs are in accordance with daily language habits.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Response(String),
    #[error("config: {0}")]
    Config(String),
}

pub trait ChatClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.7,
            timeout_secs: 30,
        }
    }
}

impl LlmConfig {
    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self, LlmError> {
        serde_json::from_reader(r).map_err(|e| LlmError::Config(e.to_string()))
    }
}

/// Chat-completions client over HTTP(S).
pub struct HttpChatClient {
    agent: ureq::Agent,
    config: LlmConfig,
    key: Option<String>,
}

impl HttpChatClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        if config.endpoint.is_empty() {
            return Err(LlmError::Config("endpoint is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        let key = std::env::var(LLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(Self { agent, config, key })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Transport(e.to_string()))?;
        let v: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Response(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| LlmError::Response("missing choices[0].message.content".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParaphraseOutcome {
    pub pair: QaPair,
    /// Why the original question was kept, if it was.
    pub fallback: Option<String>,
}

/// Label to synonym lists across all graphs, for entity checks.
pub fn synonym_table(graphs: &[SceneGraph]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for g in graphs {
        let idx = GraphIndex::new(g);
        for label in idx.class_labels().into_iter().chain(idx.kind_labels()) {
            let syns = idx.synonyms_of_label(&label);
            let entry = out.entry(label).or_default();
            entry.extend(syns);
            entry.sort();
            entry.dedup();
        }
    }
    out
}

fn fill_prompt(prompt: &str, pattern: &str, pair: &QaPair) -> String {
    let slots: Vec<String> = pair
        .provenance
        .binding
        .values
        .iter()
        .map(|(k, v)| format!("{k}: {}", v.surface()))
        .collect();
    prompt
        .replace("[template]", pattern)
        .replace("[answer]", &pair.answer.value)
        .replace("[graph]", &slots.join("; "))
}

/// Pulls the question text and an optional answer line out of a completion.
fn parse_completion(text: &str) -> (Option<String>, Option<String>) {
    let mut question = None;
    let mut answer = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let lower = line.to_lowercase();
        if let Some(rest) = lower.strip_prefix("answer:") {
            answer.get_or_insert_with(|| line[line.len() - rest.len()..].trim().to_string());
        } else if question.is_none() {
            let q = if lower.starts_with("question:") { &line["question:".len()..] } else { line };
            let q = q.trim().trim_matches('"').trim();
            if !q.is_empty() {
                question = Some(q.to_string());
            }
        }
    }
    (question, answer)
}

fn check_rewrite(
    pair: &QaPair,
    question: &str,
    answer: Option<&str>,
    synonyms: &BTreeMap<String, Vec<String>>,
) -> Result<(), String> {
    let hay = question.to_lowercase();
    for (kind, v) in &pair.provenance.binding.values {
        let label = match (kind, v) {
            (_, SlotValue::Instance(r)) => &r.label,
            (SlotKind::Usage | SlotKind::Location, SlotValue::Text(_)) => continue,
            (_, SlotValue::Text(t)) => t,
        };
        let mut forms = vec![label.clone()];
        forms.extend(synonyms.get(label).into_iter().flatten().cloned());
        if !forms.iter().any(|f| hay.contains(&f.to_lowercase())) {
            return Err(format!("rewrite drops entity {label:?}"));
        }
    }
    if let Some(a) = answer {
        if normalize_answer(a) != normalize_answer(&pair.answer.value) {
            return Err(format!("rewrite changes the answer to {a:?}"));
        }
    }
    Ok(())
}

/// Rewords one pair; any failure keeps the original question.
pub fn paraphrase_pair(
    pair: &QaPair,
    client: &dyn ChatClient,
    prompt: &str,
    registry: &[QuestionTemplate],
    synonyms: &BTreeMap<String, Vec<String>>,
) -> ParaphraseOutcome {
    let keep = |reason: String| {
        log::warn!("paraphrase fallback for {}: {reason}", pair.qid);
        ParaphraseOutcome { pair: pair.clone(), fallback: Some(reason) }
    };
    let pattern = match find_template(registry, &pair.provenance.template_id) {
        Some(t) => t.pattern.as_str(),
        None => return keep(format!("unknown template {}", pair.provenance.template_id)),
    };
    let reply = match client.complete(&fill_prompt(prompt, pattern, pair)) {
        Ok(r) => r,
        Err(e) => return keep(e.to_string()),
    };
    let (question, answer) = parse_completion(&reply);
    let Some(question) = question else {
        return keep("empty completion".into());
    };
    if let Err(reason) = check_rewrite(pair, &question, answer.as_deref(), synonyms) {
        return keep(reason);
    }
    let mut out = pair.clone();
    out.question = question;
    out.paraphrased = true;
    ParaphraseOutcome { pair: out, fallback: None }
}

/// Rewords every pair with at most `in_flight` concurrent requests.
///
/// Output order matches input order. Returns the pairs and the fallback count.
pub fn paraphrase_dataset(
    pairs: &[QaPair],
    client: &dyn ChatClient,
    prompt: &str,
    registry: &[QuestionTemplate],
    synonyms: &BTreeMap<String, Vec<String>>,
    in_flight: usize,
) -> (Vec<QaPair>, usize) {
    let run = || {
        pairs
            .par_iter()
            .map(|p| paraphrase_pair(p, client, prompt, registry, synonyms))
            .collect::<Vec<_>>()
    };
    let outcomes = match rayon::ThreadPoolBuilder::new().num_threads(in_flight.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    let fallbacks = outcomes.iter().filter(|o| o.fallback.is_some()).count();
    (outcomes.into_iter().map(|o| o.pair).collect(), fallbacks)
}
