//! Candidate-judgment generation against an OpenAI-compatible
//! chat-completions endpoint.
//!
//! Each instance gets `candidates_per_instance` independent requests;
//! diversity comes from temperature sampling, not prompt variation.
//! Responses whose score cannot be extracted are dropped (they reduce
//! yield, they are not retried). Requests are issued with a bounded
//! in-flight cap and results are stamped by request index, so a fixed
//! endpoint yields byte-stable output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agreement::{extract_score, ScoreRange};
use crate::corpus::{CandidateJudgment, EvalInstance, TaskType};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("template `{template_id}` uses unknown placeholder `{{{placeholder}}}`")]
    UnknownPlaceholder {
        template_id: String,
        placeholder: String,
    },
    #[error("no value for placeholder `{{{0}}}`")]
    MissingPlaceholderValue(String),
    #[error("auth error: {0}")]
    Auth(String),
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Connection and sampling parameters for the annotation endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Empty means
    /// unauthenticated (local endpoints).
    pub api_key_env_var: String,
    pub candidates_per_instance: u32,
    pub temperature: f64,
    pub max_retries: u32,
    pub request_timeout_secs: u64,
    /// Maximum in-flight requests.
    pub in_flight: usize,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".to_string(),
            model_name: "gpt-4o".to_string(),
            api_key_env_var: "OPENAI_API_KEY".to_string(),
            candidates_per_instance: 10,
            temperature: 1.0,
            max_retries: 3,
            request_timeout_secs: 120,
            in_flight: 4,
        }
    }
}

const PLACEHOLDERS: [&str; 5] = [
    "task_description",
    "task_input",
    "model_output",
    "criteria",
    "reference?",
];

/// A pointwise evaluation prompt template.
///
/// Placeholders: `{task_description}`, `{task_input}`, `{model_output}`,
/// `{criteria}`, `{reference?}`. Lines containing `{reference?}` are
/// dropped entirely when the instance has no reference. Media content
/// renders as `<image>` markers with the URIs returned separately, in
/// marker order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
}

const TEMPLATE_IMAGE_CAPTIONING: &str = include_str!("../templates/image_captioning.txt");
const TEMPLATE_VQA: &str = include_str!("../templates/vqa.txt");
const TEMPLATE_T2I: &str = include_str!("../templates/t2i_generation.txt");
const TEMPLATE_TEXT_READING: &str = include_str!("../templates/text_reading.txt");
const TEMPLATE_REASONING: &str = include_str!("../templates/reasoning.txt");
const TEMPLATE_INSTRUCTION: &str = include_str!("../templates/instruction_following.txt");

impl PromptTemplate {
    pub fn new(template_id: &str, body: &str) -> Result<Self, AnnotateError> {
        let template = Self {
            template_id: template_id.to_string(),
            // leading comment lines are editorial, not prompt text
            body: body
                .lines()
                .filter(|l| !l.starts_with('#'))
                .collect::<Vec<_>>()
                .join("\n")
                .trim_start()
                .to_string(),
        };
        template.check_placeholders()?;
        Ok(template)
    }

    /// The shipped default template for a task type.
    pub fn builtin(task: TaskType) -> Self {
        let (id, text) = match task {
            TaskType::ImageCaptioning => ("image_captioning", TEMPLATE_IMAGE_CAPTIONING),
            TaskType::Vqa => ("vqa", TEMPLATE_VQA),
            TaskType::T2iGeneration => ("t2i_generation", TEMPLATE_T2I),
            TaskType::TextReading => ("text_reading", TEMPLATE_TEXT_READING),
            TaskType::Reasoning => ("reasoning", TEMPLATE_REASONING),
            TaskType::InstructionFollowing => ("instruction_following", TEMPLATE_INSTRUCTION),
        };
        Self::new(id, text).expect("builtin template is valid")
    }

    /// Load an override from `<dir>/<task_type>.txt`, builtin otherwise.
    pub fn for_task(task: TaskType, template_dir: Option<&Path>) -> Result<Self, AnnotateError> {
        if let Some(dir) = template_dir {
            let path = dir.join(format!("{}.txt", task.as_str()));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|source| AnnotateError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                return Self::new(task.as_str(), &text);
            }
        }
        Ok(Self::builtin(task))
    }

    fn check_placeholders(&self) -> Result<(), AnnotateError> {
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else { break };
            let token = &rest[open + 1..open + close];
            if !PLACEHOLDERS.contains(&token) {
                return Err(AnnotateError::UnknownPlaceholder {
                    template_id: self.template_id.clone(),
                    placeholder: token.to_string(),
                });
            }
            rest = &rest[open + close + 1..];
        }
        Ok(())
    }
}

/// Prompt text plus its media references, ordered as their `<image>`
/// markers appear in the text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub media: Vec<String>,
}

fn content_fragment(content: &crate::corpus::Content, media: &mut Vec<String>) -> String {
    let mut parts = Vec::new();
    if let Some(text) = &content.text {
        parts.push(text.clone());
    }
    for uri in &content.media {
        parts.push("<image>".to_string());
        media.push(uri.clone());
    }
    parts.join(" ")
}

/// Substitute the instance into the template.
pub fn render_prompt(
    instance: &EvalInstance,
    template: &PromptTemplate,
) -> Result<RenderedPrompt, AnnotateError> {
    let mut media = Vec::new();
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("task_description", instance.task_description.clone());
    values.insert("task_input", content_fragment(&instance.task_input, &mut media));
    values.insert(
        "model_output",
        content_fragment(&instance.model_output, &mut media),
    );
    values.insert("criteria", instance.criteria.clone());

    let mut lines = Vec::new();
    for line in template.body.lines() {
        if line.contains("{reference?}") {
            match &instance.reference {
                None => continue,
                Some(reference) => {
                    let fragment = content_fragment(reference, &mut media);
                    lines.push(line.replace("{reference?}", &fragment));
                }
            }
        } else {
            lines.push(line.to_string());
        }
    }
    let mut text = lines.join("\n");
    for (key, value) in &values {
        text = text.replace(&format!("{{{key}}}"), value);
    }
    Ok(RenderedPrompt { text, media })
}

/// Blocking client for the chat-completions protocol.
pub struct AnnotatorClient {
    http: reqwest::blocking::Client,
    config: AnnotatorConfig,
    api_key: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AnnotateStats {
    pub requested: usize,
    pub returned: usize,
    pub dropped_unparseable: usize,
}

impl AnnotatorClient {
    /// Build a client; reads the API key from the configured environment
    /// variable. The key is held in memory only and never logged.
    pub fn new(config: AnnotatorConfig) -> Result<Self, AnnotateError> {
        let api_key = if config.api_key_env_var.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env_var) {
                Ok(k) if !k.is_empty() => Some(k),
                _ => {
                    return Err(AnnotateError::Auth(format!(
                        "environment variable `{}` is not set",
                        config.api_key_env_var
                    )))
                }
            }
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| AnnotateError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            http,
            config,
            api_key,
        })
    }

    fn request_body(&self, prompt: &RenderedPrompt) -> serde_json::Value {
        let content = if prompt.media.is_empty() {
            json!(prompt.text)
        } else {
            let mut parts = vec![json!({"type": "text", "text": prompt.text})];
            for uri in &prompt.media {
                parts.push(json!({"type": "image_url", "image_url": {"url": uri}}));
            }
            json!(parts)
        };
        json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": content}],
        })
    }

    /// One request with retries and exponential backoff. Returns the
    /// assistant message text.
    fn complete_once(&self, prompt: &RenderedPrompt) -> Result<String, AnnotateError> {
        let body = self.request_body(prompt);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let mut request = self.http.post(&self.config.endpoint_url).json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            let outcome = request.send();
            match outcome {
                Ok(response) => {
                    let status = response.status();
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(AnnotateError::Auth(format!("endpoint returned {status}")));
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        if attempt > self.config.max_retries {
                            return Err(AnnotateError::Transport {
                                attempts: attempt,
                                message: format!("endpoint returned {status}"),
                            });
                        }
                        std::thread::sleep(backoff(attempt));
                        continue;
                    }
                    if !status.is_success() {
                        return Err(AnnotateError::Transport {
                            attempts: attempt,
                            message: format!("endpoint returned {status}"),
                        });
                    }
                    let value: serde_json::Value =
                        response.json().map_err(|e| AnnotateError::Transport {
                            attempts: attempt,
                            message: format!("bad response body: {e}"),
                        })?;
                    let text = value["choices"][0]["message"]["content"]
                        .as_str()
                        .unwrap_or_default()
                        .to_string();
                    return Ok(text);
                }
                Err(e) => {
                    if attempt > self.config.max_retries {
                        return Err(AnnotateError::Transport {
                            attempts: attempt,
                            message: e.to_string(),
                        });
                    }
                    std::thread::sleep(backoff(attempt));
                }
            }
        }
    }

    /// Generate candidate judgments for one instance.
    ///
    /// Issues `candidates_per_instance` requests (bounded parallelism),
    /// extracts a score from each response, and drops unparseable ones.
    /// Candidate indices are assigned densely in request order.
    pub fn annotate(
        &self,
        instance: &EvalInstance,
        template: &PromptTemplate,
    ) -> Result<(Vec<CandidateJudgment>, AnnotateStats), AnnotateError> {
        let prompt = render_prompt(instance, template)?;
        let n = self.config.candidates_per_instance as usize;
        let slots: Mutex<Vec<Option<Result<String, AnnotateError>>>> =
            Mutex::new((0..n).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.in_flight.clamp(1, n.max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let result = self.complete_once(&prompt);
                    slots.lock().unwrap()[i] = Some(result);
                });
            }
        });

        let mut stats = AnnotateStats {
            requested: n,
            ..Default::default()
        };
        let mut judgments = Vec::new();
        for slot in slots.into_inner().unwrap() {
            let body = slot.expect("every request slot is filled")?;
            match extract_score(&body, ScoreRange::default()) {
                Some(score) => {
                    let analysis = strip_score_line(&body);
                    judgments.push(CandidateJudgment {
                        instance_id: instance.id.clone(),
                        candidate_index: judgments.len() as u32,
                        analysis,
                        score,
                        annotator: self.config.model_name.clone(),
                    });
                }
                None => stats.dropped_unparseable += 1,
            }
        }
        stats.returned = judgments.len();
        Ok((judgments, stats))
    }
}

fn backoff(attempt: u32) -> Duration {
    Duration::from_millis(250u64.saturating_mul(1 << attempt.min(6)))
}

/// Remove a trailing `Score: n` line, leaving the analysis text.
fn strip_score_line(body: &str) -> String {
    let trimmed = body.trim_end();
    if let Some((head, last)) = trimmed.rsplit_once('\n') {
        if last.trim_start().to_lowercase().starts_with("score") && !head.trim().is_empty() {
            return head.trim_end().to_string();
        }
    }
    trimmed.to_string()
}

/// Per-instance failure record appended to the failures file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotateFailure {
    pub instance_id: String,
    pub error: String,
}

/// Annotate a whole instance list, appending judgments to `out` and fatal
/// per-instance errors to `failures`. Single writer per output file.
pub fn annotate_corpus(
    client: &AnnotatorClient,
    instances: &[EvalInstance],
    template_dir: Option<&Path>,
    out_path: &Path,
    failures_path: &Path,
) -> Result<AnnotateStats, AnnotateError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| AnnotateError::Io {
            path: p.clone(),
            source,
        }
    };
    let mut out = std::fs::File::create(out_path).map_err(io_err(out_path))?;
    let mut failures = std::fs::File::create(failures_path).map_err(io_err(failures_path))?;
    let mut totals = AnnotateStats::default();
    for instance in instances {
        let template = PromptTemplate::for_task(instance.task_type, template_dir)?;
        match client.annotate(instance, &template) {
            Ok((judgments, stats)) => {
                totals.requested += stats.requested;
                totals.returned += stats.returned;
                totals.dropped_unparseable += stats.dropped_unparseable;
                for j in &judgments {
                    writeln!(out, "{}", serde_json::to_string(j).unwrap())
                        .map_err(io_err(out_path))?;
                }
            }
            Err(e @ AnnotateError::Auth(_)) => return Err(e),
            Err(e) => {
                let record = AnnotateFailure {
                    instance_id: instance.id.clone(),
                    error: e.to_string(),
                };
                writeln!(failures, "{}", serde_json::to_string(&record).unwrap())
                    .map_err(io_err(failures_path))?;
            }
        }
    }
    Ok(totals)
}
