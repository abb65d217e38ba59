//! Chat-completion backed evaluator and reflector.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Evaluator, Reflector};
use crate::catalog::{serialize_strategy, ContextStrategy, InstanceRecord, StrategyBody};
use crate::error::{Error, Result};
use crate::transport::{select_json, RetryPolicy, Transport, TransportError};

pub const LLM_API_KEY_ENV: &str = "NCCE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub api_key_env: String,
    /// Where the reply text sits in the response body.
    pub answer_path: String,
    pub base_delay_ms: u64,
    pub retry_seed: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 60,
            api_key_env: LLM_API_KEY_ENV.into(),
            answer_path: "choices.0.message.content".into(),
            base_delay_ms: 500,
            retry_seed: 0,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_secs == 0 {
            return Err(Error::InvalidConfig(
                "llm timeout_secs must be positive".into(),
            ));
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(Error::InvalidConfig(
                "llm endpoint and model are required".into(),
            ));
        }
        Ok(())
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay_ms: self.base_delay_ms,
            seed: self.retry_seed,
            ..RetryPolicy::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

pub struct ChatClient {
    config: LlmClientConfig,
    api_key: String,
    transport: Box<dyn Transport>,
}

impl ChatClient {
    /// Reads the API key from the configured environment variable.
    pub fn new(config: LlmClientConfig, transport: Box<dyn Transport>) -> Result<Self> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| Error::MissingApiKey(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, api_key, transport))
    }

    pub fn with_key(
        config: LlmClientConfig,
        api_key: String,
        transport: Box<dyn Transport>,
    ) -> Self {
        Self {
            config,
            api_key,
            transport,
        }
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    /// Raw response body after retries. Non-2xx statuses are errors.
    fn post(&self, messages: &[ChatMessage]) -> Result<Value> {
        let url = &self.config.endpoint;
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        let headers = vec![
            (
                "Authorization".to_string(),
                format!("Bearer {}", self.api_key),
            ),
            ("Content-Type".to_string(), "application/json".to_string()),
        ];
        let key = format!(
            "{url}|{}",
            crate::seed::fnv1a64(body.to_string().as_bytes())
        );
        let resp = self.config.retry().run(&key, &std::thread::sleep, || {
            let r = self.transport.post_json(url, &headers, &body)?;
            if !(200..300).contains(&r.status) {
                return Err(TransportError::Status {
                    url: url.clone(),
                    status: r.status,
                    body: r.body,
                });
            }
            Ok(r)
        })?;
        serde_json::from_str(&resp.body).map_err(|e| {
            TransportError::Decode {
                url: url.clone(),
                message: e.to_string(),
            }
            .into()
        })
    }

    /// Reply text, or `None` when the body has no string at the answer path.
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<Option<String>> {
        let value = self.post(messages)?;
        Ok(select_json(&value, &self.config.answer_path)
            .first()
            .and_then(|v| v.as_str())
            .map(str::to_string))
    }
}

/// System message carries the canonical strategy text, user message the input.
pub fn render_task_messages(
    strategy: &ContextStrategy,
    instance: &InstanceRecord,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::new("system", serialize_strategy(strategy)),
        ChatMessage::new("user", instance.text.clone()),
    ]
}

pub fn exact_match(answer: &str, gold: &str) -> bool {
    answer.trim().to_lowercase() == gold.trim().to_lowercase()
}

pub struct LlmEvaluator {
    pub client: ChatClient,
}

impl LlmEvaluator {
    /// Model answer for the pair; `None` if the response could not be parsed.
    pub fn answer(
        &self,
        instance: &InstanceRecord,
        strategy: &ContextStrategy,
    ) -> Result<Option<String>> {
        self.client
            .complete(&render_task_messages(strategy, instance))
    }
}

impl Evaluator for LlmEvaluator {
    fn evaluate(&self, instance: &InstanceRecord, strategy: &ContextStrategy) -> Result<f64> {
        match self.answer(instance, strategy)? {
            Some(a) => Ok(if exact_match(&a, &instance.gold) {
                1.0
            } else {
                0.0
            }),
            None => {
                tracing::warn!(
                    instance = %instance.id,
                    context = %strategy.id,
                    path = %self.client.config.answer_path,
                    "no answer text in response; scoring 0"
                );
                Ok(0.0)
            }
        }
    }
}

// The first line ends with a space in the original template.
const REFLECTION_TEMPLATE: &str = "You are an expert prompt engineer.\x20
Your goal is to improve the instruction for a specific step in a DSPy program based on failed examples.

Current Instruction:
\"{current_instruction}\"

Failed Examples (Feedback):
{feedback}

Please analyze the failures and generate a refined instruction that handles these cases better while maintaining overall performance.
Wrap the new instruction in <prompt> and </prompt> tags.";

pub struct FeedbackItem<'a> {
    pub input: &'a str,
    pub answer: &'a str,
    pub gold: &'a str,
}

pub fn render_feedback(items: &[FeedbackItem<'_>]) -> String {
    let mut out = String::new();
    for (n, it) in items.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        out.push_str(&format!(
            "Example {}:\nInput: {}\nModel Answer: {}\nGold Answer: {}\n",
            n + 1,
            it.input,
            it.answer,
            it.gold
        ));
    }
    out
}

pub fn render_reflection_prompt(current_instruction: &str, feedback: &str) -> String {
    REFLECTION_TEMPLATE
        .replace("{current_instruction}", current_instruction)
        .replacen("{feedback}", feedback, 1)
}

/// Text between the first `<prompt>` and the following `</prompt>`, trimmed.
pub fn extract_prompt(text: &str) -> Option<String> {
    let start = text.find("<prompt>")? + "<prompt>".len();
    let len = text[start..].find("</prompt>")?;
    let inner = text[start..start + len].trim();
    (!inner.is_empty()).then(|| inner.to_string())
}

/// Reflector that asks the task model for its answers on the failure batch,
/// then asks the reflection model for a revised instruction. Only the
/// instruction changes; other components are copied from `p_pot`.
pub struct LlmReflector {
    pub task: LlmEvaluator,
    pub reflector: ChatClient,
    /// Reflection attempts when the reply lacks `<prompt>` tags.
    pub tag_attempts: u32,
}

impl Reflector for LlmReflector {
    fn reflect(&self, p_pot: &ContextStrategy, batch: &[&InstanceRecord]) -> Result<StrategyBody> {
        if batch.is_empty() {
            return Err(Error::Empty("failure batch"));
        }
        let answers = batch
            .iter()
            .map(|i| Ok(self.task.answer(i, p_pot)?.unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<FeedbackItem<'_>> = batch
            .iter()
            .zip(&answers)
            .map(|(i, a)| FeedbackItem {
                input: &i.text,
                answer: a,
                gold: &i.gold,
            })
            .collect();
        let prompt = render_reflection_prompt(&p_pot.instruction, &render_feedback(&items));
        let messages = [ChatMessage::new("user", prompt)];
        for attempt in 1..=self.tag_attempts.max(1) {
            let reply = self.reflector.complete(&messages)?.unwrap_or_default();
            if let Some(instruction) = extract_prompt(&reply) {
                let mut body = p_pot.body();
                body.instruction = instruction;
                return Ok(body);
            }
            tracing::warn!(attempt, "reflection reply has no <prompt> block");
        }
        Err(Error::MissingPromptTags)
    }
}
