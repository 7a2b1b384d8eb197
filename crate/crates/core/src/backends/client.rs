use std::sync::Arc;
use std::time::Duration;

use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use tokio::sync::Semaphore;

use super::cache::{cached, CacheKey, Capability, ScoreCache};
use super::wire::{
    ChatMessage, ChatRequest, ChatResponse, CompletionRequest, CompletionResponse, RewardRequest,
    RewardResponse,
};
use super::{BackendEndpoint, BackendError, RewardScore, ScoredSequence, TokenScore};

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Upper bound on requests in flight across all endpoints.
    pub concurrency: usize,
    /// First retry delay; doubles on every further attempt.
    pub retry_backoff: Duration,
    pub cache: Option<Arc<ScoreCache>>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            concurrency: 8,
            retry_backoff: Duration::from_millis(100),
            cache: None,
        }
    }
}

/// HTTP client for all three scoring capabilities.
///
/// Cheap to clone; clones share the connection pool, the in-flight limit and
/// the cache.
#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    limiter: Arc<Semaphore>,
    retry_backoff: Duration,
    cache: Option<Arc<ScoreCache>>,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl Client {
    pub fn new(options: ClientOptions) -> Result<Self, BackendError> {
        if options.concurrency == 0 {
            return Err(BackendError::Argument("concurrency must be >= 1".into()));
        }
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| BackendError::Argument(format!("http client: {e}")))?;
        Ok(Self {
            http,
            limiter: Arc::new(Semaphore::new(options.concurrency)),
            retry_backoff: options.retry_backoff,
            cache: options.cache,
        })
    }

    pub fn cache(&self) -> Option<&ScoreCache> {
        self.cache.as_deref()
    }

    /// Log-probabilities of each `continuation` token given `context`.
    ///
    /// The prompt sent is `context + continuation`; tokens whose character
    /// offset is at or past the end of `context` belong to the continuation.
    /// When the prompt exceeds `max_context_tokens`, the continuation tail is
    /// dropped and `truncated` is set.
    pub async fn score_logprobs(
        &self,
        endpoint: &BackendEndpoint,
        context: &str,
        continuation: &str,
    ) -> Result<ScoredSequence, BackendError> {
        endpoint.check()?;
        if continuation.is_empty() {
            return Err(BackendError::Argument(
                "continuation must be non-empty".into(),
            ));
        }
        let key = CacheKey::new(
            Capability::Logprob,
            &endpoint.model_id,
            &json!({
                "context": context,
                "continuation": continuation,
                "max_context_tokens": endpoint.max_context_tokens,
            }),
        );
        cached(self.cache(), &key, || async {
            let body = CompletionRequest {
                model: endpoint.model_id.clone(),
                prompt: format!("{context}{continuation}"),
                echo: true,
                logprobs: 0,
                max_tokens: 0,
            };
            let resp: CompletionResponse = self
                .post_json(endpoint, "/v1/completions", &body, Capability::Logprob)
                .await?;
            slice_continuation(endpoint, context, resp)
        })
        .await
    }

    pub async fn score_reward(
        &self,
        endpoint: &BackendEndpoint,
        instruction: &str,
        response: &str,
    ) -> Result<RewardScore, BackendError> {
        endpoint.check()?;
        let key = CacheKey::new(
            Capability::Reward,
            &endpoint.model_id,
            &json!({ "instruction": instruction, "response": response }),
        );
        cached(self.cache(), &key, || async {
            let body = RewardRequest {
                model: endpoint.model_id.clone(),
                instruction: instruction.to_string(),
                response: response.to_string(),
            };
            let resp: RewardResponse = self
                .post_json(endpoint, "/v1/reward", &body, Capability::Reward)
                .await?;
            let value = resp.reward.as_f64().ok_or_else(|| {
                BackendError::Protocol(format!("non-numeric reward payload: {}", resp.reward))
            })?;
            Ok(RewardScore {
                reward_model_id: endpoint.model_id.clone(),
                value,
            })
        })
        .await
    }

    /// `n` responses to `instruction`. Temperature 0 is greedy decoding and
    /// admits only `n = 1`.
    pub async fn generate_responses(
        &self,
        endpoint: &BackendEndpoint,
        instruction: &str,
        n: u32,
        temperature: f64,
        top_p: f64,
        seed: u64,
    ) -> Result<Vec<String>, BackendError> {
        endpoint.check()?;
        if n == 0 {
            return Err(BackendError::Argument("n must be >= 1".into()));
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(BackendError::Argument(format!(
                "temperature must be >= 0, got {temperature}"
            )));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(BackendError::Argument(format!(
                "top_p must lie in (0, 1], got {top_p}"
            )));
        }
        if temperature == 0.0 && n > 1 {
            return Err(BackendError::Argument(
                "greedy decoding (temperature 0) is deterministic; n must be 1".into(),
            ));
        }
        let key = CacheKey::new(
            Capability::Generate,
            &endpoint.model_id,
            &json!({
                "instruction": instruction,
                "n": n,
                "temperature": temperature,
                "top_p": top_p,
                "seed": seed,
            }),
        );
        cached(self.cache(), &key, || async {
            let body = ChatRequest {
                model: endpoint.model_id.clone(),
                messages: vec![ChatMessage {
                    role: "user".into(),
                    content: instruction.to_string(),
                }],
                n,
                temperature,
                top_p,
                seed,
            };
            let resp: ChatResponse = self
                .post_json(
                    endpoint,
                    "/v1/chat/completions",
                    &body,
                    Capability::Generate,
                )
                .await?;
            let mut choices = resp.choices;
            if choices.len() != n as usize {
                return Err(BackendError::Protocol(format!(
                    "requested {n} choices, received {}",
                    choices.len()
                )));
            }
            choices.sort_by_key(|c| c.index);
            Ok(choices.into_iter().map(|c| c.message.content).collect())
        })
        .await
    }

    async fn post_json<Req, Resp>(
        &self,
        endpoint: &BackendEndpoint,
        path: &str,
        body: &Req,
        capability: Capability,
    ) -> Result<Resp, BackendError>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        let url = format!("{}{}", endpoint.base_url, path);
        let attempts = endpoint.max_retries + 1;
        let mut last_reason = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.retry_backoff * 2u32.saturating_pow(attempt - 1);
                tokio::time::sleep(delay).await;
            }
            match self.attempt(endpoint, &url, body, capability).await {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) => {
                    log::debug!("{url}: attempt {} failed: {reason}", attempt + 1);
                    last_reason = reason;
                }
            }
        }
        Err(BackendError::Unavailable {
            url,
            attempts,
            reason: last_reason,
        })
    }

    async fn attempt<Req, Resp>(
        &self,
        endpoint: &BackendEndpoint,
        url: &str,
        body: &Req,
        capability: Capability,
    ) -> Result<Resp, Attempt>
    where
        Req: Serialize,
        Resp: DeserializeOwned,
    {
        let _permit = self
            .limiter
            .acquire()
            .await
            .expect("semaphore is never closed");
        let mut req = self.http.post(url).timeout(endpoint.timeout).json(body);
        if let Some(token) = &endpoint.auth_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if matches!(
            status,
            StatusCode::NOT_FOUND | StatusCode::METHOD_NOT_ALLOWED | StatusCode::NOT_IMPLEMENTED
        ) {
            return Err(Attempt::Fatal(BackendError::Capability {
                model: endpoint.model_id.clone(),
                capability,
                reason: format!("HTTP {status} from {url}"),
            }));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if !status.is_success() {
            let snippet = String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).into_owned();
            return Err(Attempt::Fatal(BackendError::Protocol(format!(
                "HTTP {status} from {url}: {snippet}"
            ))));
        }
        serde_json::from_slice(&bytes).map_err(|e| {
            Attempt::Fatal(BackendError::Protocol(format!(
                "undecodable response from {url}: {e}"
            )))
        })
    }
}

fn slice_continuation(
    endpoint: &BackendEndpoint,
    context: &str,
    resp: CompletionResponse,
) -> Result<ScoredSequence, BackendError> {
    let capability_err = |reason: &str| BackendError::Capability {
        model: endpoint.model_id.clone(),
        capability: Capability::Logprob,
        reason: reason.to_string(),
    };
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("completion response has no choices".into()))?;
    let lp = choice
        .logprobs
        .ok_or_else(|| capability_err("response carries no logprobs"))?;
    if lp.tokens.len() != lp.token_logprobs.len() || lp.tokens.len() != lp.text_offset.len() {
        return Err(BackendError::Protocol(
            "tokens, token_logprobs and text_offset differ in length".into(),
        ));
    }

    let context_chars = context.chars().count();
    let mut context_tokens = 0usize;
    let mut scores = Vec::new();
    for (i, ((token, logprob), offset)) in lp
        .tokens
        .into_iter()
        .zip(lp.token_logprobs)
        .zip(lp.text_offset)
        .enumerate()
    {
        if offset < context_chars {
            context_tokens += 1;
            continue;
        }
        let logprob = match logprob {
            Some(v) => v,
            // Servers leave the very first prompt token unscored.
            None if i == 0 => continue,
            None => {
                return Err(BackendError::Protocol(format!(
                    "missing logprob for continuation token {i}"
                )))
            }
        };
        if !logprob.is_finite() || logprob > 1e-9 {
            return Err(BackendError::Protocol(format!(
                "invalid logprob {logprob} for token {token:?}"
            )));
        }
        scores.push(TokenScore {
            token_text: token,
            logprob: logprob.min(0.0),
        });
    }

    let max = endpoint.max_context_tokens;
    if context_tokens >= max {
        return Err(BackendError::ContextTooLong {
            max,
            context_tokens,
        });
    }
    let room = max - context_tokens;
    let truncated = scores.len() > room;
    scores.truncate(room);
    if scores.is_empty() {
        return Err(BackendError::Protocol(
            "backend returned no scored continuation tokens".into(),
        ));
    }
    Ok(ScoredSequence::new(scores, truncated))
}
