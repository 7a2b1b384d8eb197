//! Deterministic mock of the scoring protocol, for tests and offline runs.
//!
//! * Tokenization splits on single spaces (newlines also separate tokens);
//!   empty pieces are skipped.
//! * The logprob of token `t` under model `m` is
//!   `-(1 + (hash64(m ‖ t) mod 1000) / 1000)`, independent of position and
//!   context, unless a fixed logprob is configured.
//! * The reward of a response is `(byte length mod 7) / 7`.
//! * Generation is a pure function of model, instruction, seed, sample index
//!   and sampling parameters.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use super::hash64;
use super::wire::{
    ChatChoice, ChatMessage, ChatRequest, ChatResponse, CompletionChoice, CompletionLogprobs,
    CompletionRequest, CompletionResponse, MockStats, RewardRequest, RewardResponse,
};

#[derive(Debug, Clone, Default)]
pub struct MockConfig {
    /// Every token gets this logprob instead of the hashed value.
    pub fixed_logprob: Option<f64>,
    /// Answer the first `fail_first` scoring requests with HTTP 503.
    pub fail_first: u32,
}

const VOCAB: [&str; 16] = [
    "the", "answer", "is", "simple", "first", "consider", "each", "step", "then", "we", "can",
    "see", "that", "result", "holds", "clearly",
];

/// Tokens of `text` with their character offsets.
pub fn tokenize(text: &str) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0usize;
    for (pos, ch) in text.chars().enumerate() {
        if ch == ' ' || ch == '\n' {
            if !current.is_empty() {
                out.push((std::mem::take(&mut current), start));
            }
            start = pos + 1;
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        out.push((current, start));
    }
    out
}

pub fn token_logprob(model_id: &str, token: &str) -> f64 {
    let mut bytes = Vec::with_capacity(model_id.len() + token.len());
    bytes.extend_from_slice(model_id.as_bytes());
    bytes.extend_from_slice(token.as_bytes());
    -(1.0 + (hash64(&bytes) % 1000) as f64 / 1000.0)
}

pub fn reward(response: &str) -> f64 {
    (response.len() % 7) as f64 / 7.0
}

fn mix(parts: &[&[u8]]) -> u64 {
    let mut bytes = Vec::new();
    for part in parts {
        bytes.extend_from_slice(&(part.len() as u64).to_le_bytes());
        bytes.extend_from_slice(part);
    }
    hash64(&bytes)
}

fn words_from(seed: u64) -> String {
    let count = 3 + (seed % 8) as usize;
    (0..count)
        .map(|k| VOCAB[(mix(&[&seed.to_le_bytes(), &(k as u64).to_le_bytes()]) % 16) as usize])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Response `index` of a generation request. Greedy requests depend only on
/// model and instruction.
pub fn generate(
    model_id: &str,
    instruction: &str,
    temperature: f64,
    top_p: f64,
    seed: u64,
    index: u32,
) -> String {
    if temperature == 0.0 {
        return words_from(mix(&[model_id.as_bytes(), instruction.as_bytes()]));
    }
    words_from(mix(&[
        model_id.as_bytes(),
        instruction.as_bytes(),
        &seed.to_le_bytes(),
        &index.to_le_bytes(),
        &temperature.to_bits().to_le_bytes(),
        &top_p.to_bits().to_le_bytes(),
    ]))
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    completions: AtomicU64,
    rewards: AtomicU64,
    generations: AtomicU64,
    remaining_failures: AtomicU32,
}

struct MockState {
    config: MockConfig,
    counters: Counters,
}

impl MockState {
    /// Counts the request; `true` means it should fail.
    fn admit(&self, counter: &AtomicU64) -> bool {
        self.counters.requests.fetch_add(1, Ordering::SeqCst);
        let failing = self
            .counters
            .remaining_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if !failing {
            counter.fetch_add(1, Ordering::SeqCst);
        }
        failing
    }

    fn stats(&self) -> MockStats {
        let c = &self.counters;
        MockStats {
            requests: c.requests.load(Ordering::SeqCst),
            completions: c.completions.load(Ordering::SeqCst),
            rewards: c.rewards.load(Ordering::SeqCst),
            generations: c.generations.load(Ordering::SeqCst),
        }
    }
}

fn unavailable() -> Response {
    (StatusCode::SERVICE_UNAVAILABLE, "mock: injected failure").into_response()
}

async fn completions(
    State(state): State<Arc<MockState>>,
    Json(req): Json<CompletionRequest>,
) -> Response {
    if state.admit(&state.counters.completions) {
        return unavailable();
    }
    if !req.echo {
        return (StatusCode::BAD_REQUEST, "mock supports echo scoring only").into_response();
    }
    let tokens = tokenize(&req.prompt);
    let logprobs = CompletionLogprobs {
        token_logprobs: tokens
            .iter()
            .map(|(t, _)| {
                Some(
                    state
                        .config
                        .fixed_logprob
                        .unwrap_or_else(|| token_logprob(&req.model, t)),
                )
            })
            .collect(),
        text_offset: tokens.iter().map(|(_, o)| *o).collect(),
        tokens: tokens.into_iter().map(|(t, _)| t).collect(),
    };
    Json(CompletionResponse {
        model: Some(req.model),
        choices: vec![CompletionChoice {
            text: req.prompt,
            index: 0,
            logprobs: Some(logprobs),
        }],
    })
    .into_response()
}

async fn reward_handler(
    State(state): State<Arc<MockState>>,
    Json(req): Json<RewardRequest>,
) -> Response {
    if state.admit(&state.counters.rewards) {
        return unavailable();
    }
    Json(RewardResponse {
        reward: serde_json::json!(reward(&req.response)),
    })
    .into_response()
}

async fn chat(State(state): State<Arc<MockState>>, Json(req): Json<ChatRequest>) -> Response {
    if state.admit(&state.counters.generations) {
        return unavailable();
    }
    let instruction = req
        .messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(|m| m.content.as_str())
        .unwrap_or_default();
    let choices = (0..req.n)
        .map(|index| ChatChoice {
            index,
            message: ChatMessage {
                role: "assistant".into(),
                content: generate(
                    &req.model,
                    instruction,
                    req.temperature,
                    req.top_p,
                    req.seed,
                    index,
                ),
            },
        })
        .collect();
    Json(ChatResponse { choices }).into_response()
}

async fn stats(State(state): State<Arc<MockState>>) -> Json<MockStats> {
    Json(state.stats())
}

fn router(state: Arc<MockState>) -> Router {
    Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/reward", post(reward_handler))
        .route("/v1/chat/completions", post(chat))
        .route("/stats", get(stats))
        .with_state(state)
}

/// A running mock server; shuts down when dropped.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and serves in the background.
    pub async fn start(addr: SocketAddr, config: MockConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let (tx, rx) = oneshot::channel::<()>();
        let (addr, state, serve) = Self::prepare(listener, config, async {
            let _ = rx.await;
        })?;
        tokio::spawn(serve);
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
        })
    }

    /// Serves on the calling task until `shutdown` resolves.
    pub async fn serve_until<F>(
        listener: TcpListener,
        config: MockConfig,
        shutdown: F,
    ) -> std::io::Result<()>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let (_, _, serve) = Self::prepare(listener, config, shutdown)?;
        serve.await;
        Ok(())
    }

    fn prepare<F>(
        listener: TcpListener,
        config: MockConfig,
        shutdown: F,
    ) -> std::io::Result<(SocketAddr, Arc<MockState>, impl Future<Output = ()> + Send)>
    where
        F: Future<Output = ()> + Send + 'static,
    {
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState {
            counters: Counters {
                remaining_failures: AtomicU32::new(config.fail_first),
                ..Default::default()
            },
            config,
        });
        let app = router(Arc::clone(&state));
        let serve = async move {
            if let Err(e) = axum::serve(listener, app)
                .with_graceful_shutdown(shutdown)
                .await
            {
                log::error!("mock server stopped: {e}");
            }
        };
        Ok((addr, state, serve))
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> MockStats {
        self.state.stats()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_offsets() {
        assert_eq!(
            tokenize("a b"),
            vec![("a".to_string(), 0), ("b".to_string(), 2)]
        );
        assert_eq!(tokenize("a b c").len(), 3);
        assert!(tokenize("").is_empty());
        let t = tokenize("Say hi\nHéllo  there");
        assert_eq!(
            t.iter().map(|(s, o)| (s.as_str(), *o)).collect::<Vec<_>>(),
            [("Say", 0), ("hi", 4), ("Héllo", 7), ("there", 14)]
        );
    }

    #[test]
    fn logprob_range() {
        for tok in ["a", "b", "hello", "🦀"] {
            let lp = token_logprob("m", tok);
            assert!((-2.0..=-1.0).contains(&lp), "{lp}");
        }
    }

    #[test]
    fn reward_formula() {
        assert!((reward("Hello!") - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(reward(""), 0.0);
        assert_eq!(reward("1234567"), 0.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate("m", "q", 0.0, 1.0, 1, 0);
        assert_eq!(a, generate("m", "q", 0.0, 1.0, 99, 0));
        let s: Vec<_> = (0..5)
            .map(|i| generate("m", "q", 0.8, 1.0, 42, i))
            .collect();
        let t: Vec<_> = (0..5)
            .map(|i| generate("m", "q", 0.8, 1.0, 42, i))
            .collect();
        assert_eq!(s, t);
        assert_ne!(
            s,
            (0..5)
                .map(|i| generate("m", "q", 0.8, 1.0, 43, i))
                .collect::<Vec<_>>()
        );
        assert!(s.iter().all(|r| !r.is_empty()));
    }
}
