//! JSON bodies of the scoring protocol, shared by the client and the mock.

use serde::{Deserialize, Serialize};

/// `POST /v1/completions` in echo mode: the server scores the prompt itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub echo: bool,
    pub logprobs: u32,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResponse {
    #[serde(default)]
    pub model: Option<String>,
    pub choices: Vec<CompletionChoice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionChoice {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub index: u32,
    pub logprobs: Option<CompletionLogprobs>,
}

/// Offsets are character (Unicode scalar) positions into the prompt.
/// The first prompt token commonly has a `null` logprob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionLogprobs {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<Option<f64>>,
    pub text_offset: Vec<usize>,
}

/// `POST /v1/reward`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardRequest {
    pub model: String,
    pub instruction: String,
    pub response: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardResponse {
    pub reward: serde_json::Value,
}

/// `POST /v1/chat/completions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatChoice {
    #[serde(default)]
    pub index: u32,
    pub message: ChatMessage,
}

/// `GET /stats` on the mock server.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockStats {
    pub requests: u64,
    pub completions: u64,
    pub rewards: u64,
    pub generations: u64,
}
