//! Remote scoring capabilities: token log-probabilities, scalar rewards and
//! response generation, all reached over an OpenAI-style HTTP protocol.
//!
//! [`Client`] talks to real servers or to the deterministic [`mock`] server;
//! [`cache::ScoreCache`] makes repeated scoring free across runs.

pub mod cache;
mod client;
pub mod mock;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheKey, Capability, ScoreCache};
pub use client::{Client, ClientOptions};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable at {url} after {attempts} attempt(s): {reason}")]
    Unavailable {
        url: String,
        attempts: u32,
        reason: String,
    },
    #[error("backend `{model}` does not support {capability}: {reason}")]
    Capability {
        model: String,
        capability: Capability,
        reason: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("context alone fills the {max} token window ({context_tokens} tokens)")]
    ContextTooLong { max: usize, context_tokens: usize },
    #[error("cache error at byte offset {offset}: {reason}")]
    Cache { offset: u64, reason: String },
    #[error("cache io error: {0}")]
    CacheIo(#[from] std::io::Error),
}

/// Where and how to reach one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub model_id: String,
    #[serde(skip_serializing)]
    pub auth_token: Option<String>,
    pub max_context_tokens: usize,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    pub max_retries: u32,
}

impl BackendEndpoint {
    pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 8192;
    pub const DEFAULT_MAX_RETRIES: u32 = 3;

    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model_id: model_id.into(),
            auth_token: None,
            max_context_tokens: Self::DEFAULT_MAX_CONTEXT_TOKENS,
            timeout: Duration::from_secs(60),
            max_retries: Self::DEFAULT_MAX_RETRIES,
        }
    }

    pub fn with_max_context_tokens(mut self, n: usize) -> Self {
        self.max_context_tokens = n;
        self
    }

    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_auth_token(mut self, token: Option<String>) -> Self {
        self.auth_token = token;
        self
    }

    pub(crate) fn check(&self) -> Result<(), BackendError> {
        if self.max_context_tokens == 0 {
            return Err(BackendError::Argument(
                "max_context_tokens must be positive".into(),
            ));
        }
        Ok(())
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_text: String,
    /// Natural log, always `<= 0`.
    pub logprob: f64,
}

/// Per-token log-probabilities of a continuation, as tokenized by the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub scores: Vec<TokenScore>,
    pub token_count: usize,
    pub truncated: bool,
}

impl ScoredSequence {
    pub fn new(scores: Vec<TokenScore>, truncated: bool) -> Self {
        Self {
            token_count: scores.len(),
            scores,
            truncated,
        }
    }

    pub fn from_logprobs(logprobs: &[f64]) -> Self {
        Self::new(
            logprobs
                .iter()
                .enumerate()
                .map(|(i, &logprob)| TokenScore {
                    token_text: format!("t{i}"),
                    logprob,
                })
                .collect(),
            false,
        )
    }

    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().map(|s| s.logprob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub reward_model_id: String,
    pub value: f64,
}

/// First eight bytes of SHA-256, big-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}
