//! Per-pair and dataset-level metrics: perplexity, IFD, response length,
//! average reward, base-model loss and the compatibility-adjusted reward.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendEndpoint, BackendError, Client, ScoredSequence};
use crate::corpus::{GeneratorDataset, Pair, ResponseRecord};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("degenerate pair: {0}")]
    DegeneratePair(String),
    #[error("degenerate dataset `{0}`: no scorable pairs")]
    DegenerateDataset(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("pair `{instruction_id}`: {source}")]
    Backend {
        instruction_id: String,
        #[source]
        source: BackendError,
    },
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::default();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated arithmetic mean; `None` for an empty input.
pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    (n > 0).then(|| acc.total() / n as f64)
}

/// `exp(-(1/N) Σ log p)`, the perplexity of a scored response.
pub fn response_perplexity(scores: &ScoredSequence) -> Result<f64, MetricsError> {
    let nll = nll_per_token(scores)?;
    Ok(nll.exp())
}

fn nll_total(scores: &ScoredSequence) -> Result<f64, MetricsError> {
    if scores.scores.is_empty() {
        return Err(MetricsError::DegeneratePair("empty scored sequence".into()));
    }
    let total: CompensatedSum = scores.logprobs().collect();
    // -0.0 for an all-zero sequence; normalize so exp() gives exactly 1.
    Ok(-total.total() + 0.0)
}

fn nll_per_token(scores: &ScoredSequence) -> Result<f64, MetricsError> {
    Ok(nll_total(scores)? / scores.scores.len() as f64)
}

/// Instruction-following difficulty: conditional over unconditional perplexity.
pub fn ifd(ppl_conditional: f64, ppl_unconditional: f64) -> Result<f64, MetricsError> {
    if ppl_unconditional <= 0.0 || !ppl_unconditional.is_finite() {
        return Err(MetricsError::Argument(format!(
            "unconditional perplexity must be positive and finite, got {ppl_unconditional}"
        )));
    }
    if ppl_conditional <= 0.0 || !ppl_conditional.is_finite() {
        return Err(MetricsError::Argument(format!(
            "conditional perplexity must be positive and finite, got {ppl_conditional}"
        )));
    }
    Ok(ppl_conditional / ppl_unconditional)
}

pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// Counts whitespace-separated words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

impl<F: Fn(&str) -> usize> TokenCounter for F {
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn response_length(response: &ResponseRecord, counter: &dyn TokenCounter) -> usize {
    counter.count(&response.text)
}

/// Mean reward over the dataset, one reward per pair in canonical order.
pub fn average_reward(d: &GeneratorDataset, rewards: &[f64]) -> Result<f64, MetricsError> {
    if rewards.len() != d.len() {
        return Err(MetricsError::Argument(format!(
            "{} rewards for {} pairs",
            rewards.len(),
            d.len()
        )));
    }
    mean(rewards.iter().copied())
        .ok_or_else(|| MetricsError::DegenerateDataset(d.generator_id.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Mean over responses of the total sequence NLL.
    #[default]
    Sum,
    /// Mean over responses of the per-token NLL.
    PerToken,
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(LossMode::Sum),
            "per-token" => Ok(LossMode::PerToken),
            other => Err(format!(
                "unknown loss mode `{other}` (expected sum|per-token)"
            )),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Sum => "sum",
            LossMode::PerToken => "per-token",
        })
    }
}

/// Whether the base-model loss conditions responses on their instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossConditioning {
    #[default]
    Unconditional,
    Conditional,
}

impl FromStr for LossConditioning {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unconditional" => Ok(LossConditioning::Unconditional),
            "conditional" => Ok(LossConditioning::Conditional),
            other => Err(format!(
                "unknown loss conditioning `{other}` (expected unconditional|conditional)"
            )),
        }
    }
}

impl fmt::Display for LossConditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossConditioning::Unconditional => "unconditional",
            LossConditioning::Conditional => "conditional",
        })
    }
}

/// Average base-model loss over the scored pairs.
pub fn dataset_loss(
    d: &GeneratorDataset,
    per_pair: &[PairMetrics],
    mode: LossMode,
) -> Result<f64, MetricsError> {
    if d.is_empty() || per_pair.is_empty() {
        return Err(MetricsError::DegenerateDataset(d.generator_id.clone()));
    }
    let values = per_pair.iter().map(|p| {
        let v = match mode {
            LossMode::Sum => p.nll_total,
            LossMode::PerToken => p.nll_per_token,
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(MetricsError::Argument(format!(
                "pair `{}` has no base-model score",
                p.instruction_id
            )))
        }
    });
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v?);
    }
    Ok(acc.total() / per_pair.len() as f64)
}

/// Compatibility-adjusted reward `r / (1 + beta * loss)`.
pub fn car(reward: f64, loss: f64, beta: f64) -> Result<f64, MetricsError> {
    let denom = 1.0 + beta * loss;
    if denom <= 0.0 || denom.is_nan() {
        return Err(MetricsError::Argument(format!(
            "1 + beta * loss must be positive (beta={beta}, loss={loss})"
        )));
    }
    Ok(reward / denom)
}

/// Conditional/unconditional perplexity of one response under one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerplexityScores {
    pub ppl_conditional: f64,
    pub ppl_unconditional: f64,
    pub ifd: f64,
}

impl PerplexityScores {
    const UNDEFINED: Self = Self {
        ppl_conditional: f64::INFINITY,
        ppl_unconditional: f64::INFINITY,
        ifd: f64::NAN,
    };

    fn from_sequences(
        conditional: &ScoredSequence,
        unconditional: &ScoredSequence,
    ) -> Result<Self, MetricsError> {
        let ppl_conditional = response_perplexity(conditional)?;
        let ppl_unconditional = response_perplexity(unconditional)?;
        Ok(Self {
            ppl_conditional,
            ppl_unconditional,
            ifd: ifd(ppl_conditional, ppl_unconditional)?,
        })
    }
}

/// Metrics of one pair. Degenerate (empty) responses carry infinite
/// perplexities and are excluded from every dataset average.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub instruction_id: String,
    pub sample_index: u32,
    /// Under the base model.
    #[serde(rename = "self")]
    pub self_model: PerplexityScores,
    /// Under the reference model.
    #[serde(rename = "ref")]
    pub reference: PerplexityScores,
    /// Base-model NLL of the response, under the configured conditioning.
    pub nll_total: f64,
    pub nll_per_token: f64,
    pub token_count: usize,
    pub length_tokens: usize,
    pub rewards: BTreeMap<String, f64>,
    pub truncated: bool,
    pub degenerate: bool,
    /// Whether this pair enters the dataset averages.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub generator_id: String,
    pub ar: BTreeMap<String, f64>,
    pub ppl_ref_avg: f64,
    pub ppl_self_avg: f64,
    pub ifd_ref_avg: f64,
    pub ifd_self_avg: f64,
    pub avg_length: f64,
    pub loss: f64,
    pub car: f64,
    pub beta: f64,
    pub pair_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthCounter {
    /// Token count reported by the base-model backend.
    #[default]
    Backend,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub beta: f64,
    pub loss_mode: LossMode,
    pub loss_conditioning: LossConditioning,
    pub exclude_truncated: bool,
    /// Reward model feeding CAR; the first reward endpoint when unset.
    pub car_reward_model: Option<String>,
    pub length_counter: LengthCounter,
    /// Conditioning context; `{instruction}` is substituted.
    pub prompt_template: String,
    /// Pairs scored concurrently.
    pub concurrency: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            beta: 3.0,
            loss_mode: LossMode::Sum,
            loss_conditioning: LossConditioning::Unconditional,
            exclude_truncated: false,
            car_reward_model: None,
            length_counter: LengthCounter::Backend,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
            concurrency: 8,
        }
    }
}

pub const DEFAULT_PROMPT_TEMPLATE: &str = "{instruction}\n";

impl MetricsConfig {
    pub fn context_for(&self, instruction: &str) -> String {
        self.prompt_template.replace("{instruction}", instruction)
    }
}

/// Everything learned about one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetScore {
    pub metrics: MetricVector,
    pub pairs: Vec<PairMetrics>,
    pub degenerate_count: usize,
    pub truncated_count: usize,
    pub excluded_count: usize,
}

struct Endpoints<'a> {
    base: &'a BackendEndpoint,
    reference: &'a BackendEndpoint,
    rewards: &'a [BackendEndpoint],
}

async fn score_pair(
    client: &Client,
    eps: &Endpoints<'_>,
    config: &MetricsConfig,
    pair: &Pair,
) -> Result<PairMetrics, MetricsError> {
    let response = &pair.response;
    if response.is_degenerate() {
        return Ok(PairMetrics {
            instruction_id: pair.instruction.id.clone(),
            sample_index: response.sample_index,
            self_model: PerplexityScores::UNDEFINED,
            reference: PerplexityScores::UNDEFINED,
            nll_total: f64::INFINITY,
            nll_per_token: f64::INFINITY,
            token_count: 0,
            length_tokens: 0,
            rewards: BTreeMap::new(),
            truncated: false,
            degenerate: true,
            included: false,
        });
    }

    let wrap = |source| MetricsError::Backend {
        instruction_id: pair.instruction.id.clone(),
        source,
    };
    let context = config.context_for(&pair.instruction.text);
    let y = response.text.as_str();

    let ((self_cond, self_uncond), (ref_cond, ref_uncond)) = futures::try_join!(
        async {
            futures::try_join!(
                client.score_logprobs(eps.base, &context, y),
                client.score_logprobs(eps.base, "", y)
            )
        },
        async {
            futures::try_join!(
                client.score_logprobs(eps.reference, &context, y),
                client.score_logprobs(eps.reference, "", y)
            )
        },
    )
    .map_err(wrap)?;

    let rewards = futures::future::try_join_all(
        eps.rewards
            .iter()
            .map(|ep| client.score_reward(ep, &pair.instruction.text, y)),
    )
    .await
    .map_err(wrap)?
    .into_iter()
    .map(|r| (r.reward_model_id, r.value))
    .collect();

    let loss_seq = match config.loss_conditioning {
        LossConditioning::Unconditional => &self_uncond,
        LossConditioning::Conditional => &self_cond,
    };
    let length_tokens = match config.length_counter {
        LengthCounter::Backend => self_uncond.token_count,
        LengthCounter::Whitespace => response_length(response, &WhitespaceCounter),
    };
    let truncated = [&self_cond, &self_uncond, &ref_cond, &ref_uncond]
        .iter()
        .any(|s| s.truncated);

    Ok(PairMetrics {
        instruction_id: pair.instruction.id.clone(),
        sample_index: response.sample_index,
        self_model: PerplexityScores::from_sequences(&self_cond, &self_uncond)?,
        reference: PerplexityScores::from_sequences(&ref_cond, &ref_uncond)?,
        nll_total: nll_total(loss_seq)?,
        nll_per_token: nll_per_token(loss_seq)?,
        token_count: loss_seq.token_count,
        length_tokens,
        rewards,
        truncated,
        degenerate: false,
        included: !(truncated && config.exclude_truncated),
    })
}

/// Scores every pair of `d` and reduces to a [`MetricVector`].
///
/// Requests run concurrently; reduction follows canonical dataset order, so
/// the result does not depend on the concurrency level.
pub async fn compute_metrics(
    client: &Client,
    d: &GeneratorDataset,
    base: &BackendEndpoint,
    reference: &BackendEndpoint,
    reward_endpoints: &[BackendEndpoint],
    config: &MetricsConfig,
) -> Result<DatasetScore, MetricsError> {
    if config.beta < 0.0 || !config.beta.is_finite() {
        return Err(MetricsError::Argument(format!(
            "beta must be >= 0, got {}",
            config.beta
        )));
    }
    if config.concurrency == 0 {
        return Err(MetricsError::Argument("concurrency must be >= 1".into()));
    }
    if reward_endpoints.is_empty() {
        return Err(MetricsError::Argument(
            "at least one reward endpoint is required".into(),
        ));
    }
    let mut reward_ids: Vec<&str> = reward_endpoints
        .iter()
        .map(|e| e.model_id.as_str())
        .collect();
    reward_ids.sort_unstable();
    if reward_ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(MetricsError::Argument("duplicate reward model ids".into()));
    }
    let car_model = match &config.car_reward_model {
        Some(id) if !reward_ids.contains(&id.as_str()) => {
            return Err(MetricsError::Argument(format!(
                "CAR reward model `{id}` is not among the reward endpoints"
            )))
        }
        Some(id) => id.clone(),
        None => reward_endpoints[0].model_id.clone(),
    };
    if d.is_empty() {
        return Err(MetricsError::DegenerateDataset(d.generator_id.clone()));
    }

    let eps = Endpoints {
        base,
        reference,
        rewards: reward_endpoints,
    };
    let pairs: Vec<PairMetrics> = stream::iter(&d.pairs)
        .map(|pair| score_pair(client, &eps, config, pair))
        .buffered(config.concurrency)
        .try_collect()
        .await?;

    let degenerate_count = pairs.iter().filter(|p| p.degenerate).count();
    let truncated_count = pairs.iter().filter(|p| p.truncated).count();
    let excluded_count = pairs
        .iter()
        .filter(|p| !p.degenerate && !p.included)
        .count();
    let included: Vec<PairMetrics> = pairs.iter().filter(|p| p.included).cloned().collect();
    if included.is_empty() {
        return Err(MetricsError::DegenerateDataset(d.generator_id.clone()));
    }
    let avg = |f: &dyn Fn(&PairMetrics) -> f64| mean(included.iter().map(f)).expect("non-empty");

    let ar: BTreeMap<String, f64> = reward_endpoints
        .iter()
        .map(|ep| {
            let id = ep.model_id.clone();
            let value = avg(&|p| p.rewards[&id]);
            (id, value)
        })
        .collect();
    let loss = dataset_loss(d, &included, config.loss_mode)?;
    let car_value = car(ar[&car_model], loss, config.beta)?;

    let metrics = MetricVector {
        generator_id: d.generator_id.clone(),
        ppl_ref_avg: avg(&|p| p.reference.ppl_conditional),
        ppl_self_avg: avg(&|p| p.self_model.ppl_conditional),
        ifd_ref_avg: avg(&|p| p.reference.ifd),
        ifd_self_avg: avg(&|p| p.self_model.ifd),
        avg_length: avg(&|p| p.length_tokens as f64),
        ar,
        loss,
        car: car_value,
        beta: config.beta,
        pair_count: included.len(),
    };
    Ok(DatasetScore {
        metrics,
        pairs,
        degenerate_count,
        truncated_count,
        excluded_count,
    })
}
