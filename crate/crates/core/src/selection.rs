//! Rejection sampling: sample several responses per instruction, score them
//! with a reward model, keep the best (or worst).

use std::cmp::Ordering;

use futures::stream::{self, StreamExt, TryStreamExt};
use thiserror::Error;

use crate::backends::{BackendEndpoint, BackendError, Client, RewardScore};
use crate::corpus::{GeneratorDataset, InstructionRecord, Pair, ResponseRecord};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("empty candidate set for `{0}`")]
    Empty(String),
    #[error("candidate {sample_index} of `{instruction_id}` has no reward")]
    MissingReward {
        instruction_id: String,
        sample_index: u32,
    },
    #[error("candidates of `{0}` disagree on instruction or generator")]
    Inconsistent(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("instruction `{instruction_id}`: {source}")]
    Backend {
        instruction_id: String,
        #[source]
        source: BackendError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub response: ResponseRecord,
    pub reward: Option<RewardScore>,
}

/// All sampled responses to one instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponseSet {
    pub instruction_id: String,
    pub candidates: Vec<Candidate>,
}

impl SampledResponseSet {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    fn scored(&self) -> Result<Vec<(f64, &ResponseRecord)>, SelectionError> {
        let first = self
            .candidates
            .first()
            .ok_or_else(|| SelectionError::Empty(self.instruction_id.clone()))?;
        self.candidates
            .iter()
            .map(|c| {
                if c.response.instruction_id != self.instruction_id
                    || c.response.generator_id != first.response.generator_id
                {
                    return Err(SelectionError::Inconsistent(self.instruction_id.clone()));
                }
                let reward = c
                    .reward
                    .as_ref()
                    .ok_or_else(|| SelectionError::MissingReward {
                        instruction_id: self.instruction_id.clone(),
                        sample_index: c.response.sample_index,
                    })?;
                Ok((reward.value, &c.response))
            })
            .collect()
    }

    fn pick(&self, prefer: Ordering) -> Result<&ResponseRecord, SelectionError> {
        let scored = self.scored()?;
        let (_, best) = scored
            .into_iter()
            .reduce(|acc, cur| match cur.0.total_cmp(&acc.0) {
                o if o == prefer => cur,
                Ordering::Equal if cur.1.sample_index < acc.1.sample_index => cur,
                _ => acc,
            })
            .expect("non-empty");
        Ok(best)
    }
}

/// Highest-reward candidate; ties go to the lowest sample index.
pub fn select_best(set: &SampledResponseSet) -> Result<&ResponseRecord, SelectionError> {
    set.pick(Ordering::Greater)
}

/// Lowest-reward candidate; ties go to the lowest sample index.
pub fn select_worst(set: &SampledResponseSet) -> Result<&ResponseRecord, SelectionError> {
    set.pick(Ordering::Less)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BonConfig {
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    /// Instructions processed concurrently.
    pub concurrency: usize,
}

impl Default for BonConfig {
    fn default() -> Self {
        Self {
            n: 5,
            temperature: 0.8,
            top_p: 1.0,
            seed: 0,
            concurrency: 8,
        }
    }
}

/// Best-of-N and Worst-of-N datasets plus the scored pools they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BonOutcome {
    pub best: GeneratorDataset,
    pub worst: GeneratorDataset,
    pub pools: Vec<SampledResponseSet>,
}

async fn sample_and_score(
    client: &Client,
    gen: &BackendEndpoint,
    reward: &BackendEndpoint,
    config: &BonConfig,
    instruction: &InstructionRecord,
) -> Result<SampledResponseSet, SelectionError> {
    let wrap = |source| SelectionError::Backend {
        instruction_id: instruction.id.clone(),
        source,
    };
    let texts = client
        .generate_responses(
            gen,
            &instruction.text,
            config.n,
            config.temperature,
            config.top_p,
            config.seed,
        )
        .await
        .map_err(wrap)?;
    let rewards = futures::future::try_join_all(
        texts
            .iter()
            .map(|t| client.score_reward(reward, &instruction.text, t)),
    )
    .await
    .map_err(wrap)?;
    let candidates = texts
        .into_iter()
        .zip(rewards)
        .enumerate()
        .map(|(i, (text, reward))| Candidate {
            response: ResponseRecord {
                instruction_id: instruction.id.clone(),
                generator_id: gen.model_id.clone(),
                text,
                temperature: config.temperature,
                top_p: config.top_p,
                sample_index: i as u32,
            },
            reward: Some(reward),
        })
        .collect();
    Ok(SampledResponseSet {
        instruction_id: instruction.id.clone(),
        candidates,
    })
}

pub async fn build_bon_datasets(
    client: &Client,
    instructions: &[InstructionRecord],
    gen_endpoint: &BackendEndpoint,
    reward_endpoint: &BackendEndpoint,
    config: &BonConfig,
) -> Result<BonOutcome, SelectionError> {
    if config.n == 0 {
        return Err(SelectionError::Argument("n must be >= 1".into()));
    }
    if config.temperature == 0.0 && config.n > 1 {
        return Err(SelectionError::Argument(
            "greedy decoding (temperature 0) admits only n = 1".into(),
        ));
    }
    if config.concurrency == 0 {
        return Err(SelectionError::Argument("concurrency must be >= 1".into()));
    }

    let pools: Vec<SampledResponseSet> = stream::iter(instructions)
        .map(|ins| sample_and_score(client, gen_endpoint, reward_endpoint, config, ins))
        .buffered(config.concurrency)
        .try_collect()
        .await?;

    let mut best = Vec::with_capacity(pools.len());
    let mut worst = Vec::with_capacity(pools.len());
    for (ins, pool) in instructions.iter().zip(&pools) {
        best.push(Pair {
            instruction: ins.clone(),
            response: select_best(pool)?.clone(),
        });
        worst.push(Pair {
            instruction: ins.clone(),
            response: select_worst(pool)?.clone(),
        });
    }
    Ok(BonOutcome {
        best: GeneratorDataset::new(gen_endpoint.model_id.clone(), best),
        worst: GeneratorDataset::new(gen_endpoint.model_id.clone(), worst),
        pools,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rewards: &[Option<f64>]) -> SampledResponseSet {
        SampledResponseSet {
            instruction_id: "q".into(),
            candidates: rewards
                .iter()
                .enumerate()
                .map(|(i, r)| Candidate {
                    response: ResponseRecord {
                        instruction_id: "q".into(),
                        generator_id: "g".into(),
                        text: format!("r{i}"),
                        temperature: 0.8,
                        top_p: 1.0,
                        sample_index: i as u32,
                    },
                    reward: r.map(|value| RewardScore {
                        reward_model_id: "rm".into(),
                        value,
                    }),
                })
                .collect(),
        }
    }

    fn idx(r: Result<&ResponseRecord, SelectionError>) -> u32 {
        r.unwrap().sample_index
    }

    #[test]
    fn best_examples() {
        assert_eq!(
            idx(select_best(&set(&[Some(0.1), Some(0.9), Some(0.5)]))),
            1
        );
        assert_eq!(idx(select_best(&set(&[Some(0.7), Some(0.7)]))), 0);
        assert_eq!(idx(select_best(&set(&[Some(-3.0)]))), 0);
    }

    #[test]
    fn worst_examples() {
        assert_eq!(
            idx(select_worst(&set(&[Some(0.1), Some(0.9), Some(0.5)]))),
            0
        );
        assert_eq!(
            idx(select_worst(&set(&[Some(0.4), Some(0.4), Some(0.4)]))),
            0
        );
        assert_eq!(idx(select_worst(&set(&[Some(-2.0)]))), 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            select_best(&set(&[Some(0.1), None])),
            Err(SelectionError::MissingReward {
                sample_index: 1,
                ..
            })
        ));
        assert!(matches!(
            select_worst(&set(&[])),
            Err(SelectionError::Empty(_))
        ));
        let mut s = set(&[Some(0.1), Some(0.2)]);
        s.candidates[1].response.generator_id = "other".into();
        assert!(matches!(
            select_best(&s),
            Err(SelectionError::Inconsistent(_))
        ));
    }

    proptest! {
        #[test]
        fn dominance_and_permutation(rewards in prop::collection::vec(0u8..5, 1..8), rot in 0usize..8) {
            let s = set(&rewards.iter().map(|&r| Some(f64::from(r))).collect::<Vec<_>>());
            let value = |r: &ResponseRecord| f64::from(rewards[r.sample_index as usize]);
            let b = select_best(&s).unwrap();
            let w = select_worst(&s).unwrap();
            prop_assert!(value(b) >= value(w));
            let all_equal = rewards.iter().all(|&r| r == rewards[0]);
            prop_assert_eq!(value(b) == value(w), all_equal);

            let mut shuffled = s.clone();
            let len = shuffled.candidates.len();
            shuffled.candidates.rotate_left(rot % len);
            prop_assert_eq!(select_best(&shuffled).unwrap().sample_index, b.sample_index);
            prop_assert_eq!(select_worst(&shuffled).unwrap().sample_index, w.sample_index);
        }
    }
}
