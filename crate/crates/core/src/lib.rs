//! Scoring toolkit for synthetic instruction-tuning data.
//!
//! Given datasets whose responses come from different generators, compute
//! per-dataset metrics (average reward, perplexity, IFD, response length,
//! base-model loss and the compatibility-adjusted reward), rank the
//! generators, and measure how well each metric predicts fine-tuning outcomes
//! with Spearman's rho.

pub mod backends;
pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod ranking;
pub mod report;
pub mod selection;
