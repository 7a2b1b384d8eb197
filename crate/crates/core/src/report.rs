//! Run reports: resolved configuration, per-generator metrics and the
//! optional correlation table, rendered as JSON, text or CSV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{LengthCounter, LossConditioning, LossMode, MetricVector};
use crate::ranking::{Direction, PredictionTable};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPRODUCIBLE_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub model: String,
    pub url: String,
    pub max_context_tokens: usize,
}

/// Everything that can change a result. Execution settings (concurrency,
/// cache location, output format) are deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub subcommand: String,
    pub datasets: Vec<String>,
    pub base: Option<EndpointConfig>,
    pub reference: Option<EndpointConfig>,
    pub rewards: Vec<EndpointConfig>,
    pub generation: Option<EndpointConfig>,
    pub beta: f64,
    pub loss_mode: LossMode,
    pub loss_conditioning: LossConditioning,
    pub exclude_truncated: bool,
    pub car_reward_model: Option<String>,
    pub length_counter: LengthCounter,
    pub prompt_template: String,
    pub ppl_direction: Direction,
    pub ground_truth: Vec<String>,
    pub n: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl ResolvedConfig {
    /// SHA-256 over the configuration with endpoint URLs blanked: the same
    /// models reached through a different address hash identically.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        for ep in semantic
            .base
            .iter_mut()
            .chain(semantic.reference.iter_mut())
            .chain(semantic.generation.iter_mut())
            .chain(semantic.rewards.iter_mut())
        {
            ep.url.clear();
        }
        let bytes = serde_json::to_vec(&semantic).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub toolkit: String,
    pub version: String,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEntry {
    pub base_model: String,
    pub dataset: String,
    pub metrics: MetricVector,
    pub degenerate_count: usize,
    pub truncated_count: usize,
    pub excluded_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub run: RunMetadata,
    pub config: ResolvedConfig,
    pub generators: Vec<GeneratorEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlations: Option<PredictionTable>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Json,
    Table,
    Csv,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "table" => Ok(OutputFormat::Table),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(format!(
                "unknown format `{other}` (expected json|table|csv)"
            )),
        }
    }
}

impl Report {
    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
            OutputFormat::Table => match &self.correlations {
                Some(t) => t.to_text(),
                None => self.metrics_text(),
            },
            OutputFormat::Csv => match &self.correlations {
                Some(t) => t.to_csv(),
                None => self.metrics_csv(),
            },
        }
    }

    fn reward_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for g in &self.generators {
            for k in g.metrics.ar.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        cols
    }

    fn metric_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let rewards = self.reward_columns();
        let mut header: Vec<String> = ["base_model", "generator", "pairs"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(rewards.iter().map(|r| format!("AR:{r}")));
        header.extend(
            [
                "PPL-ref", "PPL-self", "IFD-ref", "IFD-self", "length", "loss", "CAR",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        let rows = self
            .generators
            .iter()
            .map(|g| {
                let m = &g.metrics;
                let mut row = vec![
                    g.base_model.clone(),
                    m.generator_id.clone(),
                    m.pair_count.to_string(),
                ];
                row.extend(rewards.iter().map(|r| match m.ar.get(r) {
                    Some(v) => format!("{v:.4}"),
                    None => "-".into(),
                }));
                row.extend(
                    [
                        m.ppl_ref_avg,
                        m.ppl_self_avg,
                        m.ifd_ref_avg,
                        m.ifd_self_avg,
                        m.avg_length,
                        m.loss,
                        m.car,
                    ]
                    .iter()
                    .map(|v| format!("{v:.4}")),
                );
                row
            })
            .collect();
        (header, rows)
    }

    fn metrics_text(&self) -> String {
        let (header, rows) = self.metric_rows();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(&rows)
                    .map(|r| r[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in std::iter::once(&header).chain(&rows) {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    if i < 2 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        for w in &self.warnings {
            writeln!(out, "warning: {w}").unwrap();
        }
        out
    }

    fn metrics_csv(&self) -> String {
        let (header, rows) = self.metric_rows();
        let mut out = header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ResolvedConfig {
        ResolvedConfig {
            subcommand: "score".into(),
            datasets: vec!["a.jsonl".into()],
            base: Some(EndpointConfig {
                model: "base".into(),
                url: "http://127.0.0.1:1".into(),
                max_context_tokens: 8192,
            }),
            reference: None,
            rewards: vec![],
            generation: None,
            beta: 3.0,
            loss_mode: LossMode::Sum,
            loss_conditioning: LossConditioning::Unconditional,
            exclude_truncated: false,
            car_reward_model: None,
            length_counter: LengthCounter::Backend,
            prompt_template: "{instruction}\n".into(),
            ppl_direction: Direction::LowerIsBetter,
            ground_truth: vec![],
            n: 5,
            temperature: 0.8,
            top_p: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn hash_ignores_urls_but_not_models() {
        let a = config();
        let mut b = config();
        b.base.as_mut().unwrap().url = "http://elsewhere:9".into();
        assert_eq!(a.hash(), b.hash());
        let mut c = config();
        c.beta = 2.0;
        assert_ne!(a.hash(), c.hash());
        let mut d = config();
        d.base.as_mut().unwrap().model = "other".into();
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
