//! Ranks over generators, Spearman's rho, and the metric-vs-benchmark
//! prediction table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricVector;

#[derive(Debug, Error, PartialEq)]
pub enum RankingError {
    #[error("need at least 2 entries to rank, got {0}")]
    TooFew(usize),
    #[error("value for `{0}` is not finite")]
    NotFinite(String),
    #[error("generator sets differ; only in predictions: {only_left:?}; only in ground truth: {only_right:?}")]
    Mismatch {
        only_left: Vec<String>,
        only_right: Vec<String>,
    },
    #[error("invalid ground truth: {0}")]
    GroundTruth(String),
    #[error("metric `{0}` is unavailable")]
    UnknownMetric(String),
}

/// Mean of AlpacaEval 2 length-controlled win rate and Arena-Hard win rate.
pub fn average_performance(ae2_lc: f64, ah_wr: f64) -> f64 {
    (ae2_lc + ah_wr) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScores {
    pub generator_id: String,
    pub ae2_lc: f64,
    pub ae2_wr: f64,
    pub ah_wr: f64,
    pub ap: f64,
}

impl BenchmarkScores {
    pub fn new(generator_id: impl Into<String>, ae2_lc: f64, ae2_wr: f64, ah_wr: f64) -> Self {
        Self {
            generator_id: generator_id.into(),
            ae2_lc,
            ae2_wr,
            ah_wr,
            ap: average_performance(ae2_lc, ah_wr),
        }
    }
}

#[derive(Debug, Deserialize)]
struct GroundTruthFile {
    base_model: String,
    scores: BTreeMap<String, RawScores>,
}

#[derive(Debug, Deserialize)]
struct RawScores {
    ae2_lc: f64,
    ae2_wr: f64,
    ah_wr: f64,
    /// Optional reported AP, checked against the recomputed value.
    #[serde(default)]
    ap: Option<f64>,
}

/// Benchmark outcomes of models fine-tuned from one base model.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub base_model: String,
    pub scores: BTreeMap<String, BenchmarkScores>,
}

impl GroundTruth {
    pub fn from_json(text: &str) -> Result<Self, RankingError> {
        let raw: GroundTruthFile =
            serde_json::from_str(text).map_err(|e| RankingError::GroundTruth(e.to_string()))?;
        let mut scores = BTreeMap::new();
        for (gen, s) in raw.scores {
            for (name, v) in [
                ("ae2_lc", s.ae2_lc),
                ("ae2_wr", s.ae2_wr),
                ("ah_wr", s.ah_wr),
            ] {
                if !v.is_finite() {
                    return Err(RankingError::GroundTruth(format!(
                        "{gen}.{name} is not finite"
                    )));
                }
            }
            let b = BenchmarkScores::new(gen.clone(), s.ae2_lc, s.ae2_wr, s.ah_wr);
            if let Some(reported) = s.ap {
                // Reported values carry two decimals.
                if (reported - b.ap).abs() > 0.005 + 1e-9 {
                    return Err(RankingError::GroundTruth(format!(
                        "{gen}: reported ap {reported} differs from (ae2_lc + ah_wr) / 2 = {}",
                        b.ap
                    )));
                }
            }
            scores.insert(gen, b);
        }
        Ok(Self {
            base_model: raw.base_model,
            scores,
        })
    }

    pub fn ap_values(&self) -> BTreeMap<String, f64> {
        self.scores.iter().map(|(g, s)| (g.clone(), s.ap)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "higher" | "higher-is-better" => Ok(Direction::HigherIsBetter),
            "lower" | "lower-is-better" => Ok(Direction::LowerIsBetter),
            other => Err(format!(
                "unknown direction `{other}` (expected higher|lower)"
            )),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::HigherIsBetter => "higher",
            Direction::LowerIsBetter => "lower",
        })
    }
}

/// Rank 1 is best; tied values share the mean of the ranks they span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    pub ranks: BTreeMap<String, f64>,
    pub direction: Direction,
    pub n: usize,
}

impl RankVector {
    pub fn has_ties(&self) -> bool {
        let mut r: Vec<f64> = self.ranks.values().copied().collect();
        r.sort_by(f64::total_cmp);
        r.iter().enumerate().any(|(i, &v)| v != (i + 1) as f64)
    }
}

pub fn rank_values(
    values: &BTreeMap<String, f64>,
    direction: Direction,
) -> Result<RankVector, RankingError> {
    if values.len() < 2 {
        return Err(RankingError::TooFew(values.len()));
    }
    if let Some((id, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(RankingError::NotFinite(id.clone()));
    }
    let mut order: Vec<(&String, f64)> = values.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|a, b| match direction {
        Direction::HigherIsBetter => b.1.total_cmp(&a.1),
        Direction::LowerIsBetter => a.1.total_cmp(&b.1),
    });

    let mut ranks = BTreeMap::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && order[end].1 == order[start].1 {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let shared = (start + 1 + end) as f64 / 2.0;
        for (id, _) in &order[start..end] {
            ranks.insert((*id).clone(), shared);
        }
        start = end;
    }
    Ok(RankVector {
        n: ranks.len(),
        ranks,
        direction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub n: usize,
    pub tie_corrected: bool,
}

fn check_same_ids(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
) -> Result<(), RankingError> {
    let left: BTreeSet<&String> = a.keys().collect();
    let right: BTreeSet<&String> = b.keys().collect();
    if left == right {
        return Ok(());
    }
    Err(RankingError::Mismatch {
        only_left: left.difference(&right).map(|s| s.to_string()).collect(),
        only_right: right.difference(&left).map(|s| s.to_string()).collect(),
    })
}

/// Spearman's rho between two rankings of the same generators.
///
/// Without ties this is `1 - 6 Σd² / (n(n² - 1))`; with ties it is the
/// Pearson correlation of the (averaged) ranks, or 0 when either side is
/// constant.
pub fn spearman(a: &RankVector, b: &RankVector) -> Result<CorrelationResult, RankingError> {
    check_same_ids(&a.ranks, &b.ranks)?;
    let n = a.ranks.len();
    if n < 2 {
        return Err(RankingError::TooFew(n));
    }
    let pairs: Vec<(f64, f64)> = a.ranks.iter().map(|(k, &r)| (r, b.ranks[k])).collect();

    if !a.has_ties() && !b.has_ties() {
        let d2: f64 = pairs.iter().map(|(x, y)| (x - y) * (x - y)).sum();
        let nf = n as f64;
        return Ok(CorrelationResult {
            rho: 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)),
            n,
            tie_corrected: false,
        });
    }

    let nf = n as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let rho = if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(CorrelationResult {
        rho,
        n,
        tie_corrected: true,
    })
}

/// A metric column of the prediction table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricSelector {
    /// Average reward under the named reward model.
    Ar(String),
    IfdRef,
    IfdSelf,
    PplRef,
    PplSelf,
    Length,
    Car,
}

impl MetricSelector {
    /// All columns in table order, with one AR column per reward model.
    pub fn standard<'a>(reward_models: impl IntoIterator<Item = &'a str>) -> Vec<Self> {
        let mut out: Vec<Self> = reward_models
            .into_iter()
            .map(|m| MetricSelector::Ar(m.to_string()))
            .collect();
        out.extend([
            MetricSelector::IfdRef,
            MetricSelector::IfdSelf,
            MetricSelector::PplRef,
            MetricSelector::PplSelf,
            MetricSelector::Length,
            MetricSelector::Car,
        ]);
        out
    }

    pub fn name(&self) -> String {
        match self {
            MetricSelector::Ar(m) => format!("AR:{m}"),
            MetricSelector::IfdRef => "IFD-ref".into(),
            MetricSelector::IfdSelf => "IFD-self".into(),
            MetricSelector::PplRef => "PPL-ref".into(),
            MetricSelector::PplSelf => "PPL-self".into(),
            MetricSelector::Length => "length".into(),
            MetricSelector::Car => "CAR".into(),
        }
    }

    fn direction(&self, ppl_direction: Direction) -> Direction {
        match self {
            MetricSelector::PplRef | MetricSelector::PplSelf => ppl_direction,
            _ => Direction::HigherIsBetter,
        }
    }

    fn value(&self, m: &MetricVector) -> Result<f64, RankingError> {
        Ok(match self {
            MetricSelector::Ar(id) => *m
                .ar
                .get(id)
                .ok_or_else(|| RankingError::UnknownMetric(self.name()))?,
            MetricSelector::IfdRef => m.ifd_ref_avg,
            MetricSelector::IfdSelf => m.ifd_self_avg,
            MetricSelector::PplRef => m.ppl_ref_avg,
            MetricSelector::PplSelf => m.ppl_self_avg,
            MetricSelector::Length => m.avg_length,
            MetricSelector::Car => m.car,
        })
    }
}

impl FromStr for MetricSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(id) = s.strip_prefix("AR:") {
            return Ok(MetricSelector::Ar(id.to_string()));
        }
        match s {
            "IFD-ref" => Ok(MetricSelector::IfdRef),
            "IFD-self" => Ok(MetricSelector::IfdSelf),
            "PPL-ref" => Ok(MetricSelector::PplRef),
            "PPL-self" => Ok(MetricSelector::PplSelf),
            "length" => Ok(MetricSelector::Length),
            "CAR" => Ok(MetricSelector::Car),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: String,
    pub direction: Direction,
    #[serde(flatten)]
    pub correlation: CorrelationResult,
}

/// One base model's row: rho of every selected metric against the AP ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub base_model: String,
    pub correlations: Vec<MetricCorrelation>,
    /// Metric(s) with the highest rho.
    pub best: Vec<String>,
}

impl PredictionRow {
    pub fn rho(&self, metric: &str) -> Option<f64> {
        self.correlations
            .iter()
            .find(|c| c.metric == metric)
            .map(|c| c.correlation.rho)
    }
}

pub fn evaluate_prediction(
    metric_vectors: &[MetricVector],
    ground_truth: &GroundTruth,
    selectors: &[MetricSelector],
    ppl_direction: Direction,
) -> Result<PredictionRow, RankingError> {
    let ap = ground_truth.ap_values();
    let by_gen: BTreeMap<String, &MetricVector> = metric_vectors
        .iter()
        .map(|m| (m.generator_id.clone(), m))
        .collect();
    let probe: BTreeMap<String, f64> = by_gen.keys().map(|k| (k.clone(), 0.0)).collect();
    check_same_ids(&probe, &ap)?;
    let truth = rank_values(&ap, Direction::HigherIsBetter)?;

    let mut correlations = Vec::with_capacity(selectors.len());
    for sel in selectors {
        let values = by_gen
            .iter()
            .map(|(g, m)| Ok((g.clone(), sel.value(m)?)))
            .collect::<Result<BTreeMap<_, _>, RankingError>>()?;
        let direction = sel.direction(ppl_direction);
        let ranks = rank_values(&values, direction)?;
        correlations.push(MetricCorrelation {
            metric: sel.name(),
            direction,
            correlation: spearman(&ranks, &truth)?,
        });
    }

    let best_rho = correlations
        .iter()
        .map(|c| round4(c.correlation.rho))
        .fold(f64::NEG_INFINITY, f64::max);
    let best = correlations
        .iter()
        .filter(|c| round4(c.correlation.rho) == best_rho)
        .map(|c| c.metric.clone())
        .collect();
    Ok(PredictionRow {
        base_model: ground_truth.base_model.clone(),
        correlations,
        best,
    })
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Table-style layout: one row per base model, one column per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
}

impl PredictionTable {
    fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = Vec::new();
        for row in &self.rows {
            for c in &row.correlations {
                if !cols.contains(&c.metric) {
                    cols.push(c.metric.clone());
                }
            }
        }
        cols
    }

    fn cell(row: &PredictionRow, col: &str) -> String {
        match row.rho(col) {
            Some(rho) => {
                let mark = if row.best.iter().any(|b| b == col) {
                    "*"
                } else {
                    ""
                };
                format!("{rho:.4}{mark}")
            }
            None => "-".into(),
        }
    }

    /// Fixed-width text; the best metric of each row is marked with `*`.
    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let mut header = vec!["base_model".to_string()];
        header.extend(cols.iter().cloned());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.base_model.clone()];
                line.extend(cols.iter().map(|c| Self::cell(r, c)));
                line
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|l| l[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("base_model");
        for c in &cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.base_model);
            for c in &cols {
                out.push(',');
                if let Some(rho) = r.rho(c) {
                    write!(out, "{rho:.4}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}
