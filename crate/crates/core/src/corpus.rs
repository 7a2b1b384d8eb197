//! Instruction/response corpora: data model, JSONL ingestion, validation and
//! serialization.
//!
//! One dataset file holds the responses of a single generator, one JSON
//! object per line:
//!
//! ```text
//! {"id":"q1","instruction":"Say hi","response":"Hello!","generator":"genA"}
//! ```
//!
//! `temperature`, `top_p` and `sample_index` are optional (defaults `0.0`,
//! `1.0`, `0`). `source`, `task_category` and `base_model` are optional tags.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: schema error: {reason}")]
    Schema { line: usize, reason: String },
    #[error(
        "line {line}: duplicate key (instruction_id={instruction_id}, generator={generator_id}, sample_index={sample_index})"
    )]
    DuplicateKey {
        line: usize,
        instruction_id: String,
        generator_id: String,
        sample_index: u32,
    },
    #[error("unsupported dataset format `{0}`")]
    UnsupportedFormat(String),
    #[error("empty dataset")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dataset wire formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetSchema {
    #[default]
    JsonlV1,
}

impl DatasetSchema {
    pub fn id(&self) -> &'static str {
        match self {
            DatasetSchema::JsonlV1 => "jsonl-v1",
        }
    }
}

impl FromStr for DatasetSchema {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "jsonl-v1" => Ok(DatasetSchema::JsonlV1),
            other => Err(CorpusError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub text: String,
    pub source: Option<String>,
    pub task_category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub instruction_id: String,
    pub generator_id: String,
    pub text: String,
    pub temperature: f64,
    pub top_p: f64,
    pub sample_index: u32,
}

impl ResponseRecord {
    /// Empty responses are kept in the corpus but flagged.
    pub fn is_degenerate(&self) -> bool {
        self.text.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub instruction: InstructionRecord,
    pub response: ResponseRecord,
}

/// All responses attributed to one generator, in canonical order
/// (instruction id, then sample index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDataset {
    pub generator_id: String,
    pub base_model_id: Option<String>,
    pub pairs: Vec<Pair>,
}

impl GeneratorDataset {
    pub fn new(generator_id: impl Into<String>, mut pairs: Vec<Pair>) -> Self {
        sort_canonical(&mut pairs);
        Self {
            generator_id: generator_id.into(),
            base_model_id: None,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sort_canonical(pairs: &mut [Pair]) {
    pairs.sort_by(|a, b| {
        a.instruction
            .id
            .cmp(&b.instruction.id)
            .then(a.response.sample_index.cmp(&b.response.sample_index))
    });
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// 1-based position of the offending pair in canonical order.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub record_count: usize,
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    instruction: String,
    response: String,
    generator: String,
    #[serde(default)]
    temperature: f64,
    #[serde(default = "default_top_p")]
    top_p: f64,
    #[serde(default)]
    sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_model: Option<String>,
}

fn default_top_p() -> f64 {
    1.0
}

/// Instruction-only line, used where responses are produced downstream.
#[derive(Debug, Deserialize)]
struct InstructionLine {
    id: String,
    instruction: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    task_category: Option<String>,
}

fn classify_json_error(line: usize, err: serde_json::Error) -> CorpusError {
    use serde_json::error::Category;
    match err.classify() {
        Category::Data => CorpusError::Schema {
            line,
            reason: err.to_string(),
        },
        _ => CorpusError::Parse {
            line,
            reason: err.to_string(),
        },
    }
}

/// Parses a newline-delimited JSON stream into a canonical dataset.
///
/// Blank lines are skipped. Every non-blank line must be a record of the same
/// generator; the result is sorted by instruction id then sample index.
pub fn parse_dataset<R: BufRead>(
    reader: R,
    schema: DatasetSchema,
) -> Result<GeneratorDataset, CorpusError> {
    let DatasetSchema::JsonlV1 = schema;
    let mut pairs = Vec::new();
    let mut seen: HashSet<(String, u32)> = HashSet::new();
    let mut generator: Option<String> = None;
    let mut base_model: Option<Option<String>> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord =
            serde_json::from_str(&line).map_err(|e| classify_json_error(line_no, e))?;
        check_record(line_no, &rec)?;

        match &generator {
            None => generator = Some(rec.generator.clone()),
            Some(g) if *g != rec.generator => {
                return Err(CorpusError::Schema {
                    line: line_no,
                    reason: format!(
                        "mixed generator ids in one dataset (`{g}` and `{}`)",
                        rec.generator
                    ),
                })
            }
            Some(_) => {}
        }
        match &base_model {
            None => base_model = Some(rec.base_model.clone()),
            Some(b) if *b != rec.base_model => {
                return Err(CorpusError::Schema {
                    line: line_no,
                    reason: "inconsistent base_model across records".into(),
                })
            }
            Some(_) => {}
        }
        if !seen.insert((rec.id.clone(), rec.sample_index)) {
            return Err(CorpusError::DuplicateKey {
                line: line_no,
                instruction_id: rec.id,
                generator_id: rec.generator,
                sample_index: rec.sample_index,
            });
        }

        pairs.push(Pair {
            instruction: InstructionRecord {
                id: rec.id.clone(),
                text: rec.instruction,
                source: rec.source,
                task_category: rec.task_category,
            },
            response: ResponseRecord {
                instruction_id: rec.id,
                generator_id: rec.generator,
                text: rec.response,
                temperature: rec.temperature,
                top_p: rec.top_p,
                sample_index: rec.sample_index,
            },
        });
    }

    let generator_id = generator.ok_or(CorpusError::Empty)?;
    let mut dataset = GeneratorDataset::new(generator_id, pairs);
    dataset.base_model_id = base_model.flatten();
    Ok(dataset)
}

fn check_record(line: usize, rec: &JsonlRecord) -> Result<(), CorpusError> {
    let fail = |reason: &str| {
        Err(CorpusError::Schema {
            line,
            reason: reason.to_string(),
        })
    };
    if rec.id.is_empty() {
        return fail("`id` must be non-empty");
    }
    if rec.instruction.is_empty() {
        return fail("`instruction` must be non-empty");
    }
    if rec.generator.is_empty() {
        return fail("`generator` must be non-empty");
    }
    if !(rec.temperature.is_finite() && rec.temperature >= 0.0) {
        return fail("`temperature` must be a nonnegative real");
    }
    if !(rec.top_p > 0.0 && rec.top_p <= 1.0) {
        return fail("`top_p` must lie in (0, 1]");
    }
    Ok(())
}

/// Reads instruction records (`id`, `instruction`); any response fields are ignored.
pub fn parse_instructions<R: BufRead>(reader: R) -> Result<Vec<InstructionRecord>, CorpusError> {
    let mut out: BTreeMap<String, InstructionRecord> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstructionLine =
            serde_json::from_str(&line).map_err(|e| classify_json_error(line_no, e))?;
        if rec.id.is_empty() || rec.instruction.is_empty() {
            return Err(CorpusError::Schema {
                line: line_no,
                reason: "`id` and `instruction` must be non-empty".into(),
            });
        }
        let record = InstructionRecord {
            id: rec.id.clone(),
            text: rec.instruction,
            source: rec.source,
            task_category: rec.task_category,
        };
        match out.get(&rec.id) {
            Some(prev) if prev.text != record.text => {
                return Err(CorpusError::Schema {
                    line: line_no,
                    reason: format!("conflicting instruction text for id `{}`", rec.id),
                })
            }
            Some(_) => {}
            None => {
                out.insert(rec.id, record);
            }
        }
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out.into_values().collect())
}

/// Lists every invariant violation of `d`. Never fails.
pub fn validate_dataset(d: &GeneratorDataset) -> ValidationReport {
    let mut report = ValidationReport {
        record_count: d.pairs.len(),
        ..Default::default()
    };
    let mut keys: HashSet<(&str, &str, u32)> = HashSet::new();
    let mut texts: HashMap<&str, &str> = HashMap::new();

    for (i, pair) in d.pairs.iter().enumerate() {
        let line = i + 1;
        let mut error = |reason: String| report.errors.push(ValidationIssue { line, reason });
        let ins = &pair.instruction;
        let resp = &pair.response;

        if ins.id.is_empty() {
            error("empty instruction id".into());
        }
        if ins.text.is_empty() {
            error(format!("empty instruction text for `{}`", ins.id));
        }
        if resp.instruction_id != ins.id {
            error(format!(
                "response references unknown instruction_id `{}`",
                resp.instruction_id
            ));
        }
        if resp.generator_id != d.generator_id {
            error(format!(
                "response generator `{}` differs from dataset generator `{}`",
                resp.generator_id, d.generator_id
            ));
        }
        if !(resp.temperature.is_finite() && resp.temperature >= 0.0) {
            error(format!("invalid temperature {}", resp.temperature));
        }
        if !(resp.top_p > 0.0 && resp.top_p <= 1.0) {
            error(format!("invalid top_p {}", resp.top_p));
        }
        if !keys.insert((&resp.instruction_id, &resp.generator_id, resp.sample_index)) {
            error(format!(
                "duplicate key ({}, {}, {})",
                resp.instruction_id, resp.generator_id, resp.sample_index
            ));
        }
        match texts.get(ins.id.as_str()) {
            Some(prev) if *prev != ins.text => {
                error(format!("conflicting instruction text for `{}`", ins.id))
            }
            Some(_) => {}
            None => {
                texts.insert(&ins.id, &ins.text);
            }
        }

        if resp.is_degenerate() {
            report.warnings.push(ValidationIssue {
                line,
                reason: format!("degenerate response (empty text) for `{}`", ins.id),
            });
        }
    }

    if d.pairs.windows(2).any(|w| {
        (&w[0].instruction.id, w[0].response.sample_index)
            > (&w[1].instruction.id, w[1].response.sample_index)
    }) {
        report.warnings.push(ValidationIssue {
            line: 0,
            reason: "pairs are not in canonical order".into(),
        });
    }
    report
}

/// Serializes `d` as one JSON object per line, each terminated by `\n`.
pub fn write_dataset<W: Write>(
    d: &GeneratorDataset,
    format: DatasetSchema,
    mut out: W,
) -> Result<(), CorpusError> {
    let DatasetSchema::JsonlV1 = format;
    for pair in &d.pairs {
        let rec = JsonlRecord {
            id: pair.instruction.id.clone(),
            instruction: pair.instruction.text.clone(),
            response: pair.response.text.clone(),
            generator: pair.response.generator_id.clone(),
            temperature: pair.response.temperature,
            top_p: pair.response.top_p,
            sample_index: pair.response.sample_index,
            source: pair.instruction.source.clone(),
            task_category: pair.instruction.task_category.clone(),
            base_model: d.base_model_id.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset_string(
    d: &GeneratorDataset,
    format: DatasetSchema,
) -> Result<String, CorpusError> {
    let mut buf = Vec::new();
    write_dataset(d, format, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
