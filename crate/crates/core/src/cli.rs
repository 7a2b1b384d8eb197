//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 configuration error, 2 backend error, 3 data
//! error. Failures print one line to stderr:
//!
//! ```text
//! genrank error kind=data exit=3 reason="dataset `x.jsonl`: No such file or directory"
//! ```
//!
//! Every flag can also be set through a `GENRANK_`-prefixed environment
//! variable; flags win.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::backends::mock::{MockConfig, MockServer};
use crate::backends::{BackendEndpoint, BackendError, Client, ClientOptions, ScoreCache};
use crate::corpus::{
    parse_dataset, parse_instructions, validate_dataset, write_dataset, CorpusError, DatasetSchema,
    GeneratorDataset,
};
use crate::metrics::{
    compute_metrics, DatasetScore, LengthCounter, LossConditioning, LossMode, MetricsConfig,
    MetricsError, DEFAULT_PROMPT_TEMPLATE,
};
use crate::ranking::{
    evaluate_prediction, Direction, GroundTruth, MetricSelector, PredictionTable, RankingError,
};
use crate::report::{
    EndpointConfig, GeneratorEntry, OutputFormat, Report, ResolvedConfig, RunMetadata,
    REPORT_SCHEMA_VERSION, REPRODUCIBLE_TIMESTAMP, TOOLKIT_NAME, TOOLKIT_VERSION,
};
use crate::selection::{build_bon_datasets, BonConfig, SelectionError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::Backend(_) => 2,
            RunError::Data(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Backend(_) => "backend",
            RunError::Data(_) => "data",
        }
    }

    /// Single line, reason JSON-quoted.
    pub fn machine_line(&self) -> String {
        format!(
            "{TOOLKIT_NAME} error kind={} exit={} reason={}",
            self.kind(),
            self.exit_code(),
            serde_json::to_string(&self.to_string()).expect("string serializes")
        )
    }
}

impl From<BackendError> for RunError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Argument(_) => RunError::Config(e.to_string()),
            _ => RunError::Backend(e.to_string()),
        }
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Argument(_) => RunError::Config(e.to_string()),
            MetricsError::Backend { .. } => RunError::Backend(e.to_string()),
            MetricsError::DegeneratePair(_) | MetricsError::DegenerateDataset(_) => {
                RunError::Data(e.to_string())
            }
        }
    }
}

impl From<SelectionError> for RunError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Argument(_) => RunError::Config(e.to_string()),
            SelectionError::Backend { .. } => RunError::Backend(e.to_string()),
            _ => RunError::Data(e.to_string()),
        }
    }
}

impl From<RankingError> for RunError {
    fn from(e: RankingError) -> Self {
        RunError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "genrank",
    version,
    about = "Score response generators and rank them for a base model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the metric vector of each dataset.
    Score(ScoreArgs),
    /// Score datasets and correlate every metric with ground-truth benchmark results.
    Evaluate(EvaluateArgs),
    /// Build Best-of-N and Worst-of-N datasets by rejection sampling.
    Select(SelectArgs),
    /// Serve the deterministic mock backend.
    MockServe(MockServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ExecArgs {
    /// Directory of the persistent score cache.
    #[arg(long, env = "GENRANK_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Maximum requests in flight.
    #[arg(long, env = "GENRANK_CONCURRENCY", default_value_t = 8)]
    pub concurrency: usize,
    #[arg(long, env = "GENRANK_FORMAT", default_value = "json")]
    pub format: OutputFormat,
    /// Zero all timestamps so identical runs give identical reports.
    #[arg(long, env = "GENRANK_REPRODUCIBLE")]
    pub reproducible: bool,
    #[arg(long, env = "GENRANK_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Request timeout in seconds.
    #[arg(long, env = "GENRANK_TIMEOUT", default_value_t = 60.0)]
    pub timeout: f64,
    #[arg(long, env = "GENRANK_MAX_RETRIES", default_value_t = BackendEndpoint::DEFAULT_MAX_RETRIES)]
    pub max_retries: u32,
    /// Bearer token sent to every endpoint.
    #[arg(long, env = "GENRANK_AUTH_TOKEN", hide_env_values = true)]
    pub auth_token: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoringArgs {
    /// Dataset file (JSONL); repeatable.
    #[arg(
        long = "dataset",
        env = "GENRANK_DATASET",
        value_delimiter = ',',
        required = true
    )]
    pub datasets: Vec<PathBuf>,
    /// Server hosting the base model.
    #[arg(long, env = "GENRANK_BASE_URL")]
    pub base_url: String,
    #[arg(long, env = "GENRANK_BASE_MODEL")]
    pub base_model: Option<String>,
    #[arg(long, env = "GENRANK_BASE_MAX_TOKENS", default_value_t = BackendEndpoint::DEFAULT_MAX_CONTEXT_TOKENS)]
    pub base_max_tokens: usize,
    /// Server hosting the reference model; defaults to the base URL.
    #[arg(long, env = "GENRANK_REF_URL")]
    pub ref_url: Option<String>,
    #[arg(long, env = "GENRANK_REF_MODEL", default_value = "gpt2")]
    pub ref_model: String,
    #[arg(long, env = "GENRANK_REF_MAX_TOKENS", default_value_t = 1024)]
    pub ref_max_tokens: usize,
    /// Reward model as `<model-id>=<url>`; repeatable.
    #[arg(
        long = "reward-url",
        env = "GENRANK_REWARD_URL",
        value_delimiter = ',',
        required = true
    )]
    pub reward_urls: Vec<String>,
    /// Reward model feeding CAR (default: the first --reward-url).
    #[arg(long, env = "GENRANK_CAR_REWARD")]
    pub car_reward: Option<String>,
    #[arg(
        long,
        env = "GENRANK_BETA",
        default_value_t = 3.0,
        allow_negative_numbers = true
    )]
    pub beta: f64,
    #[arg(long, env = "GENRANK_LOSS_MODE", default_value = "sum")]
    pub loss_mode: LossMode,
    #[arg(
        long,
        env = "GENRANK_LOSS_CONDITIONING",
        default_value = "unconditional"
    )]
    pub loss_conditioning: LossConditioning,
    /// Rank direction for PPL metrics.
    #[arg(
        long,
        visible_alias = "direction",
        env = "GENRANK_PPL_DIRECTION",
        default_value = "lower"
    )]
    pub ppl_direction: Direction,
    /// Leave pairs truncated by a context window out of the averages.
    #[arg(long, env = "GENRANK_EXCLUDE_TRUNCATED")]
    pub exclude_truncated: bool,
    /// Count response length in whitespace words instead of backend tokens.
    #[arg(long, env = "GENRANK_WHITESPACE_LENGTH")]
    pub whitespace_length: bool,
    /// Conditioning context; `{instruction}` is replaced by the instruction.
    #[arg(long, env = "GENRANK_PROMPT_TEMPLATE", default_value = DEFAULT_PROMPT_TEMPLATE)]
    pub prompt_template: String,
    /// Write per-pair metrics as JSONL to this path.
    #[arg(long, env = "GENRANK_EMIT_PAIR_METRICS")]
    pub emit_pair_metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Ground-truth benchmark file; one per base model, repeatable.
    #[arg(
        long = "ground-truth",
        env = "GENRANK_GROUND_TRUTH",
        value_delimiter = ',',
        required = true
    )]
    pub ground_truth: Vec<PathBuf>,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    /// Instruction file (JSONL with `id` and `instruction`).
    #[arg(long = "dataset", env = "GENRANK_DATASET")]
    pub dataset: PathBuf,
    #[arg(long, env = "GENRANK_GEN_URL")]
    pub gen_url: String,
    #[arg(long, env = "GENRANK_GEN_MODEL")]
    pub gen_model: String,
    /// Reward model as `<model-id>=<url>`; the first one is used.
    #[arg(
        long = "reward-url",
        env = "GENRANK_REWARD_URL",
        value_delimiter = ',',
        required = true
    )]
    pub reward_urls: Vec<String>,
    #[arg(long, env = "GENRANK_N", default_value_t = 5)]
    pub n: u32,
    #[arg(
        long,
        env = "GENRANK_TEMPERATURE",
        default_value_t = 0.8,
        allow_negative_numbers = true
    )]
    pub temperature: f64,
    #[arg(long, env = "GENRANK_TOP_P", default_value_t = 1.0)]
    pub top_p: f64,
    /// Output prefix; defaults to the dataset path without extension.
    #[arg(long, env = "GENRANK_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MockServeArgs {
    #[arg(long, env = "GENRANK_BIND", default_value = "127.0.0.1:8089")]
    pub bind: SocketAddr,
    /// Give every token this logprob.
    #[arg(long, allow_negative_numbers = true)]
    pub fixed_logprob: Option<f64>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err =
                RunError::Config(e.to_string().lines().next().unwrap_or_default().to_string());
            eprintln!("{}", err.machine_line());
            return err.exit_code();
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
    {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!(
                "{}",
                RunError::Config(format!("tokio runtime: {e}")).machine_line()
            );
            return 1;
        }
    };
    let mut out = std::io::stdout();
    match runtime.block_on(execute(cli, &mut out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.machine_line());
            e.exit_code()
        }
    }
}

/// Runs a parsed command, writing its primary output to `out`.
pub async fn execute(cli: Cli, out: &mut (dyn Write + Send)) -> Result<(), RunError> {
    match cli.command {
        Command::Score(args) => {
            let report = cmd_score(&args).await?;
            emit(out, &report.render(args.exec.format))
        }
        Command::Evaluate(args) => {
            let report = cmd_evaluate(&args).await?;
            emit(out, &report.render(args.exec.format))
        }
        Command::Select(args) => {
            let (best, worst) = cmd_select(&args).await?;
            emit(out, &format!("{}\n{}\n", best.display(), worst.display()))
        }
        Command::MockServe(args) => cmd_mock_serve(&args, out).await,
    }
}

fn emit(out: &mut (dyn Write + Send), text: &str) -> Result<(), RunError> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| RunError::Data(format!("writing output: {e}")))
}

fn now(reproducible: bool) -> String {
    if reproducible {
        REPRODUCIBLE_TIMESTAMP.to_string()
    } else {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

fn parse_reward_url(spec: &str) -> Result<(String, String), RunError> {
    match spec.split_once('=') {
        Some((id, url)) if !id.is_empty() && !url.is_empty() => {
            Ok((id.to_string(), url.to_string()))
        }
        _ => Err(RunError::Config(format!(
            "--reward-url expects <model-id>=<url>, got `{spec}`"
        ))),
    }
}

fn endpoint(
    url: &str,
    model: &str,
    max_tokens: usize,
    exec: &ExecArgs,
) -> Result<BackendEndpoint, RunError> {
    if !(url.starts_with("http://") || url.starts_with("https://")) {
        return Err(RunError::Config(format!(
            "endpoint URL must be http(s): `{url}`"
        )));
    }
    if max_tokens == 0 {
        return Err(RunError::Config(
            "max context tokens must be positive".into(),
        ));
    }
    let timeout = Duration::try_from_secs_f64(exec.timeout)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| RunError::Config(format!("invalid --timeout {}", exec.timeout)))?;
    Ok(BackendEndpoint::new(url, model)
        .with_max_context_tokens(max_tokens)
        .with_timeout(timeout)
        .with_max_retries(exec.max_retries)
        .with_auth_token(exec.auth_token.clone()))
}

fn endpoint_config(ep: &BackendEndpoint) -> EndpointConfig {
    EndpointConfig {
        model: ep.model_id.clone(),
        url: ep.base_url.clone(),
        max_context_tokens: ep.max_context_tokens,
    }
}

fn client(exec: &ExecArgs) -> Result<Client, RunError> {
    if exec.concurrency == 0 {
        return Err(RunError::Config("--concurrency must be >= 1".into()));
    }
    let cache = match &exec.cache_dir {
        Some(dir) => Some(Arc::new(ScoreCache::open(dir).map_err(|e| match e {
            BackendError::Cache { .. } => RunError::Data(e.to_string()),
            other => RunError::Config(format!("cache dir `{}`: {other}", dir.display())),
        })?)),
        None => None,
    };
    Ok(Client::new(ClientOptions {
        concurrency: exec.concurrency,
        cache,
        ..Default::default()
    })?)
}

fn load_dataset(path: &Path) -> Result<GeneratorDataset, RunError> {
    let file = File::open(path)
        .map_err(|e| RunError::Data(format!("dataset `{}`: {e}", path.display())))?;
    let d = parse_dataset(BufReader::new(file), DatasetSchema::JsonlV1)
        .map_err(|e| RunError::Data(format!("dataset `{}`: {e}", path.display())))?;
    let report = validate_dataset(&d);
    if let Some(err) = report.errors.first() {
        return Err(RunError::Data(format!(
            "dataset `{}`: record {}: {}",
            path.display(),
            err.line,
            err.reason
        )));
    }
    Ok(d)
}

struct ScoringSetup {
    base: BackendEndpoint,
    reference: BackendEndpoint,
    rewards: Vec<BackendEndpoint>,
    metrics: MetricsConfig,
    datasets: Vec<(String, GeneratorDataset)>,
}

fn scoring_setup(
    s: &ScoringArgs,
    exec: &ExecArgs,
    base_model: Option<&str>,
) -> Result<ScoringSetup, RunError> {
    if !(s.beta.is_finite() && s.beta >= 0.0) {
        return Err(RunError::Config(format!(
            "--beta must be >= 0, got {}",
            s.beta
        )));
    }
    if !s.prompt_template.contains("{instruction}") {
        return Err(RunError::Config(
            "--prompt-template must contain `{instruction}`".into(),
        ));
    }
    let base_model = base_model
        .map(str::to_string)
        .or_else(|| s.base_model.clone())
        .ok_or_else(|| RunError::Config("--base-model is required".into()))?;
    let base = endpoint(&s.base_url, &base_model, s.base_max_tokens, exec)?;
    let reference = endpoint(
        s.ref_url.as_deref().unwrap_or(&s.base_url),
        &s.ref_model,
        s.ref_max_tokens,
        exec,
    )?;
    let rewards = s
        .reward_urls
        .iter()
        .map(|spec| {
            let (id, url) = parse_reward_url(spec)?;
            endpoint(&url, &id, BackendEndpoint::DEFAULT_MAX_CONTEXT_TOKENS, exec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(car) = &s.car_reward {
        if !rewards.iter().any(|r| &r.model_id == car) {
            return Err(RunError::Config(format!(
                "--car-reward `{car}` does not name a --reward-url model"
            )));
        }
    }
    let metrics = MetricsConfig {
        beta: s.beta,
        loss_mode: s.loss_mode,
        loss_conditioning: s.loss_conditioning,
        exclude_truncated: s.exclude_truncated,
        car_reward_model: s.car_reward.clone(),
        length_counter: if s.whitespace_length {
            LengthCounter::Whitespace
        } else {
            LengthCounter::Backend
        },
        prompt_template: s.prompt_template.clone(),
        concurrency: exec.concurrency.max(1),
    };
    let datasets = s
        .datasets
        .iter()
        .map(|p| Ok((p.display().to_string(), load_dataset(p)?)))
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for (path, d) in &datasets {
        if !seen.insert(d.generator_id.clone()) {
            return Err(RunError::Data(format!(
                "generator `{}` appears in more than one dataset (second: `{path}`)",
                d.generator_id
            )));
        }
    }
    Ok(ScoringSetup {
        base,
        reference,
        rewards,
        metrics,
        datasets,
    })
}

fn resolved_config(
    subcommand: &str,
    s: &ScoringArgs,
    setup: &ScoringSetup,
    exec: &ExecArgs,
    ground_truth: &[PathBuf],
) -> ResolvedConfig {
    ResolvedConfig {
        subcommand: subcommand.into(),
        datasets: setup.datasets.iter().map(|(p, _)| p.clone()).collect(),
        base: Some(endpoint_config(&setup.base)),
        reference: Some(endpoint_config(&setup.reference)),
        rewards: setup.rewards.iter().map(endpoint_config).collect(),
        generation: None,
        beta: s.beta,
        loss_mode: s.loss_mode,
        loss_conditioning: s.loss_conditioning,
        exclude_truncated: s.exclude_truncated,
        car_reward_model: Some(
            s.car_reward
                .clone()
                .unwrap_or_else(|| setup.rewards[0].model_id.clone()),
        ),
        length_counter: setup.metrics.length_counter,
        prompt_template: s.prompt_template.clone(),
        ppl_direction: s.ppl_direction,
        ground_truth: ground_truth
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        n: 1,
        temperature: 0.0,
        top_p: 1.0,
        seed: exec.seed,
    }
}

async fn score_all(
    client: &Client,
    setup: &ScoringSetup,
    base: &BackendEndpoint,
    pair_sink: &mut Option<BufWriter<File>>,
) -> Result<(Vec<GeneratorEntry>, Vec<String>), RunError> {
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (path, d) in &setup.datasets {
        log::info!(
            "scoring `{}` ({} pairs) against base model `{}`",
            d.generator_id,
            d.len(),
            base.model_id
        );
        let score: DatasetScore = compute_metrics(
            client,
            d,
            base,
            &setup.reference,
            &setup.rewards,
            &setup.metrics,
        )
        .await
        .map_err(|e| match e {
            MetricsError::DegenerateDataset(_) => RunError::Data(format!("dataset `{path}`: {e}")),
            other => RunError::from(other),
        })?;
        if score.degenerate_count > 0 {
            warnings.push(format!(
                "{}: {} degenerate (empty) response(s) excluded",
                d.generator_id, score.degenerate_count
            ));
        }
        if score.truncated_count > 0 {
            warnings.push(format!(
                "{}: {} pair(s) truncated by a context window{}",
                d.generator_id,
                score.truncated_count,
                if setup.metrics.exclude_truncated {
                    " (excluded)"
                } else {
                    " (included)"
                }
            ));
        }
        if let Some(sink) = pair_sink.as_mut() {
            for p in &score.pairs {
                let line = serde_json::json!({
                    "base_model": base.model_id,
                    "generator_id": d.generator_id,
                    "pair": p,
                });
                writeln!(sink, "{line}")
                    .map_err(|e| RunError::Data(format!("writing pair metrics: {e}")))?;
            }
        }
        entries.push(GeneratorEntry {
            base_model: base.model_id.clone(),
            dataset: path.clone(),
            metrics: score.metrics,
            degenerate_count: score.degenerate_count,
            truncated_count: score.truncated_count,
            excluded_count: score.excluded_count,
        });
    }
    Ok((entries, warnings))
}

fn pair_sink(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>, RunError> {
    path.as_ref()
        .map(|p| {
            File::create(p).map(BufWriter::new).map_err(|e| {
                RunError::Config(format!("--emit-pair-metrics `{}`: {e}", p.display()))
            })
        })
        .transpose()
}

fn finish_sink(sink: Option<BufWriter<File>>) -> Result<(), RunError> {
    if let Some(mut s) = sink {
        s.flush()
            .map_err(|e| RunError::Data(format!("writing pair metrics: {e}")))?;
    }
    Ok(())
}

pub async fn cmd_score(args: &ScoreArgs) -> Result<Report, RunError> {
    let started = now(args.exec.reproducible);
    let setup = scoring_setup(&args.scoring, &args.exec, None)?;
    let client = client(&args.exec)?;
    let config = resolved_config("score", &args.scoring, &setup, &args.exec, &[]);
    let mut sink = pair_sink(&args.scoring.emit_pair_metrics)?;
    let (generators, warnings) = score_all(&client, &setup, &setup.base, &mut sink).await?;
    finish_sink(sink)?;
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        run: RunMetadata {
            toolkit: TOOLKIT_NAME.into(),
            version: TOOLKIT_VERSION.into(),
            config_hash: config.hash(),
            started_at: started,
            finished_at: now(args.exec.reproducible),
        },
        config,
        generators,
        correlations: None,
        warnings,
    })
}

pub async fn cmd_evaluate(args: &EvaluateArgs) -> Result<Report, RunError> {
    let started = now(args.exec.reproducible);
    let truths = args
        .ground_truth
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)
                .map_err(|e| RunError::Data(format!("ground truth `{}`: {e}", p.display())))?;
            GroundTruth::from_json(&text)
                .map_err(|e| RunError::Data(format!("ground truth `{}`: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let setup = scoring_setup(&args.scoring, &args.exec, Some(&truths[0].base_model))?;
    // Fail on generator mismatches before any scoring traffic.
    let generators: Vec<String> = setup
        .datasets
        .iter()
        .map(|(_, d)| d.generator_id.clone())
        .collect();
    for (truth, path) in truths.iter().zip(&args.ground_truth) {
        let expected: std::collections::BTreeSet<&String> = truth.scores.keys().collect();
        let got: std::collections::BTreeSet<&String> = generators.iter().collect();
        if expected != got {
            let missing: Vec<&&String> = got.difference(&expected).collect();
            let extra: Vec<&&String> = expected.difference(&got).collect();
            return Err(RunError::Data(format!(
                "ground truth `{}` does not match the scored generators; missing from ground truth: {missing:?}; without dataset: {extra:?}",
                path.display()
            )));
        }
    }

    let client = client(&args.exec)?;
    let mut config = resolved_config(
        "evaluate",
        &args.scoring,
        &setup,
        &args.exec,
        &args.ground_truth,
    );
    let mut sink = pair_sink(&args.scoring.emit_pair_metrics)?;
    let reward_ids: Vec<&str> = setup.rewards.iter().map(|r| r.model_id.as_str()).collect();
    let selectors = MetricSelector::standard(reward_ids.iter().copied());

    let mut all_entries = Vec::new();
    let mut all_warnings = Vec::new();
    let mut rows = Vec::new();
    let mut base_models = Vec::new();
    for truth in &truths {
        let base = BackendEndpoint {
            model_id: truth.base_model.clone(),
            ..setup.base.clone()
        };
        base_models.push(truth.base_model.clone());
        let (entries, warnings) = score_all(&client, &setup, &base, &mut sink).await?;
        let vectors: Vec<_> = entries.iter().map(|e| e.metrics.clone()).collect();
        let row = evaluate_prediction(&vectors, truth, &selectors, args.scoring.ppl_direction)?;
        log::info!("{}: best metric(s) {:?}", truth.base_model, row.best);
        rows.push(row);
        all_entries.extend(entries);
        all_warnings.extend(warnings);
    }
    finish_sink(sink)?;
    if let Some(base) = config.base.as_mut() {
        base.model = base_models.join(",");
    }

    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        run: RunMetadata {
            toolkit: TOOLKIT_NAME.into(),
            version: TOOLKIT_VERSION.into(),
            config_hash: config.hash(),
            started_at: started,
            finished_at: now(args.exec.reproducible),
        },
        config,
        generators: all_entries,
        correlations: Some(PredictionTable { rows }),
        warnings: all_warnings,
    })
}

/// Writes `<prefix>.best.jsonl` and `<prefix>.worst.jsonl`; returns both paths.
pub async fn cmd_select(args: &SelectArgs) -> Result<(PathBuf, PathBuf), RunError> {
    if args.n == 0 {
        return Err(RunError::Config("--n must be >= 1".into()));
    }
    if !(args.temperature.is_finite() && args.temperature >= 0.0) {
        return Err(RunError::Config(format!(
            "--temperature must be >= 0, got {}",
            args.temperature
        )));
    }
    if args.temperature == 0.0 && args.n > 1 {
        return Err(RunError::Config(
            "--temperature 0 (greedy) admits only --n 1".into(),
        ));
    }
    if !(args.top_p > 0.0 && args.top_p <= 1.0) {
        return Err(RunError::Config(format!(
            "--top-p must lie in (0, 1], got {}",
            args.top_p
        )));
    }
    let gen = endpoint(
        &args.gen_url,
        &args.gen_model,
        BackendEndpoint::DEFAULT_MAX_CONTEXT_TOKENS,
        &args.exec,
    )?;
    let (reward_id, reward_url) = parse_reward_url(&args.reward_urls[0])?;
    let reward = endpoint(
        &reward_url,
        &reward_id,
        BackendEndpoint::DEFAULT_MAX_CONTEXT_TOKENS,
        &args.exec,
    )?;
    let client = client(&args.exec)?;

    let file = File::open(&args.dataset)
        .map_err(|e| RunError::Data(format!("dataset `{}`: {e}", args.dataset.display())))?;
    let instructions = parse_instructions(BufReader::new(file))
        .map_err(|e| RunError::Data(format!("dataset `{}`: {e}", args.dataset.display())))?;

    let outcome = build_bon_datasets(
        &client,
        &instructions,
        &gen,
        &reward,
        &BonConfig {
            n: args.n,
            temperature: args.temperature,
            top_p: args.top_p,
            seed: args.exec.seed,
            concurrency: args.exec.concurrency.max(1),
        },
    )
    .await?;

    let prefix = args
        .out
        .clone()
        .unwrap_or_else(|| args.dataset.with_extension(""));
    let best_path = suffixed(&prefix, ".best.jsonl");
    let worst_path = suffixed(&prefix, ".worst.jsonl");
    write_file(&best_path, &outcome.best)?;
    write_file(&worst_path, &outcome.worst)?;
    Ok((best_path, worst_path))
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, d: &GeneratorDataset) -> Result<(), RunError> {
    let file =
        File::create(path).map_err(|e| RunError::Data(format!("`{}`: {e}", path.display())))?;
    write_dataset(d, DatasetSchema::JsonlV1, BufWriter::new(file))
        .map_err(|e: CorpusError| RunError::Data(format!("`{}`: {e}", path.display())))
}

pub async fn cmd_mock_serve(
    args: &MockServeArgs,
    out: &mut (dyn Write + Send),
) -> Result<(), RunError> {
    let listener = tokio::net::TcpListener::bind(args.bind)
        .await
        .map_err(|e| RunError::Backend(format!("cannot bind {}: {e}", args.bind)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| RunError::Backend(e.to_string()))?;
    emit(out, &format!("listening on http://{addr}\n"))?;
    MockServer::serve_until(
        listener,
        MockConfig {
            fixed_logprob: args.fixed_logprob,
            fail_first: 0,
        },
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
    )
    .await
    .map_err(|e| RunError::Backend(e.to_string()))
}
