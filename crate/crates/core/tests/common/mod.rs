//! Shared fixtures and straight-line oracles for the mock backend formulas.
//!
//! The oracles re-derive every mock value from its definition (SHA-256,
//! space/newline tokenization, byte-length rewards) without touching the
//! crate's scoring path.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use genrank::backends::mock::{MockConfig, MockServer};
use genrank::corpus::{
    write_dataset_string, DatasetSchema, GeneratorDataset, InstructionRecord, Pair, ResponseRecord,
};
use sha2::{Digest, Sha256};

pub const BASE_MODEL: &str = "base-1b";
pub const REF_MODEL: &str = "gpt2";
pub const REWARD_MODEL: &str = "rm-a";

pub async fn start_mock() -> MockServer {
    start_mock_with(MockConfig::default()).await
}

pub async fn start_mock_with(config: MockConfig) -> MockServer {
    MockServer::start(SocketAddr::from(([127, 0, 0, 1], 0)), config)
        .await
        .expect("mock server binds")
}

pub fn oracle_tokens(text: &str) -> Vec<&str> {
    text.split([' ', '\n']).filter(|t| !t.is_empty()).collect()
}

pub fn oracle_logprob(model: &str, token: &str) -> f64 {
    let digest = Sha256::digest(format!("{model}{token}").as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let h = u64::from_be_bytes(head);
    -(1.0 + (h % 1000) as f64 / 1000.0)
}

pub fn oracle_reward(response: &str) -> f64 {
    (response.len() % 7) as f64 / 7.0
}

/// Straight-line recomputation of the dataset metrics the pipeline should
/// report against the mock, with default settings (unconditional sum loss,
/// backend length, no truncation).
#[derive(Debug, Clone)]
pub struct OracleMetrics {
    pub ar: f64,
    pub ppl_self: f64,
    pub ppl_ref: f64,
    pub ifd_self: f64,
    pub ifd_ref: f64,
    pub avg_length: f64,
    pub loss_sum: f64,
    pub loss_per_token: f64,
}

impl OracleMetrics {
    pub fn car(&self, beta: f64) -> f64 {
        self.ar / (1.0 + beta * self.loss_sum)
    }
}

pub fn oracle_metrics(responses: &[&str], base: &str, reference: &str) -> OracleMetrics {
    let n = responses.len() as f64;
    let mut out = OracleMetrics {
        ar: 0.0,
        ppl_self: 0.0,
        ppl_ref: 0.0,
        ifd_self: 0.0,
        ifd_ref: 0.0,
        avg_length: 0.0,
        loss_sum: 0.0,
        loss_per_token: 0.0,
    };
    for r in responses {
        let toks = oracle_tokens(r);
        let k = toks.len() as f64;
        let nll_base: f64 = toks.iter().map(|t| -oracle_logprob(base, t)).sum();
        let nll_ref: f64 = toks.iter().map(|t| -oracle_logprob(reference, t)).sum();
        out.ar += oracle_reward(r) / n;
        // Mock logprobs ignore context, so conditional == unconditional and IFD == 1.
        out.ppl_self += (nll_base / k).exp() / n;
        out.ppl_ref += (nll_ref / k).exp() / n;
        out.ifd_self += 1.0 / n;
        out.ifd_ref += 1.0 / n;
        out.avg_length += k / n;
        out.loss_sum += nll_base / n;
        out.loss_per_token += nll_base / k / n;
    }
    out
}

pub fn dataset(generator: &str, rows: &[(&str, &str, &str)]) -> GeneratorDataset {
    GeneratorDataset::new(
        generator,
        rows.iter()
            .map(|(id, ins, resp)| Pair {
                instruction: InstructionRecord {
                    id: id.to_string(),
                    text: ins.to_string(),
                    source: None,
                    task_category: None,
                },
                response: ResponseRecord {
                    instruction_id: id.to_string(),
                    generator_id: generator.to_string(),
                    text: resp.to_string(),
                    temperature: 0.0,
                    top_p: 1.0,
                    sample_index: 0,
                },
            })
            .collect(),
    )
}

pub fn write_jsonl(dir: &Path, name: &str, d: &GeneratorDataset) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(
        &path,
        write_dataset_string(d, DatasetSchema::JsonlV1).unwrap(),
    )
    .unwrap();
    path
}

pub fn write_ground_truth(
    dir: &Path,
    name: &str,
    base: &str,
    ap: &BTreeMap<String, f64>,
) -> PathBuf {
    let scores: serde_json::Map<String, serde_json::Value> = ap
        .iter()
        .map(|(g, v)| {
            // ap = (ae2_lc + ah_wr) / 2 with ae2_lc == ah_wr == v
            (
                g.clone(),
                serde_json::json!({ "ae2_lc": v, "ae2_wr": v, "ah_wr": v }),
            )
        })
        .collect();
    let path = dir.join(name);
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&serde_json::json!({ "base_model": base, "scores": scores }))
            .unwrap(),
    )
    .unwrap();
    path
}

/// A response of `tokens` words whose byte length is `residue` mod 7.
pub fn response_with(tokens: usize, residue: usize, salt: &str) -> String {
    let mut words: Vec<String> = (0..tokens).map(|i| format!("{salt}{i}")).collect();
    loop {
        let s = words.join(" ");
        if s.len() % 7 == residue {
            return s;
        }
        words.last_mut().unwrap().push('z');
    }
}

/// Five generators whose mock rewards rise while their losses rise faster,
/// so AR and CAR order them in opposite directions.
pub fn ar_vs_car_fixture() -> Vec<(String, Vec<String>)> {
    let token_counts = [1usize, 3, 6, 10, 15];
    (0..5)
        .map(|k| {
            let gen = format!("gen-{k}");
            let responses = (0..3)
                .map(|i| response_with(token_counts[k], k + 2, &format!("w{i}k{k}x")))
                .collect();
            (gen, responses)
        })
        .collect()
}

/// Five generators with varied response shapes; CAR order is whatever the
/// oracle says.
pub fn planted_fixture() -> Vec<(String, Vec<String>)> {
    let shapes = [(2usize, 5usize), (4, 6), (3, 1), (7, 4), (5, 3)];
    shapes
        .iter()
        .enumerate()
        .map(|(k, &(tokens, residue))| {
            let gen = format!("teacher-{k}");
            let responses = (0..4)
                .map(|i| response_with(tokens + i % 2, residue, &format!("t{k}i{i}-")))
                .collect();
            (gen, responses)
        })
        .collect()
}

pub fn fixture_datasets(fixture: &[(String, Vec<String>)]) -> Vec<GeneratorDataset> {
    fixture
        .iter()
        .map(|(gen, responses)| {
            let rows: Vec<(String, String, String)> = responses
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    (
                        format!("q{i:03}"),
                        format!("Instruction number {i}"),
                        r.clone(),
                    )
                })
                .collect();
            let refs: Vec<(&str, &str, &str)> = rows
                .iter()
                .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
                .collect();
            dataset(gen, &refs)
        })
        .collect()
}

pub fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("genrank")
        .chain(list.iter().copied())
        .map(str::to_string)
        .collect()
}

/// `--dataset` flags plus endpoint flags pointing everything at one mock.
pub fn scoring_flags(url: &str, datasets: &[PathBuf]) -> Vec<String> {
    let mut out = Vec::new();
    for d in datasets {
        out.push("--dataset".to_string());
        out.push(d.display().to_string());
    }
    out.extend(
        [
            "--base-url",
            url,
            "--base-model",
            BASE_MODEL,
            "--ref-url",
            url,
            "--ref-model",
            REF_MODEL,
            "--reward-url",
            &format!("{REWARD_MODEL}={url}"),
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    out
}

pub async fn run_cli(argv: Vec<String>) -> (Result<(), genrank::cli::RunError>, String) {
    use clap::Parser;
    let cli = genrank::cli::Cli::try_parse_from(argv).expect("valid argv");
    let mut out: Vec<u8> = Vec::new();
    let res = genrank::cli::execute(cli, &mut out).await;
    (res, String::from_utf8(out).unwrap())
}
