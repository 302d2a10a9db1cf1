//! Three-stage construction of grounded reasoning trajectories over annotator clients.
//!
//! [`run_pipeline`] reads RawSample JSONL and writes FinalSample JSONL in input
//! order. Next to the output it keeps three sidecar files: `<output>.rejects.jsonl`
//! with `{sample_id, stage, error}` per quarantined sample, and the stage
//! checkpoints `<output>.stage1.jsonl` and `<output>.stage2.jsonl`. Stage 0 in a
//! rejection means the input line itself was unusable.

pub mod client;
pub mod stages;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{AnnotatorClient, AnnotatorRequest, ClientError, DeterministicMock, Fault, RemoteEndpoint};
pub use stages::{
    stage1_generate_cot, stage2_map_objects, stage3_reassemble, CotSample, FinalSample, ImageRef, MappedSample, MentionMapping,
    RawSample, StageError,
};

use crate::grammar::serialize_trajectory;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Samples processed at once, and so the bound on concurrent annotator requests.
    pub max_in_flight: usize,
    /// Reject stage-1 text without a think/answer envelope instead of wrapping it.
    pub strict_envelope: bool,
    /// Build stage-1 text from the gold answer alone, without calling an annotator.
    pub skip_cot: bool,
    /// Retries after a transport error; the wait doubles each time from `backoff_ms`.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_tokens: u32,
    /// Reuse stage checkpoints left by an earlier run over the same samples.
    pub resume: bool,
    pub client: ClientKind,
    pub endpoint: Option<String>,
    /// Environment variable holding the endpoint's bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            strict_envelope: true,
            skip_cot: false,
            max_retries: 3,
            backoff_ms: 200,
            max_tokens: 1024,
            resume: false,
            client: ClientKind::Mock,
            endpoint: None,
            api_key_env: "MIRG_ANNOTATOR_API_KEY".to_string(),
            timeout_secs: 60,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("pipeline.max_in_flight must be at least 1".into());
        }
        if self.max_tokens == 0 {
            return Err("pipeline.max_tokens must be positive".into());
        }
        if self.timeout_secs == 0 {
            return Err("pipeline.timeout_secs must be positive".into());
        }
        if self.client == ClientKind::Remote && self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err("pipeline.endpoint is required for the remote client".into());
        }
        Ok(())
    }

    /// The client this config describes. The mock ignores endpoint settings.
    pub fn build_client(&self) -> Box<dyn AnnotatorClient> {
        match (self.client, &self.endpoint) {
            (ClientKind::Remote, Some(url)) => {
                Box::new(RemoteEndpoint::from_env(url, &self.api_key_env, Duration::from_secs(self.timeout_secs)))
            }
            _ => Box::new(DeterministicMock::new()),
        }
    }
}

/// The annotator behind each stage; they may all be the same client.
#[derive(Clone, Copy)]
pub struct StageClients<'a> {
    pub cot: &'a dyn AnnotatorClient,
    pub mapping: &'a dyn AnnotatorClient,
    pub reassembly: &'a dyn AnnotatorClient,
}

impl<'a> StageClients<'a> {
    pub fn uniform(client: &'a dyn AnnotatorClient) -> Self {
        Self {
            cot: client,
            mapping: client,
            reassembly: client,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("emitted sample {sample_id:?} failed the final check: {message}")]
    Sweep { sample_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub sample_id: String,
    pub stage: u8,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input: usize,
    pub emitted: usize,
    pub rejected: usize,
    pub rejected_by_stage: BTreeMap<u8, usize>,
}

pub fn sidecar_path(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}.jsonl"));
    output.with_file_name(name)
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

enum Outcome {
    Emitted(Box<FinalSample>),
    Rejected(Rejection),
}

/// Appends checkpoint records as samples finish a stage. Lines land in completion order.
struct Checkpoint {
    path: PathBuf,
    file: Mutex<BufWriter<File>>,
}

impl Checkpoint {
    fn create(path: PathBuf, keep: bool) -> Result<Self, PipelineError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(keep)
            .write(true)
            .truncate(!keep)
            .open(&path)
            .map_err(io_error(&path))?;
        Ok(Self {
            path,
            file: Mutex::new(BufWriter::new(file)),
        })
    }

    fn record<T: Serialize>(&self, value: &T) -> Result<(), PipelineError> {
        let line = serde_json::to_string(value).expect("checkpoint records serialize");
        let mut file = self.file.lock().expect("checkpoint lock");
        writeln!(file, "{line}").and_then(|_| file.flush()).map_err(io_error(&self.path))
    }
}

/// Loads checkpoint records keyed by sample id; unreadable lines are ignored.
fn load_checkpoint<T: for<'de> Deserialize<'de>>(path: &Path, id_of: impl Fn(&T) -> &str) -> HashMap<String, T> {
    let Ok(file) = File::open(path) else {
        return HashMap::new();
    };
    BufReader::new(file)
        .lines()
        .map_while(Result::ok)
        .filter_map(|line| serde_json::from_str::<T>(&line).ok())
        .map(|record| (id_of(&record).to_string(), record))
        .collect()
}

struct Resumed {
    cots: HashMap<String, CotSample>,
    mapped: HashMap<String, MappedSample>,
}

fn process(
    raw: &RawSample,
    clients: StageClients<'_>,
    config: &PipelineConfig,
    resumed: &Resumed,
    stage1_log: &Checkpoint,
    stage2_log: &Checkpoint,
) -> Result<Outcome, PipelineError> {
    let reject = |stage: u8, e: StageError| {
        Ok(Outcome::Rejected(Rejection {
            sample_id: raw.sample_id.clone(),
            stage,
            error: e.to_string(),
        }))
    };

    let cot = match resumed.cots.get(&raw.sample_id).filter(|c| c.raw == *raw) {
        Some(cot) => cot.clone(),
        None => match stage1_generate_cot(raw, clients.cot, config) {
            Ok(cot) => {
                stage1_log.record(&cot)?;
                cot
            }
            Err(e) => return reject(1, e),
        },
    };
    let mapped = match resumed.mapped.get(&raw.sample_id).filter(|m| m.cot == cot) {
        Some(mapped) => mapped.clone(),
        None => match stage2_map_objects(&cot, clients.mapping, config) {
            Ok(mapped) => {
                stage2_log.record(&mapped)?;
                mapped
            }
            Err(e) => return reject(2, e),
        },
    };
    match stage3_reassemble(&mapped, clients.reassembly, config) {
        Ok(fin) => Ok(Outcome::Emitted(Box::new(fin))),
        Err(e) => reject(3, e),
    }
}

/// Reads the input, keeping well-formed samples and turning every other line into a stage-0 rejection.
fn read_input(path: &Path) -> Result<Vec<Result<RawSample, Rejection>>, PipelineError> {
    let file = File::open(path).map_err(io_error(path))?;
    let mut seen = HashSet::new();
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = match serde_json::from_str::<RawSample>(&line) {
            Ok(raw) if !seen.insert(raw.sample_id.clone()) => Err(Rejection {
                sample_id: raw.sample_id,
                stage: 0,
                error: "duplicate sample_id".into(),
            }),
            Ok(raw) => Ok(raw),
            Err(e) => {
                let sample_id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v["sample_id"].as_str().map(str::to_string))
                    .unwrap_or_else(|| format!("line {}", i + 1));
                Err(Rejection {
                    sample_id,
                    stage: 0,
                    error: format!("line {}: {e}", i + 1),
                })
            }
        };
        items.push(item);
    }
    Ok(items)
}

/// Re-reads the written output and checks every trajectory again.
fn sweep(path: &Path) -> Result<usize, PipelineError> {
    let file = File::open(path).map_err(io_error(path))?;
    let mut count = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_error(path))?;
        let sample: FinalSample = serde_json::from_str(&line).map_err(|e| PipelineError::Sweep {
            sample_id: format!("line {}", count + 1),
            message: e.to_string(),
        })?;
        for obj in sample.trajectory.full_mentions() {
            let image = sample.image_refs.get(obj.position.image_index() as usize - 1);
            if !image.is_some_and(|img| obj.bbox.within(img.width, img.height)) {
                return Err(PipelineError::Sweep {
                    sample_id: sample.sample_id,
                    message: format!("box of {} is outside its image", obj.position),
                });
            }
        }
        serialize_trajectory(&sample.trajectory).map_err(|e| PipelineError::Sweep {
            sample_id: sample.sample_id.clone(),
            message: e.to_string(),
        })?;
        count += 1;
    }
    Ok(count)
}

fn write_line<T: Serialize>(out: &mut impl Write, value: &T, path: &Path) -> Result<(), PipelineError> {
    let line = serde_json::to_string(value).expect("records serialize");
    writeln!(out, "{line}").map_err(io_error(path))
}

pub fn run_pipeline(
    input: &Path,
    output: &Path,
    clients: StageClients<'_>,
    config: &PipelineConfig,
) -> Result<PipelineReport, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    let items = read_input(input)?;

    let stage1_path = sidecar_path(output, "stage1");
    let stage2_path = sidecar_path(output, "stage2");
    let rejects_path = sidecar_path(output, "rejects");
    let resumed = if config.resume {
        Resumed {
            cots: load_checkpoint(&stage1_path, |c: &CotSample| &c.raw.sample_id),
            mapped: load_checkpoint(&stage2_path, |m: &MappedSample| &m.cot.raw.sample_id),
        }
    } else {
        Resumed {
            cots: HashMap::new(),
            mapped: HashMap::new(),
        }
    };
    let stage1_log = Checkpoint::create(stage1_path, config.resume)?;
    let stage2_log = Checkpoint::create(stage2_path, config.resume)?;

    let out_file = File::create(output).map_err(io_error(output))?;
    let mut out = BufWriter::new(out_file);
    let rejects_file = File::create(&rejects_path).map_err(io_error(&rejects_path))?;
    let mut rejects = BufWriter::new(rejects_file);

    let mut report = PipelineReport {
        input: items.len(),
        ..PipelineReport::default()
    };
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<Outcome, PipelineError>)>();

    let written: Result<(), PipelineError> = std::thread::scope(|scope| {
        for _ in 0..config.max_in_flight.min(items.len()) {
            let tx = tx.clone();
            let (items, next, resumed, stage1_log, stage2_log) = (&items, &next, &resumed, &stage1_log, &stage2_log);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let outcome = match item {
                    Ok(raw) => process(raw, clients, config, resumed, stage1_log, stage2_log),
                    Err(rejection) => Ok(Outcome::Rejected(rejection.clone())),
                };
                let failed = outcome.is_err();
                if tx.send((i, outcome)).is_err() || failed {
                    // stop handing out work once the writer has given up
                    next.store(items.len(), Ordering::Relaxed);
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        for (i, outcome) in rx.iter() {
            pending.insert(i, outcome?);
            while let Some(outcome) = pending.remove(&cursor) {
                match outcome {
                    Outcome::Emitted(fin) => {
                        write_line(&mut out, &fin, output)?;
                        report.emitted += 1;
                    }
                    Outcome::Rejected(rejection) => {
                        write_line(&mut rejects, &rejection, &rejects_path)?;
                        report.rejected += 1;
                        *report.rejected_by_stage.entry(rejection.stage).or_insert(0) += 1;
                    }
                }
                cursor += 1;
            }
        }
        Ok(())
    });
    written?;
    out.flush().map_err(io_error(output))?;
    rejects.flush().map_err(io_error(&rejects_path))?;
    drop(out);

    let checked = sweep(output)?;
    debug_assert_eq!(checked, report.emitted);
    Ok(report)
}
