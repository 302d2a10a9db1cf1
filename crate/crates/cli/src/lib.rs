//! The `mirg` command line: dataset construction, training, scoring and inspection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Machine-readable output goes to stdout as JSON lines, diagnostics to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mirg_core::config::RunConfig;
use mirg_core::env::policy::ActionDistribution;
use mirg_core::env::policy::TaskFeatures;
use mirg_core::env::{generate_task, render_response, train_loop_with, ActionRecord, EnvConfig, ToyPolicy};
use mirg_core::eval::{self, EvalError, EvalSample, GroundTruthRecord, PredictionRecord};
use mirg_core::grammar::{extract_groundings, parse_trajectory, ObjectMention, Segment, Trajectory};
use mirg_core::pipeline::{run_pipeline, AnnotatorClient, ClientKind, DeterministicMock, Fault, StageClients};
use mirg_core::reward::{score_response, GroundTruth};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mirg", version, about = "Multi-image grounding trajectories: data, training, scoring")]
pub struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the three-stage annotation pipeline over RawSample JSONL.
    BuildData(BuildDataArgs),
    /// Train the toy policy on synthetic tasks and report held-out Acc@0.5.
    Train(TrainArgs),
    /// Score predictions with Acc@0.5, broken down by task kind.
    Score(ScoreArgs),
    /// Show the parse tree, groundings and rewards of one trajectory.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClientArg {
    Mock,
    Remote,
}

#[derive(Debug, Args)]
pub struct BuildDataArgs {
    /// RawSample JSONL.
    #[arg(long)]
    pub input: PathBuf,
    /// FinalSample JSONL; rejects and checkpoints are written next to it.
    #[arg(long)]
    pub output: PathBuf,
    /// Exit 0 even when samples were rejected.
    #[arg(long)]
    pub allow_rejects: bool,
    /// Annotator behind every stage.
    #[arg(long, value_enum)]
    pub client: Option<ClientArg>,
    /// Annotator URL for the remote client.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Samples processed concurrently.
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Retries after a transport error.
    #[arg(long)]
    pub max_retries: Option<u32>,
    /// First retry delay; doubles on each further retry.
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    /// Build stage-1 text from the gold answer without calling an annotator.
    #[arg(long)]
    pub skip_cot: bool,
    /// Wrap envelope-less stage-1 text instead of rejecting it.
    #[arg(long)]
    pub lenient_envelope: bool,
    /// Reuse stage checkpoints from an earlier run.
    #[arg(long)]
    pub resume: bool,
    /// Make the mock annotator fail SAMPLE_ID at STAGE (1-3). Repeatable.
    #[arg(long, value_name = "SAMPLE_ID:STAGE", value_parser = parse_fault)]
    pub mock_fault: Vec<(String, u8)>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// GRPO iterations, one training task each.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Seed for training tasks and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Responses sampled per task.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Step size of the gradient ascent update.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight of the KL penalty toward the uniform reference policy.
    #[arg(long)]
    pub kl_coefficient: Option<f64>,
    /// Train on r_fmt + r_obj only.
    #[arg(long)]
    pub no_image_reward: bool,
    /// Metrics JSONL destination; defaults to stdout.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Write the final policy parameters as JSON.
    #[arg(long)]
    pub policy_out: Option<PathBuf>,
    /// Write the held-out tasks with the final policy's greedy predictions as scoring JSONL.
    #[arg(long)]
    pub export_eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Scoring JSONL with prediction and ground truth per line, or predictions only when --gt is given.
    pub predictions: PathBuf,
    /// Ground-truth JSONL ({sample_id, task_kind, ground_truth} per line).
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Trajectory text; read from --file or stdin when absent.
    pub text: Option<String>,
    /// Read the trajectory from this file.
    #[arg(long, conflicts_with = "text")]
    pub file: Option<PathBuf>,
    /// Ground truth JSON ({image_count, objects}) to score against.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Indent the JSON output.
    #[arg(long)]
    pub pretty: bool,
}

fn parse_fault(s: &str) -> Result<(String, u8), String> {
    let (id, stage) = s.rsplit_once(':').ok_or("expected SAMPLE_ID:STAGE")?;
    let stage: u8 = stage.parse().map_err(|_| format!("bad stage {stage:?}"))?;
    if id.is_empty() || !(1..=3).contains(&stage) {
        return Err("expected a sample id and a stage from 1 to 3".into());
    }
    Ok((id.to_string(), stage))
}

/// A failed command: exit code plus a message for stderr.
struct Failure {
    code: i32,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_FAILURE,
        message: message.into(),
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return e.exit_code();
        }
    };
    let config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                let _ = writeln!(stderr, "error: {e}");
                return EXIT_USAGE;
            }
        },
        None => RunConfig::default(),
    };
    let result = match cli.command {
        Command::BuildData(args) => cmd_build_data(args, config, stdout, stderr),
        Command::Train(args) => cmd_train(args, config, stdout),
        Command::Score(args) => cmd_score(args, stdout),
        Command::Inspect(args) => cmd_inspect(args, stdout, stderr),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn emit(out: &mut dyn Write, value: &Value) -> Result<(), Failure> {
    writeln!(out, "{value}").map_err(|e| runtime(format!("cannot write output: {e}")))
}

fn tagged(record: &str, body: impl serde::Serialize) -> Value {
    let mut value = serde_json::to_value(body).expect("records serialize");
    if let Value::Object(map) = &mut value {
        map.insert("record".into(), json!(record));
    }
    value
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn cmd_build_data(args: BuildDataArgs, mut config: RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    require_file(&args.input, "input")?;
    let p = &mut config.pipeline;
    if let Some(client) = args.client {
        p.client = match client {
            ClientArg::Mock => ClientKind::Mock,
            ClientArg::Remote => ClientKind::Remote,
        };
    }
    if args.endpoint.is_some() {
        p.endpoint = args.endpoint.clone();
    }
    if let Some(n) = args.max_in_flight {
        p.max_in_flight = n;
    }
    if let Some(n) = args.max_retries {
        p.max_retries = n;
    }
    if let Some(ms) = args.backoff_ms {
        p.backoff_ms = ms;
    }
    p.skip_cot |= args.skip_cot;
    p.strict_envelope &= !args.lenient_envelope;
    p.resume |= args.resume;
    config.validate().map_err(|e| usage(e.to_string()))?;
    if !args.mock_fault.is_empty() && config.pipeline.client != ClientKind::Mock {
        return Err(usage("--mock-fault only applies to the mock client"));
    }

    let client: Box<dyn AnnotatorClient> = if config.pipeline.client == ClientKind::Mock {
        let mock = args
            .mock_fault
            .iter()
            .fold(DeterministicMock::new(), |m, (id, stage)| m.with_fault(id, *stage, Fault::Transport));
        Box::new(mock)
    } else {
        config.pipeline.build_client()
    };
    let report = run_pipeline(&args.input, &args.output, StageClients::uniform(client.as_ref()), &config.pipeline)
        .map_err(|e| runtime(e.to_string()))?;
    emit(stdout, &serde_json::to_value(&report).expect("report serializes"))?;
    if report.rejected > 0 && !args.allow_rejects {
        let _ = writeln!(stderr, "{} of {} samples rejected", report.rejected, report.input);
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs, mut config: RunConfig, stdout: &mut dyn Write) -> CmdResult {
    let g = &mut config.grpo;
    if let Some(n) = args.iterations {
        g.iterations = n;
    }
    if let Some(s) = args.seed {
        g.seed = s;
    }
    if let Some(n) = args.group_size {
        g.group_size = n;
    }
    if let Some(lr) = args.learning_rate {
        g.learning_rate = lr;
    }
    if let Some(kl) = args.kl_coefficient {
        g.kl_coefficient = kl;
    }
    g.image_reward &= !args.no_image_reward;
    config.validate().map_err(|e| usage(e.to_string()))?;

    let mut file = args.metrics.as_deref().map(create).transpose()?;
    let mut write_err = None;
    let report = {
        let sink: &mut dyn Write = match file.as_mut() {
            Some(f) => f,
            None => &mut *stdout,
        };
        let initial = mirg_core::env::evaluate_policy(&ToyPolicy::uniform(config.env.grid_size), &config.env)
            .map_err(|e| runtime(e.to_string()))?;
        emit(sink, &tagged("eval", json!({"phase": "initial", "summary": initial})))?;
        let report = train_loop_with(&config.grpo, &config.env, |m| {
            if write_err.is_none() {
                write_err = emit(sink, &tagged("iteration", m)).err();
            }
        })
        .map_err(|e| runtime(e.to_string()))?;
        if let Some(f) = write_err {
            return Err(f);
        }
        if config.grpo.iterations > 0 {
            emit(sink, &tagged("eval", json!({"phase": "final", "summary": report.final_eval})))?;
        }
        sink.flush().map_err(|e| runtime(e.to_string()))?;
        report
    };
    let summary = tagged(
        "summary",
        json!({
            "seed": config.grpo.seed,
            "iterations": config.grpo.iterations,
            "image_reward": config.grpo.image_reward,
            "initial_accuracy": report.initial_eval.accuracy,
            "final_accuracy": report.final_eval.accuracy,
            "final_greedy_accuracy": report.final_eval.greedy_accuracy,
            "final_mean_r_img": report.final_eval.mean_r_img,
            "final_mean_r_obj": report.final_eval.mean_r_obj,
        }),
    );
    if let Some(f) = file.as_mut() {
        emit(f, &summary)?;
        f.flush().map_err(|e| runtime(e.to_string()))?;
    }
    emit(stdout, &summary)?;

    if let Some(path) = &args.policy_out {
        let mut out = create(path)?;
        emit(&mut out, &serde_json::to_value(&report.policy).expect("policy serializes"))?;
        out.flush().map_err(|e| runtime(e.to_string()))?;
    }
    if let Some(path) = &args.export_eval {
        let mut out = create(path)?;
        for sample in held_out_predictions(&report.policy, &config.env).map_err(runtime)? {
            emit(&mut out, &serde_json::to_value(&sample).expect("samples serialize"))?;
        }
        out.flush().map_err(|e| runtime(e.to_string()))?;
    }
    Ok(EXIT_OK)
}

/// The held-out tasks paired with the policy's most likely prediction.
pub fn held_out_predictions(policy: &ToyPolicy, env: &EnvConfig) -> Result<Vec<EvalSample>, String> {
    (0..env.eval_tasks)
        .map(|i| {
            let seed = env.eval_seed.wrapping_add(u64::from(i));
            let task = generate_task(seed, env).map_err(|e| e.to_string())?;
            let features = TaskFeatures::new(&task, policy.grid_size);
            let (n, c) = ActionDistribution::new(policy, &features).greedy();
            let action = ActionRecord::new(&task, policy.grid_size, n as u32 + 1, c as u32).map_err(|e| e.to_string())?;
            Ok(EvalSample {
                sample_id: format!("task-{seed}"),
                task_kind: task.task_kind.as_str().to_string(),
                prediction_text: render_response(&action, &task),
                ground_truth: task.ground_truth.clone(),
            })
        })
        .collect()
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| usage(format!("cannot open {}: {e}", path.display())))
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Io(e) => runtime(e.to_string()),
        other => usage(other.to_string()),
    }
}

fn cmd_score(args: ScoreArgs, stdout: &mut dyn Write) -> CmdResult {
    require_file(&args.predictions, "predictions file")?;
    let samples = match &args.gt {
        None => eval::read_samples(open(&args.predictions)?).map_err(eval_failure)?,
        Some(gt) => {
            require_file(gt, "ground-truth file")?;
            let predictions: Vec<PredictionRecord> = eval::read_jsonl(open(&args.predictions)?).map_err(eval_failure)?;
            let truths: Vec<GroundTruthRecord> = eval::read_jsonl(open(gt)?).map_err(eval_failure)?;
            eval::join_samples(predictions, truths).map_err(eval_failure)?
        }
    };
    let report = eval::evaluate(samples).map_err(eval_failure)?;
    emit(stdout, &serde_json::to_value(&report).expect("report serializes"))?;
    Ok(EXIT_OK)
}

fn mention_json(m: &ObjectMention) -> Value {
    match m {
        ObjectMention::Full(obj) => json!({
            "full_mention": {
                "bbox_id": obj.position.to_string(),
                "description": obj.description,
                "box": obj.bbox,
            }
        }),
        ObjectMention::BackReference(id) => json!({"back_reference": id.to_string()}),
    }
}

/// JSON view of a trajectory: each block as a list of text and mention segments.
pub fn parse_tree(t: &Trajectory) -> Value {
    let block = |b: &mirg_core::grammar::Block| -> Value {
        b.segments()
            .iter()
            .map(|s| match s {
                Segment::Text(text) => json!({"text": text}),
                Segment::Mention(m) => mention_json(m),
            })
            .collect()
    };
    json!({"think": block(&t.think), "answer": block(&t.answer)})
}

fn cmd_inspect(args: InspectArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> CmdResult {
    let gt: Option<GroundTruth> = match &args.gt {
        Some(path) => {
            require_file(path, "ground-truth file")?;
            let gt = serde_json::from_reader(open(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Some(gt)
        }
        None => None,
    };
    let text = match (&args.text, &args.file) {
        (Some(text), _) => text.clone(),
        (None, Some(path)) => {
            require_file(path, "trajectory file")?;
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?
        }
        (None, None) => {
            let mut buf = String::new();
            io::stdin().read_to_string(&mut buf).map_err(|e| runtime(format!("cannot read stdin: {e}")))?;
            buf
        }
    };
    let print = |out: &mut dyn Write, value: &Value| -> Result<(), Failure> {
        if args.pretty {
            let text = serde_json::to_string_pretty(value).expect("json renders");
            writeln!(out, "{text}").map_err(|e| runtime(e.to_string()))
        } else {
            emit(out, value)
        }
    };

    let trajectory = match parse_trajectory(&text) {
        Ok(t) => t,
        Err(e) => {
            let mut value = json!({"error": {"kind": e.kind.to_string(), "offset": e.offset}});
            if let Some(gt) = &gt {
                value["reward"] = serde_json::to_value(score_response(&text, gt)).expect("reward serializes");
            }
            print(stdout, &value)?;
            let _ = writeln!(stderr, "error: {e}");
            return Ok(EXIT_FAILURE);
        }
    };
    let mut value = json!({
        "tree": parse_tree(&trajectory),
        "groundings": extract_groundings(&trajectory),
    });
    if let Some(gt) = &gt {
        value["reward"] = serde_json::to_value(score_response(&text, gt)).expect("reward serializes");
    }
    print(stdout, &value)?;
    Ok(EXIT_OK)
}
