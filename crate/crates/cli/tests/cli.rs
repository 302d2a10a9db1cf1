use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mirg_core::eval::read_samples;
use mirg_core::reward::{score_response, GroundTruth, RewardBreakdown};
use serde_json::Value;

const STAGE3: &str = "<think>The mug moved right: <bbox_id>[2-1]</bbox_id><|object_ref_start|>red mug<|object_ref_end|><|box_start|>(412,220),(470,290)<|box_end|> sits by the sink.</think><answer><bbox_id>[2-1]</bbox_id></answer>";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn score_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/score_fixture.jsonl")
}

fn mirg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirg")).args(args).output().unwrap()
}

fn in_process(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = mirg_cli::run(std::iter::once("mirg").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let help = mirg(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["build-data", "train", "score", "inspect"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let train_help = String::from_utf8(mirg(&["train", "--help"]).stdout).unwrap();
    for flag in ["--iterations", "--seed", "--no-image-reward", "--metrics", "--policy-out", "--config"] {
        assert!(train_help.contains(flag), "{flag} missing from train help");
    }
    assert_eq!(mirg(&["score", "--bogus"]).status.code(), Some(2));
    assert_eq!(mirg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mirg(&[]).status.code(), Some(2));
}

#[test]
fn build_data_with_the_mock() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("final.jsonl");
    let input = fixture("raw_samples.jsonl");
    let run = mirg(&["build-data", "--input", s(&input), "--output", s(&out), "--backoff-ms", "0"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let report: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["emitted"], 5);
    assert_eq!(report["rejected"], 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);

    let missing = mirg(&["build-data", "--input", "/no/such/file.jsonl", "--output", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    let faulty = ["build-data", "--input", s(&input), "--output", s(&out), "--backoff-ms", "0", "--mock-fault", "desk-3:2"];
    let run = mirg(&faulty);
    assert_eq!(run.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["rejected_by_stage"], serde_json::json!({"2": 1}));
    let rejects = fs::read_to_string(dir.path().join("final.jsonl.rejects.jsonl")).unwrap();
    assert!(rejects.contains("\"desk-3\""));

    let allowed: Vec<&str> = faulty.iter().copied().chain(["--allow-rejects"]).collect();
    assert_eq!(mirg(&allowed).status.code(), Some(0));
    assert_eq!(mirg(&["build-data", "--input", s(&input), "--output", s(&out), "--mock-fault", "desk-3:9"]).status.code(), Some(2));
}

#[test]
fn remote_client_needs_an_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("final.jsonl");
    let run = mirg(&["build-data", "--input", s(&fixture("raw_samples.jsonl")), "--output", s(&out), "--client", "remote"]);
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn config_file_is_applied_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("run.toml");
    fs::write(&good, "[grpo]\niterations = 3\nseed = 12\ngroup_size = 4\n[env]\neval_tasks = 10\n").unwrap();
    let (code, out, _) = in_process(&["train", "--config", s(&good)]);
    assert_eq!(code, 0);
    let summary = json_lines(&out).pop().unwrap();
    assert_eq!((summary["seed"].as_u64(), summary["iterations"].as_u64()), (Some(12), Some(3)));
    // flags override the file
    let (_, out, _) = in_process(&["train", "--config", s(&good), "--seed", "5"]);
    assert_eq!(json_lines(&out).pop().unwrap()["seed"], 5);

    let unknown = dir.path().join("bad.toml");
    fs::write(&unknown, "[grpo]\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(in_process(&["train", "--config", s(&unknown)]).0, 2);
    assert_eq!(in_process(&["train", "--config", "/no/such.toml"]).0, 2);
    assert_eq!(in_process(&["train", "--group-size", "1"]).0, 2);
}

#[test]
fn train_is_deterministic_and_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let policy = dir.path().join("policy.json");
    let export = dir.path().join("eval.jsonl");
    let args = |m: &Path| vec!["train".to_string(), "--iterations".into(), "25".into(), "--seed".into(), "3".into(), "--metrics".into(), s(m).into()];
    let first = mirg(&[args(&a).iter().map(String::as_str).collect::<Vec<_>>(), vec!["--policy-out", s(&policy), "--export-eval", s(&export)]].concat());
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    let second = mirg(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(first.stdout, second.stdout);

    let records = json_lines(&fs::read_to_string(&a).unwrap());
    assert_eq!(records.len(), 1 + 25 + 1 + 1);
    assert_eq!(records[0]["record"], "eval");
    assert_eq!(records[0]["phase"], "initial");
    assert!(records[1..26].iter().all(|r| r["record"] == "iteration"));
    assert_eq!(records[26]["phase"], "final");
    assert_eq!(records[27]["record"], "summary");

    let params: Value = serde_json::from_str(&fs::read_to_string(&policy).unwrap()).unwrap();
    assert_eq!(params["parameters"].as_array().unwrap().len(), 8);
    let exported = read_samples(fs::File::open(&export).map(std::io::BufReader::new).unwrap()).unwrap();
    assert_eq!(exported.len(), 200);
    // the export is valid score input
    let (code, out, _) = in_process(&["score", s(&export)]);
    assert_eq!(code, 0);
    assert_eq!(json_lines(&out)[0]["total_samples"], 200);
}

#[test]
fn zero_iterations_writes_the_initial_evaluation_only() {
    let (code, out, _) = in_process(&["train", "--iterations", "0"]);
    assert_eq!(code, 0);
    let records = json_lines(&out);
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["phase"], "initial");
    assert_eq!(records[1]["record"], "summary");
    assert_eq!(records[1]["initial_accuracy"], records[1]["final_accuracy"]);
}

#[test]
fn image_reward_ablation_lowers_image_credit() {
    let summary = |extra: &[&str]| {
        let args: Vec<&str> = ["train", "--iterations", "120", "--seed", "2"].iter().copied().chain(extra.iter().copied()).collect();
        let (code, out, _) = in_process(&args);
        assert_eq!(code, 0);
        json_lines(&out).pop().unwrap()
    };
    let with = summary(&[]);
    let without = summary(&["--no-image-reward"]);
    assert_eq!(without["image_reward"], false);
    assert_ne!(with, without);
    assert!(with["final_mean_r_img"].as_f64().unwrap() >= without["final_mean_r_img"].as_f64().unwrap());
}

#[test]
fn score_reports_the_fixture_tally() {
    let run = mirg(&["score", s(&score_fixture())]);
    assert_eq!(run.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["total_samples"], 20);
    assert_eq!(report["total_correct"], 13);
    assert_eq!(report["per_task"]["object_tracking"]["correct"], 4);
    assert_eq!(report["per_task"]["multi_view"]["correct"], 3);
    assert_eq!(report["per_task"]["group_grounding"]["correct"], 2);
    assert_eq!(report["per_task"]["correspondence"]["correct"], 4);
}

#[test]
fn score_with_split_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (preds, gts) = (dir.path().join("p.jsonl"), dir.path().join("g.jsonl"));
    let mut p = String::new();
    let mut g = String::new();
    for line in fs::read_to_string(score_fixture()).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        // gold-as-prediction for every sample
        let gt: GroundTruth = serde_json::from_value(v["ground_truth"].clone()).unwrap();
        let answer: String = gt
            .objects()
            .iter()
            .map(|o| {
                let [a, b, c, d] = o.bbox.to_array();
                format!("<bbox_id>{}</bbox_id><|object_ref_start|>{}<|object_ref_end|><|box_start|>({a},{b}),({c},{d})<|box_end|>", o.position, o.description)
            })
            .collect();
        let prediction = format!("<think>copy</think><answer>{answer}</answer>");
        p += &format!("{}\n", serde_json::json!({"sample_id": v["sample_id"], "prediction": prediction}));
        g += &format!("{}\n", serde_json::json!({"sample_id": v["sample_id"], "task_kind": v["task_kind"], "ground_truth": v["ground_truth"]}));
    }
    fs::write(&preds, p).unwrap();
    fs::write(&gts, g).unwrap();
    let (code, out, _) = in_process(&["score", s(&preds), "--gt", s(&gts)]);
    assert_eq!(code, 0);
    let report = &json_lines(&out)[0];
    assert_eq!(report["average"], 1.0);
    assert!(report["per_task"].as_object().unwrap().values().all(|t| t["accuracy"] == 1.0));
}

#[test]
fn score_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let run = mirg(&["score", s(&empty)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("no samples"));

    let broken = dir.path().join("broken.jsonl");
    let good = fs::read_to_string(score_fixture()).unwrap();
    fs::write(&broken, format!("{}\n{{oops\n", good.lines().next().unwrap())).unwrap();
    let (code, _, err) = in_process(&["score", s(&broken)]);
    assert_eq!(code, 2);
    assert!(err.contains("line 2"), "{err}");
    assert_eq!(in_process(&["score", "/no/such.jsonl"]).0, 2);
}

#[test]
fn inspect_shows_tree_groundings_and_reward() {
    let (code, out, _) = in_process(&["inspect", STAGE3]);
    assert_eq!(code, 0);
    let v = &json_lines(&out)[0];
    let think = v["tree"]["think"].as_array().unwrap();
    assert_eq!(think.iter().filter(|seg| seg.get("full_mention").is_some()).count(), 1);
    assert_eq!(v["tree"]["answer"][0]["back_reference"], "[2-1]");
    assert_eq!(v["groundings"].as_array().unwrap().len(), 1);
    assert!(v.get("reward").is_none());

    let gt_path = fixture("ground_truth.json");
    let (code, out, _) = in_process(&["inspect", STAGE3, "--gt", s(&gt_path)]);
    assert_eq!(code, 0);
    let gt: GroundTruth = serde_json::from_str(&fs::read_to_string(&gt_path).unwrap()).unwrap();
    let shown: RewardBreakdown = serde_json::from_value(json_lines(&out)[0]["reward"].clone()).unwrap();
    assert_eq!(shown, score_response(STAGE3, &gt));
    assert_eq!(shown, RewardBreakdown::new(1.0, 1.0, 1.0));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("t.txt");
    fs::write(&file, STAGE3).unwrap();
    let (code, pretty, _) = in_process(&["inspect", "--file", s(&file), "--pretty"]);
    assert_eq!(code, 0);
    assert!(pretty.lines().count() > 5);
}

#[test]
fn inspect_reports_parse_errors() {
    let bad = "<think>t</think><answer><bbox_id>[1-1</bbox_id></answer>";
    let run = mirg(&["inspect", bad]);
    assert_eq!(run.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(v["error"]["kind"], "MalformedMention");
    assert_eq!(v["error"]["offset"], 37);
    assert!(String::from_utf8_lossy(&run.stderr).contains("at byte 37"));
}
