//! Acc@0.5 scoring of prediction files with a per-task-kind breakdown.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{extract_groundings, parse_trajectory};
use crate::reward::{match_objects, GroundTruth};

/// A matched pair counts only when its IoU is strictly above this.
pub const ACC_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("sample_id {0:?} appears more than once")]
    DuplicateSampleId(String),
    #[error("prediction for unknown sample_id {0:?}")]
    UnknownSampleId(String),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSample {
    pub sample_id: String,
    pub task_kind: String,
    #[serde(rename = "prediction")]
    pub prediction_text: String,
    pub ground_truth: GroundTruth,
}

/// Correct iff the prediction parses and every gold object is matched with IoU > 0.5.
pub fn is_correct(prediction_text: &str, gt: &GroundTruth) -> bool {
    let Ok(trajectory) = parse_trajectory(prediction_text) else {
        return false;
    };
    let preds = extract_groundings(&trajectory);
    let matching = match_objects(&preds, gt.objects());
    matching.unmatched_gt.is_empty()
        && matching.pairs.len() == gt.objects().len()
        && matching.pairs.iter().all(|p| p.iou > ACC_IOU_THRESHOLD)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTally {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, KindTally>,
    /// Unweighted mean of the per-kind accuracies.
    pub average: f64,
    pub total_samples: usize,
    pub total_correct: usize,
}

pub fn evaluate(samples: impl IntoIterator<Item = EvalSample>) -> Result<EvalReport, EvalError> {
    let mut seen = HashSet::new();
    let mut per_task: BTreeMap<String, KindTally> = BTreeMap::new();
    for sample in samples {
        if !seen.insert(sample.sample_id.clone()) {
            return Err(EvalError::DuplicateSampleId(sample.sample_id));
        }
        let tally = per_task.entry(sample.task_kind.clone()).or_default();
        tally.count += 1;
        if is_correct(&sample.prediction_text, &sample.ground_truth) {
            tally.correct += 1;
        }
    }
    if per_task.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for tally in per_task.values_mut() {
        tally.accuracy = tally.correct as f64 / tally.count as f64;
    }
    let average = per_task.values().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport {
        average,
        total_samples: per_task.values().map(|t| t.count).sum(),
        total_correct: per_task.values().map(|t| t.correct).sum(),
        per_task,
    })
}

/// Reads JSONL records; blank lines are skipped and errors carry 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>, EvalError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| EvalError::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Reads combined samples, each carrying its prediction and ground truth.
pub fn read_samples(reader: impl BufRead) -> Result<Vec<EvalSample>, EvalError> {
    read_jsonl(reader)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub sample_id: String,
    pub task_kind: String,
    pub ground_truth: GroundTruth,
}

/// Pairs predictions with ground truth by sample id. A sample without a
/// prediction is scored as an empty (incorrect) prediction.
pub fn join_samples(predictions: Vec<PredictionRecord>, truths: Vec<GroundTruthRecord>) -> Result<Vec<EvalSample>, EvalError> {
    let mut by_id = HashMap::new();
    for p in predictions {
        if by_id.contains_key(&p.sample_id) {
            return Err(EvalError::DuplicateSampleId(p.sample_id));
        }
        by_id.insert(p.sample_id, p.prediction);
    }
    let mut samples = Vec::with_capacity(truths.len());
    for t in truths {
        let prediction_text = by_id.remove(&t.sample_id).unwrap_or_default();
        samples.push(EvalSample {
            sample_id: t.sample_id,
            task_kind: t.task_kind,
            prediction_text,
            ground_truth: t.ground_truth,
        });
    }
    if let Some(stray) = by_id.into_keys().min() {
        return Err(EvalError::UnknownSampleId(stray));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{serialize_trajectory, Block, ObjectMention, Trajectory};
    use crate::types::{BoundingBox, GroundedObject, PositionId};

    fn gold(n: u32, b: [f64; 4]) -> GroundedObject {
        GroundedObject::new(PositionId::new(n, 1).unwrap(), "cup", BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()).unwrap()
    }

    fn predict(objs: &[GroundedObject]) -> String {
        let answer = objs.iter().fold(Block::new(), |b, o| b.mention(ObjectMention::Full(o.clone())));
        serialize_trajectory(&Trajectory::new(Block::new().text("t"), answer)).unwrap()
    }

    fn sample(id: &str, kind: &str, prediction: String, gt: &GroundTruth) -> EvalSample {
        EvalSample {
            sample_id: id.into(),
            task_kind: kind.into(),
            prediction_text: prediction,
            ground_truth: gt.clone(),
        }
    }

    #[test]
    fn correctness_cases() {
        let g = gold(1, [0.0, 0.0, 10.0, 10.0]);
        let gt = GroundTruth::new(vec![g.clone()], 2).unwrap();
        assert!(is_correct(&predict(&[g.clone()]), &gt));
        // half the gold area, nothing outside: IoU exactly 0.5
        assert!(!is_correct(&predict(&[gold(1, [0.0, 0.0, 5.0, 10.0])]), &gt));
        assert!(is_correct(&predict(&[gold(1, [0.0, 0.0, 5.01, 10.0])]), &gt));
        assert!(!is_correct(&predict(&[gold(2, [0.0, 0.0, 10.0, 10.0])]), &gt));
        assert!(!is_correct("garbage", &gt));
    }

    #[test]
    fn multi_gold_needs_all() {
        let a = gold(1, [0.0, 0.0, 10.0, 10.0]);
        let b = gold(2, [0.0, 0.0, 10.0, 10.0]);
        let gt = GroundTruth::new(vec![a.clone(), b.clone()], 2).unwrap();
        assert!(is_correct(&predict(&[b.clone(), a.clone()]), &gt));
        assert!(!is_correct(&predict(&[a]), &gt));
    }

    #[test]
    fn macro_average_over_kinds() {
        let g = gold(1, [0.0, 0.0, 10.0, 10.0]);
        let gt = GroundTruth::new(vec![g.clone()], 1).unwrap();
        let hit = predict(&[g]);
        let report = evaluate(vec![
            sample("a", "ot", hit.clone(), &gt),
            sample("b", "ot", "x".into(), &gt),
            sample("c", "mv", hit.clone(), &gt),
            sample("d", "mv", hit, &gt),
            sample("e", "mv", "x".into(), &gt),
            sample("f", "mv", "x".into(), &gt),
        ])
        .unwrap();
        assert_eq!(report.per_task["ot"].accuracy, 0.5);
        assert_eq!(report.per_task["mv"].accuracy, 0.5);
        assert_eq!(report.total_samples, 6);
        let report = evaluate(vec![
            sample("a", "ot", "x".into(), &gt),
            sample("b", "ot", predict(&[gold(1, [0.0, 0.0, 10.0, 10.0])]), &gt),
            sample("c", "gg", predict(&[gold(1, [0.0, 0.0, 10.0, 10.0])]), &gt),
        ])
        .unwrap();
        assert_eq!(report.average, 0.75);
    }

    #[test]
    fn unparseable_predictions_score_zero() {
        let gt = GroundTruth::new(vec![gold(1, [0.0, 0.0, 1.0, 1.0])], 1).unwrap();
        let report = evaluate(vec![sample("a", "k1", "nope".into(), &gt), sample("b", "k2", "".into(), &gt)]).unwrap();
        assert!(report.per_task.values().all(|t| t.accuracy == 0.0));
        assert_eq!(report.average, 0.0);
    }

    #[test]
    fn empty_and_duplicate_inputs() {
        assert!(matches!(evaluate(Vec::new()), Err(EvalError::EmptyInput)));
        let gt = GroundTruth::new(vec![gold(1, [0.0, 0.0, 1.0, 1.0])], 1).unwrap();
        let dup = vec![sample("a", "k", "x".into(), &gt), sample("a", "k", "x".into(), &gt)];
        assert!(matches!(evaluate(dup), Err(EvalError::DuplicateSampleId(_))));
    }

    #[test]
    fn read_samples_reports_line_numbers() {
        let good = r#"{"sample_id":"s1","task_kind":"k","prediction":"p","ground_truth":{"image_count":1,"objects":[{"image_index":1,"object_index":1,"description":"d","box":[0,0,1,1]}]}}"#;
        let text = format!("{good}\n\n{{\"sample_id\":\n");
        match read_samples(text.as_bytes()) {
            Err(EvalError::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(read_samples(good.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn joining_predictions_with_truth() {
        let gt = GroundTruth::new(vec![gold(1, [0.0, 0.0, 1.0, 1.0])], 1).unwrap();
        let truth = |id: &str| GroundTruthRecord {
            sample_id: id.into(),
            task_kind: "k".into(),
            ground_truth: gt.clone(),
        };
        let pred = |id: &str| PredictionRecord {
            sample_id: id.into(),
            prediction: "p".into(),
        };
        let joined = join_samples(vec![pred("b")], vec![truth("a"), truth("b")]).unwrap();
        assert_eq!(joined[0].prediction_text, "");
        assert_eq!(joined[1].prediction_text, "p");
        assert!(matches!(join_samples(vec![pred("z")], vec![truth("a")]), Err(EvalError::UnknownSampleId(_))));
        assert!(matches!(join_samples(vec![pred("a"), pred("a")], vec![truth("a")]), Err(EvalError::DuplicateSampleId(_))));
    }
}
