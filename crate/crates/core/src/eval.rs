//! Role average precision with dual-IoU matching.
//!
//! Detections and ground truth are exchanged as line-delimited JSON, one
//! record per line:
//!
//! ```json
//! {"image_id": 3, "human_box": [x1, y1, x2, y2], "object_box": [...],
//!  "object_class": 1, "action_id": 0, "score": 0.83}
//! ```
//!
//! Ground-truth records use the same fields; their `score` is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::DomainError;
use crate::geometry::{match_boxes, BBox, GtPair};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("detection {index} has non-finite score {score}")]
    NonFiniteScore { index: usize, score: f64 },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: u32,
    pub action_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: u32,
    pub action_id: u32,
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| EvalError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(out: &mut W, records: &[T]) -> Result<(), EvalError> {
    for r in records {
        serde_json::to_writer(&mut *out, r)
            .map_err(|source| EvalError::Json { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Both boxes need IoU at or above this value.
    pub threshold: f64,
    /// Require the object class to agree, as on datasets where the
    /// interaction category fixes the object class.
    pub check_object_class: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            check_object_class: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionReport {
    pub action_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `None` when the action has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    /// `[recall, precision]` after each ranked detection.
    pub pr_curve: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub name: String,
    pub actions: Vec<u32>,
    /// `None` when no action of the group has ground truth.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub options: EvalOptions,
    pub actions: Vec<ActionReport>,
    /// Mean AP over actions with ground truth; `None` if there are none.
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<SplitReport>,
}

/// Ranks detections of one action: score descending, then image id, then
/// input position.
fn ranked<'a>(dets: &[(usize, &'a Detection)]) -> Vec<(usize, &'a Detection)> {
    let mut v = dets.to_vec();
    v.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.1.image_id.cmp(&b.1.image_id))
            .then(a.0.cmp(&b.0))
    });
    v
}

/// All-point interpolated AP of a ranked true/false-positive sequence.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .map(|(_, p)| p)
        .sum::<f64>()
        / num_gt as f64
}

/// Evaluates detections against ground truth, action by action. `names`
/// labels action ids in the report; actions listed there are reported even
/// without detections or ground truth.
pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    options: EvalOptions,
    names: &[String],
) -> Result<EvalReport, EvalError> {
    if !(options.threshold > 0.0 && options.threshold <= 1.0) {
        return Err(DomainError::BadThreshold(options.threshold).into());
    }
    if let Some((index, d)) = detections
        .iter()
        .enumerate()
        .find(|(_, d)| !d.score.is_finite())
    {
        return Err(EvalError::NonFiniteScore {
            index,
            score: d.score,
        });
    }
    let mut action_ids: BTreeSet<u32> = (0..names.len() as u32).collect();
    action_ids.extend(detections.iter().map(|d| d.action_id));
    action_ids.extend(ground_truth.iter().map(|g| g.action_id));

    let mut actions = Vec::with_capacity(action_ids.len());
    for &a in &action_ids {
        // per image: boxes and classes of this action's ground truth
        let mut gts: BTreeMap<u64, (Vec<GtPair>, Vec<u32>)> = BTreeMap::new();
        for g in ground_truth.iter().filter(|g| g.action_id == a) {
            let e = gts.entry(g.image_id).or_default();
            e.0.push(GtPair {
                human: g.human_box,
                object: g.object_box,
            });
            e.1.push(g.object_class);
        }
        let num_gt: usize = gts.values().map(|(v, _)| v.len()).sum();
        let mut taken: BTreeMap<u64, Vec<bool>> = gts
            .iter()
            .map(|(&id, (v, _))| (id, vec![false; v.len()]))
            .collect();
        let dets: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .filter(|(_, d)| d.action_id == a)
            .collect();
        let order = ranked(&dets);
        let mut hits = Vec::with_capacity(order.len());
        for (_, d) in &order {
            let hit = match (gts.get(&d.image_id), taken.get_mut(&d.image_id)) {
                (Some((pairs, classes)), Some(taken)) => {
                    let blocked: Vec<bool> = taken
                        .iter()
                        .zip(classes)
                        .map(|(&t, &c)| t || (options.check_object_class && c != d.object_class))
                        .collect();
                    match match_boxes(
                        &d.human_box,
                        &d.object_box,
                        pairs,
                        options.threshold,
                        &blocked,
                    )? {
                        Some(j) => {
                            taken[j] = true;
                            true
                        }
                        None => false,
                    }
                }
                _ => false,
            };
            hits.push(hit);
        }
        let mut tp = 0;
        let pr_curve = hits
            .iter()
            .enumerate()
            .map(|(k, &h)| {
                tp += h as usize;
                let recall = if num_gt > 0 {
                    tp as f64 / num_gt as f64
                } else {
                    0.0
                };
                [recall, tp as f64 / (k + 1) as f64]
            })
            .collect();
        actions.push(ActionReport {
            action_id: a,
            name: names.get(a as usize).cloned(),
            ap: (num_gt > 0).then(|| average_precision(&hits, num_gt)),
            num_gt,
            num_detections: hits.len(),
            true_positives: tp,
            pr_curve,
        });
    }
    let map = mean(actions.iter().filter_map(|a| a.ap));
    Ok(EvalReport {
        options,
        actions,
        map,
        splits: Vec::new(),
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean AP within each named group of actions. The groups must partition
/// the report's actions.
pub fn split_report(
    report: &EvalReport,
    groups: &[(String, Vec<u32>)],
) -> Result<Vec<SplitReport>, EvalError> {
    let mut seen = BTreeSet::new();
    for (name, ids) in groups {
        for &a in ids {
            if !seen.insert(a) {
                return Err(EvalError::Split(format!(
                    "action {a} appears twice (group {name})"
                )));
            }
            if !report.actions.iter().any(|r| r.action_id == a) {
                return Err(EvalError::Split(format!(
                    "group {name} names unknown action {a}"
                )));
            }
        }
    }
    if let Some(r) = report.actions.iter().find(|r| !seen.contains(&r.action_id)) {
        return Err(EvalError::Split(format!(
            "action {} is in no group",
            r.action_id
        )));
    }
    Ok(groups
        .iter()
        .map(|(name, ids)| SplitReport {
            name: name.clone(),
            actions: ids.clone(),
            map: mean(
                report
                    .actions
                    .iter()
                    .filter(|r| ids.contains(&r.action_id))
                    .filter_map(|r| r.ap),
            ),
        })
        .collect())
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{:.4}", v));
        let mut s = format!(
            "{:<6} {:<16} {:>6} {:>6} {:>6} {:>10}\n",
            "action", "name", "gt", "dets", "tp", "AP"
        );
        for a in &self.actions {
            s += &format!(
                "{:<6} {:<16} {:>6} {:>6} {:>6} {:>10}\n",
                a.action_id,
                a.name.as_deref().unwrap_or("-"),
                a.num_gt,
                a.num_detections,
                a.true_positives,
                fmt(a.ap)
            );
        }
        s += &format!("mAP {}\n", fmt(self.map));
        if self.map.is_none() {
            s += "no action has ground truth\n";
        }
        for sp in &self.splits {
            s += &format!(
                "split {} ({} actions): mAP {}\n",
                sp.name,
                sp.actions.len(),
                fmt(sp.map)
            );
        }
        s
    }
}
