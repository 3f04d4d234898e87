//! Top-k recall for object, predicate and relationship prediction, mean
//! recall over classes, and head/body/tail grouping of predicate classes.
//!
//! Rankings sort by descending score; equal scores keep ascending index
//! order. Recall values are percentages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::Prediction;
use crate::scene::{SceneSample, Taxonomy};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("k must be at least 1")]
    InvalidK,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("nothing to evaluate")]
    Empty,
}

/// One ground-truth instance: its class and whether it was retrieved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub class: usize,
    pub hit: bool,
}

fn check_k(k: usize) -> Result<(), MetricError> {
    if k == 0 {
        Err(MetricError::InvalidK)
    } else {
        Ok(())
    }
}

/// Indices of `scores` in ranked order.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Whether `target` is among the first `k` of the ranking of `scores`.
fn in_top_k(scores: &[f64], target: usize, k: usize) -> bool {
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s.total_cmp(&t).is_gt() || (s.total_cmp(&t).is_eq() && c < target))
        .count();
    ahead < k
}

/// Per-instance outcomes of object classification.
pub fn object_outcomes(
    fine_probs: &crate::numeric::Tensor<f64>,
    gt_fine: &[usize],
    k: usize,
) -> Result<Vec<Outcome>, MetricError> {
    check_k(k)?;
    if fine_probs.rows() != gt_fine.len() {
        return Err(MetricError::Shape(format!(
            "{} probability rows for {} instances",
            fine_probs.rows(),
            gt_fine.len()
        )));
    }
    gt_fine
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let row = fine_probs.row(i);
            if c >= row.len() {
                return Err(MetricError::Shape(format!("class {c} outside {} scores", row.len())));
            }
            Ok(Outcome {
                class: c,
                hit: in_top_k(row, c, k),
            })
        })
        .collect()
}

/// Per-(pair, ground-truth predicate) outcomes. Row `r` of
/// `predicate_probs` scores ordered pair `pairs[r]`.
pub fn predicate_outcomes(
    predicate_probs: &crate::numeric::Tensor<f64>,
    pairs: &[(usize, usize)],
    sample: &SceneSample,
    k: usize,
) -> Result<Vec<Outcome>, MetricError> {
    check_k(k)?;
    let m = sample.predicates.num_predicates();
    if predicate_probs.rows() != pairs.len() || predicate_probs.cols() != m {
        return Err(MetricError::Shape(format!(
            "predicate scores {:?} for {} pairs of {m} classes",
            predicate_probs.shape(),
            pairs.len()
        )));
    }
    let mut out = Vec::new();
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let row = predicate_probs.row(r);
        for (c, &on) in sample.predicates.pair(i, j).iter().enumerate() {
            if on {
                out.push(Outcome {
                    class: c,
                    hit: in_top_k(row, c, k),
                });
            }
        }
    }
    Ok(out)
}

/// A scored (subject, predicate, object) candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub subject_class: usize,
    pub object_class: usize,
    pub score: f64,
}

fn argmax(row: &[f64]) -> usize {
    ranking(row).first().copied().unwrap_or(0)
}

/// Every (i, c, j) with i ≠ j, scored by the product of the subject's top
/// class score, the predicate score and the object's top class score, in
/// ranked order.
pub fn ranked_triplets(prediction: &Prediction) -> Result<Vec<ScoredTriplet>, MetricError> {
    let fp = &prediction.fine_probs;
    let pp = &prediction.predicate_probs;
    if pp.rows() != prediction.pairs.len() {
        return Err(MetricError::Shape(format!(
            "{} predicate rows for {} pairs",
            pp.rows(),
            prediction.pairs.len()
        )));
    }
    let top: Vec<usize> = (0..fp.rows()).map(|i| argmax(fp.row(i))).collect();
    let mut cands = Vec::with_capacity(pp.len());
    for (r, &(i, j)) in prediction.pairs.iter().enumerate() {
        if i >= fp.rows() || j >= fp.rows() {
            return Err(MetricError::Shape(format!("pair ({i}, {j}) outside {} entities", fp.rows())));
        }
        let (si, sj) = (fp.row(i)[top[i]], fp.row(j)[top[j]]);
        for (c, &p) in pp.row(r).iter().enumerate() {
            cands.push(ScoredTriplet {
                subject: i,
                object: j,
                predicate: c,
                subject_class: top[i],
                object_class: top[j],
                score: si * p * sj,
            });
        }
    }
    let scores: Vec<f64> = cands.iter().map(|t| t.score).collect();
    Ok(ranking(&scores).into_iter().map(|r| cands[r]).collect())
}

/// Per-ground-truth-triplet outcomes, classed by predicate. A triplet is
/// retrieved when its (subject, predicate, object) is in the top `k` and
/// both entity labels in that candidate are correct.
pub fn relationship_outcomes(
    prediction: &Prediction,
    sample: &SceneSample,
    k: usize,
) -> Result<Vec<Outcome>, MetricError> {
    check_k(k)?;
    if prediction.fine_probs.rows() != sample.gt_fine.len() {
        return Err(MetricError::Shape(format!(
            "{} entity rows for {} instances",
            prediction.fine_probs.rows(),
            sample.gt_fine.len()
        )));
    }
    let ranked = ranked_triplets(prediction)?;
    let mut top = std::collections::HashSet::new();
    for t in ranked.iter().take(k) {
        if t.subject_class == sample.gt_fine[t.subject] && t.object_class == sample.gt_fine[t.object] {
            top.insert((t.subject, t.predicate, t.object));
        }
    }
    Ok(sample
        .predicates
        .triplets()
        .into_iter()
        .map(|(i, j, c)| Outcome {
            class: c,
            hit: top.contains(&(i, c, j)),
        })
        .collect())
}

/// Fraction of hits as a percentage; `None` without instances.
pub fn recall(outcomes: &[Outcome]) -> Option<f64> {
    if outcomes.is_empty() {
        return None;
    }
    let hits = outcomes.iter().filter(|o| o.hit).count();
    Some(100.0 * hits as f64 / outcomes.len() as f64)
}

/// Recall of each class; `None` for classes without instances.
pub fn per_class_recall(outcomes: &[Outcome], num_classes: usize) -> Vec<Option<f64>> {
    let mut hits = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for o in outcomes {
        if o.class < num_classes {
            total[o.class] += 1;
            hits[o.class] += o.hit as usize;
        }
    }
    hits.iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
        .collect()
}

/// Unweighted mean of the defined entries.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean over classes with at least one instance of the per-class recall.
pub fn mean_recall(outcomes: &[Outcome], num_classes: usize) -> Option<f64> {
    mean_defined(&per_class_recall(outcomes, num_classes))
}

pub fn object_recall_at_k(
    fine_probs: &crate::numeric::Tensor<f64>,
    gt_fine: &[usize],
    k: usize,
) -> Result<f64, MetricError> {
    recall(&object_outcomes(fine_probs, gt_fine, k)?).ok_or(MetricError::Empty)
}

/// `None` when the scene has no ground-truth predicate.
pub fn predicate_recall_at_k(
    prediction: &Prediction,
    sample: &SceneSample,
    k: usize,
) -> Result<Option<f64>, MetricError> {
    Ok(recall(&predicate_outcomes(
        &prediction.predicate_probs,
        &prediction.pairs,
        sample,
        k,
    )?))
}

/// `None` when the scene has no ground-truth triplet.
pub fn relationship_recall_at_k(
    prediction: &Prediction,
    sample: &SceneSample,
    k: usize,
) -> Result<Option<f64>, MetricError> {
    Ok(recall(&relationship_outcomes(prediction, sample, k)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailGroup {
    Head,
    Body,
    Tail,
}

/// Class count boundaries: more than `head` is head, at least `body` is
/// body, anything less is tail.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailThresholds {
    pub head: usize,
    pub body: usize,
}

impl Default for TailThresholds {
    fn default() -> Self {
        Self {
            head: 10_000,
            body: 1_000,
        }
    }
}

pub fn long_tail_groups(counts: &[usize], thresholds: TailThresholds) -> Vec<TailGroup> {
    counts
        .iter()
        .map(|&c| {
            if c > thresholds.head {
                TailGroup::Head
            } else if c >= thresholds.body {
                TailGroup::Body
            } else {
                TailGroup::Tail
            }
        })
        .collect()
}

/// Instances of each predicate class over `scenes`.
pub fn predicate_counts(scenes: &[SceneSample], num_predicates: usize) -> Vec<usize> {
    let mut counts = vec![0; num_predicates];
    for s in scenes {
        for (_, _, c) in s.predicates.triplets() {
            if c < num_predicates {
                counts[c] += 1;
            }
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub object_ks: Vec<usize>,
    pub predicate_ks: Vec<usize>,
    pub relationship_ks: Vec<usize>,
    pub thresholds: TailThresholds,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            object_ks: vec![1, 5, 10],
            predicate_ks: vec![1, 3, 5],
            relationship_ks: vec![50, 100],
            thresholds: TailThresholds::default(),
        }
    }
}

/// Recall and mean recall of one sub-task, keyed by k. `None` when no
/// scene has ground truth for the sub-task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub recall: BTreeMap<usize, Option<f64>>,
    pub mean_recall: BTreeMap<usize, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateRow {
    pub index: usize,
    pub name: String,
    /// Ground-truth instances in the evaluated scenes.
    pub instances: usize,
    /// Instances used for grouping.
    pub group_count: usize,
    pub group: TailGroup,
    /// Predicate-task recall keyed by k.
    pub recall: BTreeMap<usize, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub scenes: usize,
    pub object: TaskMetrics,
    pub predicate: TaskMetrics,
    pub relationship: TaskMetrics,
    pub per_predicate: Vec<PredicateRow>,
    pub thresholds: TailThresholds,
    /// Mean predicate-task recall of each group's classes, keyed by group
    /// then k.
    pub long_tail: BTreeMap<TailGroup, BTreeMap<usize, Option<f64>>>,
}

impl PartialOrd for TailGroup {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TailGroup {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

struct Task {
    per_scene: Vec<Option<f64>>,
    pooled: Vec<Outcome>,
}

impl Task {
    fn new() -> Self {
        Self {
            per_scene: Vec::new(),
            pooled: Vec::new(),
        }
    }

    fn push(&mut self, outcomes: Vec<Outcome>) {
        self.per_scene.push(recall(&outcomes));
        self.pooled.extend(outcomes);
    }
}

/// Evaluates `predictions[s]` against `scenes[s]`. Recall is the mean of
/// per-scene recalls over scenes with ground truth for the sub-task; mean
/// recall pools instances of each class over all scenes. Long-tail groups
/// use `group_counts` when given, else the evaluated scenes' counts.
pub fn evaluate(
    predictions: &[Prediction],
    scenes: &[SceneSample],
    taxonomy: &Taxonomy,
    config: &EvalConfig,
    group_counts: Option<&[usize]>,
) -> Result<MetricReport, MetricError> {
    if predictions.len() != scenes.len() {
        return Err(MetricError::Shape(format!(
            "{} predictions for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    if scenes.is_empty() {
        return Err(MetricError::Empty);
    }
    let (nf, np) = (taxonomy.num_fine(), taxonomy.num_predicates());
    let run = |ks: &[usize],
               f: &dyn Fn(&Prediction, &SceneSample, usize) -> Result<Vec<Outcome>, MetricError>,
               classes: usize|
     -> Result<(TaskMetrics, BTreeMap<usize, Vec<Option<f64>>>), MetricError> {
        let mut metrics = TaskMetrics::default();
        let mut per_class = BTreeMap::new();
        for &k in ks {
            let mut task = Task::new();
            for (p, s) in predictions.iter().zip(scenes) {
                task.push(f(p, s, k)?);
            }
            metrics.recall.insert(k, mean_defined(&task.per_scene));
            let pc = per_class_recall(&task.pooled, classes);
            metrics.mean_recall.insert(k, mean_defined(&pc));
            per_class.insert(k, pc);
        }
        Ok((metrics, per_class))
    };
    let (object, _) = run(
        &config.object_ks,
        &|p, s, k| object_outcomes(&p.fine_probs, &s.gt_fine, k),
        nf,
    )?;
    let (predicate, pred_per_class) = run(
        &config.predicate_ks,
        &|p, s, k| predicate_outcomes(&p.predicate_probs, &p.pairs, s, k),
        np,
    )?;
    let (relationship, _) = run(&config.relationship_ks, &relationship_outcomes, np)?;

    let instances = predicate_counts(scenes, np);
    let grouping: Vec<usize> = match group_counts {
        Some(c) if c.len() == np => c.to_vec(),
        Some(c) => {
            return Err(MetricError::Shape(format!(
                "{} group counts for {np} predicates",
                c.len()
            )))
        }
        None => instances.clone(),
    };
    let groups = long_tail_groups(&grouping, config.thresholds);
    let per_predicate: Vec<PredicateRow> = (0..np)
        .map(|c| PredicateRow {
            index: c,
            name: taxonomy.predicate_classes[c].clone(),
            instances: instances[c],
            group_count: grouping[c],
            group: groups[c],
            recall: pred_per_class.iter().map(|(&k, v)| (k, v[c])).collect(),
        })
        .collect();
    let mut long_tail = BTreeMap::new();
    for g in [TailGroup::Head, TailGroup::Body, TailGroup::Tail] {
        let by_k = pred_per_class
            .iter()
            .map(|(&k, v)| {
                let members: Vec<Option<f64>> =
                    (0..np).filter(|&c| groups[c] == g).map(|c| v[c]).collect();
                (k, mean_defined(&members))
            })
            .collect();
        long_tail.insert(g, by_k);
    }
    Ok(MetricReport {
        version: REPORT_VERSION,
        scenes: scenes.len(),
        object,
        predicate,
        relationship,
        per_predicate,
        thresholds: config.thresholds,
        long_tail,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per predicate class: index, name, counts, group and recall
    /// at each predicate k. Undefined recalls are left empty.
    pub fn per_predicate_csv(&self) -> String {
        let ks: Vec<usize> = self
            .per_predicate
            .first()
            .map(|r| r.recall.keys().copied().collect())
            .unwrap_or_default();
        let mut out = String::from("index,name,instances,group_count,group");
        for k in &ks {
            let _ = write!(out, ",R@{k}");
        }
        out.push('\n');
        for r in &self.per_predicate {
            let group = match r.group {
                TailGroup::Head => "head",
                TailGroup::Body => "body",
                TailGroup::Tail => "tail",
            };
            let _ = write!(out, "{},{},{},{},{}", r.index, r.name, r.instances, r.group_count, group);
            for k in &ks {
                match r.recall.get(k).copied().flatten() {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}
