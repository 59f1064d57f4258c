//! Metric tables for the `eval` and `score` commands.

use scenegraph_core::metrics::{
    mean_recall_at_k, recall_at_k, weighted_score, wmap, zero_shot_recall_at_k, EvalConfig, EvalScene, Protocol,
    ScenePredictions, WmapMode, ZeroShotSet,
};
use scenegraph_core::prediction_file::sort_by_score;
use scenegraph_core::scene::Scene;
use scenegraph_core::{Error, Result};

use crate::report::MetricRow;

/// IoU threshold for box matching in detection protocols.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Maps "nothing to evaluate" to a missing value and keeps other errors.
fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyAxis { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn eval_scenes(scenes: &[Scene], preds: &[ScenePredictions], graph_constraint: bool) -> Vec<EvalScene> {
    scenes
        .iter()
        .zip(preds)
        .map(|(s, p)| EvalScene::from_predictions(s.annotation.clone(), p, graph_constraint))
        .collect()
}

/// R@K, mR@K and (with a zero-shot set) zsR@K for every K. Without the graph
/// constraint the rows are named nGR, ng-mR and ng-zsR.
pub fn recall_rows(
    scenes: &[EvalScene],
    protocol: Protocol,
    ks: &[usize],
    graph_constraint: bool,
    zero_shot: Option<&ZeroShotSet>,
) -> Result<Vec<MetricRow>> {
    let prefix = if graph_constraint { "" } else { "ng-" };
    let recall_name = if graph_constraint { "R" } else { "nGR" };
    let mut rows = Vec::new();
    for &k in ks {
        let config = EvalConfig {
            graph_constraint,
            ..EvalConfig::new(protocol, k)
        };
        let name = protocol.name();
        rows.push(MetricRow::new(
            recall_name,
            name,
            Some(k),
            optional(recall_at_k(scenes, &config))?,
        ));
        rows.push(MetricRow::new(
            &format!("{prefix}mR"),
            name,
            Some(k),
            optional(mean_recall_at_k(scenes, &config))?,
        ));
        if let Some(zs) = zero_shot {
            let v = zero_shot_recall_at_k(scenes, &config, zs)?;
            rows.push(MetricRow::new(&format!("{prefix}zsR"), name, Some(k), v));
        }
    }
    Ok(rows)
}

/// Which benchmark's summary the `score` command reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// R@50, relationship and phrase wmAP, and their weighted score.
    OpenImages,
    /// Relationship and phrase detection R@50 and R@100.
    Vrd,
}

/// Scores ranked predictions read from a file against scene annotations.
pub fn score_rows(scenes: &[EvalScene], mode: ScoreMode) -> Result<Vec<MetricRow>> {
    let mut scenes = scenes.to_vec();
    let mut ranked: Vec<_> = scenes.iter_mut().map(|s| std::mem::take(&mut s.ranked)).collect();
    sort_by_score(&mut ranked);
    for (s, r) in scenes.iter_mut().zip(ranked) {
        s.ranked = r;
    }
    let recall = |protocol: Protocol, k: usize| {
        let config = EvalConfig {
            iou_threshold: IOU_THRESHOLD,
            ..EvalConfig::new(protocol, k)
        };
        optional(recall_at_k(&scenes, &config))
    };
    let mut rows = Vec::new();
    match mode {
        ScoreMode::OpenImages => {
            let r50 = recall(Protocol::RelationDet, 50)?;
            let rel = optional(wmap(&scenes, WmapMode::Relation, IOU_THRESHOLD))?;
            let phr = optional(wmap(&scenes, WmapMode::Phrase, IOU_THRESHOLD))?;
            let score = match (r50, rel, phr) {
                (Some(a), Some(b), Some(c)) => Some(weighted_score(a, b, c)),
                _ => None,
            };
            rows.push(MetricRow::new("R", Protocol::RelationDet.name(), Some(50), r50));
            rows.push(MetricRow::new("wmAP_rel", Protocol::RelationDet.name(), None, rel));
            rows.push(MetricRow::new("wmAP_phr", Protocol::PhraseDet.name(), None, phr));
            rows.push(MetricRow::new("score_wtd", "openimages", None, score));
        }
        ScoreMode::Vrd => {
            for protocol in [Protocol::RelationDet, Protocol::PhraseDet] {
                for k in [50, 100] {
                    rows.push(MetricRow::new("R", protocol.name(), Some(k), recall(protocol, k)?));
                }
            }
        }
    }
    Ok(rows)
}
