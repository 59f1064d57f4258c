//! Triplet ranking, matching, and the recall / precision family of metrics.
//!
//! A ground-truth triplet counts as recalled when at least one of the top-K
//! ranked triplets matches it. Scenes without ground-truth triplets are left
//! out of every recall denominator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::relation::argmax_relation;
use crate::scene::{iou, BoundingBox, SceneAnnotation, Triplet, NO_RELATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    PredCls,
    SgCls,
    SgDet,
    PhraseDet,
    RelationDet,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Protocol::PredCls,
        Protocol::SgCls,
        Protocol::SgDet,
        Protocol::PhraseDet,
        Protocol::RelationDet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::PredCls => "predcls",
            Protocol::SgCls => "sgcls",
            Protocol::SgDet => "sgdet",
            Protocol::PhraseDet => "phrdet",
            Protocol::RelationDet => "reldet",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown protocol `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub k: usize,
    pub graph_constraint: bool,
    pub iou_threshold: f64,
}

impl EvalConfig {
    pub fn new(protocol: Protocol, k: usize) -> Self {
        Self {
            protocol,
            k,
            graph_constraint: true,
            iou_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be positive"));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::invalid(format!("IoU threshold {}", self.iou_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedTriplet {
    /// Indices of the two objects in the evaluated scene, when known. Under
    /// PredCls and SGCls these are ground-truth object indices.
    pub pair: Option<(usize, usize)>,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    pub subject_class: usize,
    pub object_class: usize,
    pub predicate: usize,
    pub score: f64,
}

/// A detected or given object with its class confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPrediction {
    pub bbox: BoundingBox,
    pub label: usize,
    pub score: f64,
}

/// Predicate distribution of one ordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub subject: usize,
    pub object: usize,
    pub dist: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenePredictions {
    pub objects: Vec<ObjectPrediction>,
    pub pairs: Vec<PairScores>,
}

/// All candidate triplets of a scene, best first.
///
/// With the graph constraint each pair contributes its argmax predicate
/// (nothing if that is "no relation"); without it every foreground predicate
/// of every pair is a candidate. Scores are subject confidence × object
/// confidence × predicate probability. Ties go to the lower
/// (subject, object, predicate).
pub fn rank_triplets(pred: &ScenePredictions, graph_constraint: bool) -> Vec<RankedTriplet> {
    let mut out = Vec::new();
    for pair in &pred.pairs {
        let s = &pred.objects[pair.subject];
        let o = &pred.objects[pair.object];
        let mut push = |p: usize| {
            out.push(RankedTriplet {
                pair: Some((pair.subject, pair.object)),
                subject_box: s.bbox,
                object_box: o.bbox,
                subject_class: s.label,
                object_class: o.label,
                predicate: p,
                score: s.score * o.score * pair.dist[p],
            })
        };
        if graph_constraint {
            let p = argmax_relation(&pair.dist);
            if p != NO_RELATION {
                push(p);
            }
        } else {
            (1..pair.dist.len()).for_each(&mut push);
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.pair.cmp(&b.pair))
            .then(a.predicate.cmp(&b.predicate))
    });
    out
}

/// Whether `pred` hits ground-truth triplet `t` of `gt` under `protocol`.
pub fn match_triplet(
    pred: &RankedTriplet,
    gt: &SceneAnnotation,
    t: &Triplet,
    protocol: Protocol,
    iou_threshold: f64,
) -> bool {
    let (s, p, o) = gt.label_triple(t);
    if pred.subject_class != s || pred.object_class != o || pred.predicate != p {
        return false;
    }
    let (sb, ob) = (&gt.gt_boxes[t.subject], &gt.gt_boxes[t.object]);
    match protocol {
        Protocol::PredCls | Protocol::SgCls => pred.pair == Some((t.subject, t.object)),
        Protocol::SgDet | Protocol::RelationDet => {
            iou(&pred.subject_box, sb) >= iou_threshold && iou(&pred.object_box, ob) >= iou_threshold
        }
        Protocol::PhraseDet => iou(&pred.subject_box.union(&pred.object_box), &sb.union(ob)) >= iou_threshold,
    }
}

/// A scene's ground truth with its ranked predictions (best first, untruncated).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScene {
    pub gt: SceneAnnotation,
    pub ranked: Vec<RankedTriplet>,
}

impl EvalScene {
    pub fn from_predictions(gt: SceneAnnotation, pred: &ScenePredictions, graph_constraint: bool) -> Self {
        Self {
            gt,
            ranked: rank_triplets(pred, graph_constraint),
        }
    }

    /// One flag per gt triplet: matched by any of the top-K predictions.
    pub fn recalled(&self, config: &EvalConfig) -> Vec<bool> {
        let top = &self.ranked[..config.k.min(self.ranked.len())];
        self.gt
            .gt_triplets
            .iter()
            .map(|t| {
                top.iter()
                    .any(|p| match_triplet(p, &self.gt, t, config.protocol, config.iou_threshold))
            })
            .collect()
    }
}

/// Mean over scenes of the fraction of kept gt triplets that are recalled,
/// as a percentage. Scenes with no kept triplet are skipped; `None` if none remain.
fn filtered_recall<F>(scenes: &[EvalScene], config: &EvalConfig, keep: F) -> Option<f64>
where
    F: Fn(&SceneAnnotation, &Triplet) -> bool,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in scenes {
        let recalled = scene.recalled(config);
        let (mut hit, mut n) = (0usize, 0usize);
        for (t, r) in scene.gt.gt_triplets.iter().zip(recalled) {
            if keep(&scene.gt, t) {
                n += 1;
                hit += usize::from(r);
            }
        }
        if n > 0 {
            total += hit as f64 / n as f64;
            count += 1;
        }
    }
    (count > 0).then(|| 100.0 * total / count as f64)
}

/// R@K (or nGR@K when the scenes were ranked without the graph constraint).
pub fn recall_at_k(scenes: &[EvalScene], config: &EvalConfig) -> Result<f64> {
    config.validate()?;
    filtered_recall(scenes, config, |_, _| true).ok_or(Error::EmptyAxis { op: "recall_at_k" })
}

/// Recall restricted to each predicate that occurs in the ground truth.
pub fn per_predicate_recall(scenes: &[EvalScene], config: &EvalConfig) -> BTreeMap<usize, f64> {
    let predicates: BTreeSet<usize> = scenes
        .iter()
        .flat_map(|s| s.gt.gt_triplets.iter().map(|t| t.predicate))
        .collect();
    predicates
        .into_iter()
        .filter_map(|p| filtered_recall(scenes, config, |_, t| t.predicate == p).map(|r| (p, r)))
        .collect()
}

/// mR@K: per-predicate recall averaged over the predicates present.
pub fn mean_recall_at_k(scenes: &[EvalScene], config: &EvalConfig) -> Result<f64> {
    config.validate()?;
    let per = per_predicate_recall(scenes, config);
    if per.is_empty() {
        return Err(Error::EmptyAxis { op: "mean_recall_at_k" });
    }
    Ok(per.values().sum::<f64>() / per.len() as f64)
}

/// Label triples that never occur in the training annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ZeroShotSet {
    triples: BTreeSet<(usize, usize, usize)>,
}

impl ZeroShotSet {
    pub fn new(triples: impl IntoIterator<Item = (usize, usize, usize)>) -> Self {
        Self {
            triples: triples.into_iter().collect(),
        }
    }

    /// Evaluation label triples whose (subject, predicate, object) never
    /// appears in `train`.
    pub fn build<'a, 'b>(
        train: impl IntoIterator<Item = &'a SceneAnnotation>,
        eval: impl IntoIterator<Item = &'b SceneAnnotation>,
    ) -> Self {
        let seen: BTreeSet<_> = train
            .into_iter()
            .flat_map(|a| a.gt_triplets.iter().map(|t| a.label_triple(t)))
            .collect();
        Self::new(
            eval.into_iter()
                .flat_map(|a| a.gt_triplets.iter().map(|t| a.label_triple(t)))
                .filter(|t| !seen.contains(t)),
        )
    }

    pub fn contains(&self, triple: (usize, usize, usize)) -> bool {
        self.triples.contains(&triple)
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize, usize)> {
        self.triples.iter()
    }

    /// One `subject predicate object` triple per line.
    pub fn to_text(&self) -> String {
        self.triples.iter().map(|(s, p, o)| format!("{s} {p} {o}\n")).collect()
    }

    pub fn parse(text: &str, path: &std::path::Path) -> Result<Self> {
        let mut triples = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: format!("{e}"),
                })?;
            let [s, p, o] = fields[..] else {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    message: "expected three integers".into(),
                });
            };
            triples.insert((s, p, o));
        }
        Ok(Self { triples })
    }
}

/// zsR@K. `None` when no evaluated gt triplet is zero-shot.
pub fn zero_shot_recall_at_k(scenes: &[EvalScene], config: &EvalConfig, zs: &ZeroShotSet) -> Result<Option<f64>> {
    config.validate()?;
    Ok(filtered_recall(scenes, config, |gt, t| zs.contains(gt.label_triple(t))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WmapMode {
    /// Subject and object boxes each need IoU ≥ threshold.
    Relation,
    /// The union boxes need IoU ≥ threshold.
    Phrase,
}

/// Area under the precision/recall step curve of a ranked hit list:
/// `Σ precision(k) / npos` over the ranks `k` that are hits.
pub fn average_precision(hits: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut area = 0.0;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
            area += tp as f64 / (k + 1) as f64;
        }
    }
    area / npos as f64
}

fn box_overlap(pred: &RankedTriplet, gt: &SceneAnnotation, t: &Triplet, mode: WmapMode) -> f64 {
    let (sb, ob) = (&gt.gt_boxes[t.subject], &gt.gt_boxes[t.object]);
    match mode {
        WmapMode::Relation => iou(&pred.subject_box, sb).min(iou(&pred.object_box, ob)),
        WmapMode::Phrase => iou(&pred.subject_box.union(&pred.object_box), &sb.union(ob)),
    }
}

/// Per-predicate AP for every predicate in the ground truth.
///
/// Predictions of a predicate are pooled over scenes and walked by
/// descending score (ties by scene, then rank). Each one claims the unclaimed
/// gt triplet of matching labels with the largest overlap at or above the
/// threshold; a prediction with nothing to claim is a false positive.
pub fn per_predicate_ap(scenes: &[EvalScene], mode: WmapMode, iou_threshold: f64) -> BTreeMap<usize, (f64, usize)> {
    let mut npos: BTreeMap<usize, usize> = BTreeMap::new();
    for s in scenes {
        for t in &s.gt.gt_triplets {
            *npos.entry(t.predicate).or_default() += 1;
        }
    }
    let mut out = BTreeMap::new();
    for (&p, &n) in &npos {
        let mut pool: Vec<(usize, usize)> = Vec::new();
        for (si, s) in scenes.iter().enumerate() {
            for (ri, r) in s.ranked.iter().enumerate() {
                if r.predicate == p {
                    pool.push((si, ri));
                }
            }
        }
        pool.sort_by(|a, b| {
            let sa = scenes[a.0].ranked[a.1].score;
            let sb = scenes[b.0].ranked[b.1].score;
            sb.total_cmp(&sa).then(a.cmp(b))
        });
        let mut claimed: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gt.gt_triplets.len()]).collect();
        let mut hits = Vec::with_capacity(pool.len());
        for (si, ri) in pool {
            let scene = &scenes[si];
            let pred = &scene.ranked[ri];
            let mut best: Option<(usize, f64)> = None;
            for (gi, t) in scene.gt.gt_triplets.iter().enumerate() {
                let (sc, pc, oc) = scene.gt.label_triple(t);
                if claimed[si][gi] || pc != p || sc != pred.subject_class || oc != pred.object_class {
                    continue;
                }
                let ov = box_overlap(pred, &scene.gt, t, mode);
                if ov >= iou_threshold && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
            if let Some((gi, _)) = best {
                claimed[si][gi] = true;
            }
            hits.push(best.is_some());
        }
        out.insert(p, (average_precision(&hits, n), n));
    }
    out
}

/// Predicate APs weighted by each predicate's share of the gt triplets, as a percentage.
pub fn wmap(scenes: &[EvalScene], mode: WmapMode, iou_threshold: f64) -> Result<f64> {
    let per = per_predicate_ap(scenes, mode, iou_threshold);
    let total: usize = per.values().map(|&(_, n)| n).sum();
    if total == 0 {
        return Err(Error::EmptyAxis { op: "wmap" });
    }
    Ok(100.0 * per.values().map(|&(ap, n)| ap * n as f64).sum::<f64>() / total as f64)
}

/// `0.2·R@50 + 0.4·wmAP_rel + 0.4·wmAP_phr`.
pub fn weighted_score(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr
}
