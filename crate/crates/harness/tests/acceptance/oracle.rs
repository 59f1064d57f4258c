//! Exhaustive recall oracle: every candidate's rank is counted directly
//! instead of sorting, and matches are re-derived from the boxes.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenegraph_core::metrics::{
    mean_recall_at_k, recall_at_k, zero_shot_recall_at_k, EvalConfig, EvalScene, ObjectPrediction, PairScores,
    Protocol, ScenePredictions, ZeroShotSet,
};
use scenegraph_core::scene::{BoundingBox, SceneAnnotation, Triplet, NUM_PREDICATES};
use scenegraph_core::{Error, Result};

use crate::{ensure, Outcome};

const SCENES: usize = 100;
const MAX_OBJECTS: usize = 5;
const MAX_TRIPLETS: usize = 6;
const CLASSES: usize = 6;
const PREDICATES: usize = 8;
const KS: [usize; 5] = [1, 3, 20, 50, 100];
const IOU_THRESHOLD: f64 = 0.5;

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
    let (w, h) = (rng.random_range(0.1..0.3), rng.random_range(0.1..0.3));
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter(b: &BoundingBox, rng: &mut ChaCha8Rng) -> BoundingBox {
    let mut c = b
        .as_array()
        .map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
    if c[2] <= c[0] {
        c[2] = (c[0] + 0.01).min(1.0);
        c[0] = c[2] - 0.01;
    }
    if c[3] <= c[1] {
        c[3] = (c[1] + 0.01).min(1.0);
        c[1] = c[3] - 0.01;
    }
    BoundingBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

struct RandomScene {
    gt: SceneAnnotation,
    /// Given objects (exact boxes and labels).
    given: ScenePredictions,
    /// Same pairs with classified labels and detected boxes.
    detected: ScenePredictions,
}

fn random_scene(rng: &mut ChaCha8Rng) -> RandomScene {
    let n = rng.random_range(1..=MAX_OBJECTS);
    let gt_boxes: Vec<BoundingBox> = (0..n).map(|_| random_box(rng)).collect();
    let gt_labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=CLASSES)).collect();
    let mut gt_triplets = Vec::new();
    if n >= 2 {
        for _ in 0..rng.random_range(0..=MAX_TRIPLETS) {
            let s = rng.random_range(0..n);
            let o = (s + rng.random_range(1..n)) % n;
            gt_triplets.push(Triplet {
                subject: s,
                predicate: rng.random_range(1..=PREDICATES),
                object: o,
            });
        }
    }
    let gt = SceneAnnotation {
        gt_boxes,
        gt_labels,
        gt_triplets,
    };

    let mut pairs: Vec<PairScores> = Vec::new();
    for s in 0..n {
        for o in (0..n).filter(|&o| o != s) {
            let dist = match pairs.last() {
                Some(prev) if rng.random_bool(0.1) => prev.dist.clone(),
                _ => {
                    let mut logits: Vec<f64> = (0..NUM_PREDICATES).map(|_| rng.random_range(-2.5..2.5)).collect();
                    for t in gt.gt_triplets.iter().filter(|t| (t.subject, t.object) == (s, o)) {
                        if rng.random_bool(0.6) {
                            logits[t.predicate] += 4.0;
                        }
                    }
                    softmax(&logits)
                }
            };
            pairs.push(PairScores {
                subject: s,
                object: o,
                dist,
            });
        }
    }
    let given = ScenePredictions {
        objects: (0..n)
            .map(|i| ObjectPrediction {
                bbox: gt.gt_boxes[i],
                label: gt.gt_labels[i],
                score: 1.0,
            })
            .collect(),
        pairs: pairs.clone(),
    };
    let detected = ScenePredictions {
        objects: (0..n)
            .map(|i| ObjectPrediction {
                bbox: jitter(&gt.gt_boxes[i], rng),
                label: if rng.random_bool(0.8) {
                    gt.gt_labels[i]
                } else {
                    rng.random_range(1..=CLASSES)
                },
                score: *[0.4, 0.7, 0.9, rng.random_range(0.3..1.0)].choose(rng).unwrap(),
            })
            .collect(),
        pairs,
    };
    RandomScene { gt, given, detected }
}

struct Candidate {
    pair: (usize, usize),
    subject: ObjectPrediction,
    object: ObjectPrediction,
    predicate: usize,
    score: f64,
}

fn candidates(pred: &ScenePredictions, graph_constraint: bool) -> Vec<Candidate> {
    let mut out = Vec::new();
    for p in &pred.pairs {
        let (s, o) = (pred.objects[p.subject], pred.objects[p.object]);
        let predicates: Vec<usize> = if graph_constraint {
            let best = p.dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let first = p.dist.iter().position(|&v| v == best).unwrap();
            if first == 0 {
                vec![]
            } else {
                vec![first]
            }
        } else {
            (1..NUM_PREDICATES).collect()
        };
        for q in predicates {
            out.push(Candidate {
                pair: (p.subject, p.object),
                subject: s,
                object: o,
                predicate: q,
                score: s.score * o.score * p.dist[q],
            });
        }
    }
    out
}

/// Number of candidates ranked strictly ahead of each candidate.
fn ranks(c: &[Candidate]) -> Vec<usize> {
    c.iter()
        .map(|a| {
            c.iter()
                .filter(|b| b.score > a.score || (b.score == a.score && (b.pair, b.predicate) < (a.pair, a.predicate)))
                .count()
        })
        .collect()
}

fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |r: &BoundingBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

fn enclosing(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2)).unwrap()
}

fn hits(c: &Candidate, gt: &SceneAnnotation, t: &Triplet, protocol: Protocol) -> bool {
    let (gs, go) = (&gt.gt_boxes[t.subject], &gt.gt_boxes[t.object]);
    let labels = c.subject.label == gt.gt_labels[t.subject]
        && c.object.label == gt.gt_labels[t.object]
        && c.predicate == t.predicate;
    labels
        && match protocol {
            Protocol::PredCls | Protocol::SgCls => c.pair == (t.subject, t.object),
            Protocol::SgDet | Protocol::RelationDet => {
                box_iou(&c.subject.bbox, gs) >= IOU_THRESHOLD && box_iou(&c.object.bbox, go) >= IOU_THRESHOLD
            }
            Protocol::PhraseDet => {
                box_iou(&enclosing(&c.subject.bbox, &c.object.bbox), &enclosing(gs, go)) >= IOU_THRESHOLD
            }
        }
}

/// Per gt triplet: the best rank of any candidate that hits it.
fn best_ranks(
    pred: &ScenePredictions,
    gt: &SceneAnnotation,
    protocol: Protocol,
    graph_constraint: bool,
) -> Vec<Option<usize>> {
    let c = candidates(pred, graph_constraint);
    let r = ranks(&c);
    gt.gt_triplets
        .iter()
        .map(|t| {
            c.iter()
                .zip(&r)
                .filter(|(c, _)| hits(c, gt, t, protocol))
                .map(|(_, &r)| r)
                .min()
        })
        .collect()
}

/// Mean over scenes of the recalled fraction of kept triplets, as a percentage.
fn oracle_recall(
    scenes: &[(SceneAnnotation, Vec<Option<usize>>)],
    k: usize,
    keep: impl Fn(&SceneAnnotation, &Triplet) -> bool,
) -> Option<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (gt, best) in scenes {
        let (mut hit, mut n) = (0usize, 0usize);
        for (t, b) in gt.gt_triplets.iter().zip(best) {
            if keep(gt, t) {
                n += 1;
                hit += usize::from(b.is_some_and(|r| r < k));
            }
        }
        if n > 0 {
            total += hit as f64 / n as f64;
            count += 1;
        }
    }
    (count > 0).then(|| 100.0 * total / count as f64)
}

fn optional(r: Result<f64>) -> Result<Option<f64>, String> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::EmptyAxis { .. }) => Ok(None),
        Err(e) => Err(e.to_string()),
    }
}

pub fn metric_oracle() -> Outcome {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let scenes: Vec<RandomScene> = (0..SCENES).map(|_| random_scene(&mut rng)).collect();
        ensure(scenes.iter().all(|s| s.gt.validate().is_ok()), || {
            "invalid random scene".into()
        })?;
        let mut zs = BTreeSet::new();
        for s in &scenes {
            for t in &s.gt.gt_triplets {
                if rng.random_bool(0.3) {
                    zs.insert(s.gt.label_triple(t));
                }
            }
        }
        let zs = ZeroShotSet::new(zs);

        let mut compared = 0usize;
        let mut violations = Vec::new();
        for protocol in Protocol::ALL {
            for graph_constraint in [true, false] {
                let preds = |s: &RandomScene| match protocol {
                    Protocol::PredCls => s.given.clone(),
                    _ => s.detected.clone(),
                };
                let evals: Vec<EvalScene> = scenes
                    .iter()
                    .map(|s| EvalScene::from_predictions(s.gt.clone(), &preds(s), graph_constraint))
                    .collect();
                let oracle: Vec<(SceneAnnotation, Vec<Option<usize>>)> = scenes
                    .iter()
                    .map(|s| (s.gt.clone(), best_ranks(&preds(s), &s.gt, protocol, graph_constraint)))
                    .collect();
                let predicates: BTreeSet<usize> = scenes
                    .iter()
                    .flat_map(|s| s.gt.gt_triplets.iter().map(|t| t.predicate))
                    .collect();
                for k in KS {
                    let config = EvalConfig {
                        graph_constraint,
                        ..EvalConfig::new(protocol, k)
                    };
                    let label = format!("{protocol} K={k} graph_constraint={graph_constraint}");

                    let r = optional(recall_at_k(&evals, &config))?;
                    let r_oracle = oracle_recall(&oracle, k, |_, _| true);
                    ensure(r == r_oracle, || {
                        format!("{label}: recall {r:?} vs oracle {r_oracle:?}")
                    })?;

                    let mr = optional(mean_recall_at_k(&evals, &config))?;
                    let per: Vec<f64> = predicates
                        .iter()
                        .filter_map(|&p| oracle_recall(&oracle, k, |_, t| t.predicate == p))
                        .collect();
                    let mr_oracle = (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64);
                    ensure(mr == mr_oracle, || {
                        format!("{label}: mean recall {mr:?} vs oracle {mr_oracle:?}")
                    })?;

                    let z = zero_shot_recall_at_k(&evals, &config, &zs).map_err(|e| e.to_string())?;
                    let z_oracle = oracle_recall(&oracle, k, |gt, t| zs.contains(gt.label_triple(t)));
                    ensure(z == z_oracle, || {
                        format!("{label}: zero-shot recall {z:?} vs oracle {z_oracle:?}")
                    })?;
                    compared += 3;

                    if graph_constraint {
                        let unconstrained = EvalConfig {
                            graph_constraint: false,
                            ..config
                        };
                        for (i, s) in scenes.iter().enumerate() {
                            let with = EvalScene::from_predictions(s.gt.clone(), &preds(s), true).recalled(&config);
                            let without =
                                EvalScene::from_predictions(s.gt.clone(), &preds(s), false).recalled(&unconstrained);
                            let (a, b) = (
                                with.iter().filter(|&&h| h).count(),
                                without.iter().filter(|&&h| h).count(),
                            );
                            if b < a {
                                violations.push(format!("scene {i} {protocol} K={k}: R hits {a} > nGR hits {b}"));
                            }
                        }
                    }
                }
            }
        }
        ensure(violations.is_empty(), || {
            format!(
                "oracle matched all {compared} values; nGR@K < R@K on {} scene/protocol/K cases, e.g. {}",
                violations.len(),
                violations.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
            )
        })?;
        Ok(format!(
            "{compared} metric values equal the oracle exactly; nGR@K >= R@K on every scene"
        ))
    };
    run().into()
}
