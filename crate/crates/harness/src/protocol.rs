//! Turning scene files into model inputs under each protocol, and model
//! outputs into ranked predictions.
//!
//! PredCls and SGCls work on the ground-truth objects. Each takes its
//! appearance from the proposal with the highest IoU against it (ties to the
//! lower index), its spatial part from the ground-truth box, and its recurrent
//! ordering from that proposal's confidence. PredCls replaces the detector
//! class scores with a one-hot encoding of the given label. SGDet works on the
//! proposals themselves after optional per-class NMS.

use std::collections::HashMap;

use scenegraph_core::metrics::{ObjectPrediction, PairScores, Protocol, ScenePredictions};
use scenegraph_core::model::predicted_labels;
use scenegraph_core::scene::{
    assemble_visual_feature, iou, per_class_nms, synthesize_union_features, BoundingBox, ObjectProposal, Scene,
    NUM_OBJECT_CLASSES, UNION_DIM, VISUAL_DIM,
};
use scenegraph_core::{
    Error, FrequencyPrior, ModelInput, ParamStore, PriorIndexing, Result, SceneGraphModel, Tape, Tensor,
};

pub const NMS_THRESHOLD: f64 = 0.5;

/// The objects a protocol exposes to the model, in output order.
#[derive(Debug, Clone)]
pub struct ProtocolObjects {
    /// Stand-in proposals: appearance and scores as fed to the model, box as reported.
    pub objects: Vec<ObjectProposal>,
    /// Index of the scene proposal each object was built from.
    pub source: Vec<usize>,
    /// Ground-truth labels (PredCls and SGCls only).
    pub gt_labels: Option<Vec<usize>>,
}

impl ProtocolObjects {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

fn best_overlap(proposals: &[ObjectProposal], b: &BoundingBox) -> usize {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (i, p) in proposals.iter().enumerate() {
        let v = iou(&p.bbox, b);
        if v > best_iou {
            best = i;
            best_iou = v;
        }
    }
    best
}

fn one_hot(label: usize) -> Result<Tensor> {
    let mut v = vec![0.0; NUM_OBJECT_CLASSES];
    v[label] = 1.0;
    Tensor::vector(v)
}

/// Objects for `protocol`; `nms` only affects SGDet.
pub fn protocol_objects(scene: &Scene, protocol: Protocol, nms: bool) -> Result<ProtocolObjects> {
    let gt = &scene.annotation;
    match protocol {
        Protocol::PredCls | Protocol::SgCls => {
            if gt.gt_boxes.is_empty() {
                return Ok(ProtocolObjects {
                    objects: Vec::new(),
                    source: Vec::new(),
                    gt_labels: Some(Vec::new()),
                });
            }
            if scene.proposals.is_empty() {
                return Err(Error::Invalid(format!(
                    "{protocol} needs proposals to take features from"
                )));
            }
            let mut objects = Vec::with_capacity(gt.gt_boxes.len());
            let mut source = Vec::with_capacity(gt.gt_boxes.len());
            for (b, &label) in gt.gt_boxes.iter().zip(&gt.gt_labels) {
                let i = best_overlap(&scene.proposals, b);
                let p = &scene.proposals[i];
                let class_scores = if protocol == Protocol::PredCls {
                    one_hot(label)?
                } else {
                    p.class_scores.clone()
                };
                objects.push(ObjectProposal {
                    bbox: *b,
                    class_scores,
                    ..p.clone()
                });
                source.push(i);
            }
            Ok(ProtocolObjects {
                objects,
                source,
                gt_labels: Some(gt.gt_labels.clone()),
            })
        }
        Protocol::SgDet => {
            if scene.proposals.is_empty() && !gt.gt_boxes.is_empty() {
                return Err(Error::Invalid("sgdet scene has no proposals".into()));
            }
            let source = if nms {
                per_class_nms(&scene.proposals, NMS_THRESHOLD)
            } else {
                (0..scene.proposals.len()).collect()
            };
            let objects = source.iter().map(|&i| scene.proposals[i].clone()).collect();
            Ok(ProtocolObjects {
                objects,
                source,
                gt_labels: None,
            })
        }
        other => Err(Error::Invalid(format!(
            "{other} is scored from prediction files, not run"
        ))),
    }
}

/// Every ordered pair of distinct objects, subject-major.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|s| (0..n).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect()
}

/// Union features for `pairs`: the stored feature of the source proposals
/// when the file has one, otherwise synthesized from the objects.
pub fn union_rows(scene: &Scene, objs: &ProtocolObjects, pairs: &[(usize, usize)]) -> Result<Option<Tensor>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let stored: HashMap<(usize, usize), &Tensor> = scene
        .pairs
        .iter()
        .map(|p| ((p.subject_index, p.object_index), &p.union_feature))
        .collect();
    let missing: Vec<(usize, usize)> = pairs
        .iter()
        .copied()
        .filter(|&(s, o)| {
            let key = (objs.source[s], objs.source[o]);
            key.0 == key.1 || !stored.contains_key(&key)
        })
        .collect();
    let synthesized: HashMap<(usize, usize), Tensor> = if missing.is_empty() {
        HashMap::new()
    } else {
        missing
            .iter()
            .copied()
            .zip(synthesize_union_features(&objs.objects, &missing)?)
            .collect()
    };
    let mut rows = Vec::with_capacity(pairs.len() * UNION_DIM);
    for &(s, o) in pairs {
        let key = (objs.source[s], objs.source[o]);
        let t = match synthesized.get(&(s, o)) {
            Some(t) => t,
            None => stored[&key],
        };
        rows.extend_from_slice(t.data());
    }
    Ok(Some(Tensor::new(vec![pairs.len(), UNION_DIM], rows)?))
}

/// Model input over `pairs`; labels are attached when `with_labels` and known.
pub fn model_input(
    scene: &Scene,
    objs: &ProtocolObjects,
    pairs: Vec<(usize, usize)>,
    with_labels: bool,
) -> Result<ModelInput> {
    let n = objs.len();
    let mut features = Vec::with_capacity(n * VISUAL_DIM);
    for o in &objs.objects {
        features.extend_from_slice(assemble_visual_feature(o, (1.0, 1.0))?.data());
    }
    let union_features = union_rows(scene, objs, &pairs)?;
    Ok(ModelInput {
        features: Tensor::new(vec![n, VISUAL_DIM], features)?,
        confidences: objs.objects.iter().map(|o| o.detector_confidence).collect(),
        pairs,
        union_features,
        labels: if with_labels { objs.gt_labels.clone() } else { None },
    })
}

pub fn prior_indexing(protocol: Protocol) -> PriorIndexing {
    match protocol {
        Protocol::PredCls => PriorIndexing::Given,
        _ => PriorIndexing::Predicted,
    }
}

/// Scores every ordered object pair of one scene under `protocol`.
pub fn predict_scene(
    model: &SceneGraphModel,
    store: &ParamStore,
    prior: Option<&FrequencyPrior>,
    scene: &Scene,
    protocol: Protocol,
    nms: bool,
) -> Result<ScenePredictions> {
    let objs = protocol_objects(scene, protocol, nms)?;
    if objs.is_empty() {
        return Ok(ScenePredictions {
            objects: Vec::new(),
            pairs: Vec::new(),
        });
    }
    let pairs = all_pairs(objs.len());
    let input = model_input(scene, &objs, pairs, protocol == Protocol::PredCls)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &input, prior, prior_indexing(protocol))?;
    let dist = tape.value(out.object_dist);
    let objects = match (&objs.gt_labels, protocol) {
        (Some(labels), Protocol::PredCls) => objs
            .objects
            .iter()
            .zip(labels)
            .map(|(o, &label)| ObjectPrediction {
                bbox: o.bbox,
                label,
                score: 1.0,
            })
            .collect(),
        _ => objs
            .objects
            .iter()
            .zip(predicted_labels(dist))
            .enumerate()
            .map(|(i, (o, label))| ObjectPrediction {
                bbox: o.bbox,
                label,
                score: dist.row(i)[label],
            })
            .collect(),
    };
    let pair_scores = match &out.relation {
        None => Vec::new(),
        Some(rel) => {
            let d = tape.value(rel.dist);
            input
                .pairs
                .iter()
                .enumerate()
                .map(|(k, &(subject, object))| PairScores {
                    subject,
                    object,
                    dist: d.row(k).to_vec(),
                })
                .collect()
        }
    };
    let pred = ScenePredictions {
        objects,
        pairs: pair_scores,
    };
    if pred.pairs.iter().any(|p| p.dist.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            op: "relation distribution",
        });
    }
    Ok(pred)
}

/// [`predict_scene`] over a list of scenes.
pub fn run_protocol(
    model: &SceneGraphModel,
    store: &ParamStore,
    prior: Option<&FrequencyPrior>,
    scenes: &[Scene],
    protocol: Protocol,
    nms: bool,
) -> Result<Vec<ScenePredictions>> {
    scenes
        .iter()
        .map(|s| predict_scene(model, store, prior, s, protocol, nms))
        .collect()
}
