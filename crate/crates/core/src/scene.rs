//! Scene-graph data model, visual feature assembly, and box geometry.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const ROI_DIM: usize = 2048;
pub const NUM_OBJECT_CLASSES: usize = 151;
pub const SPATIAL_DIM: usize = 4;
pub const UNION_DIM: usize = 2048;
pub const NUM_PREDICATES: usize = 50;
/// Width of an assembled proposal feature: roi | class scores | spatial.
pub const VISUAL_DIM: usize = ROI_DIM + NUM_OBJECT_CLASSES + SPATIAL_DIM;

/// Class index reserved for "background".
pub const BACKGROUND: usize = 0;
/// Predicate index reserved for "no relation".
pub const NO_RELATION: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if finite && self.x1 < self.x2 && self.y1 < self.y2 {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate box {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A detected region with its appearance feature and detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectProposal {
    /// Normalized to the unit image square.
    pub bbox: BoundingBox,
    pub roi_feature: Tensor,
    pub class_scores: Tensor,
    pub detector_label: usize,
    pub detector_confidence: f64,
}

impl ObjectProposal {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.roi_feature.shape() != [ROI_DIM] {
            return Err(Error::invalid(format!(
                "roi feature shape {:?}",
                self.roi_feature.shape()
            )));
        }
        if self.class_scores.shape() != [NUM_OBJECT_CLASSES] {
            return Err(Error::invalid(format!(
                "class score shape {:?}",
                self.class_scores.shape()
            )));
        }
        if self.class_scores.data().iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("class scores outside [0,1]"));
        }
        if self.detector_label >= NUM_OBJECT_CLASSES {
            return Err(Error::invalid(format!("detector label {}", self.detector_label)));
        }
        if !(0.0..=1.0).contains(&self.detector_confidence) {
            return Err(Error::invalid(format!(
                "detector confidence {}",
                self.detector_confidence
            )));
        }
        Ok(())
    }
}

/// Union-region feature for an ordered proposal pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeature {
    pub subject_index: usize,
    pub object_index: usize,
    pub union_feature: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

/// Ground-truth scene graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneAnnotation {
    pub gt_boxes: Vec<BoundingBox>,
    pub gt_labels: Vec<usize>,
    pub gt_triplets: Vec<Triplet>,
}

impl SceneAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.gt_boxes.len() != self.gt_labels.len() {
            return Err(Error::invalid("gt boxes and labels differ in length"));
        }
        for b in &self.gt_boxes {
            b.validate()?;
        }
        if let Some(l) = self
            .gt_labels
            .iter()
            .find(|&&l| l == BACKGROUND || l >= NUM_OBJECT_CLASSES)
        {
            return Err(Error::invalid(format!("gt label {l} outside 1..{NUM_OBJECT_CLASSES}")));
        }
        let n = self.gt_boxes.len();
        for t in &self.gt_triplets {
            if t.subject >= n || t.object >= n || t.subject == t.object {
                return Err(Error::invalid(format!("triplet {t:?} indexes {n} objects")));
            }
            if t.predicate == NO_RELATION || t.predicate >= NUM_PREDICATES {
                return Err(Error::invalid(format!("triplet predicate {}", t.predicate)));
            }
        }
        Ok(())
    }

    /// `(subject class, predicate, object class)` of a triplet.
    pub fn label_triple(&self, t: &Triplet) -> (usize, usize, usize) {
        (self.gt_labels[t.subject], t.predicate, self.gt_labels[t.object])
    }
}

/// Everything stored in one scene file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scene {
    pub proposals: Vec<ObjectProposal>,
    pub pairs: Vec<PairFeature>,
    pub annotation: SceneAnnotation,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for p in &self.proposals {
            p.validate()?;
        }
        let n = self.proposals.len();
        for pf in &self.pairs {
            if pf.subject_index >= n || pf.object_index >= n || pf.subject_index == pf.object_index {
                return Err(Error::invalid(format!(
                    "pair ({}, {}) indexes {n} proposals",
                    pf.subject_index, pf.object_index
                )));
            }
            if pf.union_feature.shape() != [UNION_DIM] {
                return Err(Error::invalid("union feature length"));
            }
        }
        self.annotation.validate()
    }

    /// Stored union feature of an ordered proposal pair, if the file has one.
    pub fn pair_feature(&self, subject: usize, object: usize) -> Option<&Tensor> {
        self.pairs
            .iter()
            .find(|p| p.subject_index == subject && p.object_index == object)
            .map(|p| &p.union_feature)
    }
}

/// Names of the object and predicate classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVocabulary {
    pub object_names: Vec<String>,
    pub predicate_names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(object_names: Vec<String>, predicate_names: Vec<String>) -> Result<Self> {
        if object_names.len() != NUM_OBJECT_CLASSES || predicate_names.len() != NUM_PREDICATES {
            return Err(Error::invalid(format!(
                "vocabulary needs {NUM_OBJECT_CLASSES} objects and {NUM_PREDICATES} predicates"
            )));
        }
        if object_names[0] != "__background__" || predicate_names[0] != "__no_relation__" {
            return Err(Error::invalid("index 0 must be the background / no-relation sentinel"));
        }
        Ok(Self {
            object_names,
            predicate_names,
        })
    }

    /// Generic `object_N` / `predicate_N` names.
    pub fn numbered() -> Self {
        let mut objects = vec!["__background__".to_owned()];
        objects.extend((1..NUM_OBJECT_CLASSES).map(|i| format!("object_{i}")));
        let mut predicates = vec!["__no_relation__".to_owned()];
        predicates.extend((1..NUM_PREDICATES).map(|i| format!("predicate_{i}")));
        Self {
            object_names: objects,
            predicate_names: predicates,
        }
    }
}

/// Concatenates `[roi | class scores | spatial]` into one 2203-d vector.
///
/// The spatial part is the corner coordinates divided by the image size.
pub fn assemble_visual_feature(p: &ObjectProposal, image_size: (f64, f64)) -> Result<Tensor> {
    let (w, h) = image_size;
    let spatial = [p.bbox.x1 / w, p.bbox.y1 / h, p.bbox.x2 / w, p.bbox.y2 / h];
    if spatial.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("spatial feature {spatial:?} not normalized")));
    }
    if p.roi_feature.numel() != ROI_DIM || p.class_scores.numel() != NUM_OBJECT_CLASSES {
        return Err(Error::shape("assemble_visual_feature", "feature lengths"));
    }
    let spatial = Tensor::vector(spatial.to_vec())?;
    tensor::concat(&[&p.roi_feature, &p.class_scores, &spatial], 0)
}

/// Linear projection of an assembled feature into the model subspace.
pub fn project_to_subspace(x_hat: &Tensor, w_proj: &Tensor) -> Result<Tensor> {
    let row = x_hat.reshape(vec![1, x_hat.numel()])?;
    let out = tensor::matmul(&row, w_proj)?;
    out.reshape(vec![out.numel()])
}

const UNION_PROJECTION_SEED: u64 = 0x5e_ed0f_0a11;

fn union_projection() -> &'static Tensor {
    static PROJ: OnceLock<Tensor> = OnceLock::new();
    PROJ.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(UNION_PROJECTION_SEED);
        let bound = 1.0 / (VISUAL_DIM as f64).sqrt();
        let data = (0..VISUAL_DIM * UNION_DIM)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor::from_parts(vec![VISUAL_DIM, UNION_DIM], data)
    })
}

/// Union feature for a pair whose file carries none: the pair's union box
/// with the mean roi and mean class scores, assembled and sent through a
/// fixed seeded projection to 2048 dimensions.
pub fn synthesize_union_feature(a: &ObjectProposal, b: &ObjectProposal) -> Result<Tensor> {
    let mut out = synthesize_union_features(&[a.clone(), b.clone()], &[(0, 1)])?;
    Ok(out.remove(0))
}

/// [`synthesize_union_feature`] for many pairs of one proposal list.
///
/// The projection is linear, so each proposal's appearance part is projected
/// once and pairs only add their union-box term.
pub fn synthesize_union_features(proposals: &[ObjectProposal], pairs: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    const APPEARANCE: usize = ROI_DIM + NUM_OBJECT_CLASSES;
    let proj = union_projection().data();
    let mut halves = vec![0.0; proposals.len() * UNION_DIM];
    let mut x = Vec::with_capacity(proposals.len() * APPEARANCE);
    for p in proposals {
        if p.roi_feature.numel() != ROI_DIM || p.class_scores.numel() != NUM_OBJECT_CLASSES {
            return Err(Error::shape("synthesize_union_features", "feature lengths"));
        }
        x.extend(
            p.roi_feature
                .data()
                .iter()
                .chain(p.class_scores.data())
                .map(|v| 0.5 * v),
        );
    }
    tensor::gemm_acc(
        &x,
        &proj[..APPEARANCE * UNION_DIM],
        &mut halves,
        proposals.len(),
        APPEARANCE,
        UNION_DIM,
    );

    let mut out = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a >= proposals.len() || b >= proposals.len() {
            return Err(Error::invalid(format!(
                "pair ({a}, {b}) indexes {} proposals",
                proposals.len()
            )));
        }
        let ub = proposals[a].bbox.union(&proposals[b].bbox).as_array();
        if ub.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("union box {ub:?} not normalized")));
        }
        let mut u: Vec<f64> = halves[a * UNION_DIM..(a + 1) * UNION_DIM]
            .iter()
            .zip(&halves[b * UNION_DIM..(b + 1) * UNION_DIM])
            .map(|(x, y)| x + y)
            .collect();
        for (r, &c) in ub.iter().enumerate() {
            let row = &proj[(APPEARANCE + r) * UNION_DIM..(APPEARANCE + r + 1) * UNION_DIM];
            u.iter_mut().zip(row).for_each(|(v, w)| *v += c * w);
        }
        out.push(Tensor::new(vec![UNION_DIM], u)?);
    }
    Ok(out)
}

/// Greedy non-maximum suppression applied independently per detector label.
///
/// Returns kept indices by descending confidence, ties by lower index.
pub fn per_class_nms(proposals: &[ObjectProposal], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .detector_confidence
            .total_cmp(&proposals[a].detector_confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            proposals[k].detector_label == proposals[i].detector_label
                && iou(&proposals[k].bbox, &proposals[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
