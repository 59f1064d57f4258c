//! Seeded synthetic scenes with a long-tailed predicate distribution.
//!
//! Each relationship is generated as a fresh subject/object pair. Its
//! predicate is drawn from a Zipf law over the active predicates, its
//! classes from a small per-predicate set of compatible classes, and its
//! boxes by a geometry rule tied to the predicate. Objects carry Gaussian
//! bump roi features centred on a class-specific position, noisy detector
//! class scores, and a jittered proposal box.
//!
//! Three ChaCha8 streams share the seed: stream 0 for everything
//! per-scene, stream 1 for the predicate draws alone, stream 2 for the
//! class-compatibility table.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};

use scenegraph_core::scene::{
    iou, synthesize_union_features, BoundingBox, ObjectProposal, PairFeature, Scene, SceneAnnotation, Triplet,
    NUM_OBJECT_CLASSES, NUM_PREDICATES, ROI_DIM,
};
use scenegraph_core::scene_file::{save_scene_file, write_manifest};
use scenegraph_core::{Error, Result, Tensor};

use crate::config::{parse_entries, parse_error, parse_value};

pub const PREDICATE_STREAM: u64 = 1;
const TABLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Foreground classes in use, ids `1..=active_object_classes`.
    pub active_object_classes: usize,
    /// Foreground predicates in use, ids `1..=active_predicates`.
    pub active_predicates: usize,
    /// Predicate `r` is drawn with weight `r^-s`.
    pub zipf_exponent: f64,
    /// Size of each predicate's subject and object class sets.
    pub classes_per_predicate: usize,
    /// Standard deviation of the roi noise.
    pub feature_noise: f64,
    /// Probability that the detector scores a wrong class highest.
    pub label_noise: f64,
    /// Proposal corner jitter as a fraction of the box size.
    pub box_jitter: f64,
    /// Extra near-duplicate proposals per scene.
    pub distractors: usize,
    /// Store union features for every ordered proposal pair.
    pub store_union: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_scenes: 20,
            min_objects: 4,
            max_objects: 8,
            active_object_classes: NUM_OBJECT_CLASSES - 1,
            active_predicates: NUM_PREDICATES - 1,
            zipf_exponent: 1.0,
            classes_per_predicate: 2,
            feature_noise: 0.1,
            label_noise: 0.0,
            box_jitter: 0.05,
            distractors: 0,
            store_union: true,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_owned()));
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return bad("need 2 <= min_objects <= max_objects");
        }
        if !(1..NUM_OBJECT_CLASSES).contains(&self.active_object_classes) {
            return bad("active_object_classes outside 1..=150");
        }
        if !(1..NUM_PREDICATES).contains(&self.active_predicates) {
            return bad("active_predicates outside 1..=49");
        }
        if self.classes_per_predicate == 0 || self.classes_per_predicate > self.active_object_classes {
            return bad("classes_per_predicate must be in 1..=active_object_classes");
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf_exponent must be finite and non-negative");
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(0.0..0.5).contains(&self.box_jitter) {
            return bad("label_noise must be in [0,1] and box_jitter in [0,0.5)");
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut s = Self::default();
        for e in parse_entries(text, path)? {
            let p = path;
            match e.key.as_str() {
                "n_scenes" => s.n_scenes = parse_value(&e, p)?,
                "min_objects" => s.min_objects = parse_value(&e, p)?,
                "max_objects" => s.max_objects = parse_value(&e, p)?,
                "active_object_classes" => s.active_object_classes = parse_value(&e, p)?,
                "active_predicates" => s.active_predicates = parse_value(&e, p)?,
                "zipf_exponent" => s.zipf_exponent = parse_value(&e, p)?,
                "classes_per_predicate" => s.classes_per_predicate = parse_value(&e, p)?,
                "feature_noise" => s.feature_noise = parse_value(&e, p)?,
                "label_noise" => s.label_noise = parse_value(&e, p)?,
                "box_jitter" => s.box_jitter = parse_value(&e, p)?,
                "distractors" => s.distractors = parse_value(&e, p)?,
                "store_union" => s.store_union = parse_value(&e, p)?,
                other => return Err(parse_error(p, e.line, format!("unknown key `{other}`"))),
            }
        }
        s.validate().map_err(|err| parse_error(path, 0, err.to_string()))?;
        Ok(s)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// Spatial relation a predicate imposes on (subject, object) boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Above,
    Below,
    LeftOf,
    RightOf,
    Inside,
    Contains,
    Overlaps,
    Coincides,
}

impl Geometry {
    const ALL: [Geometry; 8] = [
        Geometry::Above,
        Geometry::Below,
        Geometry::LeftOf,
        Geometry::RightOf,
        Geometry::Inside,
        Geometry::Contains,
        Geometry::Overlaps,
        Geometry::Coincides,
    ];

    /// Largest gap between boxes that still counts as adjacent.
    const MAX_GAP: f64 = 0.1;

    pub fn for_predicate(predicate: usize) -> Geometry {
        Self::ALL[(predicate - 1) % Self::ALL.len()]
    }

    /// Whether `(s, o)` satisfy the rule. Directional rules need the boxes to
    /// be adjacent and to overlap by half the smaller extent on the other
    /// axis; containment needs the inner box to cover at most half the outer.
    pub fn holds(self, s: &BoundingBox, o: &BoundingBox) -> bool {
        let overlap = |a1: f64, a2: f64, b1: f64, b2: f64| (a2.min(b2) - a1.max(b1)).max(0.0);
        let x_aligned = overlap(s.x1, s.x2, o.x1, o.x2) >= 0.5 * s.width().min(o.width());
        let y_aligned = overlap(s.y1, s.y2, o.y1, o.y2) >= 0.5 * s.height().min(o.height());
        let before = |end: f64, start: f64| end <= start && start - end <= Self::MAX_GAP;
        let contained = |a: &BoundingBox, b: &BoundingBox| a.x1 >= b.x1 && a.y1 >= b.y1 && a.x2 <= b.x2 && a.y2 <= b.y2;
        let within = |a: &BoundingBox, b: &BoundingBox| contained(a, b) && a.area() <= 0.5 * b.area();
        match self {
            Geometry::Above => x_aligned && before(s.y2, o.y1),
            Geometry::Below => x_aligned && before(o.y2, s.y1),
            Geometry::LeftOf => y_aligned && before(s.x2, o.x1),
            Geometry::RightOf => y_aligned && before(o.x2, s.x1),
            Geometry::Inside => within(s, o),
            Geometry::Contains => within(o, s),
            Geometry::Overlaps => {
                let v = iou(s, o);
                (0.1..0.6).contains(&v) && !contained(s, o) && !contained(o, s)
            }
            Geometry::Coincides => iou(s, o) >= 0.6,
        }
    }

    /// A random layout satisfying the rule, built near the origin and then
    /// moved to a random position inside the unit square.
    fn place<R: Rng>(self, rng: &mut R) -> (BoundingBox, BoundingBox) {
        let at = |x: f64, y: f64, w: f64, h: f64| BoundingBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        };
        let (ws, hs) = (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2));
        let (wo, ho) = (rng.random_range(0.08..0.2), rng.random_range(0.08..0.2));
        let (s, o) = match self {
            Geometry::Above | Geometry::Below | Geometry::LeftOf | Geometry::RightOf => {
                let subject_first = matches!(self, Geometry::Above | Geometry::LeftOf);
                let ((w1, h1), (w2, h2)) = if subject_first {
                    ((ws, hs), (wo, ho))
                } else {
                    ((wo, ho), (ws, hs))
                };
                let gap = rng.random_range(0.0..0.08);
                let first = at(0.0, 0.0, w1, h1);
                // Centres differ by at most a quarter of the smaller extent.
                let second = if matches!(self, Geometry::LeftOf | Geometry::RightOf) {
                    let delta = rng.random_range(-0.25..0.25) * h1.min(h2);
                    at(w1 + gap, (h1 - h2) / 2.0 + delta, w2, h2)
                } else {
                    let delta = rng.random_range(-0.25..0.25) * w1.min(w2);
                    at((w1 - w2) / 2.0 + delta, h1 + gap, w2, h2)
                };
                if subject_first {
                    (first, second)
                } else {
                    (second, first)
                }
            }
            Geometry::Inside | Geometry::Contains => {
                let (w, h) = (rng.random_range(0.2..0.35), rng.random_range(0.2..0.35));
                let (iw, ih) = (w * rng.random_range(0.3..0.6), h * rng.random_range(0.3..0.6));
                let outer = at(0.0, 0.0, w, h);
                let margin = 0.005;
                let inner = at(
                    rng.random_range(margin..w - iw - margin),
                    rng.random_range(margin..h - ih - margin),
                    iw,
                    ih,
                );
                if self == Geometry::Inside {
                    (inner, outer)
                } else {
                    (outer, inner)
                }
            }
            Geometry::Overlaps => {
                // Same size, shifted sideways by 40-60% of the width.
                let shift = ws * rng.random_range(0.4..0.6);
                (at(0.0, 0.0, ws, hs), at(shift, 0.0, ws, hs))
            }
            Geometry::Coincides => {
                let dx = wo * rng.random_range(0.0..0.08);
                let dy = ho * rng.random_range(0.0..0.08);
                (at(dx, dy, wo - 2.0 * dx, ho - 2.0 * dy), at(0.0, 0.0, wo, ho))
            }
        };
        let u = s.union(&o);
        let margin = 1e-3;
        let dx = rng.random_range(margin..1.0 - u.width() - margin) - u.x1;
        let dy = rng.random_range(margin..1.0 - u.height() - margin) - u.y1;
        let moved = |b: BoundingBox| at(b.x1 + dx, b.y1 + dy, b.width(), b.height());
        (moved(s), moved(o))
    }
}

/// Per-predicate subject and object class sets.
pub fn compatibility_table(spec: &SyntheticSpec, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TABLE_STREAM);
    let classes: Vec<usize> = (1..=spec.active_object_classes).collect();
    let k = spec.classes_per_predicate;
    let mut table = vec![(Vec::new(), Vec::new())];
    for _ in 1..=spec.active_predicates {
        let s: Vec<usize> = classes.choose_multiple(&mut rng, k).copied().collect();
        let o: Vec<usize> = classes.choose_multiple(&mut rng, k).copied().collect();
        table.push((s, o));
    }
    table
}

/// The predicate sampler: Zipf over `1..=active_predicates`.
pub fn predicate_distribution(spec: &SyntheticSpec) -> Result<Zipf<f64>> {
    Zipf::new(spec.active_predicates as f64, spec.zipf_exponent).map_err(|e| Error::Invalid(format!("zipf: {e}")))
}

fn roi_feature<R: Rng>(class: usize, noise: f64, rng: &mut R) -> Result<Tensor> {
    let centre = (class as f64 - 0.5) * ROI_DIM as f64 / (NUM_OBJECT_CLASSES - 1) as f64;
    let width = 6.0;
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::Invalid(e.to_string()))?;
    let data = (0..ROI_DIM)
        .map(|j| {
            let d = (j as f64 - centre) / width;
            let bump = (-0.5 * d * d).exp();
            bump + if noise > 0.0 { normal.sample(rng) } else { 0.0 }
        })
        .collect();
    Tensor::new(vec![ROI_DIM], data)
}

/// Detector scores: the reported class gets 0.55-0.95, the remainder is split
/// over three other active classes. Returns scores, label, and confidence.
fn class_scores<R: Rng>(class: usize, spec: &SyntheticSpec, rng: &mut R) -> Result<(Tensor, usize, f64)> {
    let others: Vec<usize> = (1..=spec.active_object_classes).filter(|&c| c != class).collect();
    let mut scores = vec![0.0; NUM_OBJECT_CLASSES];
    let top = rng.random_range(0.55..0.95);
    let reported = if !others.is_empty() && rng.random_bool(spec.label_noise) {
        *others.choose(rng).expect("non-empty")
    } else {
        class
    };
    scores[reported] = top;
    let rest: Vec<usize> = (1..=spec.active_object_classes).filter(|&c| c != reported).collect();
    let picks: Vec<usize> = rest.choose_multiple(rng, 3.min(rest.len())).copied().collect();
    let weights: Vec<f64> = picks.iter().map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    for (&c, w) in picks.iter().zip(&weights) {
        // Each share stays below the top score because 1 - top < top.
        scores[c] += (1.0 - top) * w / total;
    }
    Ok((Tensor::vector(scores)?, reported, top))
}

fn jitter<R: Rng>(b: &BoundingBox, amount: f64, rng: &mut R) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |scale: f64| {
        if amount > 0.0 {
            rng.random_range(-amount..amount) * scale
        } else {
            0.0
        }
    };
    let x1 = (b.x1 + d(w)).clamp(0.0, 1.0);
    let y1 = (b.y1 + d(h)).clamp(0.0, 1.0);
    let x2 = (b.x2 + d(w)).clamp(0.0, 1.0);
    let y2 = (b.y2 + d(h)).clamp(0.0, 1.0);
    if x2 - x1 < 1e-3 || y2 - y1 < 1e-3 {
        *b
    } else {
        BoundingBox { x1, y1, x2, y2 }
    }
}

const PLACEMENT_RETRIES: usize = 500;

/// Whether some predicate admits `(subject, object)` by class and by geometry.
fn implies_relation(
    table: &[(Vec<usize>, Vec<usize>)],
    classes: (usize, usize),
    boxes: (&BoundingBox, &BoundingBox),
) -> bool {
    table.iter().enumerate().skip(1).any(|(p, (subjects, objects))| {
        subjects.contains(&classes.0)
            && objects.contains(&classes.1)
            && Geometry::for_predicate(p).holds(boxes.0, boxes.1)
    })
}

/// Whether a new object would stand in an unannotated but rule-satisfying
/// relation with one already placed.
fn creates_spurious_single(
    a: &SceneAnnotation,
    table: &[(Vec<usize>, Vec<usize>)],
    label: usize,
    b: &BoundingBox,
) -> bool {
    a.gt_boxes
        .iter()
        .zip(&a.gt_labels)
        .any(|(ob, &ol)| implies_relation(table, (label, ol), (b, ob)) || implies_relation(table, (ol, label), (ob, b)))
}

/// [`creates_spurious_single`] for a new related pair, including its reverse direction.
fn creates_spurious_relation(
    a: &SceneAnnotation,
    table: &[(Vec<usize>, Vec<usize>)],
    classes: (usize, usize),
    boxes: (BoundingBox, BoundingBox),
) -> bool {
    creates_spurious_single(a, table, classes.0, &boxes.0)
        || creates_spurious_single(a, table, classes.1, &boxes.1)
        || implies_relation(table, (classes.1, classes.0), (&boxes.1, &boxes.0))
}

/// Generates `spec.n_scenes` scenes from `seed`.
///
/// Placements are resampled (up to a retry budget) until no unannotated
/// ordered pair has a class pair and layout that some predicate's rule would
/// accept, so relations are as predictable from classes and geometry as the
/// budget allows.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred_rng = ChaCha8Rng::seed_from_u64(seed);
    pred_rng.set_stream(PREDICATE_STREAM);
    let zipf = predicate_distribution(spec)?;
    let table = compatibility_table(spec, seed);

    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for _ in 0..spec.n_scenes {
        let n = rng.random_range(spec.min_objects..=spec.max_objects);
        let mut annotation = SceneAnnotation::default();
        for _ in 0..n / 2 {
            let p = zipf.sample(&mut pred_rng) as usize;
            let (subjects, objects) = &table[p];
            let cs = *subjects.choose(&mut rng).expect("non-empty class set");
            let co = *objects.choose(&mut rng).expect("non-empty class set");
            let rule = Geometry::for_predicate(p);
            let mut placed = rule.place(&mut rng);
            for _ in 0..PLACEMENT_RETRIES {
                if !creates_spurious_relation(&annotation, &table, (cs, co), placed) {
                    break;
                }
                placed = rule.place(&mut rng);
            }
            let (sb, ob) = placed;
            let s = annotation.gt_boxes.len();
            annotation.gt_boxes.extend([sb, ob]);
            annotation.gt_labels.extend([cs, co]);
            annotation.gt_triplets.push(Triplet {
                subject: s,
                predicate: p,
                object: s + 1,
            });
        }
        if n % 2 == 1 {
            let label = rng.random_range(1..=spec.active_object_classes);
            let mut b = Geometry::Coincides.place(&mut rng).0;
            for _ in 0..PLACEMENT_RETRIES {
                if !creates_spurious_single(&annotation, &table, label, &b) {
                    break;
                }
                b = Geometry::Coincides.place(&mut rng).0;
            }
            annotation.gt_boxes.push(b);
            annotation.gt_labels.push(label);
        }

        let mut proposals = Vec::with_capacity(n + spec.distractors);
        for (b, &label) in annotation.gt_boxes.iter().zip(&annotation.gt_labels) {
            let roi_feature = roi_feature(label, spec.feature_noise, &mut rng)?;
            let (class_scores, detector_label, detector_confidence) = class_scores(label, spec, &mut rng)?;
            proposals.push(ObjectProposal {
                bbox: jitter(b, spec.box_jitter, &mut rng),
                roi_feature,
                class_scores,
                detector_label,
                detector_confidence,
            });
        }
        for _ in 0..spec.distractors {
            let src = proposals[rng.random_range(0..n)].clone();
            let shrink = rng.random_range(0.5..0.9);
            proposals.push(ObjectProposal {
                bbox: jitter(&src.bbox, 0.05, &mut rng),
                detector_confidence: src.detector_confidence * shrink,
                class_scores: src.class_scores.map("distractor", |v| v * shrink)?,
                ..src
            });
        }

        let pairs = if spec.store_union {
            let m = proposals.len();
            let idx: Vec<(usize, usize)> = (0..m)
                .flat_map(|s| (0..m).filter(move |&o| o != s).map(move |o| (s, o)))
                .collect();
            synthesize_union_features(&proposals, &idx)?
                .into_iter()
                .zip(idx)
                .map(|(union_feature, (subject_index, object_index))| PairFeature {
                    subject_index,
                    object_index,
                    union_feature,
                })
                .collect()
        } else {
            Vec::new()
        };
        let scene = Scene {
            proposals,
            pairs,
            annotation,
        };
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Writes `scene_NNNN.sgs` files plus `manifest.txt` into `dir`; returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let name = PathBuf::from(format!("scene_{i:04}.sgs"));
        save_scene_file(dir.join(&name), s)?;
        names.push(name);
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &names)?;
    Ok(manifest)
}
