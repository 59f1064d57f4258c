//! Empirical subject/object → predicate distribution and its softened form.
//!
//! Softening applies `log_softmax` to each per-pair probability slice. The
//! result depends only on the training annotations, never on the scene being
//! scored. The relation head later scales a softened slice by a learned,
//! pair-specific gate.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scene::{SceneAnnotation, NUM_OBJECT_CLASSES, NUM_PREDICATES};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPrior {
    counts: Tensor,
    probabilities: Option<Tensor>,
    softened: Option<Tensor>,
}

impl FrequencyPrior {
    fn shape() -> [usize; 3] {
        [NUM_OBJECT_CLASSES, NUM_OBJECT_CLASSES, NUM_PREDICATES]
    }

    fn offset(subject: usize, object: usize) -> usize {
        (subject * NUM_OBJECT_CLASSES + object) * NUM_PREDICATES
    }

    /// Counts every ground-truth triplet once under its (subject, object) class pair.
    pub fn count_from_annotations<'a>(scenes: impl IntoIterator<Item = &'a SceneAnnotation>) -> Self {
        let mut counts = vec![0.0; NUM_OBJECT_CLASSES * NUM_OBJECT_CLASSES * NUM_PREDICATES];
        for scene in scenes {
            for t in &scene.gt_triplets {
                let (s, p, o) = scene.label_triple(t);
                counts[Self::offset(s, o) + p] += 1.0;
            }
        }
        Self {
            counts: Tensor::from_parts(Self::shape().to_vec(), counts),
            probabilities: None,
            softened: None,
        }
    }

    /// Count, normalize, and soften in one go.
    pub fn build<'a>(scenes: impl IntoIterator<Item = &'a SceneAnnotation>) -> Result<Self> {
        Self::count_from_annotations(scenes).to_probabilities().soften()
    }

    /// Normalizes each pair slice; pairs never observed become uniform.
    pub fn to_probabilities(mut self) -> Self {
        let mut probs = self.counts.data().to_vec();
        for slice in probs.chunks_mut(NUM_PREDICATES) {
            let total: f64 = slice.iter().sum();
            if total > 0.0 {
                slice.iter_mut().for_each(|c| *c /= total);
            } else {
                slice.iter_mut().for_each(|c| *c = 1.0 / NUM_PREDICATES as f64);
            }
        }
        self.probabilities = Some(Tensor::from_parts(Self::shape().to_vec(), probs));
        self.softened = None;
        self
    }

    /// Applies `log_softmax` to every pair slice of the probabilities.
    pub fn soften(mut self) -> Result<Self> {
        let probs = self
            .probabilities
            .as_ref()
            .ok_or_else(|| Error::invalid("soften requires probabilities"))?;
        self.softened = Some(tensor::log_softmax(probs)?);
        Ok(self)
    }

    /// Rebuilds a prior from persisted tensors, checking the softened invariant.
    pub fn from_tensors(counts: Tensor, probabilities: Tensor, softened: Tensor) -> Result<Self> {
        for t in [&counts, &probabilities, &softened] {
            if t.shape() != Self::shape() {
                return Err(Error::shape("frequency prior", format!("{:?}", t.shape())));
            }
        }
        let expected = tensor::log_softmax(&probabilities)?;
        if expected.max_abs_diff(&softened) > 1e-12 {
            return Err(Error::invalid("softened tensor disagrees with probabilities"));
        }
        Ok(Self {
            counts,
            probabilities: Some(probabilities),
            softened: Some(softened),
        })
    }

    pub fn counts(&self) -> &Tensor {
        &self.counts
    }

    pub fn probabilities(&self) -> Option<&Tensor> {
        self.probabilities.as_ref()
    }

    pub fn softened(&self) -> Option<&Tensor> {
        self.softened.as_ref()
    }

    pub fn count_slice(&self, subject: usize, object: usize) -> &[f64] {
        let o = Self::offset(subject, object);
        &self.counts.data()[o..o + NUM_PREDICATES]
    }

    pub fn probability_slice(&self, subject: usize, object: usize) -> Option<&[f64]> {
        let o = Self::offset(subject, object);
        self.probabilities.as_ref().map(|p| &p.data()[o..o + NUM_PREDICATES])
    }

    pub fn softened_slice(&self, subject: usize, object: usize) -> Option<&[f64]> {
        let o = Self::offset(subject, object);
        self.softened.as_ref().map(|p| &p.data()[o..o + NUM_PREDICATES])
    }

    pub fn total_count(&self) -> f64 {
        self.counts.data().iter().sum()
    }

    /// `(predicate, probability)` of the `k` most likely predicates, ties by index.
    pub fn top_predicates(&self, subject: usize, object: usize, k: usize) -> Vec<(usize, f64)> {
        let Some(slice) = self.probability_slice(subject, object) else {
            return Vec::new();
        };
        let mut ranked: Vec<(usize, f64)> = slice.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    /// Plain-text table of the top-5 predicates for each requested class pair.
    pub fn summary(&self, pairs: &[(usize, usize)], predicate_names: &[String]) -> String {
        let mut out = String::new();
        for &(s, o) in pairs {
            let total: f64 = self.count_slice(s, o).iter().sum();
            let _ = writeln!(out, "pair {s} -> {o} ({total} observations)");
            for (p, prob) in self.top_predicates(s, o, 5) {
                let name = predicate_names.get(p).map_or("?", String::as_str);
                let _ = writeln!(out, "  {p:>3} {name:<24} {prob:.6}");
            }
        }
        out
    }
}
