//! Pair fusion, the adapted frequency bias, and predicate prediction.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scene::{NUM_PREDICATES, UNION_DIM};
use crate::tensor::{self, Tensor};

/// `d = W_p · u` for a single union feature.
pub fn bias_term(w_p: &Tensor, u: &Tensor) -> Result<f64> {
    if w_p.numel() != u.numel() {
        return Err(Error::shape(
            "bias_term",
            format!("{:?} vs {:?}", w_p.shape(), u.shape()),
        ));
    }
    Ok(w_p.data().iter().zip(u.data()).map(|(a, b)| a * b).sum())
}

/// `(x W_x + y W_y) - (x W_x - y W_y) ⊙ (x W_x - y W_y)`, row-wise.
pub fn fuse(tape: &mut Tape, x: Var, y: Var, wx: Var, wy: Var) -> Result<Var> {
    let a = tape.matmul(x, wx)?;
    let b = tape.matmul(y, wy)?;
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    let sum = tape.add(a, b)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    tape.sub(sum, sq)
}

/// `softmax(logits + d·p̃)` for one pair.
pub fn predict_relation(logits: &[f64], d: f64, softened_prior: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != softened_prior.len() {
        return Err(Error::shape(
            "predict_relation",
            format!("{} vs {}", logits.len(), softened_prior.len()),
        ));
    }
    let adjusted: Vec<f64> = logits.iter().zip(softened_prior).map(|(l, p)| l + d * p).collect();
    let t = tensor::softmax(&Tensor::vector(adjusted)?, 0)?;
    Ok(t.into_data())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax_relation(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// Learned relation head. Object rows `o'_i = [z_i | e_i]` are projected to
/// `rel_dim`, fused subject-with-object, then fused with the union feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationHead {
    pub input_dim: usize,
    pub rel_dim: usize,
}

/// Tape handles produced for the pairs of one scene.
#[derive(Debug, Clone, Copy)]
pub struct RelationOutput {
    /// `[m,50]` classifier logits before the prior is added.
    pub logits: Var,
    /// `[m,1]` learned gates, absent when the bias adaptation is disabled.
    pub gate: Option<Var>,
    /// `[m,50]` logits plus gated prior.
    pub adjusted: Var,
    /// `[m,50]` predicate distributions.
    pub dist: Var,
}

impl RelationHead {
    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let r = self.rel_dim;
        store.insert_uniform("pair_proj", &[self.input_dim, r], self.input_dim, rng)?;
        store.insert_uniform("fuse1.wx", &[r, r], r, rng)?;
        store.insert_uniform("fuse1.wy", &[r, r], r, rng)?;
        store.insert_uniform("fuse2.wx", &[r, r], r, rng)?;
        store.insert_uniform("fuse2.wy", &[UNION_DIM, r], UNION_DIM, rng)?;
        store.insert_uniform("w_p", &[UNION_DIM], UNION_DIM, rng)?;
        store.insert_uniform("w_r", &[r, NUM_PREDICATES], r, rng)?;
        Ok(())
    }

    /// Raw logits for `pairs` given object rows `objects: [n,input_dim]` and
    /// union features `union: [m,UNION_DIM]`, one row per pair.
    pub fn pair_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        objects: Var,
        pairs: &[(usize, usize)],
        union: Var,
    ) -> Result<Var> {
        let proj = tape.param(store, "pair_proj")?;
        let reps = tape.matmul(objects, proj)?;
        let subj: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let obj: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let s = tape.gather_rows(reps, &subj)?;
        let o = tape.gather_rows(reps, &obj)?;
        let (wx1, wy1) = (tape.param(store, "fuse1.wx")?, tape.param(store, "fuse1.wy")?);
        let so = fuse(tape, s, o, wx1, wy1)?;
        let (wx2, wy2) = (tape.param(store, "fuse2.wx")?, tape.param(store, "fuse2.wy")?);
        let fused = fuse(tape, so, union, wx2, wy2)?;
        let w_r = tape.param(store, "w_r")?;
        tape.matmul(fused, w_r)
    }

    /// Full head. `softened` holds one softened prior slice per pair, or
    /// `None` to disable the bias adaptation (the gate is then exactly zero).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        objects: Var,
        pairs: &[(usize, usize)],
        union: Var,
        softened: Option<Tensor>,
    ) -> Result<RelationOutput> {
        let logits = self.pair_logits(tape, store, objects, pairs, union)?;
        let (gate, adjusted) = match softened {
            Some(prior) => {
                let w_p = tape.param(store, "w_p")?;
                let w_p = tape.reshape(w_p, &[UNION_DIM, 1])?;
                let d = tape.matmul(union, w_p)?;
                let d_flat = tape.reshape(d, &[pairs.len()])?;
                let prior = tape.constant(prior)?;
                let bias = tape.scale_rows(prior, d_flat)?;
                (Some(d), tape.add(logits, bias)?)
            }
            None => (None, logits),
        };
        let dist = tape.softmax(adjusted)?;
        Ok(RelationOutput {
            logits,
            gate,
            adjusted,
            dist,
        })
    }
}
