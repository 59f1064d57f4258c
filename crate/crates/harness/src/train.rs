//! Losses, the optimizer, the plateau schedule, and the training loop.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scenegraph_core::metrics::{recall_at_k, EvalConfig, EvalScene, Protocol};
use scenegraph_core::scene::{Scene, NO_RELATION};
use scenegraph_core::{
    Error, FrequencyPrior, Gradients, ModelInput, ParamStore, PriorIndexing, Result, SceneGraphModel, Tape, Var,
};

use crate::config::TrainConfig;
use crate::protocol::{all_pairs, model_input, protocol_objects, run_protocol};

/// One scene prepared for a training step.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: ModelInput,
    pub object_targets: Vec<usize>,
    /// Target predicate per entry of `input.pairs`; 0 for sampled negatives.
    pub pair_targets: Vec<usize>,
}

/// Positive pairs plus up to `negative_ratio` sampled unrelated pairs per
/// positive (at least `negative_ratio` when the scene has no relations).
/// Returns `None` for scenes without ground-truth objects.
pub fn training_sample<R: Rng>(
    scene: &Scene,
    protocol: Protocol,
    negative_ratio: usize,
    rng: &mut R,
) -> Result<Option<TrainSample>> {
    let objs = protocol_objects(scene, protocol, false)?;
    if objs.is_empty() {
        return Ok(None);
    }
    let gt = &scene.annotation;
    let mut pairs: Vec<(usize, usize)> = gt.gt_triplets.iter().map(|t| (t.subject, t.object)).collect();
    let mut pair_targets: Vec<usize> = gt.gt_triplets.iter().map(|t| t.predicate).collect();
    let negatives: Vec<(usize, usize)> = all_pairs(objs.len())
        .into_iter()
        .filter(|p| !pairs.contains(p))
        .collect();
    let want = (negative_ratio * pairs.len().max(1)).min(negatives.len());
    let mut picked = sample(rng, negatives.len(), want).into_vec();
    picked.sort_unstable();
    for i in picked {
        pairs.push(negatives[i]);
        pair_targets.push(NO_RELATION);
    }
    let input = model_input(scene, &objs, pairs, true)?;
    Ok(Some(TrainSample {
        input,
        object_targets: gt.gt_labels.clone(),
        pair_targets,
    }))
}

/// Mean cross-entropy of the object logits plus mean cross-entropy of the
/// relation scores (pre-softmax); pairs are skipped when there are none.
pub fn cross_entropy_terms(
    tape: &mut Tape,
    object_logits: Var,
    object_targets: &[usize],
    relation_scores: Option<Var>,
    pair_targets: &[usize],
) -> Result<Var> {
    let lo = tape.log_softmax(object_logits)?;
    let po = tape.pick(lo, object_targets)?;
    let obj = tape.mean(po)?;
    let total = match relation_scores {
        Some(r) if !pair_targets.is_empty() => {
            let lr = tape.log_softmax(r)?;
            let pr = tape.pick(lr, pair_targets)?;
            let rel = tape.mean(pr)?;
            tape.add(obj, rel)?
        }
        _ => obj,
    };
    let loss = tape.scale(total, -1.0)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok(loss)
}

/// Records the full forward pass and the loss of one sample on `tape`.
pub fn sample_loss(
    tape: &mut Tape,
    model: &SceneGraphModel,
    store: &ParamStore,
    prior: Option<&FrequencyPrior>,
    sample: &TrainSample,
) -> Result<Var> {
    let out = model.forward(tape, store, &sample.input, prior, PriorIndexing::Given)?;
    cross_entropy_terms(
        tape,
        out.object_logits,
        &sample.object_targets,
        out.relation.map(|r| r.adjusted),
        &sample.pair_targets,
    )
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

/// `v ← momentum·v − lr·g; θ ← θ + v` for every parameter in name order,
/// using the gradients held in `store`. Nothing is updated if any gradient is
/// non-finite.
pub fn sgd_step(store: &mut ParamStore, state: &mut SgdState, lr: f64, momentum: f64) -> Result<()> {
    for (name, _, g) in store.iter_mut() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite gradient in `{name}`")));
        }
    }
    for (name, value, g) in store.iter_mut() {
        let v = state
            .velocity
            .entry(name.to_owned())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((theta, vel), grad) in value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = momentum * *vel - lr * grad;
            *theta += *vel;
        }
    }
    Ok(())
}

/// Divides the learning rate after `patience` evaluations without a new best,
/// at most `max_decays` times.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    max_decays: usize,
    best: Option<f64>,
    stale: usize,
    decays: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, max_decays: usize) -> Self {
        Self {
            lr,
            factor,
            patience,
            max_decays,
            best: None,
            stale: 0,
            decays: 0,
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.learning_rate, c.lr_decay_factor, c.plateau_patience, c.max_decays)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Feeds one validation value and returns the learning rate to use next.
    pub fn observe(&mut self, value: f64) -> f64 {
        match self.best {
            Some(b) if value <= b => {
                self.stale += 1;
                if self.stale >= self.patience && self.decays < self.max_decays {
                    self.lr /= self.factor;
                    self.decays += 1;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(value);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// PredCls R@20 with graph constraint, as a percentage.
pub fn validation_recall(
    model: &SceneGraphModel,
    store: &ParamStore,
    prior: Option<&FrequencyPrior>,
    scenes: &[Scene],
) -> Result<f64> {
    let preds = run_protocol(model, store, prior, scenes, Protocol::PredCls, true)?;
    let eval: Vec<EvalScene> = scenes
        .iter()
        .zip(&preds)
        .map(|(s, p)| EvalScene::from_predictions(s.annotation.clone(), p, true))
        .collect();
    recall_at_k(&eval, &EvalConfig::new(Protocol::PredCls, 20))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Validation R@20 when this iteration ran a validation round.
    pub validation: Option<f64>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SceneGraphModel,
    pub store: ParamStore,
    pub prior: Option<FrequencyPrior>,
    pub sgd: SgdState,
    pub scheduler: PlateauScheduler,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub log: Vec<LogEntry>,
}

impl Trainer {
    /// Fresh parameters from `config.seed`; the prior is built from `train`.
    pub fn new(config: TrainConfig, train: &[Scene]) -> Result<Self> {
        config.validate()?;
        let model = SceneGraphModel::new(config.model_config())?;
        let store = model.init_params(config.seed)?;
        let prior = if config.fs_ba {
            Some(FrequencyPrior::build(train.iter().map(|s| &s.annotation))?)
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            scheduler: PlateauScheduler::from_config(&config),
            model,
            store,
            prior,
            sgd: SgdState::default(),
            iteration: 0,
            rng,
            log: Vec::new(),
            config,
        })
    }

    /// One optimizer step on a batch drawn uniformly with replacement.
    pub fn step(&mut self, train: &[Scene]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Invalid("no training scenes".into()));
        }
        let mut grads = Gradients::default();
        let mut total = 0.0;
        let mut used = 0usize;
        for _ in 0..self.config.batch_size {
            let scene = &train[self.rng.random_range(0..train.len())];
            let Some(sample) = training_sample(scene, self.config.protocol, self.config.negative_ratio, &mut self.rng)?
            else {
                continue;
            };
            let mut tape = Tape::new();
            let loss = sample_loss(&mut tape, &self.model, &self.store, self.prior.as_ref(), &sample)?;
            total += tape.value(loss).data()[0];
            grads.merge(tape.backward(loss)?);
            used += 1;
        }
        self.iteration += 1;
        if used == 0 {
            return Ok(0.0);
        }
        self.store.zero_grad();
        self.store.accumulate(&grads, 1.0 / used as f64)?;
        sgd_step(
            &mut self.store,
            &mut self.sgd,
            self.scheduler.lr(),
            self.config.momentum,
        )?;
        Ok(total / used as f64)
    }

    /// Runs until `max_iterations`, validating every `eval_interval` steps
    /// when `val` is non-empty.
    pub fn run(&mut self, train: &[Scene], val: &[Scene], mut progress: impl FnMut(&LogEntry)) -> Result<()> {
        while self.iteration < self.config.max_iterations {
            let lr = self.scheduler.lr();
            let loss = self.step(train)?;
            let validate = !val.is_empty()
                && self.config.eval_interval > 0
                && (self.iteration.is_multiple_of(self.config.eval_interval)
                    || self.iteration == self.config.max_iterations);
            let validation = if validate {
                let r = validation_recall(&self.model, &self.store, self.prior.as_ref(), val)?;
                self.scheduler.observe(r);
                Some(r)
            } else {
                None
            };
            let entry = LogEntry {
                iteration: self.iteration,
                loss,
                lr,
                validation,
            };
            progress(&entry);
            self.log.push(entry);
        }
        Ok(())
    }
}
