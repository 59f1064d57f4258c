//! The assembled scene-graph model: input projection, BiGRU object
//! communication, object and edge encoders, and the relation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::encoder::{edge_transformer, object_transformer, post_gru_projection, BiGruLayer, EncoderStack};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::prior::FrequencyPrior;
use crate::relation::{RelationHead, RelationOutput};
use crate::scene::{NUM_OBJECT_CLASSES, NUM_PREDICATES, UNION_DIM, VISUAL_DIM};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_blocks: usize,
    pub rel_dim: usize,
    pub bigru_layers: usize,
    pub use_bigru: bool,
    pub use_transformer: bool,
    pub use_fs_ba: bool,
}

impl ModelConfig {
    /// Full-width model: 512-d objects, 8 heads of 64, 2048-d FFN and pair space.
    pub fn full() -> Self {
        Self {
            d_model: 512,
            d_k: 64,
            heads: 8,
            ffn_dim: 2048,
            num_blocks: 6,
            rel_dim: 2048,
            bigru_layers: 1,
            use_bigru: true,
            use_transformer: true,
            use_fs_ba: true,
        }
    }

    /// Narrow widths with the same depth and head layout; trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            ffn_dim: 128,
            rel_dim: 128,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("num_blocks", self.num_blocks),
            ("rel_dim", self.rel_dim),
            ("bigru_layers", self.bigru_layers),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// How the prior slice for a pair is looked up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorIndexing {
    /// Use the labels supplied with the input (training, PredCls).
    Given,
    /// Use the model's own object predictions (SGCls, SGDet).
    Predicted,
}

/// One scene as seen by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[n, VISUAL_DIM]` assembled proposal features.
    pub features: Tensor,
    /// Detector confidences, used only for the recurrent ordering.
    pub confidences: Vec<f64>,
    /// Ordered (subject, object) pairs to classify.
    pub pairs: Vec<(usize, usize)>,
    /// `[m, UNION_DIM]` union features, one row per pair; `None` iff no pairs.
    pub union_features: Option<Tensor>,
    /// Known object labels, if any.
    pub labels: Option<Vec<usize>>,
}

impl ModelInput {
    pub fn num_objects(&self) -> usize {
        self.features.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.features.dims2("model input")?;
        if d != VISUAL_DIM {
            return Err(Error::shape(
                "model input",
                format!("feature width {d}, expected {VISUAL_DIM}"),
            ));
        }
        if self.confidences.len() != n {
            return Err(Error::shape(
                "model input",
                format!("{} confidences for {n} objects", self.confidences.len()),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n || labels.iter().any(|&l| l >= NUM_OBJECT_CLASSES) {
                return Err(Error::invalid("labels do not match objects"));
            }
        }
        if self.pairs.iter().any(|&(s, o)| s >= n || o >= n || s == o) {
            return Err(Error::invalid("pair references a missing object or itself"));
        }
        match (&self.union_features, self.pairs.is_empty()) {
            (None, true) => Ok(()),
            (Some(u), false) if u.shape() == [self.pairs.len(), UNION_DIM] => Ok(()),
            _ => Err(Error::shape("model input", "union features must have one row per pair")),
        }
    }
}

/// Tape handles and host-side summaries of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub object_logits: Var,
    pub object_dist: Var,
    pub z6: Var,
    pub edges: Var,
    pub attention: Vec<Var>,
    pub relation: Option<RelationOutput>,
    /// Labels used to index the prior (given or predicted).
    pub prior_labels: Vec<usize>,
}

/// Descending confidence, ties by ascending index.
pub fn canonical_order(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order
}

/// Most probable foreground class of each row of `[n,151]` class scores.
pub fn predicted_labels(dist: &Tensor) -> Vec<usize> {
    (0..dist.rows())
        .map(|i| {
            let row = dist.row(i);
            let mut best = 1;
            for c in 2..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphModel {
    pub config: ModelConfig,
    bigru: BiGruLayer,
    obj_enc: EncoderStack,
    edge_enc: EncoderStack,
    head: RelationHead,
}

impl SceneGraphModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        Ok(Self {
            bigru: BiGruLayer {
                hidden: c.d_model,
                num_layers: c.bigru_layers,
            },
            obj_enc: EncoderStack::new("obj_enc", c.num_blocks, c.d_model, c.d_k, c.heads, c.ffn_dim),
            edge_enc: EncoderStack::new("edge_enc", c.num_blocks, c.d_model, c.d_k, c.heads, c.ffn_dim),
            head: RelationHead {
                input_dim: 2 * c.d_model,
                rel_dim: c.rel_dim,
            },
            config,
        })
    }

    pub fn object_encoder(&self) -> &EncoderStack {
        &self.obj_enc
    }

    pub fn edge_encoder(&self) -> &EncoderStack {
        &self.edge_enc
    }

    /// Every parameter, uniform in `±1/√fan_in` from a ChaCha8 stream seeded
    /// with `seed`; layer-norm gains start at one and shifts at zero.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = self.config.d_model;
        store.insert_uniform("proj_in", &[VISUAL_DIM, d], VISUAL_DIM, &mut rng)?;
        self.bigru.register(&mut store, &mut rng)?;
        store.insert_uniform("proj_gru", &[2 * d, d], 2 * d, &mut rng)?;
        self.obj_enc.register(&mut store, &mut rng)?;
        store.insert_uniform("w_o", &[d, NUM_OBJECT_CLASSES], d, &mut rng)?;
        self.edge_enc.register(&mut store, &mut rng)?;
        self.head.register(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Object rows after projection and (optionally) the recurrent pass, in
    /// input order.
    fn object_rows(&self, tape: &mut Tape, store: &ParamStore, input: &ModelInput) -> Result<Var> {
        let features = tape.constant(input.features.clone())?;
        let proj_in = tape.param(store, "proj_in")?;
        let x = tape.matmul(features, proj_in)?;
        if !self.config.use_bigru {
            return Ok(x);
        }
        let order = canonical_order(&input.confidences);
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let sorted = tape.gather_rows(x, &order)?;
        let o_hat = self.bigru.forward(tape, store, sorted)?;
        let o_hat = tape.gather_rows(o_hat, &inverse)?;
        let w = tape.param(store, "proj_gru")?;
        post_gru_projection(tape, o_hat, w)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &ModelInput,
        prior: Option<&FrequencyPrior>,
        indexing: PriorIndexing,
    ) -> Result<ForwardPass> {
        input.validate()?;
        let x = self.object_rows(tape, store, input)?;
        let w_o = tape.param(store, "w_o")?;
        let (z6, object_logits, object_dist, edges, attention) = if self.config.use_transformer {
            let ctx = object_transformer(tape, store, &self.obj_enc, x, w_o)?;
            let (edges, edge_attn) = edge_transformer(tape, store, &self.edge_enc, ctx.z)?;
            let mut attention = ctx.attention;
            attention.extend(edge_attn);
            (ctx.z, ctx.logits, ctx.dist, edges, attention)
        } else {
            let logits = tape.matmul(x, w_o)?;
            let dist = tape.softmax(logits)?;
            (x, logits, dist, x, Vec::new())
        };

        let prior_labels = match (indexing, &input.labels) {
            (PriorIndexing::Given, Some(labels)) => labels.clone(),
            (PriorIndexing::Given, None) => return Err(Error::invalid("given prior indexing needs labels")),
            (PriorIndexing::Predicted, _) => predicted_labels(tape.value(object_dist)),
        };

        let relation = match &input.union_features {
            None => None,
            Some(union) => {
                let softened = if self.config.use_fs_ba {
                    let prior = prior.ok_or_else(|| Error::invalid("bias adaptation enabled without a prior"))?;
                    let mut rows = Vec::with_capacity(input.pairs.len() * NUM_PREDICATES);
                    for &(s, o) in &input.pairs {
                        let slice = prior
                            .softened_slice(prior_labels[s], prior_labels[o])
                            .ok_or_else(|| Error::invalid("prior has not been softened"))?;
                        rows.extend_from_slice(slice);
                    }
                    Some(Tensor::new(vec![input.pairs.len(), NUM_PREDICATES], rows)?)
                } else {
                    None
                };
                let objects = tape.concat(&[z6, edges], 1)?;
                let u = tape.constant(union.clone())?;
                Some(self.head.forward(tape, store, objects, &input.pairs, u, softened)?)
            }
        };

        Ok(ForwardPass {
            object_logits,
            object_dist,
            z6,
            edges,
            attention,
            relation,
            prior_labels,
        })
    }
}
