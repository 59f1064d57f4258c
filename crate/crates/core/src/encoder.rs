//! Object communication (BiGRU) and the transformer encoder stacks.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Parameter names of one gated recurrent unit.
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

/// A GRU cell's parameters bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruCellParams {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for gate in ["z", "r", "h"] {
            store.insert_uniform(
                self.name(&format!("w_{gate}")),
                &[self.input, self.hidden],
                self.input,
                rng,
            )?;
            store.insert_uniform(
                self.name(&format!("u_{gate}")),
                &[self.hidden, self.hidden],
                self.hidden,
                rng,
            )?;
            store.insert_uniform(self.name(&format!("b_{gate}")), &[self.hidden], self.hidden, rng)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<GruVars> {
        let mut p = |leaf: &str| tape.param(store, &self.name(leaf));
        Ok(GruVars {
            w_z: p("w_z")?,
            w_r: p("w_r")?,
            w_h: p("w_h")?,
            u_z: p("u_z")?,
            u_r: p("u_r")?,
            u_h: p("u_h")?,
            b_z: p("b_z")?,
            b_r: p("b_r")?,
            b_h: p("b_h")?,
        })
    }
}

/// One recurrence step for row vectors `x: [1,input]`, `h: [1,hidden]`.
pub fn gru_step(tape: &mut Tape, cell: &GruVars, x: Var, h: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, w: Var, hidden: Var, u: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(hidden, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, b)
    };
    let z_pre = gate(tape, cell.w_z, h, cell.u_z, cell.b_z)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, cell.w_r, h, cell.u_r, cell.b_r)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, cell.w_h, rh, cell.u_h, cell.b_h)?;
    let cand = tape.tanh(cand_pre)?;
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Runs both directions over the rows of `x: [n,input]` from zero initial
/// states. Row `i` of the result is `[forward_i | backward_i]`.
pub fn bigru_layer(tape: &mut Tape, fwd: &GruVars, bwd: &GruVars, x: Var) -> Result<Var> {
    let (n, _) = tape.value(x).dims2("bigru")?;
    let hidden = tape.value(fwd.u_z).dims2("bigru")?.0;
    let zero = tape.constant(Tensor::zeros(&[1, hidden]))?;
    let rows: Vec<Var> = (0..n).map(|i| tape.gather_rows(x, &[i])).collect::<Result<_>>()?;

    let mut forward = Vec::with_capacity(n);
    let mut h = zero;
    for &row in &rows {
        h = gru_step(tape, fwd, row, h)?;
        forward.push(h);
    }
    let mut backward = vec![zero; n];
    let mut h = zero;
    for i in (0..n).rev() {
        h = gru_step(tape, bwd, rows[i], h)?;
        backward[i] = h;
    }
    let f = tape.concat(&forward, 0)?;
    let b = tape.concat(&backward, 0)?;
    tape.concat(&[f, b], 1)
}

/// Stacked bidirectional GRU. Layer 0 reads the model input; each further
/// layer reads the previous `2·hidden` output through its own projection.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGruLayer {
    pub hidden: usize,
    pub num_layers: usize,
}

impl BiGruLayer {
    fn prefix(layer: usize) -> String {
        if layer == 0 {
            "bigru".to_owned()
        } else {
            format!("bigru.layer{layer}")
        }
    }

    pub fn cells(&self, layer: usize) -> (GruCellParams, GruCellParams) {
        let p = Self::prefix(layer);
        (
            GruCellParams::new(format!("{p}.fwd"), self.hidden, self.hidden),
            GruCellParams::new(format!("{p}.bwd"), self.hidden, self.hidden),
        )
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for layer in 0..self.num_layers {
            if layer > 0 {
                let name = format!("{}.proj", Self::prefix(layer));
                store.insert_uniform(name, &[2 * self.hidden, self.hidden], 2 * self.hidden, rng)?;
            }
            let (f, b) = self.cells(layer);
            f.register(store, rng)?;
            b.register(store, rng)?;
        }
        Ok(())
    }

    /// `x: [n,hidden]` to `[n, 2·hidden]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut input = x;
        let mut out = x;
        for layer in 0..self.num_layers {
            if layer > 0 {
                let w = tape.param(store, &format!("{}.proj", Self::prefix(layer)))?;
                input = tape.matmul(out, w)?;
            }
            let (f, b) = self.cells(layer);
            let fv = f.bind(tape, store)?;
            let bv = b.bind(tape, store)?;
            out = bigru_layer(tape, &fv, &bv, input)?;
        }
        Ok(out)
    }
}

/// Names and sizes of one transformer encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub prefix: String,
    pub d_model: usize,
    pub d_k: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl EncoderBlock {
    pub fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn head_name(&self, head: usize, which: &str) -> String {
        format!("{}.head{head}.{which}", self.prefix)
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for h in 0..self.heads {
            for which in ["q", "k", "v"] {
                store.insert_uniform(self.head_name(h, which), &[self.d_model, self.d_k], self.d_model, rng)?;
            }
        }
        let concat = self.heads * self.d_k;
        store.insert_uniform(self.name("proj"), &[concat, self.d_model], concat, rng)?;
        for ln in ["ln1", "ln2"] {
            store.insert(self.name(&format!("{ln}.gain")), Tensor::ones(&[self.d_model]))?;
            store.insert(self.name(&format!("{ln}.bias")), Tensor::zeros(&[self.d_model]))?;
        }
        store.insert_uniform(self.name("ffn1.w"), &[self.d_model, self.ffn_dim], self.d_model, rng)?;
        store.insert_uniform(self.name("ffn1.b"), &[self.ffn_dim], self.d_model, rng)?;
        store.insert_uniform(self.name("ffn2.w"), &[self.ffn_dim, self.d_model], self.ffn_dim, rng)?;
        store.insert_uniform(self.name("ffn2.b"), &[self.d_model], self.ffn_dim, rng)?;
        Ok(())
    }
}

/// Multi-head scaled dot-product self-attention over the rows of `x: [n,d_model]`.
///
/// Returns the projected output and each head's `[n,n]` attention matrix.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &EncoderBlock,
    x: Var,
) -> Result<(Var, Vec<Var>)> {
    let inv_sqrt_dk = 1.0 / (block.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(block.heads);
    let mut attention = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let wq = tape.param(store, &block.head_name(h, "q"))?;
        let wk = tape.param(store, &block.head_name(h, "k"))?;
        let wv = tape.param(store, &block.head_name(h, "v"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, inv_sqrt_dk)?;
        let weights = tape.softmax(scores)?;
        attention.push(weights);
        heads.push(tape.matmul(weights, v)?);
    }
    let z = tape.concat(&heads, 1)?;
    let proj = tape.param(store, &block.name("proj"))?;
    Ok((tape.matmul(z, proj)?, attention))
}

/// `Y = LN(X + MHA(X))`, then `LN(Y + W2·relu(W1·Y + b1) + b2)`.
pub fn encoder_block(tape: &mut Tape, store: &ParamStore, block: &EncoderBlock, x: Var) -> Result<(Var, Vec<Var>)> {
    let (attn, weights) = multi_head_attention(tape, store, block, x)?;
    let res = tape.add(x, attn)?;
    let g1 = tape.param(store, &block.name("ln1.gain"))?;
    let b1 = tape.param(store, &block.name("ln1.bias"))?;
    let y = tape.layer_norm(res, g1, b1)?;

    let w1 = tape.param(store, &block.name("ffn1.w"))?;
    let c1 = tape.param(store, &block.name("ffn1.b"))?;
    let w2 = tape.param(store, &block.name("ffn2.w"))?;
    let c2 = tape.param(store, &block.name("ffn2.b"))?;
    let hidden = tape.matmul(y, w1)?;
    let hidden = tape.add_row(hidden, c1)?;
    let hidden = tape.relu(hidden)?;
    let ff = tape.matmul(hidden, w2)?;
    let ff = tape.add_row(ff, c2)?;
    let res = tape.add(y, ff)?;
    let g2 = tape.param(store, &block.name("ln2.gain"))?;
    let b2 = tape.param(store, &block.name("ln2.bias"))?;
    Ok((tape.layer_norm(res, g2, b2)?, weights))
}

/// Blocks applied in sequence; no positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn new(prefix: &str, depth: usize, d_model: usize, d_k: usize, heads: usize, ffn_dim: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| EncoderBlock {
                prefix: format!("{prefix}.block{i}"),
                d_model,
                d_k,
                heads,
                ffn_dim,
            })
            .collect();
        Self { blocks }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.register(store, rng))
    }

    /// Output rows plus every block's per-head attention matrices.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut all = Vec::new();
        for block in &self.blocks {
            let (out, weights) = encoder_block(tape, store, block, h)?;
            h = out;
            all.extend(weights);
        }
        Ok((h, all))
    }
}

/// Linear map of the concatenated BiGRU states back to model width.
pub fn post_gru_projection(tape: &mut Tape, o_hat: Var, w: Var) -> Result<Var> {
    tape.matmul(o_hat, w)
}

/// Object-context rows, class logits, class distributions, and attention
/// matrices of the object encoder.
#[derive(Debug, Clone)]
pub struct ObjectContext {
    pub z: Var,
    pub logits: Var,
    pub dist: Var,
    pub attention: Vec<Var>,
}

/// `Z6 = stack(X)`; class distribution rows are `softmax(Z6 · W_o)`.
pub fn object_transformer(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &EncoderStack,
    x: Var,
    w_o: Var,
) -> Result<ObjectContext> {
    let (z, attention) = stack.forward(tape, store, x)?;
    let logits = tape.matmul(z, w_o)?;
    let dist = tape.softmax(logits)?;
    Ok(ObjectContext {
        z,
        logits,
        dist,
        attention,
    })
}

/// Edge rows `E = stack(Z6)` from a second, independent stack.
pub fn edge_transformer(tape: &mut Tape, store: &ParamStore, stack: &EncoderStack, z6: Var) -> Result<(Var, Vec<Var>)> {
    stack.forward(tape, store, z6)
}
