//! Flat `key = value` configuration files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use scenegraph_core::metrics::Protocol;
use scenegraph_core::{Error, ModelConfig, Result};

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(parse_error(
                path,
                i + 1,
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let key = key.trim().to_owned();
        if out.iter().any(|e| e.key == key) {
            return Err(parse_error(path, i + 1, format!("duplicate key `{key}`")));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim().to_owned(),
        });
    }
    Ok(out)
}

pub(crate) fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message,
    }
}

pub(crate) fn parse_value<T: FromStr>(entry: &Entry, path: &Path) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry
        .value
        .parse()
        .map_err(|e| parse_error(path, entry.line, format!("`{}`: {e}", entry.key)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub lr_decay_factor: f64,
    /// Validation rounds without improvement before the learning rate decays.
    pub plateau_patience: usize,
    pub max_decays: usize,
    pub seed: u64,
    pub bigru: bool,
    pub transformer: bool,
    pub fs_ba: bool,
    pub heads: usize,
    pub bigru_layers: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub ffn_dim: usize,
    pub num_blocks: usize,
    pub rel_dim: usize,
    /// Sampled no-relation pairs per positive pair.
    pub negative_ratio: usize,
    /// Iterations between validation rounds; 0 disables validation.
    pub eval_interval: usize,
    /// Protocol whose inputs the model sees during training.
    pub protocol: Protocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 6,
            max_iterations: 500,
            lr_decay_factor: 10.0,
            plateau_patience: 3,
            max_decays: 2,
            seed: 0,
            bigru: true,
            transformer: true,
            fs_ba: true,
            heads: m.heads,
            bigru_layers: m.bigru_layers,
            d_model: m.d_model,
            d_k: m.d_k,
            ffn_dim: m.ffn_dim,
            num_blocks: m.num_blocks,
            rel_dim: m.rel_dim,
            negative_ratio: 3,
            eval_interval: 100,
            protocol: Protocol::PredCls,
        }
    }
}

impl TrainConfig {
    /// Full-width model with the full-scale iteration budget.
    pub fn full() -> Self {
        let m = ModelConfig::full();
        Self {
            max_iterations: 18000,
            d_model: m.d_model,
            d_k: m.d_k,
            ffn_dim: m.ffn_dim,
            rel_dim: m.rel_dim,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_k: self.d_k,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            num_blocks: self.num_blocks,
            rel_dim: self.rel_dim,
            bigru_layers: self.bigru_layers,
            use_bigru: self.bigru,
            use_transformer: self.transformer,
            use_fs_ba: self.fs_ba,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_decay_factor > 1.0) {
            return bad(format!("lr_decay_factor {} must exceed 1", self.lr_decay_factor));
        }
        if ![1, 2, 6, 8].contains(&self.heads) {
            return bad(format!("heads {} not in {{1,2,6,8}}", self.heads));
        }
        if ![1, 2, 6].contains(&self.bigru_layers) {
            return bad(format!("bigru_layers {} not in {{1,2,6}}", self.bigru_layers));
        }
        if !matches!(self.protocol, Protocol::PredCls | Protocol::SgCls) {
            return bad(format!("cannot train under {}", self.protocol));
        }
        self.model_config().validate()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = Self::default();
        for e in parse_entries(text, path)? {
            let p = path;
            match e.key.as_str() {
                "learning_rate" => c.learning_rate = parse_value(&e, p)?,
                "momentum" => c.momentum = parse_value(&e, p)?,
                "batch_size" => c.batch_size = parse_value(&e, p)?,
                "max_iterations" => c.max_iterations = parse_value(&e, p)?,
                "lr_decay_factor" => c.lr_decay_factor = parse_value(&e, p)?,
                "plateau_patience" => c.plateau_patience = parse_value(&e, p)?,
                "max_decays" => c.max_decays = parse_value(&e, p)?,
                "seed" => c.seed = parse_value(&e, p)?,
                "bigru" => c.bigru = parse_value(&e, p)?,
                "transformer" => c.transformer = parse_value(&e, p)?,
                "fs_ba" => c.fs_ba = parse_value(&e, p)?,
                "heads" => c.heads = parse_value(&e, p)?,
                "bigru_layers" => c.bigru_layers = parse_value(&e, p)?,
                "d_model" => c.d_model = parse_value(&e, p)?,
                "d_k" => c.d_k = parse_value(&e, p)?,
                "ffn_dim" => c.ffn_dim = parse_value(&e, p)?,
                "num_blocks" => c.num_blocks = parse_value(&e, p)?,
                "rel_dim" => c.rel_dim = parse_value(&e, p)?,
                "negative_ratio" => c.negative_ratio = parse_value(&e, p)?,
                "eval_interval" => c.eval_interval = parse_value(&e, p)?,
                "protocol" => c.protocol = parse_value(&e, p)?,
                other => return Err(parse_error(p, e.line, format!("unknown key `{other}`"))),
            }
        }
        c.validate().map_err(|err| parse_error(path, 0, err.to_string()))?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Every key in a fixed order; `parse(to_text())` restores the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("momentum", format!("{:?}", self.momentum));
        kv("batch_size", self.batch_size.to_string());
        kv("max_iterations", self.max_iterations.to_string());
        kv("lr_decay_factor", format!("{:?}", self.lr_decay_factor));
        kv("plateau_patience", self.plateau_patience.to_string());
        kv("max_decays", self.max_decays.to_string());
        kv("seed", self.seed.to_string());
        kv("bigru", self.bigru.to_string());
        kv("transformer", self.transformer.to_string());
        kv("fs_ba", self.fs_ba.to_string());
        kv("heads", self.heads.to_string());
        kv("bigru_layers", self.bigru_layers.to_string());
        kv("d_model", self.d_model.to_string());
        kv("d_k", self.d_k.to_string());
        kv("ffn_dim", self.ffn_dim.to_string());
        kv("num_blocks", self.num_blocks.to_string());
        kv("rel_dim", self.rel_dim.to_string());
        kv("negative_ratio", self.negative_ratio.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("protocol", self.protocol.to_string());
        s
    }
}
