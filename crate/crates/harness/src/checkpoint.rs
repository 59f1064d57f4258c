//! Binary checkpoints and prior files.
//!
//! ```text
//! header    magic[4] | version u32
//! config    len u32 | utf-8 key = value text
//! progress  iteration u64 | rng seed [32] | rng stream u64 | rng word pos u128
//! params    count u32 | tensor records
//! prior     count u32 (0 or 3) | tensor records
//! record    name len u32 | name | rank u32 | dims u64 * rank | f64 * numel
//! ```
//!
//! Everything is little-endian and values keep all 64 bits, so a load
//! reproduces the saved tensors bit for bit. A prior file is the same layout
//! with its own magic and only the prior section.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenegraph_core::{Error, FrequencyPrior, ParamStore, Result, SceneGraphModel, Tensor};

use crate::config::TrainConfig;
use crate::train::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const PRIOR_MAGIC: &[u8; 4] = b"SGPR";
pub const CHECKPOINT_VERSION: u32 = 1;

const PRIOR_NAMES: [&str; 3] = ["prior.counts", "prior.probabilities", "prior.softened"];

/// Serializable position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub prior: Option<FrequencyPrior>,
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl PartialEq for Checkpoint {
    /// Bitwise on every tensor; gradients are not part of a checkpoint.
    fn eq(&self, other: &Self) -> bool {
        let params = self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((na, a), (nb, b))| na == nb && same_bits(a, b));
        let prior = match (&self.prior, &other.prior) {
            (None, None) => true,
            (Some(a), Some(b)) => prior_tensors(a)
                .iter()
                .zip(prior_tensors(b))
                .all(|(x, y)| same_bits(x, y)),
            _ => false,
        };
        self.config == other.config && self.iteration == other.iteration && self.rng == other.rng && params && prior
    }
}

fn prior_tensors(p: &FrequencyPrior) -> Vec<&Tensor> {
    [Some(p.counts()), p.probabilities(), p.softened()]
        .into_iter()
        .flatten()
        .collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn prior(&mut self, prior: Option<&FrequencyPrior>) -> Result<()> {
        match prior {
            None => self.u32(0),
            Some(p) => {
                let ts = prior_tensors(p);
                if ts.len() != 3 {
                    return Err(Error::Invalid("only a softened prior can be saved".into()));
                }
                self.u32(3);
                for (name, t) in PRIOR_NAMES.iter().zip(ts) {
                    self.tensor(name, t);
                }
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let start = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            message: "invalid utf-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.fail(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos) => n,
            _ => return Err(self.fail(format!("tensor `{name}` runs past the end"))),
        };
        let data = self
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            self.pos = 0;
            return Err(self.fail(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let version = self.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(self.fail(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn prior(&mut self) -> Result<Option<FrequencyPrior>> {
        match self.u32()? {
            0 => Ok(None),
            3 => {
                let mut ts = Vec::with_capacity(3);
                for expected in PRIOR_NAMES {
                    let at = self.pos;
                    let (name, t) = self.tensor()?;
                    if name != expected {
                        return Err(Error::Format {
                            offset: at as u64,
                            message: format!("expected `{expected}`, found `{name}`"),
                        });
                    }
                    ts.push(t);
                }
                let softened = ts.pop().expect("three tensors");
                let probabilities = ts.pop().expect("three tensors");
                let counts = ts.pop().expect("three tensors");
                Ok(Some(FrequencyPrior::from_tensors(counts, probabilities, softened)?))
            }
            n => Err(self.fail(format!("prior section with {n} tensors"))),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail("trailing bytes"));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(self.config.to_text().as_bytes());
        w.u64(self.iteration);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.tensor(name, t);
        }
        w.prior(self.prior.as_ref())?;
        Ok(w.0)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.header(CHECKPOINT_MAGIC)?;
        let config_at = r.pos;
        let text = r.string()?;
        let config = TrainConfig::parse(&text, Path::new("<checkpoint>")).map_err(|e| Error::Format {
            offset: config_at as u64,
            message: format!("embedded config: {e}"),
        })?;
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let at = r.pos;
            let (name, t) = r.tensor()?;
            params.insert(name, t).map_err(|e| Error::Format {
                offset: at as u64,
                message: e.to_string(),
            })?;
        }
        let prior = r.prior()?;
        r.finish()?;
        Ok(Self {
            config,
            iteration,
            rng: RngState { seed, stream, word_pos },
            params,
            prior,
        })
    }

    /// Snapshot of a trainer's parameters, prior, and progress.
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            iteration: t.iteration as u64,
            rng: RngState::capture(&t.rng),
            params: t.store.clone(),
            prior: t.prior.clone(),
        }
    }

    /// The model described by the embedded config, checked against the stored parameters.
    pub fn model(&self) -> Result<SceneGraphModel> {
        let model = SceneGraphModel::new(self.config.model_config())?;
        let reference = model.init_params(0)?;
        let names_match = reference.len() == self.params.len()
            && reference
                .iter()
                .zip(self.params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !names_match {
            return Err(Error::Invalid("checkpoint parameters do not match its config".into()));
        }
        if self.config.fs_ba && self.prior.is_none() {
            return Err(Error::Invalid(
                "checkpoint enables bias adaptation but has no prior".into(),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub fn encode_prior(prior: &FrequencyPrior) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(PRIOR_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.prior(Some(prior))?;
    Ok(w.0)
}

pub fn decode_prior(buf: &[u8]) -> Result<FrequencyPrior> {
    let mut r = Reader { buf, pos: 0 };
    r.header(PRIOR_MAGIC)?;
    let prior = r.prior()?.ok_or_else(|| r.fail("empty prior file"))?;
    r.finish()?;
    Ok(prior)
}

/// Reads the prior from either a prior file or a checkpoint.
pub fn load_prior(path: impl AsRef<Path>) -> Result<FrequencyPrior> {
    let buf = std::fs::read(path)?;
    if buf.starts_with(CHECKPOINT_MAGIC) {
        Checkpoint::decode(&buf)?
            .prior
            .ok_or_else(|| Error::Invalid("checkpoint carries no prior".into()))
    } else {
        decode_prior(&buf)
    }
}
