//! The TGNN network: transition layers, a neighborhood-attention encoder
//! over an item relation graph, a causally masked transformer decoder over
//! the outfit prefix, candidate scoring and the generation loop.

mod forward;
mod generate;

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tensor};
use crate::catalog::GarmentId;
use crate::config::{self, ConfigError};
use crate::graph::GraphError;

pub use forward::{EncoderOutput, Mode, Side};
pub use generate::{argmax, filter_pool, softmax, Choice, Generation};

pub(crate) const NORM_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected a vector of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("garment {0} is not a node of the graph")]
    MissingNode(GarmentId),
    #[error("decoder prefix is empty")]
    EmptyPrefix,
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("candidate {0} appears twice")]
    DuplicateCandidate(Candidate),
    #[error("generation seed is empty")]
    EmptySeed,
    #[error("seed garments {0} and {1} are linked in the item graph")]
    SeedLinked(GarmentId, GarmentId),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
}

/// An entry of a candidate set: a real garment or the end-of-outfit token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Candidate {
    Garment(GarmentId),
    Stop,
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Candidate::Garment(g) => write!(f, "{g}"),
            Candidate::Stop => f.write_str("<stop>"),
        }
    }
}

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TgnnConfig {
    pub d_e: usize,
    pub d_m: usize,
    pub heads: usize,
    pub k_enc: usize,
    pub k_dec: usize,
    /// FFN inner width; `None` means `4 * d_m`.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub max_generation_len: usize,
}

impl Default for TgnnConfig {
    fn default() -> Self {
        TgnnConfig {
            d_e: 128,
            d_m: 256,
            heads: 8,
            k_enc: 4,
            k_dec: 4,
            d_ff: None,
            dropout: 0.35,
            max_generation_len: 19,
        }
    }
}

impl TgnnConfig {
    pub const KEYS: [&'static str; 8] = [
        "d_e",
        "d_m",
        "heads",
        "k_enc",
        "k_dec",
        "d_ff",
        "dropout",
        "max_generation_len",
    ];

    pub fn ff_dim(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_e == 0 || self.d_m == 0 || self.heads == 0 || self.ff_dim() == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.d_m % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_m = {} is not divisible by {} heads",
                self.d_m, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Applies one config entry. Returns `false` for keys this config does
    /// not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "d_e" => self.d_e = config::parse_value(key, value)?,
            "d_m" => self.d_m = config::parse_value(key, value)?,
            "heads" => self.heads = config::parse_value(key, value)?,
            "k_enc" => self.k_enc = config::parse_value(key, value)?,
            "k_dec" => self.k_dec = config::parse_value(key, value)?,
            "d_ff" => self.d_ff = Some(config::parse_value(key, value)?),
            "dropout" => self.dropout = config::parse_value(key, value)?,
            "max_generation_len" => self.max_generation_len = config::parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = TgnnConfig::default();
        for (k, v) in config::parse_key_values(text)? {
            if !cfg.set(&k, &v)? {
                return Err(ConfigError::UnknownKey(k).into());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        config::render([
            ("d_e", config::show(self.d_e)),
            ("d_m", config::show(self.d_m)),
            ("heads", config::show(self.heads)),
            ("k_enc", config::show(self.k_enc)),
            ("k_dec", config::show(self.k_dec)),
            ("d_ff", config::show(self.ff_dim())),
            ("dropout", config::show(self.dropout)),
            ("max_generation_len", config::show(self.max_generation_len)),
        ])
    }

    /// Digest of the fields that determine parameter shapes.
    pub fn hash(&self) -> String {
        let canonical = format!(
            "d_e={};d_m={};heads={};k_enc={};k_dec={};d_ff={}",
            self.d_e,
            self.d_m,
            self.heads,
            self.k_enc,
            self.k_dec,
            self.ff_dim()
        );
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub attn: Attn,
    pub norm1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub self_attn: Attn,
    pub norm1: Norm,
    pub cross_attn: Attn,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm3: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub enc_transition: Linear,
    pub dec_transition: Linear,
    pub stop: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Normal(f64),
}

type Slot<'a> = dyn FnMut(&str, &[usize], Init) -> Result<ParamId, ModelError> + 'a;

impl Layout {
    fn build(cfg: &TgnnConfig, slot: &mut Slot<'_>) -> Result<Layout, ModelError> {
        let (d_e, d_m, d_ff) = (cfg.d_e, cfg.d_m, cfg.ff_dim());
        let enc_transition = lin(slot, "encoder.transition", d_e, d_m)?;
        let dec_transition = lin(slot, "decoder.transition", d_e, d_m)?;
        let mut encoder = Vec::with_capacity(cfg.k_enc);
        let mut decoder = Vec::with_capacity(cfg.k_dec);
        for i in 0..cfg.k_enc {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                attn: attn(slot, &format!("{p}.attn"), d_m)?,
                norm1: norm(slot, &format!("{p}.norm1"), d_m, false)?,
                ff1: lin(slot, &format!("{p}.ff1"), d_m, d_ff)?,
                ff2: lin(slot, &format!("{p}.ff2"), d_ff, d_m)?,
                norm2: norm(slot, &format!("{p}.norm2"), d_m, false)?,
            });
        }
        for i in 0..cfg.k_dec {
            let p = format!("decoder.{i}");
            let last = i + 1 == cfg.k_dec;
            decoder.push(DecoderLayer {
                self_attn: attn(slot, &format!("{p}.self_attn"), d_m)?,
                norm1: norm(slot, &format!("{p}.norm1"), d_m, false)?,
                cross_attn: attn(slot, &format!("{p}.cross_attn"), d_m)?,
                norm2: norm(slot, &format!("{p}.norm2"), d_m, false)?,
                ff1: lin(slot, &format!("{p}.ff1"), d_m, d_ff)?,
                ff2: lin(slot, &format!("{p}.ff2"), d_ff, d_m)?,
                // The output gain starts at zero so every logit is 0 at
                // initialization and the first loss is exactly ln|C|.
                norm3: norm(slot, &format!("{p}.norm3"), d_m, last)?,
            });
        }
        let stop = slot("stop_token", &[d_e], Init::Normal(1.0 / (d_e as f64).sqrt()))?;
        Ok(Layout {
            enc_transition,
            dec_transition,
            stop,
            encoder,
            decoder,
        })
    }
}

fn lin(slot: &mut Slot<'_>, name: &str, rows: usize, cols: usize) -> Result<Linear, ModelError> {
    Ok(Linear {
        w: slot(&format!("{name}.w"), &[rows, cols], Init::Xavier)?,
        b: slot(&format!("{name}.b"), &[cols], Init::Zeros)?,
    })
}

fn attn(slot: &mut Slot<'_>, name: &str, d: usize) -> Result<Attn, ModelError> {
    Ok(Attn {
        q: lin(slot, &format!("{name}.q"), d, d)?,
        k: lin(slot, &format!("{name}.k"), d, d)?,
        v: lin(slot, &format!("{name}.v"), d, d)?,
        o: lin(slot, &format!("{name}.o"), d, d)?,
    })
}

fn norm(slot: &mut Slot<'_>, name: &str, d: usize, zero_gain: bool) -> Result<Norm, ModelError> {
    Ok(Norm {
        gamma: slot(&format!("{name}.gamma"), &[d], if zero_gain { Init::Zeros } else { Init::Ones })?,
        beta: slot(&format!("{name}.beta"), &[d], Init::Zeros)?,
    })
}

/// TGNN parameters together with their config.
#[derive(Clone, Debug)]
pub struct Tgnn {
    config: TgnnConfig,
    params: ParamStore,
    layout: Layout,
}

impl Tgnn {
    /// Fresh model: Xavier-uniform weights, zero biases, unit norm gains
    /// (zero for the final decoder norm).
    pub fn new(config: TgnnConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut |name, shape, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            Ok(params.insert(name, Tensor::new(shape.to_vec(), data)?))
        })?;
        Ok(Tgnn { config, params, layout })
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(config: TgnnConfig, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::build(&config, &mut |name, shape, _| {
            let id = params.lookup(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            let found = params.get(id).shape();
            if found != shape {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: found.to_vec(),
                });
            }
            Ok(id)
        })?;
        Ok(Tgnn { config, params, layout })
    }

    pub fn config(&self) -> &TgnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn stop_token(&self) -> ParamId {
        self.layout.stop
    }

    /// Writes the parameter checkpoint tagged with the config hash.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(self.params.save(path, &self.config.hash())?)
    }

    /// Loads a checkpoint written by [`save`](Self::save) for `config`.
    pub fn load(path: &Path, config: TgnnConfig) -> Result<Self, ModelError> {
        let params = ParamStore::load(path, &config.hash())?;
        Tgnn::from_params(config, params)
    }
}
