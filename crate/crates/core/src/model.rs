//! The three model families behind one type, plus checkpoint I/O.
//!
//! A checkpoint is a [`diffcore::checkpoint`] container whose first record
//! is a `u8` tensor named `meta.json` (config, vocabulary, seeds, reservoir
//! tuple, precision) followed by one record per trainable tensor. Reservoir
//! tensors are never written; they are rebuilt from the stored tuple.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Token, Vocabulary};
use crate::diffcore::checkpoint::{self, RecordData};
use crate::diffcore::{DType, Graph, ParamStore, Real, Tensor, Var};
use crate::readout::{self, AttentionReadout, LinearReadout};
use crate::reservoir::{DriveMode, ReservoirParams, ReservoirSpec};
use crate::transformer::{TransformerConfig, TransformerModel};
use crate::{rng, Error, Result, EMBED_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Reservoir,
    Aerc,
    Transformer,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Reservoir, Family::Aerc, Family::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Family::Reservoir => "reservoir",
            Family::Aerc => "aerc",
            Family::Transformer => "transformer",
        }
    }

    pub fn uses_reservoir(self) -> bool {
        !matches!(self, Family::Transformer)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reservoir" | "rc" => Ok(Family::Reservoir),
            "aerc" => Ok(Family::Aerc),
            "transformer" | "tf" => Ok(Family::Transformer),
            _ => Err(Error::Config(format!("unknown model family `{s}`"))),
        }
    }
}

/// Architecture hyperparameters. Embedding width (16) and context (32)
/// are shared by all families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum ModelConfig {
    Reservoir {
        n: usize,
    },
    Aerc {
        n: usize,
        hidden: usize,
    },
    Transformer {
        d_ff: usize,
        heads: usize,
        layers: usize,
    },
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Reservoir { .. } => Family::Reservoir,
            ModelConfig::Aerc { .. } => Family::Aerc,
            ModelConfig::Transformer { .. } => Family::Transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelConfig::Reservoir { n: 0 } => {
                Err(Error::Config("reservoir size N must be >= 1".into()))
            }
            ModelConfig::Aerc { n, hidden } if n == 0 || hidden == 0 => Err(Error::Config(
                format!("AERC needs N >= 1 and H >= 1 (got N={n}, H={hidden})"),
            )),
            ModelConfig::Transformer {
                d_ff,
                heads,
                layers,
            } => TransformerConfig::new(d_ff, heads, layers, 1).validate(),
            _ => Ok(()),
        }
    }

    /// Closed-form trainable parameter count for a vocabulary of size `vocab`.
    pub fn count_parameters(&self, vocab: usize) -> Result<usize> {
        self.validate()?;
        match *self {
            ModelConfig::Reservoir { n } => Ok(readout::linear_count(n, vocab)),
            ModelConfig::Aerc { n, hidden } => Ok(readout::aerc_count(n, hidden, vocab)),
            ModelConfig::Transformer {
                d_ff,
                heads,
                layers,
            } => TransformerConfig::new(d_ff, heads, layers, vocab).count_parameters(),
        }
    }

    pub fn reservoir_size(&self) -> Option<usize> {
        match *self {
            ModelConfig::Reservoir { n } | ModelConfig::Aerc { n, .. } => Some(n),
            ModelConfig::Transformer { .. } => None,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            ModelConfig::Reservoir { n } => format!("reservoir N={n}"),
            ModelConfig::Aerc { n, hidden } => format!("aerc N={n} H={hidden}"),
            ModelConfig::Transformer {
                d_ff,
                heads,
                layers,
            } => format!("transformer d_h={d_ff} h={heads} L={layers}"),
        }
    }

    /// The five configurations per family from the parameter-count table,
    /// smallest first.
    pub fn table(family: Family) -> [ModelConfig; 5] {
        match family {
            Family::Transformer => [
                (64, 4, 4),
                (72, 8, 8),
                (128, 8, 8),
                (356, 8, 8),
                (256, 16, 16),
            ]
            .map(|(d_ff, heads, layers)| ModelConfig::Transformer {
                d_ff,
                heads,
                layers,
            }),
            Family::Reservoir => [250, 500, 750, 1750, 2600].map(|n| ModelConfig::Reservoir { n }),
            Family::Aerc => [(75, 13), (75, 19), (100, 20), (150, 25), (160, 30)]
                .map(|(n, hidden)| ModelConfig::Aerc { n, hidden }),
        }
    }
}

/// Knobs fixed at construction time that are not architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub seed: u64,
    /// Largest singular value of the recurrent reservoir matrix.
    pub rho: f64,
    pub drive_mode: DriveMode,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            seed: 0,
            rho: 0.9,
            drive_mode: DriveMode::ZeroReset,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Body<T> {
    Reservoir {
        reservoir: ReservoirParams<T>,
        readout: LinearReadout<T>,
    },
    Aerc {
        reservoir: ReservoirParams<T>,
        readout: AttentionReadout<T>,
    },
    Transformer(TransformerModel<T>),
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub init: InitOptions,
    pub body: Body<T>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    config: ModelConfig,
    vocab: Vec<String>,
    init: InitOptions,
    reservoir: Option<ReservoirSpec>,
    precision: DType,
}

const META_RECORD: &str = "meta.json";
const META_FORMAT: &str = "reslm-model/1";

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, init: InitOptions) -> Result<Self> {
        config.validate()?;
        let v = vocab.len();
        let res_seed = rng::derive_seed(init.seed, &[1]);
        let head_seed = rng::derive_seed(init.seed, &[2]);
        let body = match config {
            ModelConfig::Reservoir { n } => Body::Reservoir {
                reservoir: crate::reservoir::init_reservoir(n, EMBED_DIM, v, init.rho, res_seed)?,
                readout: LinearReadout::new(n, v, head_seed),
            },
            ModelConfig::Aerc { n, hidden } => Body::Aerc {
                reservoir: crate::reservoir::init_reservoir(n, EMBED_DIM, v, init.rho, res_seed)?,
                readout: AttentionReadout::new(n, hidden, v, head_seed),
            },
            ModelConfig::Transformer {
                d_ff,
                heads,
                layers,
            } => Body::Transformer(TransformerModel::new(
                TransformerConfig::new(d_ff, heads, layers, v),
                head_seed,
            )?),
        };
        Ok(Model {
            config,
            vocab,
            init,
            body,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family()
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.body {
            Body::Reservoir { readout, .. } => &readout.store,
            Body::Aerc { readout, .. } => &readout.store,
            Body::Transformer(t) => &t.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        match &mut self.body {
            Body::Reservoir { readout, .. } => &mut readout.store,
            Body::Aerc { readout, .. } => &mut readout.store,
            Body::Transformer(t) => &mut t.store,
        }
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store().trainable_count()
    }

    pub fn reservoir(&self) -> Option<&ReservoirParams<T>> {
        match &self.body {
            Body::Reservoir { reservoir, .. } | Body::Aerc { reservoir, .. } => Some(reservoir),
            Body::Transformer(_) => None,
        }
    }

    pub fn transformer(&self) -> Option<&TransformerModel<T>> {
        match &self.body {
            Body::Transformer(t) => Some(t),
            _ => None,
        }
    }

    /// Readout logits from a `[B × N]` state node (reservoir families).
    pub fn readout_forward(&self, g: &mut Graph<T>, states: Var) -> Result<Var> {
        match &self.body {
            Body::Reservoir { readout, .. } => readout.forward(g, states),
            Body::Aerc { readout, .. } => readout.forward(g, states),
            Body::Transformer(_) => Err(Error::Usage(
                "the transformer has no reservoir readout".into(),
            )),
        }
    }

    /// Logits `[B × V]` for a batch of 32-token windows. Reservoir families
    /// drive each window from the zero state.
    pub fn forward_windows(&self, g: &mut Graph<T>, windows: &[&[Token]]) -> Result<Var> {
        match &self.body {
            Body::Transformer(t) => {
                let tokens: Vec<Token> = windows.concat();
                t.forward(g, &tokens)
            }
            _ => {
                let states = self
                    .reservoir()
                    .expect("reservoir family")
                    .drive_batch(windows)?;
                let s = g.constant(states);
                self.readout_forward(g, s)
            }
        }
    }

    pub fn logits_for_windows(&self, windows: &[&[Token]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_windows(&mut g, windows)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            format: META_FORMAT.into(),
            config: self.config,
            vocab: self.vocab.chars().iter().map(|c| c.to_string()).collect(),
            init: self.init,
            reservoir: self.reservoir().map(|r| r.spec),
            precision: T::DTYPE,
        };
        let mut w = checkpoint::Writer::new();
        w.bytes(
            META_RECORD,
            &serde_json::to_vec(&meta).expect("meta serializes"),
        );
        for p in self.store().iter() {
            w.tensor(&p.name, &p.value);
        }
        w.finish()
    }

    /// Rebuilds a model from checkpoint bytes, casting stored tensors to `T`.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut records = checkpoint::parse(bytes)?.into_iter();
        let meta: Meta = match records.next() {
            Some((name, RecordData::U8 { bytes, .. })) if name == META_RECORD => {
                serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?
            }
            _ => return Err(Error::Format("checkpoint has no metadata record".into())),
        };
        if meta.format != META_FORMAT {
            return Err(Error::Format(format!(
                "unknown model format {}",
                meta.format
            )));
        }
        let vocab =
            Vocabulary::from_json(&serde_json::to_string(&meta.vocab).expect("strings serialize"))?;
        let mut model = Model::new(meta.config, vocab, meta.init)?;
        if let (Some(stored), Some(rebuilt)) = (meta.reservoir, model.reservoir()) {
            if stored != rebuilt.spec {
                return Err(Error::Format(format!(
                    "reservoir tuple mismatch: stored {stored:?}, rebuilt {:?}",
                    rebuilt.spec
                )));
            }
        }
        let tensors = records
            .map(|(name, rec)| rec.into_real::<T>().map(|t| (name, t)))
            .collect::<Result<Vec<_>>>()?;
        model.store_mut().load_from(tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Reads only the element type a checkpoint was written with.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<DType> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match checkpoint::parse(&bytes)?.into_iter().next() {
        Some((name, RecordData::U8 { bytes, .. })) if name == META_RECORD => {
            let meta: Meta = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
            Ok(meta.precision)
        }
        _ => Err(Error::Format("checkpoint has no metadata record".into())),
    }
}
