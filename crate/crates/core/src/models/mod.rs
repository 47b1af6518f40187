//! MIL heads over slide bags: MaxMIL, ABMIL (plain and gated attention) and
//! DSMIL, each with an optional sigmoid regression head for the WSD target.

mod config;
mod heads;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bags::Bag;
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::gleason::SlideClass;

pub use config::{init_params, HeadKind, ModelConfig, N_CLASSES};
pub use heads::{forward_graph, min_max, GraphOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bag feature dimension {found} does not match model input dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("expected {expected} parameter tensors, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: [usize; 2],
        found: Vec<usize>,
    },
    #[error("bag has no instances")]
    EmptyBag,
    #[error("unknown MIL head {0:?} (expected maxmil, abmil, gated-abmil or dsmil)")]
    UnknownHead(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("attention has {attention} entries but bag has {instances} instances")]
    AttentionLength { attention: usize, instances: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BagOutput {
    pub class_logits: [f64; N_CLASSES],
    pub attention: Vec<f64>,
    pub bag_embedding: Vec<f64>,
    pub wsd_prediction: Option<f64>,
}

impl BagOutput {
    pub fn predicted_class(&self) -> SlideClass {
        SlideClass::ALL[crate::diff::Tensor::row(self.class_logits.to_vec()).argmax()]
    }

    fn from_graph(tape: &Tape, g: &GraphOutput) -> Self {
        let mut class_logits = [0.0; N_CLASSES];
        class_logits.copy_from_slice(tape.value(g.logits).data());
        BagOutput {
            class_logits,
            attention: g.attention.clone(),
            bag_embedding: tape.value(g.embedding).data().to_vec(),
            wsd_prediction: g.wsd.map(|w| tape.value(w).item()),
        }
    }
}

/// Model configuration plus parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct MilModel {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

impl MilModel {
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        Ok(Self {
            params: init_params(&config)?,
            config,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(ModelError::ParamCount {
                expected: layout.len(),
                found: params.len(),
            });
        }
        for ((name, shape), t) in layout.iter().zip(&params) {
            if t.shape() != shape {
                return Err(ModelError::ParamShape {
                    name: name.to_string(),
                    expected: *shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    /// Registers every parameter as a leaf of `tape`.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        bag: &Bag,
    ) -> Result<GraphOutput, ModelError> {
        forward_graph(&self.config, tape, params, &bag.features)
    }

    pub fn forward(&self, bag: &Bag) -> Result<BagOutput, ModelError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let g = self.forward_on(&mut tape, &vars, bag)?;
        Ok(BagOutput::from_graph(&tape, &g))
    }

    pub fn predict(&self, bag: &Bag) -> Result<SlideClass, ModelError> {
        Ok(self.forward(bag)?.predicted_class())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            tensors: self
                .config
                .layout()
                .iter()
                .zip(&self.params)
                .map(|((name, _), t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |message: String| ModelError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let params = ckpt
            .tensors
            .into_iter()
            .map(|t| Tensor::new(t.shape, t.data).map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_params(ckpt.config, params)
    }
}

const CHECKPOINT_FORMAT: &str = "wsd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

/// `(patch coordinate, weight)` pairs in bag order.
pub type PatchWeights = Vec<((i32, i32), f64)>;

/// Pairs each patch coordinate with its min-max normalized attention weight.
pub fn extract_attention(output: &BagOutput, bag: &Bag) -> Result<PatchWeights, ModelError> {
    if output.attention.len() != bag.n() || bag.coords.len() != bag.n() {
        return Err(ModelError::AttentionLength {
            attention: output.attention.len(),
            instances: bag.n(),
        });
    }
    Ok(bag
        .coords
        .iter()
        .copied()
        .zip(min_max(&output.attention))
        .collect())
}
