use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::diff::Tensor;

pub const N_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    MaxMil,
    Abmil,
    GatedAbmil,
    Dsmil,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::MaxMil,
        HeadKind::Abmil,
        HeadKind::GatedAbmil,
        HeadKind::Dsmil,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::MaxMil => "maxmil",
            HeadKind::Abmil => "abmil",
            HeadKind::GatedAbmil => "gated-abmil",
            HeadKind::Dsmil => "dsmil",
        }
    }

    /// Heads that pool instance embeddings with normalized attention.
    pub fn is_embedding_based(self) -> bool {
        !matches!(self, HeadKind::MaxMil)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "maxmil" => Ok(HeadKind::MaxMil),
            "abmil" => Ok(HeadKind::Abmil),
            "gated-abmil" | "gatedabmil" | "gated_abmil" => Ok(HeadKind::GatedAbmil),
            "dsmil" => Ok(HeadKind::Dsmil),
            _ => Err(ModelError::UnknownHead(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    pub with_regression_head: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(head: HeadKind, input_dim: usize) -> Self {
        Self {
            head,
            input_dim,
            hidden_dim: 256,
            attention_dim: 128,
            with_regression_head: false,
            init_seed: 0,
        }
    }

    pub fn with_sizes(mut self, hidden_dim: usize, attention_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self.attention_dim = attention_dim;
        self
    }

    pub fn with_regression(mut self, enabled: bool) -> Self {
        self.with_regression_head = enabled;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn n_classes(&self) -> usize {
        N_CLASSES
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.attention_dim == 0 {
            return Err(ModelError::Config(format!(
                "dimensions must be >= 1 (d={}, H={}, L={})",
                self.input_dim, self.hidden_dim, self.attention_dim
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order. Regression-head
    /// parameters always come last.
    pub fn layout(&self) -> Vec<(&'static str, [usize; 2])> {
        let (d, h, l, c) = (
            self.input_dim,
            self.hidden_dim,
            self.attention_dim,
            N_CLASSES,
        );
        let mut out = match self.head {
            HeadKind::MaxMil => vec![
                ("w1", [d, h]),
                ("b1", [1, h]),
                ("w2", [h, c]),
                ("b2", [1, c]),
            ],
            HeadKind::Abmil | HeadKind::GatedAbmil => {
                let mut v = vec![
                    ("w1", [d, h]),
                    ("b1", [1, h]),
                    ("attn_v", [h, l]),
                    ("attn_v_b", [1, l]),
                ];
                if self.head == HeadKind::GatedAbmil {
                    v.push(("attn_u", [h, l]));
                    v.push(("attn_u_b", [1, l]));
                }
                v.push(("attn_w", [l, 1]));
                v.push(("wc", [h, c]));
                v.push(("bc", [1, c]));
                v
            }
            HeadKind::Dsmil => vec![
                ("wi", [d, c]),
                ("bi", [1, c]),
                ("wq", [d, l]),
                ("bq", [1, l]),
                ("wv", [d, h]),
                ("bv", [1, h]),
                ("wb", [c * h, c]),
                ("bb", [1, c]),
            ],
        };
        if self.with_regression_head {
            out.push(("wr", [h, 1]));
            out.push(("br", [1, 1]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s[0] * s[1]).sum()
    }
}

fn is_bias(name: &str) -> bool {
    name.starts_with('b') || name.ends_with("_b")
}

/// Weights `~ U(±sqrt(6 / (fan_in + fan_out)))`, biases zero, drawn in
/// layout order from `init_seed`.
pub fn init_params(config: &ModelConfig) -> Result<Vec<Tensor>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    Ok(config
        .layout()
        .into_iter()
        .map(|(name, [rows, cols])| {
            if is_bias(name) {
                return Tensor::zeros(&[rows, cols]);
            }
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::matrix(rows, cols, data).expect("layout shape")
        })
        .collect())
}
