//! Forward passes of the MIL heads, recorded on a tape.

use super::config::{HeadKind, ModelConfig, N_CLASSES};
use super::ModelError;
use crate::diff::{Tape, Tensor, Var};

/// Graph nodes produced by one forward pass over a bag.
#[derive(Clone, Debug)]
pub struct GraphOutput {
    /// `1 x 4` class logits.
    pub logits: Var,
    /// `1 x 1` sigmoid WSD prediction, when the regression head is enabled.
    pub wsd: Option<Var>,
    /// Pooled bag representation feeding the regression head.
    pub embedding: Var,
    /// Per-instance attention (or score proxy for MaxMIL), one per row of the bag.
    pub attention: Vec<f64>,
}

/// Instance attention logits for ABMIL, `n x 1`.
fn attention_scores(
    tape: &mut Tape,
    hidden: Var,
    p: &[Var],
    gated: bool,
) -> Result<(Var, usize), ModelError> {
    let v = tape.matmul(hidden, p[2])?;
    let v = tape.add_row(v, p[3])?;
    let v = tape.tanh(v);
    let (gate_out, next) = if gated {
        let u = tape.matmul(hidden, p[4])?;
        let u = tape.add_row(u, p[5])?;
        let u = tape.sigmoid(u);
        (tape.mul(v, u)?, 6)
    } else {
        (v, 4)
    };
    Ok((tape.matmul(gate_out, p[next])?, next + 1))
}

fn regression(tape: &mut Tape, embedding: Var, wr: Var, br: Var) -> Result<Var, ModelError> {
    let r = tape.matmul(embedding, wr)?;
    let r = tape.add(r, br)?;
    Ok(tape.sigmoid(r))
}

fn abmil(
    config: &ModelConfig,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
) -> Result<GraphOutput, ModelError> {
    let gated = config.head == HeadKind::GatedAbmil;
    let h = tape.matmul(x, p[0])?;
    let h = tape.add_row(h, p[1])?;
    let h = tape.relu(h);

    let (scores, next) = attention_scores(tape, h, p, gated)?;
    let scores = tape.transpose(scores)?;
    let attn = tape.softmax_rows(scores)?;
    let z = tape.matmul(attn, h)?;

    let logits = tape.matmul(z, p[next])?;
    let logits = tape.add_row(logits, p[next + 1])?;
    let wsd = if config.with_regression_head {
        Some(regression(tape, z, p[next + 2], p[next + 3])?)
    } else {
        None
    };
    Ok(GraphOutput {
        logits,
        wsd,
        embedding: z,
        attention: tape.value(attn).data().to_vec(),
    })
}

fn maxmil(
    config: &ModelConfig,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
) -> Result<GraphOutput, ModelError> {
    let h = tape.matmul(x, p[0])?;
    let h = tape.add_row(h, p[1])?;
    let h = tape.relu(h);
    let inst = tape.matmul(h, p[2])?;
    let inst = tape.add_row(inst, p[3])?;
    let logits = tape.max_rows(inst)?;
    let pooled = tape.mean_rows(h)?;
    let wsd = if config.with_regression_head {
        Some(regression(tape, pooled, p[4], p[5])?)
    } else {
        None
    };

    let scores = tape.value(inst);
    let per_instance: Vec<f64> = (0..scores.rows())
        .map(|i| {
            scores
                .row_slice(i)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    Ok(GraphOutput {
        logits,
        wsd,
        embedding: pooled,
        attention: min_max(&per_instance),
    })
}

fn dsmil(
    config: &ModelConfig,
    tape: &mut Tape,
    p: &[Var],
    x: Var,
) -> Result<GraphOutput, ModelError> {
    let n = tape.value(x).rows();
    let h = config.hidden_dim;

    // Stream 1: instance classifier and max pooling.
    let inst = tape.matmul(x, p[0])?;
    let inst = tape.add_row(inst, p[1])?;
    let max_logits = tape.max_rows(inst)?;
    let critical: Vec<usize> = {
        let scores = tape.value(inst);
        (0..N_CLASSES)
            .map(|c| {
                let mut best = 0;
                for i in 1..n {
                    if scores.get(i, c) > scores.get(best, c) {
                        best = i;
                    }
                }
                best
            })
            .collect()
    };

    // Stream 2: attention of every instance to each class's critical instance.
    let q = tape.matmul(x, p[2])?;
    let q = tape.add_row(q, p[3])?;
    let q = tape.tanh(q);
    let v = tape.matmul(x, p[4])?;
    let v = tape.add_row(v, p[5])?;
    let q_crit = tape.gather_rows(q, &critical)?;
    let q_crit_t = tape.transpose(q_crit)?;
    let sim = tape.matmul(q, q_crit_t)?;
    let sim = tape.scale(sim, 1.0 / (config.attention_dim as f64).sqrt());
    let sim_t = tape.transpose(sim)?;
    let attn = tape.softmax_rows(sim_t)?;
    let b = tape.matmul(attn, v)?;
    let flat = tape.reshape(b, &[1, N_CLASSES * h])?;
    let bag_logits = tape.matmul(flat, p[6])?;
    let bag_logits = tape.add_row(bag_logits, p[7])?;

    let both = tape.add(max_logits, bag_logits)?;
    let logits = tape.scale(both, 0.5);
    let embedding = tape.mean_rows(b)?;
    let wsd = if config.with_regression_head {
        Some(regression(tape, embedding, p[8], p[9])?)
    } else {
        None
    };

    let predicted = tape.value(logits).argmax();
    let attention = tape.value(attn).row_slice(predicted).to_vec();
    Ok(GraphOutput {
        logits,
        wsd,
        embedding,
        attention,
    })
}

/// Records the forward pass of `config`'s head for one bag.
///
/// `params` must be registered on `tape` in [`ModelConfig::layout`] order.
pub fn forward_graph(
    config: &ModelConfig,
    tape: &mut Tape,
    params: &[Var],
    features: &Tensor,
) -> Result<GraphOutput, ModelError> {
    let expected = config.layout().len();
    if params.len() != expected {
        return Err(ModelError::ParamCount {
            expected,
            found: params.len(),
        });
    }
    if features.rank() != 2 || features.cols() != config.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: config.input_dim,
            found: features.cols(),
        });
    }
    if features.rows() == 0 {
        return Err(ModelError::EmptyBag);
    }
    let x = tape.leaf(features.clone());
    match config.head {
        HeadKind::MaxMil => maxmil(config, tape, params, x),
        HeadKind::Abmil | HeadKind::GatedAbmil => abmil(config, tape, params, x),
        HeadKind::Dsmil => dsmil(config, tape, params, x),
    }
}

/// Min-max normalization to [0,1]. A single value maps to 1.0 and a constant
/// vector of two or more values maps to 0.5 everywhere.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    if values.len() == 1 {
        return vec![1.0];
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}
