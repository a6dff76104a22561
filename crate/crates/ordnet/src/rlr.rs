//! Reweighed Long-Range branch. Runs self-attention, sums the raw attention
//! map per position into a global contribution, squashes it through a
//! sigmoid (or softmax) gate, and rescales the attended feature with the
//! gate. Adds no parameters over basic self-attention.

use crate::attention::{self_attention_on_tape, AttentionParams, BoundAttention};
use crate::error::{OrdError, Result};
use crate::tensor::{ops, Tape, Tensor, Value};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Column sums: contribution of position i to all positions.
    AttentionOut,
    /// Row sums: attention received by position i.
    AttentionIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    Sigmoid,
    /// Softmax over all HW gate logits, rescaled by HW so the mean gate
    /// stays 1 regardless of resolution.
    Softmax,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RLRConfig {
    pub direction: Direction,
    pub normalizer: Normalizer,
}

impl Default for RLRConfig {
    fn default() -> Self {
        // best Table-style variant: attention-out with sigmoid
        RLRConfig {
            direction: Direction::AttentionOut,
            normalizer: Normalizer::Sigmoid,
        }
    }
}

/// One scalar gate per spatial position.
#[derive(Debug, Clone)]
pub struct ContributionMap(pub Tensor);

/// Gate computation alone, from an injected HW x HW attention map. The tape
/// form inlines the same arithmetic; unit tests drive this directly.
pub fn gate_from_attn(attn: &Tensor, cfg: &RLRConfig) -> Result<Tensor> {
    if attn.rank() != 2 || attn.shape()[0] != attn.shape()[1] {
        return Err(OrdError::Dimension(format!(
            "attention map must be square, got {:?}",
            attn.shape()
        )));
    }
    let sums = match cfg.direction {
        Direction::AttentionOut => ops::sum_axis0(attn)?,
        Direction::AttentionIn => ops::sum_axis1(attn)?,
    };
    match cfg.normalizer {
        Normalizer::Sigmoid => Ok(ops::sigmoid(&sums)),
        Normalizer::Softmax => {
            let sm = ops::softmax_axis(&sums, 0)?;
            Ok(ops::scale(&sm, sums.numel() as f64))
        }
    }
}

/// Tape form; returns (Z_l, gate) where the gate is reshaped to H x W.
pub fn reweighed_long_range_on_tape(
    tape: &mut Tape,
    x: Value,
    params: &BoundAttention,
    cfg: &RLRConfig,
) -> Result<(Value, Value)> {
    let (h, w) = {
        let s = tape.value(x).shape();
        (s[0], s[1])
    };
    let (y, attn) = self_attention_on_tape(tape, x, params)?;
    let sums = match cfg.direction {
        Direction::AttentionOut => tape.sum_axis0(attn)?,
        Direction::AttentionIn => tape.sum_axis1(attn)?,
    };
    let gate_flat = match cfg.normalizer {
        Normalizer::Sigmoid => tape.sigmoid(sums),
        Normalizer::Softmax => {
            let sm = tape.softmax_axis(sums, 0)?;
            tape.scale(sm, (h * w) as f64)
        }
    };
    let gate = tape.reshape(gate_flat, &[h, w])?;
    let z = tape.mul(y, gate)?;
    Ok((z, gate))
}

/// RLR branch over a plain tensor.
pub fn reweighed_long_range(
    x: &Tensor,
    params: &AttentionParams,
    cfg: &RLRConfig,
) -> Result<(Tensor, ContributionMap)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bound = params.bind(&mut tape);
    let (z, gate) = reweighed_long_range_on_tape(&mut tape, xv, &bound, cfg)?;
    Ok((
        tape.value(z).clone(),
        ContributionMap(tape.value(gate).clone()),
    ))
}

/// Parameter count of the branch: the gate adds none.
pub fn param_count(params: &AttentionParams) -> usize {
    params.param_count()
}
