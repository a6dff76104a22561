//! Middle-Range branch: self-attention restricted to each cell of a P x P
//! spatial partition, one shared parameter set across patches, outputs
//! reassembled to the input size. No information crosses patch boundaries.

use crate::attention::{self_attention, self_attention_on_tape, AttentionParams, BoundAttention};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Value};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// P must divide H and W exactly.
    Strict,
    /// Zero-pad bottom/right to the next multiple of P, crop after reassembly.
    Pad,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MRConfig {
    pub patches: usize,
    #[serde(default = "default_padding")]
    pub padding: PaddingMode,
}

fn default_padding() -> PaddingMode {
    PaddingMode::Pad
}

impl Default for MRConfig {
    fn default() -> Self {
        MRConfig {
            patches: 2,
            padding: PaddingMode::Pad,
        }
    }
}

/// Tape form of the MR branch.
pub fn middle_range_on_tape(
    tape: &mut Tape,
    x: Value,
    params: &BoundAttention,
    cfg: &MRConfig,
) -> Result<Value> {
    let p = cfg.patches;
    if p <= 1 {
        // P = 1 degenerates to basic self-attention, same code path.
        let (y, _) = self_attention_on_tape(tape, x, params)?;
        return Ok(y);
    }
    let (h, w) = {
        let s = tape.value(x).shape();
        (s[0], s[1])
    };
    let needs_pad = h % p != 0 || w % p != 0;
    let work = if needs_pad {
        match cfg.padding {
            PaddingMode::Strict => {
                // let partition_patches produce the partition error
                x
            }
            PaddingMode::Pad => {
                tape.pad_spatial(x, h.div_ceil(p) * p, w.div_ceil(p) * p)?
            }
        }
    } else {
        x
    };
    let patches = tape.partition_patches(work, p)?;
    let mut outs = Vec::with_capacity(p * p);
    for i in 0..p * p {
        let patch = tape.index_first(patches, i)?;
        let (y, _) = self_attention_on_tape(tape, patch, params)?;
        outs.push(y);
    }
    let stacked = tape.stack_first(&outs)?;
    let full = tape.reassemble_patches(stacked, p)?;
    if needs_pad && cfg.padding == PaddingMode::Pad {
        tape.crop_spatial(full, h, w)
    } else {
        Ok(full)
    }
}

/// MR branch over a plain tensor.
pub fn middle_range(x: &Tensor, params: &AttentionParams, cfg: &MRConfig) -> Result<Tensor> {
    if cfg.patches <= 1 {
        return Ok(self_attention(x, params)?.y);
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bound = params.bind(&mut tape);
    let out = middle_range_on_tape(&mut tape, xv, &bound, cfg)?;
    Ok(tape.value(out).clone())
}
