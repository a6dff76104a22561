//! Basic self-attention: y^i = (1/HW) sum_j attn^{ij} v(x^j) with
//! attn^{ij} = q(x^i)^T k(x^j). The attention map is returned raw (no
//! softmax); weights may be negative.

use crate::error::{OrdError, Result};
use crate::tensor::{Tape, Tensor, Value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Query/key/value projection weights plus the output projection that maps
/// the C_v-dimensional attended feature back to C channels.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wout: Tensor,
    pub bout: Tensor,
}

impl AttentionParams {
    /// Seeded init. C_q == C_k is enforced by construction; the q.k inner
    /// product requires it.
    pub fn seeded(c: usize, cq: usize, cv: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |fan_in: usize, shape: &[usize]| {
            let a = (1.0 / fan_in as f64).sqrt();
            Tensor::rand_uniform(shape, -a, a, &mut rng)
        };
        AttentionParams {
            wq: init(c, &[c, cq]),
            bq: Tensor::zeros(&[cq]),
            wk: init(c, &[c, cq]),
            bk: Tensor::zeros(&[cq]),
            wv: init(c, &[c, cv]),
            bv: Tensor::zeros(&[cv]),
            wout: init(cv, &[cv, c]),
            bout: Tensor::zeros(&[c]),
        }
    }

    /// Desk-scale defaults: C=64, C_q=C_k=8, C_v=16 (8:1:2 ratios).
    pub fn desk_default(seed: u64) -> Self {
        Self::seeded(64, 8, 16, seed)
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn cq(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn ck(&self) -> usize {
        self.wk.shape()[1]
    }

    pub fn cv(&self) -> usize {
        self.wv.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("wq".into(), &self.wq),
            ("bq".into(), &self.bq),
            ("wk".into(), &self.wk),
            ("bk".into(), &self.bk),
            ("wv".into(), &self.wv),
            ("bv".into(), &self.bv),
            ("wout".into(), &self.wout),
            ("bout".into(), &self.bout),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("wq".into(), &mut self.wq),
            ("bq".into(), &mut self.bq),
            ("wk".into(), &mut self.wk),
            ("bk".into(), &mut self.bk),
            ("wv".into(), &mut self.wv),
            ("bv".into(), &mut self.bv),
            ("wout".into(), &mut self.wout),
            ("bout".into(), &mut self.bout),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        BoundAttention {
            wq: tape.leaf(self.wq.clone()),
            bq: tape.leaf(self.bq.clone()),
            wk: tape.leaf(self.wk.clone()),
            bk: tape.leaf(self.bk.clone()),
            wv: tape.leaf(self.wv.clone()),
            bv: tape.leaf(self.bv.clone()),
            wout: tape.leaf(self.wout.clone()),
            bout: tape.leaf(self.bout.clone()),
        }
    }
}

/// Attention parameters already placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub wq: Value,
    pub bq: Value,
    pub wk: Value,
    pub bk: Value,
    pub wv: Value,
    pub bv: Value,
    pub wout: Value,
    pub bout: Value,
}

/// Attended feature, raw attention map, and the HW normalization factor.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub y: Tensor,
    pub attn: Tensor,
    pub n: f64,
}

/// Tape form of self-attention; returns (Y, Attn) node handles.
pub fn self_attention_on_tape(
    tape: &mut Tape,
    x: Value,
    params: &BoundAttention,
) -> Result<(Value, Value)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(OrdError::Dimension(format!(
            "self_attention expects H x W x C, got {:?}",
            shape
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let flat = tape.reshape(x, &[hw, c])?;
    let q = tape.matmul(flat, params.wq)?;
    let q = tape.add_bias(q, params.bq)?;
    let k = tape.matmul(flat, params.wk)?;
    let k = tape.add_bias(k, params.bk)?;
    let v = tape.matmul(flat, params.wv)?;
    let v = tape.add_bias(v, params.bv)?;
    let kt = tape.transpose2d(k)?;
    let attn = tape.matmul(q, kt)?;
    let agg = tape.matmul(attn, v)?;
    let agg = tape.scale(agg, 1.0 / hw as f64);
    let y = tape.matmul(agg, params.wout)?;
    let y = tape.add_bias(y, params.bout)?;
    let y = tape.reshape(y, &[h, w, c])?;
    Ok((y, attn))
}

/// Self-attention over an H x W x C feature.
pub fn self_attention(x: &Tensor, params: &AttentionParams) -> Result<AttentionOutput> {
    if x.rank() == 3 && x.shape()[2] != params.channels() {
        return Err(OrdError::Dimension(format!(
            "input C={} but params expect C={}",
            x.shape()[2],
            params.channels()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let bound = params.bind(&mut tape);
    let (y, attn) = self_attention_on_tape(&mut tape, xv, &bound)?;
    let n = (x.shape()[0] * x.shape()[1]) as f64;
    Ok(AttentionOutput {
        y: tape.value(y).clone(),
        attn: tape.value(attn).clone(),
        n,
    })
}

/// Brute-force reference: explicit nested loops over positions and channels,
/// no matrix algebra. Small inputs only.
pub fn attention_oracle(x: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(OrdError::Dimension(format!(
            "attention_oracle expects H x W x C, got {:?}",
            x.shape()
        )));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hw = h * w;
    if hw > 1024 {
        return Err(OrdError::Argument(format!(
            "attention_oracle limited to HW <= 1024, got {}",
            hw
        )));
    }
    let (cq, cv) = (params.cq(), params.cv());
    let project = |pos: usize, wmat: &Tensor, bias: &Tensor, dim: usize| -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for d in 0..dim {
            let mut acc = bias.data()[d];
            for ch in 0..c {
                acc += x.data()[pos * c + ch] * wmat.data()[ch * dim + d];
            }
            out[d] = acc;
        }
        out
    };
    let mut y = Tensor::zeros(&[h, w, c]);
    for i in 0..hw {
        let qi = project(i, &params.wq, &params.bq, cq);
        let mut agg = vec![0.0; cv];
        for j in 0..hw {
            let kj = project(j, &params.wk, &params.bk, cq);
            let mut attn = 0.0;
            for d in 0..cq {
                attn += qi[d] * kj[d];
            }
            let vj = project(j, &params.wv, &params.bv, cv);
            for d in 0..cv {
                agg[d] += attn * vj[d];
            }
        }
        for d in 0..cv {
            agg[d] /= hw as f64;
        }
        for ch in 0..c {
            let mut acc = params.bout.data()[ch];
            for d in 0..cv {
                acc += agg[d] * params.wout.data()[d * c + ch];
            }
            y.data_mut()[i * c + ch] = acc;
        }
    }
    Ok(y)
}

/// Random attention params with non-zero biases, for tests.
pub fn random_params<R: Rng>(c: usize, cq: usize, cv: usize, rng: &mut R) -> AttentionParams {
    AttentionParams {
        wq: Tensor::rand_uniform(&[c, cq], -1.0, 1.0, rng),
        bq: Tensor::rand_uniform(&[cq], -0.5, 0.5, rng),
        wk: Tensor::rand_uniform(&[c, cq], -1.0, 1.0, rng),
        bk: Tensor::rand_uniform(&[cq], -0.5, 0.5, rng),
        wv: Tensor::rand_uniform(&[c, cv], -1.0, 1.0, rng),
        bv: Tensor::rand_uniform(&[cv], -0.5, 0.5, rng),
        wout: Tensor::rand_uniform(&[cv, c], -1.0, 1.0, rng),
        bout: Tensor::rand_uniform(&[c], -0.5, 0.5, rng),
    }
}

/// Zero-bias variant used by linearity/scaling tests.
pub fn zero_bias(mut p: AttentionParams) -> AttentionParams {
    p.bq = Tensor::zeros(p.bq.shape());
    p.bk = Tensor::zeros(p.bk.shape());
    p.bv = Tensor::zeros(p.bv.shape());
    p.bout = Tensor::zeros(p.bout.shape());
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ops};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_propagate() {
        let params = zero_bias(AttentionParams::seeded(4, 2, 3, 0));
        let x = Tensor::zeros(&[2, 2, 4]);
        let out = self_attention(&x, &params).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
        assert!(out.attn.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.n, 4.0);
    }

    #[test]
    fn single_position_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(3, 2, 2, &mut rng);
        let x = Tensor::rand_uniform(&[1, 1, 3], -1.0, 1.0, &mut rng);
        let out = self_attention(&x, &params).unwrap();
        // Three-line hand computation for H=W=1.
        let proj = |wm: &Tensor, b: &Tensor, d: usize| -> Vec<f64> {
            (0..d)
                .map(|k| {
                    b.data()[k]
                        + (0..3)
                            .map(|c| x.data()[c] * wm.data()[c * d + k])
                            .sum::<f64>()
                })
                .collect()
        };
        let q = proj(&params.wq, &params.bq, 2);
        let k = proj(&params.wk, &params.bk, 2);
        let v = proj(&params.wv, &params.bv, 2);
        let attn = q[0] * k[0] + q[1] * k[1];
        assert!((out.attn.data()[0] - attn).abs() < 1e-12);
        for c in 0..3 {
            let want = params.bout.data()[c]
                + attn * (v[0] * params.wout.data()[c] + v[1] * params.wout.data()[3 + c]);
            assert!((out.y.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_oracle_seed13() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = random_params(4, 3, 5, &mut rng);
        let x = Tensor::rand_uniform(&[3, 3, 4], -2.0, 2.0, &mut rng);
        let fast = self_attention(&x, &params).unwrap();
        let slow = attention_oracle(&x, &params).unwrap();
        assert!(fast.y.max_abs_diff(&slow) < 1e-10);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(4, 2, 3, &mut rng);
        let x = Tensor::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut px = Tensor::zeros(&[2, 3, 4]);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                px.data_mut()[dst * 4 + c] = x.data()[src * 4 + c];
            }
        }
        let y = self_attention(&x, &params).unwrap().y;
        let py = self_attention(&px, &params).unwrap().y;
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((py.data()[dst * 4 + c] - y.data()[src * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attn_scales_quadratically_without_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = zero_bias(random_params(3, 2, 2, &mut rng));
        let x = Tensor::rand_uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let scaled = ops::scale(&x, 2.0);
        let a1 = self_attention(&x, &params).unwrap().attn;
        let a2 = self_attention(&scaled, &params).unwrap().attn;
        let want = ops::scale(&a1, 4.0);
        assert!(a2.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn oracle_size_guard() {
        let params = AttentionParams::seeded(2, 2, 2, 0);
        let x = Tensor::zeros(&[40, 40, 2]);
        assert!(matches!(
            attention_oracle(&x, &params),
            Err(OrdError::Argument(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let params = AttentionParams::seeded(4, 2, 3, 0);
        let x = Tensor::zeros(&[2, 2, 3]);
        assert!(matches!(
            self_attention(&x, &params),
            Err(OrdError::Dimension(_))
        ));
    }

    #[test]
    fn gradcheck_through_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = random_params(3, 2, 2, &mut rng);
        let x = Tensor::rand_uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let params: Vec<(String, Tensor)> = base
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuild = |flat: &[(String, Tensor)]| AttentionParams {
            wq: flat[0].1.clone(),
            bq: flat[1].1.clone(),
            wk: flat[2].1.clone(),
            bk: flat[3].1.clone(),
            wv: flat[4].1.clone(),
            bv: flat[5].1.clone(),
            wout: flat[6].1.clone(),
            bout: flat[7].1.clone(),
        };
        let run = |flat: &[(String, Tensor)]| -> crate::Result<(f64, Vec<Tensor>)> {
            let p = rebuild(flat);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let bound = p.bind(&mut tape);
            let (y, _) = self_attention_on_tape(&mut tape, xv, &bound)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss)?;
            let ids = [
                bound.wq, bound.bq, bound.wk, bound.bk, bound.wv, bound.bv, bound.wout,
                bound.bout,
            ];
            let gs = ids
                .iter()
                .map(|&id| grads.get(id).unwrap().clone())
                .collect();
            Ok((tape.value(loss).item(), gs))
        };
        let report = grad_check(
            &params,
            1e-5,
            |p| run(p).map(|(l, _)| l),
            |p| run(p).map(|(_, g)| g),
        )
        .unwrap();
        assert!(report.max_rel_diff < 1e-4, "{:?}", report);
    }
}
