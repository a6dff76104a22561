//! Reweighed Long-Range branch: each position's attended feature is rescaled
//! by a sigmoid gate over its total outgoing attention contribution.

use ordnet::attention::AttentionParams;
use ordnet::rlr::{reweighed_long_range, RLRConfig};
use ordnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ordnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = AttentionParams::seeded(6, 2, 3, 23);
    let x = Tensor::rand_uniform(&[6, 6, 6], -1.0, 1.0, &mut rng);

    let cfg = RLRConfig::default();
    let (z, gate) = reweighed_long_range(&x, &params, &cfg)?;
    println!("output_shape={:?}", z.shape());
    println!("gate_shape={:?}", gate.0.shape());
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &g in gate.0.data() {
        lo = lo.min(g);
        hi = hi.max(g);
        sum += g;
    }
    println!("gate_min={:.4} gate_max={:.4} gate_mean={:.4}", lo, hi, sum / 36.0);
    println!("gate_in_open_unit_interval={}", lo > 0.0 && hi < 1.0);
    println!(
        "extra_parameters_over_basic_sa={}",
        ordnet::rlr::param_count(&params) - params.param_count()
    );
    Ok(())
}
