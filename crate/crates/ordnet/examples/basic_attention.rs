//! Basic dot-product self-attention over a small feature map, checked
//! against the nested-loop reference implementation.

use ordnet::attention::{attention_oracle, self_attention, AttentionParams};
use ordnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ordnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = AttentionParams::seeded(8, 2, 4, 7);
    let x = Tensor::rand_uniform(&[4, 4, 8], -1.0, 1.0, &mut rng);

    let out = self_attention(&x, &params)?;
    println!("input_shape={:?}", x.shape());
    println!("output_shape={:?}", out.y.shape());
    println!("attn_shape={:?} (HW x HW)", out.attn.shape());
    println!("normalizer={} (1/HW)", out.n);

    let reference = attention_oracle(&x, &params)?;
    println!("oracle_max_abs_diff={:e}", out.y.max_abs_diff(&reference));
    println!(
        "attn_row0_first4={:?}",
        out.attn.data()[..4]
            .iter()
            .map(|v| (v * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
    Ok(())
}
