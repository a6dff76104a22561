//! Middle-Range branch: attention restricted to a P x P partition. The demo
//! perturbs one pixel and shows that only its own patch reacts.

use ordnet::attention::AttentionParams;
use ordnet::mr::{middle_range, MRConfig, PaddingMode};
use ordnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ordnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = AttentionParams::seeded(6, 2, 3, 11);
    let x = Tensor::rand_uniform(&[8, 8, 6], -1.0, 1.0, &mut rng);
    let cfg = MRConfig {
        patches: 2,
        padding: PaddingMode::Strict,
    };

    let base = middle_range(&x, &params, &cfg)?;
    println!("patches={}x{}", cfg.patches, cfg.patches);
    println!("output_shape={:?}", base.shape());

    // bump one pixel inside the top-left patch
    let mut xp = x.clone();
    xp.set(&[1, 2, 0], xp.at(&[1, 2, 0]) + 1.0);
    let pert = middle_range(&xp, &params, &cfg)?;
    for pi in 0..2usize {
        for pj in 0..2usize {
            let mut max_delta: f64 = 0.0;
            for i in pi * 4..(pi + 1) * 4 {
                for j in pj * 4..(pj + 1) * 4 {
                    for c in 0..6 {
                        max_delta = max_delta
                            .max((base.at(&[i, j, c]) - pert.at(&[i, j, c])).abs());
                    }
                }
            }
            println!("patch=({},{}) max_output_delta={:e}", pi, pj, max_delta);
        }
    }
    Ok(())
}
