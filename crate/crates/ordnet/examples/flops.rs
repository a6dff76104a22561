//! Analytic cost of the attention module as the partition grid grows: the
//! quadratic stages shrink by exactly P^2.

use ordnet::analysis::flops_estimate;

fn main() -> ordnet::Result<()> {
    let (h, w, c, cq, ck, cv) = (60, 60, 2048, 256, 256, 512);
    println!("setting: {}x{} feature, C={} Cq={} Ck={} Cv={}", h, w, c, cq, ck, cv);
    for p in [1usize, 2, 4] {
        let r = flops_estimate(h, w, c, cq, ck, cv, p)?;
        println!(
            "patches={}x{} projections={} attention_product={} aggregation={} total={}",
            p, p, r.projections, r.attention_product, r.aggregation, r.total
        );
    }
    let p1 = flops_estimate(h, w, c, cq, ck, cv, 1)?;
    let p2 = flops_estimate(h, w, c, cq, ck, cv, 2)?;
    let p4 = flops_estimate(h, w, c, cq, ck, cv, 4)?;
    println!(
        "quadratic_stage_ratio_p2={} quadratic_stage_ratio_p4={}",
        p1.attention_product / p2.attention_product,
        p1.attention_product / p4.attention_product
    );
    Ok(())
}
