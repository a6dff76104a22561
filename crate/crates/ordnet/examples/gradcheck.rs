//! Finite-difference verification of the end-to-end training gradient:
//! full loss through backbone, both attention branches, fusion, and head.

use ordnet::harness::end_to_end_gradcheck;

fn main() -> ordnet::Result<()> {
    let report = end_to_end_gradcheck(8, 3, 0)?;
    println!("parameters_checked={}", report.per_parameter.len());
    println!("max_abs_diff={:e}", report.max_abs_diff);
    println!("max_rel_diff={:e}", report.max_rel_diff);
    for (name, rel) in &report.per_parameter {
        println!("param={} rel_diff={:e}", name, rel);
    }
    println!("pass={}", report.passes(1e-4));
    Ok(())
}
