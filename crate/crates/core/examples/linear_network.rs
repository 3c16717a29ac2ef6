//! Deep linear network saddles: ζ, κ, the leading polynomial and the
//! weakly-strict certificate at W = 0 and at a point with two zero blocks.
//!
//! ```text
//! cargo run --example linear_network
//! ```

use nalgebra::DMatrix;
use saddle_blowup::lnn::{
    certify_weakly_strict, default_zero_tol, kappa, leading_poly, trace_hessian_check, zeta, LNNProblem,
    WeightVector,
};
use saddle_blowup::sphere::SearchOptions;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.3, 0.2, -1.0, 0.7]);
    let y = DMatrix::from_row_slice(2, 3, &[0.4, 1.1, -0.6, -0.9, 0.3, 0.8]);
    let prob = LNNProblem::new(vec![2, 2, 2, 2], x, y)?;

    let zero = prob.zero_weights();
    let mut blocks = zero.blocks.clone();
    blocks[1] = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, 0.1, 1.3]);
    let partial = WeightVector::new(blocks);

    for (name, w) in [("W = 0", zero), ("W2 only", partial)] {
        let z = zeta(&w, default_zero_tol(&w));
        let k = kappa(&prob, &w, 8)?;
        let (_, p) = leading_poly(&prob, &w)?;
        let rep = certify_weakly_strict(&prob, &w, &SearchOptions::default())?;
        println!(
            "{name}: zeta {z}, kappa {k}, |tr D²P| <= {:.1e}, weakly strict {}, {} sphere critical points",
            trace_hessian_check(&p, 100, 0),
            rep.weakly_strict,
            rep.crit_points.len()
        );
    }
    Ok(())
}
