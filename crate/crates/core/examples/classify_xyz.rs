//! Classifies the degenerate saddle of ½(xyz − 1)² at the origin.
//!
//! ```text
//! cargo run --example classify_xyz
//! ```

use saddle_blowup::objective::{leading_term, ObjectiveSpec, Polynomial};
use saddle_blowup::sphere::{classify_saddle, SearchOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = Polynomial::from_terms(
        3,
        [(vec![2, 2, 2], 0.5), (vec![1, 1, 1], -1.0), (vec![0, 0, 0], 0.5)],
    )?;
    let obj = ObjectiveSpec::polynomial(f);
    let origin = [0.0; 3];

    let (k, p) = leading_term(&obj, &origin)?;
    println!("order k = {k}, leading term has {} monomial(s)", p.as_polynomial().num_terms());

    let report = classify_saddle(&obj, &origin, &SearchOptions::default())?;
    println!(
        "weakly strict: {}, tamed: {} ({:?})",
        report.weakly_strict, report.tamed, report.tamed_evidence
    );
    for c in &report.crit_points {
        println!(
            "  u = [{:+.4}, {:+.4}, {:+.4}]  p = {:+.6}  index {}",
            c.u[0], c.u[1], c.u[2], c.value, c.morse_index
        );
    }
    Ok(())
}
