//! Linearizes the blown-up gradient field at each rest point on the sphere
//! and compares with `{k p(u*)} ∪ σ(tangent Hessian)`.
//!
//! ```text
//! cargo run --example blowup_spectrum
//! ```

use saddle_blowup::blowup::{linearization_spectrum, multiset_distance, predicted_spectrum, BlowupField};
use saddle_blowup::objective::{ObjectiveSpec, Polynomial};
use saddle_blowup::sphere::{find_crit_points, SearchOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // ½(x² − y²)
    let f = Polynomial::from_terms(2, [(vec![2, 0], 0.5), (vec![0, 2], -0.5)])?;
    let field = BlowupField::new(ObjectiveSpec::polynomial(f), &[0.0, 0.0], 1.0)?;
    let opts = SearchOptions::default();
    let tol = opts.crit_tol_for(field.leading_poly());

    for c in find_crit_points(field.leading_poly(), &opts)? {
        let got = linearization_spectrum(&field, &c, tol)?;
        let want = predicted_spectrum(field.k(), &c);
        let eig: Vec<String> = got.iter().map(|z| format!("{:+.6}", z.re)).collect();
        println!(
            "u = [{:+.3}, {:+.3}]  spectrum {{{}}}  error {:.1e}",
            c.u[0],
            c.u[1],
            eig.join(", "),
            multiset_distance(&got, &want)
        );
    }
    Ok(())
}
