//! Monte Carlo tally of gradient-flow starts near a saddle and near a minimum.
//!
//! ```text
//! cargo run --release --example saddle_avoidance
//! ```

use saddle_blowup::flow::{monte_carlo_avoidance, FlowConfig};
use saddle_blowup::objective::{ObjectiveSpec, Polynomial};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let saddle = Polynomial::from_terms(2, [(vec![2, 0], 0.5), (vec![0, 2], -0.5)])?;
    let bowl = Polynomial::from_terms(2, [(vec![2, 0], 1.0), (vec![0, 2], 1.0)])?;
    let config = FlowConfig::default();

    for (name, f) in [("½(x² − y²)", saddle), ("x² + y²", bowl)] {
        let rep = monte_carlo_avoidance(&ObjectiveSpec::polynomial(f), &[0.0, 0.0], 0.1, 500, &config, 42)?;
        println!(
            "{name:>12}: escaped {:>3}, converged to center {:>3}, elsewhere {}, undecided {}",
            rep.n_escaped, rep.n_converged_to_saddle, rep.n_converged_elsewhere, rep.n_undecided
        );
    }
    Ok(())
}
