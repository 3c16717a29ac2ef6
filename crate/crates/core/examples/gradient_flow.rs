//! One gradient-flow trajectory near the xyz saddle, the same start lifted to
//! the blown-up cylinder, and the tail diagnostics of both.
//!
//! ```text
//! cargo run --example gradient_flow
//! ```

use nalgebra::DVector;
use saddle_blowup::blowup::{BlowupField, CylinderPoint};
use saddle_blowup::flow::{
    gradient_energy, integrate_blowup_flow, integrate_gradient_flow, omega_diagnostics, FlowConfig, OmegaReference,
};
use saddle_blowup::objective::{ObjectiveSpec, Polynomial};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = Polynomial::from_terms(
        3,
        [(vec![2, 2, 2], 0.5), (vec![1, 1, 1], -1.0), (vec![0, 0, 0], 0.5)],
    )?;
    let obj = ObjectiveSpec::polynomial(f);
    let config = FlowConfig {
        t_max: 100.0,
        ..FlowConfig::default()
    };

    let w0 = [0.03, 0.0, 0.04];
    let traj = integrate_gradient_flow(&obj, &w0, &config)?;
    let last = traj.last();
    println!(
        "chart flow: {:?} at t = {:.2}, arc length {:.4}, ∫|∇f|² = {:.4}",
        traj.termination,
        last.t,
        traj.arc_length,
        gradient_energy(&traj)
    );

    let field = BlowupField::new(obj, &[0.0; 3], 2.0)?;
    let u0 = DVector::from_vec(vec![0.6, 0.0, 0.8]);
    let lifted = integrate_blowup_flow(&field, &CylinderPoint::new(0.05, u0), &config)?;
    println!("blown-up flow: {:?} after {} samples", lifted.termination, lifted.samples.len());
    match omega_diagnostics(&lifted, OmegaReference::Blowup(&field)) {
        Ok(d) => println!("  tail directions: {:?}", d.omega2_directions),
        Err(e) => println!("  no tail diagnostics: {e}"),
    }

    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    println!("{} CSV rows written to memory", csv.split(|&b| b == b'\n').count() - 2);
    Ok(())
}
