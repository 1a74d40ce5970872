//! The plant used throughout: power-supply dynamics in series with an
//! unstable rotating mode and stable wall modes, discretized by zero-order
//! hold. Prints the spectrum and checks open-loop growth.

use nalgebra::DVector;
use rwm_mpc::linalg::spectral_radius;
use rwm_mpc::preset::{build_setup, PresetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = PresetSpec::default();
    let setup = build_setup(&spec)?;
    let plant = &setup.plant.model;
    let design = &setup.design_model;
    println!("plant: {} states, {} inputs, {} sensors", plant.nx(), plant.nu(), plant.ny());
    println!("design model: {} states", design.nx());
    println!("observer rho = {:e}", setup.observer_rho);

    let rho = spectral_radius(&plant.a);
    println!("spectral radius {rho:.6}, growth rate {:.3} 1/s (target {})", rho.ln() / spec.ts, spec.gamma);

    let steps = (3.0 / spec.gamma / spec.ts).round() as usize;
    let mut x = DVector::from_vec(setup.x0(1.0, 0.0));
    let n0 = x.norm();
    let u = DVector::zeros(plant.nu());
    for _ in 0..steps {
        x = plant.step(&x, &u);
    }
    let t = steps as f64 * spec.ts;
    println!("open loop {t:.4} s: |x| grew {:.4}x, exp(gamma t) = {:.4}", x.norm() / n0, (spec.gamma * t).exp());
    Ok(())
}
