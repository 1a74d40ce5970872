//! Largest perturbation each controller brings back, MPC against the LQ
//! gain with clipped inputs.

use rwm_mpc::preset::{build_setup, PresetSpec};
use rwm_mpc::simloop::amplitude_sweep;
use rwm_mpc::solver::Backend;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let setup = build_setup(&PresetSpec::default())?;
    let design = setup.scaled_design()?;
    let amplitudes: Vec<f64> = (1..=16).map(|k| 0.25 * k as f64).collect();
    let phase = setup.spec.phase;
    let rep = amplitude_sweep(
        &setup.plant,
        &design,
        &setup.nominal_scenario(Backend::Full),
        &amplitudes,
        |a| setup.x0(a, phase),
    )?;
    println!("{:>9} {:>6} {:>6}", "amplitude", "mpc", "lq");
    for p in &rep.points {
        println!("{:>9.2} {:>6} {:>6}", p.amplitude, p.mpc_stabilized, p.lq_stabilized);
    }
    println!(
        "max stabilizable: mpc {:.2}, lq {:.2}, ratio {:.3}",
        rep.max_stabilizable_mpc, rep.max_stabilizable_lq, rep.margin_ratio
    );
    Ok(())
}
