//! Nominal perturbation under MPC (full precision and fixed point) and the
//! clipped LQ baseline. Writes the MPC trace as CSV and SVG.
//! Usage: `closed_loop [out_dir]`.

use std::path::PathBuf;

use rwm_mpc::preset::{build_setup, PresetSpec};
use rwm_mpc::simloop::{plot_trace, run_closed_loop, ControllerKind};
use rwm_mpc::solver::Backend;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out".into()));
    std::fs::create_dir_all(&out)?;
    let setup = build_setup(&PresetSpec::default())?;
    let design = setup.scaled_design()?;

    let mut runs = vec![
        ("mpc full", setup.nominal_scenario(Backend::Full)),
        ("mpc fwl", setup.nominal_scenario(Backend::Fwl)),
    ];
    let mut lq = setup.nominal_scenario(Backend::Full);
    lq.controller = ControllerKind::SaturatedLq;
    runs.push(("clipped lq", lq));

    for (name, s) in &runs {
        let tr = run_closed_loop(&setup.plant, &design, s)?;
        let m = tr.metrics();
        println!(
            "{name:<10} peak |y| {:.3}  tail {:.2e}  stabilized {}  max |u| {:.2} V",
            m.peak_y, m.tail_y, m.stabilized, m.max_abs_u
        );
        if *name == "mpc full" {
            tr.write_csv(std::fs::File::create(out.join("trace.csv"))?)?;
            plot_trace(&tr, &out.join("trace.svg"))?;
        }
    }
    println!("wrote {}", out.join("trace.svg").display());
    Ok(())
}
