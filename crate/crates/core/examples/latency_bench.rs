//! Per-solve latency and accuracy for the three arithmetic backends.

use rwm_mpc::cli::{bench_table, format_bench};
use rwm_mpc::preset::{build_setup, PresetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let setup = build_setup(&PresetSpec::default())?;
    let design = setup.scaled_design()?;
    let states = setup.trajectory_states(&design, 200, 3)?;
    let rep = bench_table(&design, &states, 5)?;
    print!("{}", format_bench(&rep));
    println!("sampling period {:.0} us", setup.spec.ts * 1e6);
    Ok(())
}
