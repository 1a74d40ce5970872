//! Builds the scaled controller design and writes it as JSON together with
//! a text report. Usage: `design_controller [out_dir]`.

use std::path::PathBuf;

use rwm_mpc::cli::design_report;
use rwm_mpc::preset::{build_setup, PresetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/examples-out".into()));
    std::fs::create_dir_all(&out)?;
    let setup = build_setup(&PresetSpec::default())?;
    let design = setup.scaled_design()?;
    print!("{}", design_report(&design));
    std::fs::write(out.join("design.json"), design.to_json())?;
    println!("wrote {}", out.join("design.json").display());
    Ok(())
}
