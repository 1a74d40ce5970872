//! The full verification battery on the default design.

use rwm_mpc::preset::PresetSpec;
use rwm_mpc::verify::{run_all, VerifyContext, VerifyLimits};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2024);
    let ctx = VerifyContext::new(&PresetSpec::default(), VerifyLimits::default(), seed)?;
    let report = run_all(&ctx);
    for c in &report.checks {
        println!("{c}");
    }
    println!("all passed: {}", report.all_passed);
    Ok(())
}
