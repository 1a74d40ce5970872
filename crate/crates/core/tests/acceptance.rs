//! Runs the full acceptance battery once and prints one line per check.
//! Built without the libtest harness so the lines show in `cargo test`.

use std::process::ExitCode;

use rwm_mpc::preset::PresetSpec;
use rwm_mpc::verify::{run_all, VerifyContext, VerifyLimits};

fn main() -> ExitCode {
    let ctx = match VerifyContext::new(&PresetSpec::default(), VerifyLimits::default(), 2024) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("acceptance setup failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let report = run_all(&ctx);
    println!("acceptance: {} checks", report.checks.len());
    for c in &report.checks {
        println!("{c}");
    }
    if report.all_passed && report.checks.len() == 12 {
        println!("acceptance: all passed");
        ExitCode::SUCCESS
    } else {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.id).collect();
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
