//! One condensed QP from a closed-loop state: every backend against the
//! reference solution, and the gap curve against the linear bound.

use rwm_mpc::preset::{build_setup, PresetSpec};
use rwm_mpc::solver::{
    convergence_bounds, cost_of, initial_gap, mse, oracle_solve, Backend, FgmKernel, SolveOptions, ORACLE_TOL,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let setup = build_setup(&PresetSpec::default())?;
    let d = setup.scaled_design()?;
    let x = setup.trajectory_states(&d, 1, 11)?.remove(0);
    let qp = &d.qp;
    let star = oracle_solve(qp, &x, ORACLE_TOL)?;
    let j_star = cost_of(qp, &x, star.u.as_slice());
    println!("reference: J* = {j_star:.8e} after {} sweeps, residual {:.1e}", star.sweeps, star.residual);

    for backend in Backend::ALL {
        let rep = FgmKernel::new(&d, backend)?.solve(&x, &SolveOptions::new(d.i_max, backend))?;
        let m = mse(&rep.u_opt, star.u.as_slice(), qp.u_min_t.as_slice(), qp.u_max_t.as_slice())?;
        println!(
            "{:<8} MSE {m:.3e}  gap {:.3e}  restarts {:?}  saturations {}",
            backend.to_string(),
            cost_of(qp, &x, &rep.u_opt) - j_star,
            rep.restarts,
            rep.saturations
        );
    }

    let n = 50;
    let (gap0, r2) = initial_gap(qp, &d.pre, &x, star.u.as_slice());
    let bounds = convergence_bounds(d.pre.mu, d.pre.lip, gap0, r2, n)?;
    let rep = FgmKernel::new(&d, Backend::Full)?.solve(&x, &SolveOptions::new(n, Backend::Full))?;
    println!("{:>4} {:>12} {:>12}", "i", "gap", "bound");
    for i in [1, 2, 5, 10, 20, 30, 40, 50] {
        println!("{i:>4} {:>12.3e} {:>12.3e}", rep.cost_history[i - 1] - j_star, bounds.linear[i]);
    }
    Ok(())
}
