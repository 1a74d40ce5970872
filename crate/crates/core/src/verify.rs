//! The acceptance battery: twelve checks over the default surrogate design
//! and seeded random instances. Used by the `verify` subcommand and by the
//! acceptance test target.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{
    condense, dare_residual, precondition, solve_dare, DesignOptions, MpcDesign, MpcTuning,
    PreconditionerKind,
};
use crate::fxp::{quantize, tree_matvec, FixedFormat, FixedMatrix, FixedVector};
use crate::preset::{build_setup, PresetError, PresetSpec, Setup};
use crate::simloop::{amplitude_sweep, benchmark, run_closed_loop, ControllerKind};
use crate::solver::{
    certified_iterations, convergence_bounds, cost_of, initial_gap, mse, oracle_solve, Backend,
    FgmKernel, SolveOptions, ORACLE_TOL,
};
use crate::ssmodel::{StateSpaceModel, TimeDomain};

pub const VERIFY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: {} ({:.2} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub checks: Vec<CheckOutcome>,
    pub all_passed: bool,
}

/// Thresholds of the battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyLimits {
    pub accuracy_states: usize,
    pub max_mse: f64,
    pub max_gap: f64,
    pub max_accuracy_seconds: f64,
    pub bound_states: usize,
    pub bound_iterations: usize,
    pub certify_target: f64,
    pub fwl_max_mse: f64,
    pub fwl_max_dj: f64,
    pub scaling_steps: usize,
    pub scaling_rel_tol: f64,
    pub condense_instances: usize,
    pub condense_rel_tol: f64,
    pub dare_residual: f64,
    pub dare_scalar_tol: f64,
    pub precondition_instances: usize,
    pub lambda_tol: f64,
    pub quantization_samples: usize,
    pub growth_tol: f64,
    pub decay_ratio: f64,
    pub sweep_amplitudes: Vec<f64>,
    pub bench_repeats: usize,
    pub latency_us: f64,
}

impl Default for VerifyLimits {
    fn default() -> Self {
        Self {
            accuracy_states: 200,
            max_mse: 1e-4,
            max_gap: 3e-4,
            max_accuracy_seconds: 60.0,
            bound_states: 12,
            bound_iterations: 50,
            certify_target: 1e-4,
            fwl_max_mse: 1e-4,
            fwl_max_dj: 1e-5,
            scaling_steps: 1000,
            scaling_rel_tol: 1e-8,
            condense_instances: 100,
            condense_rel_tol: 1e-10,
            dare_residual: 1e-10,
            dare_scalar_tol: 1e-12,
            precondition_instances: 50,
            lambda_tol: 1e-9,
            quantization_samples: 1_000_000,
            growth_tol: 0.05,
            decay_ratio: 0.01,
            sweep_amplitudes: (1..=16).map(|k| 0.25 * k as f64).collect(),
            bench_repeats: 5,
            latency_us: 750.0,
        }
    }
}

/// Setup, scaled design and the seeded state set shared by several checks.
pub struct VerifyContext {
    pub setup: Setup,
    pub design: MpcDesign,
    pub states: Vec<Vec<f64>>,
    pub limits: VerifyLimits,
    pub seed: u64,
}

impl VerifyContext {
    pub fn new(spec: &PresetSpec, limits: VerifyLimits, seed: u64) -> Result<Self, PresetError> {
        let setup = build_setup(spec)?;
        let design = setup.scaled_design()?;
        let states = setup.trajectory_states(&design, limits.accuracy_states, seed)?;
        Ok(Self {
            setup,
            design,
            states,
            limits,
            seed,
        })
    }

    pub fn with_design(setup: Setup, design: MpcDesign, limits: VerifyLimits, seed: u64) -> Result<Self, PresetError> {
        let states = setup.trajectory_states(&design, limits.accuracy_states, seed)?;
        Ok(Self {
            setup,
            design,
            states,
            limits,
            seed,
        })
    }
}

fn timed(id: u8, name: &str, f: impl FnOnce() -> Result<(bool, String), String>) -> CheckOutcome {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        id,
        name: name.into(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Runs all twelve checks in order.
pub fn run_all(ctx: &VerifyContext) -> VerifyReport {
    let checks = vec![
        check_solver_accuracy(ctx),
        check_convergence_bound(ctx),
        check_fwl_degradation(ctx),
        check_scaling_equivalence(ctx),
        check_condensing(ctx),
        check_riccati(ctx),
        check_preconditioning(ctx),
        check_fwl_determinism(ctx),
        check_quantization(ctx),
        check_stabilization(ctx),
        check_domain_of_attraction(ctx),
        check_throughput(ctx),
    ];
    let all_passed = checks.iter().all(|c| c.passed);
    VerifyReport {
        schema_version: VERIFY_SCHEMA_VERSION,
        seed: ctx.seed,
        checks,
        all_passed,
    }
}

fn bounds(d: &MpcDesign) -> (&[f64], &[f64]) {
    (d.qp.u_min_t.as_slice(), d.qp.u_max_t.as_slice())
}

/// 1: 20-iteration full-precision solves against the coordinate-descent
/// reference over the trajectory state set.
pub fn check_solver_accuracy(ctx: &VerifyContext) -> CheckOutcome {
    timed(1, "solver accuracy", || {
        let t0 = Instant::now();
        let d = &ctx.design;
        let (lo, hi) = bounds(d);
        let kernel = FgmKernel::new(d, Backend::Full).map_err(err)?;
        let opts = SolveOptions::new(d.i_max, Backend::Full);
        let (mut worst_mse, mut worst_gap) = (0.0f64, f64::NEG_INFINITY);
        for x in &ctx.states {
            let star = oracle_solve(&d.qp, x, ORACLE_TOL).map_err(err)?;
            let rep = kernel.solve(x, &opts).map_err(err)?;
            worst_mse = worst_mse.max(mse(&rep.u_opt, star.u.as_slice(), lo, hi).map_err(err)?);
            let gap = cost_of(&d.qp, x, &rep.u_opt) - cost_of(&d.qp, x, star.u.as_slice());
            worst_gap = worst_gap.max(gap);
        }
        let secs = t0.elapsed().as_secs_f64();
        let l = &ctx.limits;
        let passed = worst_mse < l.max_mse && worst_gap < l.max_gap && secs < l.max_accuracy_seconds;
        Ok((
            passed,
            format!(
                "{} states, i = {}: max MSE {:.3e} (< {:.0e}), max gap {:.3e} (< {:.0e}), {:.1} s",
                ctx.states.len(),
                d.i_max,
                worst_mse,
                l.max_mse,
                worst_gap,
                l.max_gap,
                secs
            ),
        ))
    })
}

/// 2: empirical gap curves under the linear bound, and the certified count
/// with and without diagonal preconditioning. The count over the state set
/// is the worst case; a state already within the target needs zero
/// iterations either way and is not a regression.
pub fn check_convergence_bound(ctx: &VerifyContext) -> CheckOutcome {
    timed(2, "convergence bound", || {
        let l = &ctx.limits;
        let d = &ctx.design;
        let states = pick(&ctx.states, l.bound_states, ctx.seed ^ 0x5eed);
        let plain = ctx
            .setup
            .design_with_options(
                &d.scaling,
                &DesignOptions {
                    preconditioner: PreconditionerKind::Scalar,
                    ..ctx.setup.design_options()
                },
            )
            .map_err(err)?;
        let kernel = FgmKernel::new(d, Backend::Full).map_err(err)?;
        let opts = SolveOptions::new(l.bound_iterations, Backend::Full);
        let mut worst_ratio = 0.0f64;
        let mut violations = 0;
        let (mut cert_on, mut cert_off) = (0usize, 0usize);
        let (mut faster_without, mut ties) = (0usize, Vec::new());
        for x in &states {
            let star = oracle_solve(&d.qp, x, ORACLE_TOL).map_err(err)?;
            let j_star = cost_of(&d.qp, x, star.u.as_slice());
            let (gap0, r2) = initial_gap(&d.qp, &d.pre, x, star.u.as_slice());
            let b = convergence_bounds(d.pre.mu, d.pre.lip, gap0, r2, l.bound_iterations).map_err(err)?;
            let rep = kernel.solve(x, &opts).map_err(err)?;
            // rounding allowance for evaluating J near J*
            let slack = 1e-12 * j_star.abs().max(1.0);
            for (i, j) in rep.cost_history.iter().enumerate() {
                let gap = j - j_star;
                let bound = b.linear[i + 1];
                if gap > bound + slack {
                    violations += 1;
                }
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(gap / bound);
                }
            }
            let on = certified_iterations(d.pre.mu, d.pre.lip, gap0, l.certify_target).map_err(err)?;
            let (gap_off, _) = initial_gap(&plain.qp, &plain.pre, x, star.u.as_slice());
            let off = certified_iterations(plain.pre.mu, plain.pre.lip, gap_off, l.certify_target).map_err(err)?;
            cert_on = cert_on.max(on);
            cert_off = cert_off.max(off);
            if off < on {
                faster_without += 1;
            } else if off == on {
                ties.push(on);
            }
        }
        Ok((
            violations == 0 && faster_without == 0 && cert_off > cert_on && ties.iter().all(|&t| t == 0),
            format!(
                "{} states, i <= {}: {} bound violations, max gap/bound {:.2e}; certified iterations for {:.0e}: {} preconditioned vs {} without; {} states faster without, ties at {:?}",
                states.len(),
                l.bound_iterations,
                violations,
                worst_ratio,
                l.certify_target,
                cert_on,
                cert_off,
                faster_without,
                ties
            ),
        ))
    })
}

/// Seeded subset of `n` distinct states.
fn pick(states: &[Vec<f64>], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..states.len()).collect();
    for i in 0..idx.len().min(n) {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.into_iter().take(n).map(|i| states[i].clone()).collect()
}

/// 3: fixed-point against full precision on the same state set.
pub fn check_fwl_degradation(ctx: &VerifyContext) -> CheckOutcome {
    timed(3, "fwl degradation", || {
        let d = &ctx.design;
        let (lo, hi) = bounds(d);
        let full = FgmKernel::new(d, Backend::Full).map_err(err)?;
        let fwl = FgmKernel::new(d, Backend::Fwl).map_err(err)?;
        let (mut worst_mse, mut worst_dj, mut sats) = (0.0f64, 0.0f64, 0u64);
        for x in &ctx.states {
            let a = full.solve(x, &SolveOptions::new(d.i_max, Backend::Full)).map_err(err)?;
            let b = fwl.solve(x, &SolveOptions::new(d.i_max, Backend::Fwl)).map_err(err)?;
            worst_mse = worst_mse.max(mse(&b.u_opt, &a.u_opt, lo, hi).map_err(err)?);
            worst_dj = worst_dj.max((cost_of(&d.qp, x, &b.u_opt) - cost_of(&d.qp, x, &a.u_opt)).abs());
            sats += b.saturations;
        }
        let l = &ctx.limits;
        let f = &d.fwl;
        Ok((
            worst_mse <= l.fwl_max_mse && worst_dj <= l.fwl_max_dj && sats == 0,
            format!(
                "iterate {}b, Hessian {}b/{}i, restart {}b: max MSE {:.3e} (<= {:.0e}), max |dJ| {:.3e} (<= {:.0e}), {} saturations",
                f.iterate.width(),
                f.hessian.width(),
                f.hessian.int_bits(),
                f.restart.width(),
                worst_mse,
                l.fwl_max_mse,
                worst_dj,
                l.fwl_max_dj,
                sats
            ),
        ))
    })
}

/// 4: closed-loop inputs of the calibrated design against the design with
/// unit state and output scaling.
pub fn check_scaling_equivalence(ctx: &VerifyContext) -> CheckOutcome {
    timed(4, "scaling equivalence", || {
        let unscaled = ctx.setup.unscaled_design().map_err(err)?;
        let mut s = ctx.setup.nominal_scenario(Backend::Full);
        s.steps = ctx.limits.scaling_steps;
        let a = run_closed_loop(&ctx.setup.plant, &ctx.design, &s).map_err(err)?;
        let b = run_closed_loop(&ctx.setup.plant, &unscaled, &s).map_err(err)?;
        let peak = a.max_abs_u();
        let diff = a
            .u
            .iter()
            .zip(&b.u)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        let rel = if peak > 0.0 { diff / peak } else { diff };
        Ok((
            rel <= ctx.limits.scaling_rel_tol,
            format!(
                "{} steps: max |u_scaled - u_unscaled| / max |u| = {:.3e} (<= {:.0e}); K_x spans {:.2e}..{:.2e}",
                s.steps,
                rel,
                ctx.limits.scaling_rel_tol,
                ctx.design.scaling.k_x.min(),
                ctx.design.scaling.k_x.max()
            ),
        ))
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n, 1.0);
    &g * g.transpose() + DMatrix::identity(n, n) * floor
}

/// Explicit rollout of the blocked finite-horizon cost.
fn rollout_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    blocks: &[usize],
    x0: &DVector<f64>,
    moves: &[DVector<f64>],
) -> f64 {
    let mut x = x0.clone();
    let mut j = 0.0;
    for (blk, &len) in blocks.iter().enumerate() {
        let u = &moves[blk];
        for _ in 0..len {
            j += 0.5 * (x.dot(&(q * &x)) + u.dot(&(r * u)));
            x = a * &x + b * u;
        }
    }
    j + 0.5 * x.dot(&(p * &x))
}

/// 5: condensed cost against the explicit rollout on random small problems.
pub fn check_condensing(ctx: &VerifyContext) -> CheckOutcome {
    timed(5, "condensing oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xc0de);
        let mut worst = 0.0f64;
        for _ in 0..ctx.limits.condense_instances {
            let n = rng.random_range(1..=5);
            let m = rng.random_range(1..=3);
            let horizon = rng.random_range(1..=6);
            let mut blocks = Vec::new();
            let mut left = horizon;
            while left > 0 {
                let len = rng.random_range(1..=left);
                blocks.push(len);
                left -= len;
            }
            let a = random_matrix(&mut rng, n, n, 1.2);
            let b = random_matrix(&mut rng, n, m, 1.0);
            let model = StateSpaceModel::new(a.clone(), b.clone(), DMatrix::identity(n, n), TimeDomain::Discrete(1.0))
                .map_err(err)?;
            let q = random_psd(&mut rng, n, 0.0);
            let r = random_psd(&mut rng, m, 0.1);
            let p = random_psd(&mut rng, n, 0.0);
            let tuning = MpcTuning {
                q_c: q.clone(),
                r_c: r.clone(),
                horizon,
                blocks: blocks.clone(),
                u_min: DVector::from_element(m, -1.0),
                u_max: DVector::from_element(m, 1.0),
                q_k: DMatrix::identity(n, n),
                r_k: DMatrix::identity(n, n),
            };
            let qp = condense(&model, &tuning, &p, &blocks).map_err(err)?;
            let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let moves: Vec<DVector<f64>> = blocks
                .iter()
                .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0)))
                .collect();
            let u = DVector::from_iterator(m * blocks.len(), moves.iter().flat_map(|v| v.iter().copied()));
            let want = rollout_cost(&a, &b, &q, &r, &p, &blocks, &x0, &moves);
            let got = qp.cost(&x0, &u);
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
        }
        Ok((
            worst <= ctx.limits.condense_rel_tol,
            format!(
                "{} instances (n <= 5, m <= 3, N <= 6, random blocking): max relative error {:.3e} (<= {:.0e})",
                ctx.limits.condense_instances, worst, ctx.limits.condense_rel_tol
            ),
        ))
    })
}

/// 6: Riccati residuals of the design solutions and of random instances,
/// plus the scalar closed form `2 + sqrt(5)`.
pub fn check_riccati(ctx: &VerifyContext) -> CheckOutcome {
    timed(6, "riccati", || {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let scalar = solve_dare(&one(2.0), &one(1.0), &one(1.0), &one(1.0)).map_err(err)?;
        let scalar_err = (scalar.p[(0, 0)] - (2.0 + 5f64.sqrt())).abs();
        let mut worst = ctx.design.report.dare_residual.max(ctx.design.report.kalman_residual);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xda7e);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=3);
            let a = random_matrix(&mut rng, n, n, 1.0);
            let b = random_matrix(&mut rng, n, m, 1.0);
            let q = random_psd(&mut rng, n, 0.1);
            let r = random_psd(&mut rng, m, 0.1);
            let sol = solve_dare(&a, &b, &q, &r).map_err(err)?;
            worst = worst.max(dare_residual(&a, &b, &q, &r, &sol.p));
        }
        let l = &ctx.limits;
        Ok((
            worst <= l.dare_residual && scalar_err <= l.dare_scalar_tol,
            format!(
                "max relative residual {:.3e} (<= {:.0e}) over the design and 20 random instances; scalar |p - (2 + sqrt 5)| = {:.1e}",
                worst, l.dare_residual, scalar_err
            ),
        ))
    })
}

/// 7: largest eigenvalue one and no worse conditioning on random PD Hessians.
pub fn check_preconditioning(ctx: &VerifyContext) -> CheckOutcome {
    timed(7, "preconditioning", || {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x9e55);
        let (mut worst_lambda, mut worse) = (0.0f64, 0);
        let mut best_gain = f64::INFINITY;
        for _ in 0..ctx.limits.precondition_instances {
            let n = rng.random_range(2..=30);
            let g = random_matrix(&mut rng, n, n, 1.0);
            let s = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-2.0..2.0)));
            let h = DMatrix::from_fn(n, n, |i, j| s[i] * s[j]) .component_mul(&(&g * g.transpose() + DMatrix::identity(n, n) * 0.05));
            let pre = precondition(&h).map_err(err)?;
            let ev = nalgebra::SymmetricEigen::new(pre.symmetric(&h)).eigenvalues;
            let top = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bottom = ev.iter().copied().fold(f64::INFINITY, f64::min);
            worst_lambda = worst_lambda.max((top - 1.0).abs());
            let e0 = nalgebra::SymmetricEigen::new(h.clone()).eigenvalues;
            let k0 = e0.max() / e0.min();
            if top / bottom > k0 {
                worse += 1;
            }
            best_gain = best_gain.min(k0 / (top / bottom));
        }
        Ok((
            worst_lambda <= ctx.limits.lambda_tol && worse == 0,
            format!(
                "{} Hessians: max |lambda_max - 1| = {:.2e} (<= {:.0e}), {} with a larger condition number, smallest improvement {:.2}x",
                ctx.limits.precondition_instances, worst_lambda, ctx.limits.lambda_tol, worse, best_gain
            ),
        ))
    })
}

/// 8: repeated fixed-point runs give identical bits.
pub fn check_fwl_determinism(ctx: &VerifyContext) -> CheckOutcome {
    timed(8, "fwl determinism", || {
        let f = &ctx.design.fwl;
        let n = ctx.design.dim();
        let run_tree = || -> Result<Vec<i128>, String> {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x7ae3);
            let vals: Vec<f64> = (0..n * n).map(|_| rng.random_range(-0.45..0.45)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = FixedMatrix::quantize(n, n, &vals, f.hessian).map_err(err)?;
            let v = FixedVector::quantize(&v, f.iterate).map_err(err)?;
            Ok(tree_matvec(&h, &v, &f.hessian_tree).map_err(err)?.raw().to_vec())
        };
        let tree_same = run_tree()? == run_tree()?;
        let states = pick(&ctx.states, 50, ctx.seed ^ 0xb17);
        let solve_all = || -> Result<Vec<String>, String> {
            let k = FgmKernel::new(&ctx.design, Backend::Fwl).map_err(err)?;
            states
                .iter()
                .map(|x| k.solve(x, &SolveOptions::new(ctx.design.i_max, Backend::Fwl)).map(|r| r.to_json()).map_err(err))
                .collect()
        };
        let (a, b) = (solve_all()?, solve_all()?);
        let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        Ok((
            tree_same && differing == 0,
            format!(
                "tree_matvec {n}x{n} {}; {} fwl solves, {} reports differ",
                if tree_same { "bit-identical" } else { "DIFFERS" },
                states.len(),
                differing
            ),
        ))
    })
}

/// 9: half-ulp rounding in range, exact clamping out of range.
pub fn check_quantization(ctx: &VerifyContext) -> CheckOutcome {
    timed(9, "quantization bounds", || {
        let f = &ctx.design.fwl;
        let formats = [
            f.iterate,
            f.hessian,
            f.gain,
            f.linear,
            FixedFormat::new(16, 4).map_err(err)?,
            FixedFormat::new(40, 10).map_err(err)?,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ 0x9a27);
        let mut bad = 0u64;
        let mut worst = 0.0f64;
        for fmt in formats {
            let span = fmt.max_value() - fmt.min_value();
            let scale = 2f64.powi(fmt.frac_bits());
            for _ in 0..ctx.limits.quantization_samples {
                // a quarter of the samples fall outside the representable range
                let x = fmt.min_value() - 0.125 * span + rng.random::<f64>() * 1.25 * span;
                let q = quantize(x, fmt).map_err(err)?;
                if x > fmt.max_value() + 0.5 * fmt.ulp() {
                    bad += u64::from(q.raw() != fmt.max_raw());
                } else if x < fmt.min_value() - 0.5 * fmt.ulp() {
                    bad += u64::from(q.raw() != fmt.min_raw());
                } else if x <= fmt.max_value() && x >= fmt.min_value() {
                    // both operands are within a factor of two or exact integers,
                    // so the subtraction is exact
                    let e = (x * scale - q.raw() as f64).abs();
                    worst = worst.max(e);
                    bad += u64::from(e > 0.5);
                }
            }
        }
        Ok((
            bad == 0,
            format!(
                "{} samples x {} formats: {} violations, max in-range error {:.3} ulp",
                ctx.limits.quantization_samples,
                formats.len(),
                bad,
                worst
            ),
        ))
    })
}

/// 10: nominal perturbation decays under MPC with `|u|` within the bounds,
/// and the uncontrolled plant grows at the modal rate.
pub fn check_stabilization(ctx: &VerifyContext) -> CheckOutcome {
    timed(10, "closed-loop stabilization", || {
        let setup = &ctx.setup;
        let bound = setup.spec.u_bound;
        let mut detail = Vec::new();
        let mut passed = true;
        for backend in [Backend::Full, Backend::Fwl] {
            let tr = run_closed_loop(&setup.plant, &ctx.design, &setup.nominal_scenario(backend)).map_err(err)?;
            let ratio = tr.tail_y() / tr.peak_y();
            let ok = ratio < ctx.limits.decay_ratio && tr.max_abs_u() <= bound;
            passed &= ok;
            detail.push(format!("{backend}: tail/peak {:.2e}, max |u| {:.3} V", ratio, tr.max_abs_u()));
        }
        let mut s = setup.nominal_scenario(Backend::Full);
        s.controller = ControllerKind::Off;
        s.steps = (3.0 / setup.spec.gamma / setup.spec.ts).round() as usize + 1;
        let tr = run_closed_loop(&setup.plant, &ctx.design, &s).map_err(err)?;
        let t = (s.steps - 1) as f64 * setup.spec.ts;
        let growth = tr.x_norm[s.steps - 1] / tr.x_norm[0];
        let want = (setup.spec.gamma * t).exp();
        let growth_err = (growth / want - 1.0).abs();
        passed &= growth_err <= ctx.limits.growth_tol;
        detail.push(format!("open loop over {t:.4} s: growth {growth:.4} vs exp(gamma t) {want:.4}"));
        Ok((passed, detail.join("; ")))
    })
}

/// 11: MPC stabilizes at least the amplitudes the clipped LQ baseline does.
pub fn check_domain_of_attraction(ctx: &VerifyContext) -> CheckOutcome {
    timed(11, "domain of attraction", || {
        let setup = &ctx.setup;
        let mut amps = ctx.limits.sweep_amplitudes.clone();
        amps.push(0.0);
        let rep = amplitude_sweep(
            &setup.plant,
            &ctx.design,
            &setup.nominal_scenario(Backend::Full),
            &amps,
            |a| setup.x0(a, setup.spec.phase),
        )
        .map_err(err)?;
        let zero_ok = rep.points.first().is_some_and(|p| p.mpc_stabilized && p.lq_stabilized);
        Ok((
            zero_ok && rep.max_stabilizable_mpc >= rep.max_stabilizable_lq,
            format!(
                "max stabilizable amplitude: MPC {:.2}, saturated LQ baseline {:.2} (ratio {:.3}) over {} amplitudes",
                rep.max_stabilizable_mpc,
                rep.max_stabilizable_lq,
                rep.margin_ratio,
                rep.points.len()
            ),
        ))
    })
}

/// 12: average full-precision latency below the sampling period; the other
/// backends are reported only.
pub fn check_throughput(ctx: &VerifyContext) -> CheckOutcome {
    timed(12, "throughput", || {
        let d = &ctx.design;
        let full = benchmark(d, &ctx.states, Backend::Full, d.i_max, ctx.limits.bench_repeats).map_err(err)?;
        let reduced = benchmark(d, &ctx.states, Backend::Reduced, d.i_max, ctx.limits.bench_repeats).map_err(err)?;
        let fwl = benchmark(d, &ctx.states, Backend::Fwl, d.i_max, 1).map_err(err)?;
        Ok((
            full.avg_us < ctx.limits.latency_us,
            format!(
                "d = {}, i = {}: full avg {:.1} us / max {:.1} us (< {:.0} us); reduced avg {:.1} us; fwl emulation avg {:.1} us (not asserted)",
                d.dim(),
                d.i_max,
                full.avg_us,
                full.max_us,
                ctx.limits.latency_us,
                reduced.avg_us,
                fwl.avg_us
            ),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_matches_hand_computation() {
        // x1 = 2 x0 + u, x0 = 1, u = 1 for one step: 1/2 (1 + 1) + 1/2 * 9
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let j = rollout_cost(
            &one(2.0),
            &one(1.0),
            &one(1.0),
            &one(1.0),
            &one(1.0),
            &[1],
            &DVector::from_element(1, 1.0),
            &[DVector::from_element(1, 1.0)],
        );
        assert_eq!(j, 5.5);
    }

    #[test]
    fn pick_is_seeded_and_distinct() {
        let states: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let a = pick(&states, 5, 3);
        assert_eq!(a, pick(&states, 5, 3));
        let mut v: Vec<i64> = a.iter().map(|s| s[0] as i64).collect();
        v.dedup();
        assert_eq!(v.len(), 5);
    }
}
