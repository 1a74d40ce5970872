//! Command-line front end: `design`, `solve`, `simulate`, `sweep`, `bench`
//! and `verify` over JSON run configurations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::design::MpcDesign;
use crate::preset::{build_setup, PresetError, PresetSpec, Setup};
use crate::simloop::{amplitude_sweep, benchmark, plot_trace, run_closed_loop, ControllerKind, SimError};
use crate::solver::{cost_of, mse, oracle_solve, Backend, FgmKernel, SolveOptions, ORACLE_TOL};
use crate::verify::{run_all, VerifyContext, VerifyLimits};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const STATE_SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("verification failed: checks {0:?}")]
    Verify(Vec<u8>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl From<PresetError> for CliError {
    fn from(e: PresetError) -> Self {
        match e {
            PresetError::Invalid(m) => CliError::Config(m),
            PresetError::Sim(SimError::Scenario(m)) => CliError::Config(m),
            e => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(m) => CliError::Config(m),
            SimError::Io(e) => CliError::Config(e.to_string()),
            e => CliError::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// Closed-loop scenario parameters of `simulate`, `sweep` and `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub amplitude: Option<f64>,
    pub phase: Option<f64>,
    pub steps: Option<usize>,
    pub noise_std: f64,
    /// `mpc`, `lq` or `off`.
    pub controller: String,
    pub track_accuracy: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            amplitude: None,
            phase: None,
            steps: None,
            noise_std: 0.0,
            controller: "mpc".into(),
            track_accuracy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub amplitudes: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            amplitudes: VerifyLimits::default().sweep_amplitudes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub states: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { states: 200, repeats: 5 }
    }
}

/// Contents of `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: PresetSpec,
    /// Existing design artifact; built from `preset` when absent. Relative
    /// paths resolve against the config file.
    pub design: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub verify: VerifyLimits,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            preset: PresetSpec::default(),
            design: None,
            scenario: ScenarioConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            verify: VerifyLimits::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                cfg.schema_version
            )));
        }
        if let (Some(d), Some(dir)) = (&cfg.design, path.parent()) {
            if d.is_relative() {
                cfg.design = Some(dir.join(d));
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "rwm-mpc", version, about = "Fast gradient MPC design, simulation and verification")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Solver arithmetic: full, reduced or fwl.
    #[arg(long, global = true, default_value = "full")]
    pub backend: Backend,
    /// Iteration budget; overrides the preset.
    #[arg(long, global = true)]
    pub imax: Option<usize>,
    /// Seed for sampled states and measurement noise.
    #[arg(long, global = true, default_value_t = 2024)]
    pub seed: u64,
    /// Record every iterate of `solve`.
    #[arg(long, global = true)]
    pub dump_iterates: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build the design artifact and its report.
    Design,
    /// One QP solve from a state file.
    Solve {
        /// JSON with `x` (scaled design state) or a bare array; the first
        /// nominal estimate is used when omitted.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Closed-loop run with trace, metrics and plot.
    Simulate,
    /// Perturbation amplitude sweep, MPC against the clipped LQ baseline.
    Sweep,
    /// Latency and accuracy table for all backends.
    Bench,
    /// Acceptance battery; exit code 4 on any failure.
    Verify,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateFile {
    schema_version: u32,
    x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum StateInput {
    File(StateFile),
    Bare(Vec<f64>),
}

struct Session {
    cfg: RunConfig,
    args: CommonArgs,
    setup: Setup,
}

impl Session {
    fn new(args: &CommonArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(i) = args.imax {
            if i == 0 {
                return Err(CliError::Config("--imax must be positive".into()));
            }
            cfg.preset.i_max = i;
        }
        let setup = build_setup(&cfg.preset)?;
        Ok(Self {
            cfg,
            args: args.clone(),
            setup,
        })
    }

    fn design(&self) -> Result<MpcDesign, CliError> {
        let Some(path) = &self.cfg.design else {
            return Ok(self.setup.scaled_design()?);
        };
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut d = MpcDesign::from_json(&text).map_err(|e| io_err(path, e))?;
        if d.nx() != self.setup.design_model.nx() || d.nu() != self.setup.design_model.nu() {
            return Err(CliError::Config(format!(
                "{}: design has nx = {}, nu = {}, preset model has nx = {}, nu = {}",
                path.display(),
                d.nx(),
                d.nu(),
                self.setup.design_model.nx(),
                self.setup.design_model.nu()
            )));
        }
        if let Some(i) = self.args.imax {
            d.i_max = i;
        }
        Ok(d)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        let dir = self.args.out.as_path();
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(dir)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.out_dir()?.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn scenario(&self, design: &MpcDesign) -> Result<crate::simloop::ScenarioSpec, CliError> {
        let sc = &self.cfg.scenario;
        let spec = &self.setup.spec;
        let mut s = self.setup.scenario(
            sc.amplitude.unwrap_or(spec.amplitude),
            sc.phase.unwrap_or(spec.phase),
            self.args.backend,
        );
        if let Some(n) = sc.steps {
            s.steps = n;
        }
        s.noise_seed = self.args.seed;
        if sc.noise_std > 0.0 {
            s.meas_noise_std = vec![sc.noise_std; self.setup.plant.model.ny()];
        }
        s.track_accuracy = sc.track_accuracy;
        s.controller = match sc.controller.as_str() {
            "mpc" => ControllerKind::Mpc {
                backend: self.args.backend,
                i_max: design.i_max,
            },
            "lq" => ControllerKind::SaturatedLq,
            "off" => ControllerKind::Off,
            other => return Err(CliError::Config(format!("unknown controller {other:?} (mpc, lq, off)"))),
        };
        Ok(s)
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

/// Human-readable summary written next to `design.json`.
pub fn design_report(d: &MpcDesign) -> String {
    let r = &d.report;
    let f = &d.fwl;
    let mut s = String::new();
    let _ = writeln!(s, "design: nx {}, nu {}, ny {}, d {}", r.nx, r.nu, r.ny, r.d);
    let _ = writeln!(s, "horizon {} with blocks {:?}, i_max {}", d.tuning_s.horizon, d.tuning_s.blocks, d.i_max);
    let _ = writeln!(s, "open-loop spectral radius   {:.6}", r.open_loop_radius);
    let _ = writeln!(s, "observer spectral radius    {:.6}", r.observer_radius);
    let _ = writeln!(s, "closed-loop spectral radius {:.6}", r.closed_loop_radius);
    let _ = writeln!(s, "DARE: {} iterations, residual {:.3e}; Kalman residual {:.3e}", r.dare_iterations, r.dare_residual, r.kalman_residual);
    let _ = writeln!(s, "H_c eigenvalues [{:.6e}, {:.6e}]", r.hessian_eigs.0, r.hessian_eigs.1);
    let _ = writeln!(s, "preconditioner {:?}: kappa {:.4} -> {:.4}", d.pre.kind, r.kappa_before, r.kappa_after);
    let _ = writeln!(s, "mu {:.6e}, L {:.6e}", r.mu, r.lip);
    let _ = writeln!(s, "max |H_cp| {:.4}, max row sum |F_p| {:.4}", r.max_abs_h_cp, r.max_row_sum_f_p);
    let _ = writeln!(s, "fixed-point formats (width, integer bits):");
    for (name, fmt) in [
        ("state", f.state),
        ("iterate", f.iterate),
        ("hessian", f.hessian),
        ("gain", f.gain),
        ("linear", f.linear),
        ("chi", f.chi),
        ("beta", f.beta),
        ("diff", f.diff),
        ("restart", f.restart),
    ] {
        let _ = writeln!(s, "  {name:<8} ({}, {})", fmt.width(), fmt.int_bits());
    }
    let _ = writeln!(s, "source: {}; seeds {:?}", d.provenance.source, d.provenance.seeds);
    for n in &d.provenance.notes {
        let _ = writeln!(s, "  {n}");
    }
    s
}

fn cmd_design(ss: &Session) -> Result<(), CliError> {
    let d = ss.design()?;
    let p = ss.write("design.json", &d.to_json())?;
    ss.write("design_report.txt", &design_report(&d))?;
    println!("wrote {} (d = {}, kappa {:.3} -> {:.3})", p.display(), d.dim(), d.report.kappa_before, d.report.kappa_after);
    Ok(())
}

fn cmd_solve(ss: &Session, state: Option<&Path>) -> Result<(), CliError> {
    let d = ss.design()?;
    let x = match state {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            match serde_json::from_str::<StateInput>(&text).map_err(|e| io_err(path, e))? {
                StateInput::File(f) if f.schema_version != STATE_SCHEMA_VERSION => {
                    return Err(CliError::Config(format!("{}: unsupported schema_version {}", path.display(), f.schema_version)))
                }
                StateInput::File(f) => f.x,
                StateInput::Bare(x) => x,
            }
        }
        None => {
            let mut s = ss.setup.nominal_scenario(Backend::Full);
            s.steps = 1;
            run_closed_loop(&ss.setup.plant, &d, &s)?.x_hat_s.remove(0)
        }
    };
    if x.len() != d.nx() {
        return Err(CliError::Config(format!("state has {} entries, design expects {}", x.len(), d.nx())));
    }
    let kernel = FgmKernel::new(&d, ss.args.backend).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut opts = SolveOptions::new(d.i_max, ss.args.backend);
    opts.record_iterates = ss.args.dump_iterates;
    let rep = kernel.solve(&x, &opts).map_err(|e| CliError::Numeric(e.to_string()))?;
    let p = ss.write("solve_report.json", &rep.to_json())?;
    if ss.args.dump_iterates {
        let path = ss.out_dir()?.join("iterates.csv");
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        rep.write_iterates_csv(file).map_err(|e| io_err(&path, e))?;
    }
    println!(
        "wrote {}: {} iterations, {} restarts, J = {:.6e}, first move [{}]",
        p.display(),
        rep.iterations,
        rep.restarts.len(),
        rep.cost_history.last().copied().unwrap_or(f64::NAN),
        rep.first_move.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
    );
    Ok(())
}

fn cmd_simulate(ss: &Session) -> Result<(), CliError> {
    let d = ss.design()?;
    let s = ss.scenario(&d)?;
    let tr = run_closed_loop(&ss.setup.plant, &d, &s)?;
    let dir = ss.out_dir()?;
    let csv_path = dir.join("trace.csv");
    tr.write_csv(fs::File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?)?;
    let m = tr.metrics();
    ss.write("metrics.json", &to_json(&m))?;
    plot_trace(&tr, &dir.join("trace.svg"))?;
    println!(
        "{} steps: peak |y| {:.4e}, tail {:.4e}, stabilized {}, max |u| {:.3}, saturations {}",
        m.steps, m.peak_y, m.tail_y, m.stabilized, m.max_abs_u, m.saturations
    );
    Ok(())
}

fn cmd_sweep(ss: &Session) -> Result<(), CliError> {
    let d = ss.design()?;
    let base = ss.scenario(&d)?;
    let phase = ss.cfg.scenario.phase.unwrap_or(ss.setup.spec.phase);
    let rep = amplitude_sweep(&ss.setup.plant, &d, &base, &ss.cfg.sweep.amplitudes, |a| ss.setup.x0(a, phase))?;
    ss.write("sweep.json", &to_json(&rep))?;
    let path = ss.out_dir()?.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    for p in &rep.points {
        w.serialize(p).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!(
        "max stabilizable amplitude: MPC {:.3}, saturated LQ {:.3} (ratio {:.3})",
        rep.max_stabilizable_mpc, rep.max_stabilizable_lq, rep.margin_ratio
    );
    Ok(())
}

/// One row of the `bench` table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub backend: Backend,
    pub i_max: usize,
    pub samples: usize,
    pub max_us: f64,
    pub avg_us: f64,
    pub max_mse: f64,
    pub max_dj: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub d: usize,
    pub states: usize,
    pub rows: Vec<BenchRow>,
}

/// Latency plus accuracy against the reference solution for each backend.
pub fn bench_table(design: &MpcDesign, states: &[Vec<f64>], repeats: usize) -> Result<BenchReport, CliError> {
    let num = |e: &dyn std::fmt::Display| CliError::Numeric(e.to_string());
    let qp = &design.qp;
    let (lo, hi) = (qp.u_min_t.as_slice(), qp.u_max_t.as_slice());
    let stars = states
        .iter()
        .map(|x| oracle_solve(qp, x, ORACLE_TOL).map(|s| s.u))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| num(&e))?;
    let mut rows = Vec::new();
    for backend in Backend::ALL {
        let reps = if backend == Backend::Fwl { 1 } else { repeats };
        let lat = benchmark(design, states, backend, design.i_max, reps).map_err(|e| num(&e))?;
        let kernel = FgmKernel::new(design, backend).map_err(|e| num(&e))?;
        let opts = SolveOptions::new(design.i_max, backend);
        let (mut max_mse, mut max_dj) = (0.0f64, 0.0f64);
        for (x, star) in states.iter().zip(&stars) {
            let u = kernel.solve(x, &opts).map_err(|e| num(&e))?.u_opt;
            max_mse = max_mse.max(mse(&u, star.as_slice(), lo, hi).map_err(|e| num(&e))?);
            max_dj = max_dj.max((cost_of(qp, x, &u) - cost_of(qp, x, star.as_slice())).abs());
        }
        rows.push(BenchRow {
            backend,
            i_max: design.i_max,
            samples: lat.samples,
            max_us: lat.max_us,
            avg_us: lat.avg_us,
            max_mse,
            max_dj,
        });
    }
    Ok(BenchReport {
        schema_version: 1,
        d: design.dim(),
        states: states.len(),
        rows,
    })
}

pub fn format_bench(rep: &BenchReport) -> String {
    let mut s = format!(
        "{:<8} {:>6} {:>12} {:>12} {:>12} {:>12}\n",
        "backend", "i_max", "max [us]", "avg [us]", "max MSE", "max dJ"
    );
    for r in &rep.rows {
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>12.1} {:>12.1} {:>12.3e} {:>12.3e}",
            r.backend.to_string(),
            r.i_max,
            r.max_us,
            r.avg_us,
            r.max_mse,
            r.max_dj
        );
    }
    s
}

fn cmd_bench(ss: &Session) -> Result<(), CliError> {
    let d = ss.design()?;
    let states = ss.setup.trajectory_states(&d, ss.cfg.bench.states.max(1), ss.args.seed)?;
    let rep = bench_table(&d, &states, ss.cfg.bench.repeats.max(1))?;
    let table = format_bench(&rep);
    ss.write("bench.json", &to_json(&rep))?;
    ss.write("bench.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_verify(ss: &Session) -> Result<(), CliError> {
    let d = ss.design()?;
    let ctx = VerifyContext::with_design(ss.setup.clone(), d, ss.cfg.verify.clone(), ss.args.seed)?;
    let rep = run_all(&ctx);
    for c in &rep.checks {
        println!("{c}");
    }
    ss.write("verify.json", &to_json(&rep))?;
    if rep.all_passed {
        println!("all {} checks passed", rep.checks.len());
        Ok(())
    } else {
        Err(CliError::Verify(rep.checks.iter().filter(|c| !c.passed).map(|c| c.id).collect()))
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let ss = Session::new(&cli.common)?;
    match &cli.command {
        Command::Design => cmd_design(&ss),
        Command::Solve { state } => cmd_solve(&ss, state.as_deref()),
        Command::Simulate => cmd_simulate(&ss),
        Command::Sweep => cmd_sweep(&ss),
        Command::Bench => cmd_bench(&ss),
        Command::Verify => cmd_verify(&ss),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
