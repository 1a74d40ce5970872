//! Online primal fast gradient method over the preconditioned box QP in three
//! arithmetic backends, plus a coordinate-descent reference solver and the
//! accuracy metrics used to compare them.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{max_row_abs_sum, CondensedQp, MpcDesign, Preconditioner};
use crate::fxp::{
    self, convert, tree_matvec_tracked, FixedFormat, FixedMatrix, FixedVector, FxpError,
    OverflowCount, TreeSchedule,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("i_max {i_max} exceeds the beta table length {len}")]
    BetaTable { i_max: usize, len: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("fixed-point: {0}")]
    Fixed(#[from] FxpError),
    #[error("reference solver stopped after {sweeps} sweeps at KKT residual {residual:.3e}")]
    OracleNotConverged { sweeps: usize, residual: f64 },
    #[error("bound interval {0} has zero width")]
    ZeroWidthBound(usize),
    #[error("invalid spectrum: mu = {mu}, lip = {lip}")]
    InvalidSpectrum { mu: f64, lip: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// `f64` throughout.
    Full,
    /// `f32` throughout.
    Reduced,
    /// Bit-exact fixed-point emulation.
    Fwl,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Fwl, Backend::Full, Backend::Reduced];
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Full => "full",
            Backend::Reduced => "reduced",
            Backend::Fwl => "fwl",
        })
    }
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Backend::Full),
            "reduced" => Ok(Backend::Reduced),
            "fwl" => Ok(Backend::Fwl),
            other => Err(format!("unknown backend {other:?} (full, reduced, fwl)")),
        }
    }
}

/// Formats of the fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FwlSolverConfig {
    /// Scaled state estimate entering the kernel.
    pub state: FixedFormat,
    /// `v`, `u` and the output of the Hessian product.
    pub iterate: FixedFormat,
    pub hessian: FixedFormat,
    /// `F_p`, the state-to-gradient map.
    pub gain: FixedFormat,
    /// `f_p = F_p x`.
    pub linear: FixedFormat,
    /// Gradient-step result before clipping. Saturation here only counts
    /// as an event when it changes the clipped iterate.
    pub chi: FixedFormat,
    pub beta: FixedFormat,
    /// Exact differences of two iterates.
    pub diff: FixedFormat,
    /// Restart test accumulator; only its sign is used.
    pub restart: FixedFormat,
    pub hessian_tree: TreeSchedule,
    pub gain_tree: TreeSchedule,
}

/// Width of most fixed-point variables.
pub const FWL_WIDTH: u32 = 27;
/// Cap on the width of tree products.
pub const FWL_PRODUCT_CAP: u32 = 35;
pub const FWL_RESTART_WIDTH: u32 = 64;

impl FwlSolverConfig {
    /// Default layout for a preconditioned Hessian and gain matrix. The
    /// Hessian uses one sign bit and no integer bits (`int_bits = -1`) when
    /// its entries fit, the gain and linear-term formats are sized from the
    /// matrix entries and row sums for states in `[-1, 1]`.
    pub fn for_matrices(h_cp: &DMatrix<f64>, f_p: &DMatrix<f64>) -> Result<Self, FxpError> {
        let iterate = FixedFormat::new(FWL_WIDTH, 2)?;
        let state = iterate;
        let default_h = FixedFormat::new(FWL_WIDTH, -1)?;
        let hmax = h_cp.amax();
        let hessian = if hmax < default_h.max_value() {
            default_h
        } else {
            FixedFormat::covering(FWL_WIDTH, hmax)?
        };
        let gain = FixedFormat::covering(FWL_WIDTH, f_p.amax())?;
        let fbound = max_row_abs_sum(f_p) * state.max_value().max(-state.min_value());
        let linear = FixedFormat::covering(FWL_WIDTH, fbound)?;
        let chi = iterate;
        let beta = FixedFormat::new(FWL_WIDTH, 1)?;
        let diff = FixedFormat::full_sum(&iterate, &iterate)?;
        let products = FixedFormat::full_product(&diff, &diff)?;
        let restart = FixedFormat::new(
            FWL_RESTART_WIDTH,
            FWL_RESTART_WIDTH as i32 - products.frac_bits(),
        )?;
        let d = h_cp.ncols().max(1);
        let hessian_tree = TreeSchedule::widening(hessian, iterate, iterate, FWL_PRODUCT_CAP, d)?;
        let gain_tree = TreeSchedule::widening(gain, state, linear, FWL_PRODUCT_CAP, f_p.ncols().max(1))?;
        Ok(Self {
            state,
            iterate,
            hessian,
            gain,
            linear,
            chi,
            beta,
            diff,
            restart,
            hessian_tree,
            gain_tree,
        })
    }
}

/// Iterates of one solve, in preconditioned coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub v: Vec<f64>,
    pub u_cur: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub chi: Vec<f64>,
    pub iter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema_version: u32,
    pub backend: Backend,
    pub u_opt: Vec<f64>,
    /// First `m` entries of `u_opt`: the move applied in closed loop.
    pub first_move: Vec<f64>,
    pub iterations: usize,
    /// `J(u^i)` for `i = 1..=iterations`, including the constant term.
    pub cost_history: Vec<f64>,
    /// Iterations (1-based) in which the restart test fired.
    pub restarts: Vec<usize>,
    /// Fixed-point overflow events (always zero for floating backends).
    pub saturations: u64,
    pub final_state: SolverState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One CSV row per iteration: `iter,restart,cost,u_0,..`.
    pub fn write_iterates_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.u_opt.len();
        let mut header = vec!["iter".to_string(), "restart".into(), "cost".into()];
        header.extend((0..d).map(|k| format!("u_{k}")));
        out.write_record(&header)?;
        if let Some(iters) = &self.iterates {
            for (i, u) in iters.iter().enumerate() {
                let it = i + 1;
                let mut row = vec![
                    it.to_string(),
                    u8::from(self.restarts.contains(&it)).to_string(),
                    self.cost_history[i].to_string(),
                ];
                row.extend(u.iter().map(|x| x.to_string()));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub i_max: usize,
    pub backend: Backend,
    pub record_costs: bool,
    pub record_iterates: bool,
}

impl SolveOptions {
    pub fn new(i_max: usize, backend: Backend) -> Self {
        Self {
            i_max,
            backend,
            record_costs: true,
            record_iterates: false,
        }
    }
}

/// Solver data prepared once per design and backend.
pub struct FgmKernel<'a> {
    design: &'a MpcDesign,
    backend: Backend,
    data: KernelData,
}

enum KernelData {
    Full {
        h: Vec<f64>,
        f: Vec<f64>,
    },
    Reduced {
        h: Vec<f32>,
        f: Vec<f32>,
        lo: Vec<f32>,
        hi: Vec<f32>,
        beta: Vec<f32>,
    },
    Fwl(Box<FwlData>),
}

struct FwlData {
    cfg: FwlSolverConfig,
    h: FixedMatrix,
    f: FixedMatrix,
    lo: Vec<i128>,
    hi: Vec<i128>,
    beta: Vec<i128>,
    /// Saturations while quantizing constant data.
    setup_saturations: u64,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

impl<'a> FgmKernel<'a> {
    pub fn new(design: &'a MpcDesign, backend: Backend) -> Result<Self, SolverError> {
        let data = match backend {
            Backend::Full => KernelData::Full {
                h: row_major(&design.pre.h_cp),
                f: row_major(&design.f_p),
            },
            Backend::Reduced => KernelData::Reduced {
                h: row_major(&design.pre.h_cp).iter().map(|&x| x as f32).collect(),
                f: row_major(&design.f_p).iter().map(|&x| x as f32).collect(),
                lo: design.qp.u_min_t.iter().map(|&x| x as f32).collect(),
                hi: design.qp.u_max_t.iter().map(|&x| x as f32).collect(),
                beta: design.beta.iter().map(|&x| x as f32).collect(),
            },
            Backend::Fwl => {
                let cfg = design.fwl.clone();
                let mut ovf = OverflowCount::default();
                let h = FixedMatrix::from_nalgebra(&design.pre.h_cp, cfg.hessian, &mut ovf)?;
                let f = FixedMatrix::from_nalgebra(&design.f_p, cfg.gain, &mut ovf)?;
                let q = |x: f64, fmt: FixedFormat, ovf: &mut OverflowCount| {
                    fxp::quantize_tracked(x, fmt, ovf).map(|v| v.raw())
                };
                let lo = design
                    .qp
                    .u_min_t
                    .iter()
                    .map(|&x| q(x, cfg.iterate, &mut ovf))
                    .collect::<Result<Vec<_>, _>>()?;
                let hi = design
                    .qp
                    .u_max_t
                    .iter()
                    .map(|&x| q(x, cfg.iterate, &mut ovf))
                    .collect::<Result<Vec<_>, _>>()?;
                let beta = design
                    .beta
                    .iter()
                    .map(|&x| q(x, cfg.beta, &mut ovf))
                    .collect::<Result<Vec<_>, _>>()?;
                KernelData::Fwl(Box::new(FwlData {
                    cfg,
                    h,
                    f,
                    lo,
                    hi,
                    beta,
                    setup_saturations: ovf.0,
                }))
            }
        };
        Ok(Self {
            design,
            backend,
            data,
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn design(&self) -> &MpcDesign {
        self.design
    }

    /// Runs exactly `opts.i_max` iterations from the cold start `u = 0`.
    pub fn solve(&self, x_s: &[f64], opts: &SolveOptions) -> Result<SolveReport, SolverError> {
        let d = self.design.dim();
        let n = self.design.nx();
        if x_s.len() != n {
            return Err(SolverError::Dimension(format!(
                "state has {} entries, design expects {n}",
                x_s.len()
            )));
        }
        if x_s.iter().any(|x| !x.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        if opts.i_max > self.design.beta.len() {
            return Err(SolverError::BetaTable {
                i_max: opts.i_max,
                len: self.design.beta.len(),
            });
        }
        let mut trace = Trace::new(self.design, x_s, opts, d);
        let (state, saturations) = match &self.data {
            KernelData::Full { h, f } => (self.run_full(h, f, x_s, opts.i_max, &mut trace), 0),
            KernelData::Reduced { h, f, lo, hi, beta } => (
                run_reduced(h, f, lo, hi, beta, d, x_s, opts.i_max, &mut trace),
                0,
            ),
            KernelData::Fwl(data) => run_fwl(data, d, x_s, opts.i_max, &mut trace)?,
        };
        let m = self.design.nu();
        Ok(SolveReport {
            schema_version: REPORT_SCHEMA_VERSION,
            backend: self.backend,
            first_move: state.u_cur[..m].to_vec(),
            u_opt: state.u_cur.clone(),
            final_state: state,
            iterations: opts.i_max,
            cost_history: trace.costs,
            restarts: trace.restarts,
            saturations,
            iterates: trace.iterates,
        })
    }

    fn run_full(&self, h: &[f64], f: &[f64], x: &[f64], i_max: usize, trace: &mut Trace) -> SolverState {
        let d = self.design.dim();
        let n = x.len();
        let lo = self.design.qp.u_min_t.as_slice();
        let hi = self.design.qp.u_max_t.as_slice();
        let fp: Vec<f64> = (0..d)
            .map(|i| f[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let mut v = vec![0.0; d];
        let mut u = vec![0.0; d];
        let mut u_prev = vec![0.0; d];
        let mut diff = vec![0.0; d];
        let mut chi = vec![0.0; d];
        for it in 0..i_max {
            let mut dot = 0.0;
            for i in 0..d {
                let hv: f64 = h[i * d..(i + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum();
                chi[i] = v[i] - (hv + fp[i]);
                u[i] = chi[i].clamp(lo[i], hi[i]);
            }
            for i in 0..d {
                diff[i] = u[i] - u_prev[i];
                dot += (v[i] - u[i]) * diff[i];
            }
            let restart = dot > 0.0;
            if restart {
                u.copy_from_slice(&u_prev);
                v.copy_from_slice(&u_prev);
            } else {
                let b = self.design.beta[it];
                for i in 0..d {
                    v[i] = u[i] + b * diff[i];
                }
                u_prev.copy_from_slice(&u);
            }
            trace.record(it + 1, restart, &u);
        }
        SolverState {
            v,
            u_cur: u,
            u_prev,
            chi,
            iter: i_max,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_reduced(
    h: &[f32],
    f: &[f32],
    lo: &[f32],
    hi: &[f32],
    beta: &[f32],
    d: usize,
    x: &[f64],
    i_max: usize,
    trace: &mut Trace,
) -> SolverState {
    let n = x.len();
    let xs: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let fp: Vec<f32> = (0..d)
        .map(|i| f[i * n..(i + 1) * n].iter().zip(&xs).map(|(a, b)| a * b).sum())
        .collect();
    let mut v = vec![0f32; d];
    let mut u = vec![0f32; d];
    let mut u_prev = vec![0f32; d];
    let mut diff = vec![0f32; d];
    let mut chi = vec![0f32; d];
    let mut u64s = vec![0f64; d];
    for it in 0..i_max {
        for i in 0..d {
            let hv: f32 = h[i * d..(i + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum();
            chi[i] = v[i] - (hv + fp[i]);
            u[i] = chi[i].clamp(lo[i], hi[i]);
        }
        let mut dot = 0f32;
        for i in 0..d {
            diff[i] = u[i] - u_prev[i];
            dot += (v[i] - u[i]) * diff[i];
        }
        let restart = dot > 0.0;
        if restart {
            u.copy_from_slice(&u_prev);
            v.copy_from_slice(&u_prev);
        } else {
            for i in 0..d {
                v[i] = u[i] + beta[it] * diff[i];
            }
            u_prev.copy_from_slice(&u);
        }
        for (o, &x) in u64s.iter_mut().zip(&u) {
            *o = f64::from(x);
        }
        trace.record(it + 1, restart, &u64s);
    }
    let wide = |x: &[f32]| x.iter().map(|&v| f64::from(v)).collect();
    SolverState {
        v: wide(&v),
        u_cur: u64s,
        u_prev: wide(&u_prev),
        chi: wide(&chi),
        iter: i_max,
    }
}

fn run_fwl(
    data: &FwlData,
    d: usize,
    x: &[f64],
    i_max: usize,
    trace: &mut Trace,
) -> Result<(SolverState, u64), SolverError> {
    let cfg = &data.cfg;
    let mut ovf = OverflowCount(data.setup_saturations);
    let xq = FixedVector::quantize_tracked(x, cfg.state, &mut ovf)?;
    let fp = tree_matvec_tracked(&data.f, &xq, &cfg.gain_tree, &mut ovf)?;
    let it_frac = cfg.iterate.frac_bits();
    let hv_frac = cfg.hessian_tree.output.frac_bits();
    let fp_frac = cfg.linear.frac_bits();
    let beta_frac = cfg.beta.frac_bits();
    let diff_frac = cfg.diff.frac_bits();
    // common fractional count for the exact three-term gradient step
    let g_frac = it_frac.max(hv_frac).max(fp_frac);
    let mut v = FixedVector::zeros(d, cfg.iterate);
    let mut u = vec![0i128; d];
    let mut u_prev = vec![0i128; d];
    let mut diff = vec![0i128; d];
    let mut chi = vec![0i128; d];
    let mut next = vec![0i128; d];
    let mut uf = vec![0f64; d];
    let ulp = cfg.iterate.ulp();
    for it in 0..i_max {
        let hv = tree_matvec_tracked(&data.h, &v, &cfg.hessian_tree, &mut ovf)?;
        let vr = v.raw();
        for i in 0..d {
            let g = (vr[i] << (g_frac - it_frac))
                - (hv.raw()[i] << (g_frac - hv_frac))
                - (fp.raw()[i] << (g_frac - fp_frac));
            let (c, hit) = convert(g, g_frac, &cfg.chi);
            chi[i] = c;
            u[i] = c.clamp(data.lo[i], data.hi[i]);
            // a saturated chi that is clipped to a bound anyway is harmless
            let clipped = u[i] != c || c == data.lo[i] || c == data.hi[i];
            ovf.record(hit && !clipped);
        }
        // restart test: exact products accumulated in the wide format
        let mut acc: i128 = 0;
        for i in 0..d {
            let (dd, hit) = convert(u[i] - u_prev[i], it_frac, &cfg.diff);
            ovf.record(hit);
            diff[i] = dd;
            let (vu, hit) = convert(vr[i] - u[i], it_frac, &cfg.diff);
            ovf.record(hit);
            acc += vu * dd;
        }
        let (acc, hit) = convert(acc, 2 * diff_frac, &cfg.restart);
        ovf.record(hit);
        let restart = acc > 0;
        if restart {
            u.copy_from_slice(&u_prev);
            next.copy_from_slice(&u_prev);
        } else {
            let b = data.beta[it];
            let shift = beta_frac + diff_frac - it_frac;
            for i in 0..d {
                let sum = (u[i] << shift) + b * diff[i];
                let (r, hit) = convert(sum, beta_frac + diff_frac, &cfg.iterate);
                ovf.record(hit);
                next[i] = r;
            }
            u_prev.copy_from_slice(&u);
        }
        v = FixedVector::from_raw(next.clone(), cfg.iterate)?;
        for (o, &r) in uf.iter_mut().zip(&u) {
            *o = r as f64 * ulp;
        }
        trace.record(it + 1, restart, &uf);
    }
    let to_f = |raw: &[i128], f: FixedFormat| raw.iter().map(|&r| r as f64 * f.ulp()).collect();
    let state = SolverState {
        v: to_f(v.raw(), cfg.iterate),
        u_cur: uf,
        u_prev: to_f(&u_prev, cfg.iterate),
        chi: to_f(&chi, cfg.chi),
        iter: i_max,
    };
    Ok((state, ovf.0))
}

struct Trace<'a> {
    qp: &'a CondensedQp,
    fx: DVector<f64>,
    cc: f64,
    record_costs: bool,
    costs: Vec<f64>,
    restarts: Vec<usize>,
    iterates: Option<Vec<Vec<f64>>>,
}

impl<'a> Trace<'a> {
    fn new(design: &'a MpcDesign, x: &[f64], opts: &SolveOptions, d: usize) -> Self {
        let xv = DVector::from_column_slice(x);
        let (fx, cc) = if opts.record_costs {
            (design.qp.f_c(&xv), design.qp.c_c(&xv))
        } else {
            (DVector::zeros(d), 0.0)
        };
        Self {
            qp: &design.qp,
            fx,
            cc,
            record_costs: opts.record_costs,
            costs: Vec::with_capacity(if opts.record_costs { opts.i_max } else { 0 }),
            restarts: Vec::new(),
            iterates: opts.record_iterates.then(Vec::new),
        }
    }

    fn record(&mut self, iter: usize, restart: bool, u: &[f64]) {
        if restart {
            self.restarts.push(iter);
        }
        if self.record_costs {
            let uv = DVector::from_column_slice(u);
            let j = 0.5 * uv.dot(&(&self.qp.h_c * &uv)) + self.fx.dot(&uv) + self.cc;
            self.costs.push(j);
        }
        if let Some(it) = &mut self.iterates {
            it.push(u.to_vec());
        }
    }
}

/// Convenience wrapper preparing a kernel for a single solve.
pub fn fgm_solve(
    design: &MpcDesign,
    x_s: &[f64],
    i_max: usize,
    backend: Backend,
) -> Result<SolveReport, SolverError> {
    FgmKernel::new(design, backend)?.solve(x_s, &SolveOptions::new(i_max, backend))
}

/// Condensed cost including the constant term.
pub fn cost_of(qp: &CondensedQp, x: &[f64], u: &[f64]) -> f64 {
    qp.cost(&DVector::from_column_slice(x), &DVector::from_column_slice(u))
}

/// `max_i |u_i - clip(u_i - g_i / H_ii)|` with `g = H u + f`.
pub fn kkt_residual(h: &DMatrix<f64>, f: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let g = h * u + f;
    (0..u.len())
        .map(|i| (u[i] - (u[i] - g[i] / h[(i, i)]).clamp(lo[i], hi[i])).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u: DVector<f64>,
    pub residual: f64,
    pub sweeps: usize,
}

pub const ORACLE_TOL: f64 = 1e-12;
pub const ORACLE_MAX_SWEEPS: usize = 200_000;

/// Box-QP solution by cyclic coordinate descent with exact coordinate
/// minimization, with a periodic equality-constrained polish on the
/// current active set.
pub fn oracle_solve(
    qp: &CondensedQp,
    x: &[f64],
    tol: f64,
) -> Result<OracleSolution, SolverError> {
    let f = qp.f_c(&DVector::from_column_slice(x));
    box_qp_solve(&qp.h_c, &f, &qp.u_min_t, &qp.u_max_t, tol)
}

pub fn box_qp_solve(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    tol: f64,
) -> Result<OracleSolution, SolverError> {
    let d = h.nrows();
    if h.ncols() != d || f.len() != d || lo.len() != d || hi.len() != d {
        return Err(SolverError::Dimension("box QP operands".into()));
    }
    if (0..d).any(|i| !(h[(i, i)] > 0.0)) {
        return Err(SolverError::Dimension("Hessian diagonal must be positive".into()));
    }
    let mut u = DVector::from_fn(d, |i, _| 0.0f64.clamp(lo[i], hi[i]));
    let mut g = h * &u + f;
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < ORACLE_MAX_SWEEPS {
        sweeps += 1;
        for i in 0..d {
            let new = (u[i] - g[i] / h[(i, i)]).clamp(lo[i], hi[i]);
            let delta = new - u[i];
            if delta != 0.0 {
                u[i] = new;
                g.axpy(delta, &h.column(i), 1.0);
            }
        }
        if sweeps % 5 == 0 {
            g = h * &u + f;
            if let Some(p) = polish(h, f, lo, hi, &u, &g) {
                let r = kkt_residual(h, f, lo, hi, &p);
                if r <= tol {
                    return Ok(OracleSolution {
                        u: p,
                        residual: r,
                        sweeps,
                    });
                }
            }
            residual = kkt_residual(h, f, lo, hi, &u);
            if residual <= tol {
                return Ok(OracleSolution { u, residual, sweeps });
            }
        }
    }
    Err(SolverError::OracleNotConverged { sweeps, residual })
}

/// Solves the stationarity equations on the free set implied by `u` and `g`.
fn polish(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    u: &DVector<f64>,
    g: &DVector<f64>,
) -> Option<DVector<f64>> {
    let d = u.len();
    let free: Vec<usize> = (0..d)
        .filter(|&i| {
            let at_lo = u[i] <= lo[i] && g[i] >= 0.0;
            let at_hi = u[i] >= hi[i] && g[i] <= 0.0;
            !(at_lo || at_hi)
        })
        .collect();
    let mut out = u.clone();
    for i in 0..d {
        if !free.contains(&i) {
            out[i] = if u[i] <= lo[i] { lo[i] } else { hi[i] };
        }
    }
    if free.is_empty() {
        return Some(out);
    }
    let k = free.len();
    let hff = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
    let rhs = DVector::from_fn(k, |a, _| {
        let i = free[a];
        let mut s = -f[i];
        for j in 0..d {
            if !free.contains(&j) {
                s -= h[(i, j)] * out[j];
            }
        }
        s
    });
    let ch = hff.cholesky()?;
    let mut z = ch.solve(&rhs);
    // one refinement step
    let r = &rhs - DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]) * &z;
    z += ch.solve(&r);
    for (a, &i) in free.iter().enumerate() {
        if z[a] < lo[i] || z[a] > hi[i] {
            return None;
        }
        out[i] = z[a];
    }
    Some(out)
}

/// Normalized root-mean-square deviation over the bound widths.
pub fn mse(u: &[f64], u_star: &[f64], lo: &[f64], hi: &[f64]) -> Result<f64, SolverError> {
    let d = u.len();
    if u_star.len() != d || lo.len() != d || hi.len() != d || d == 0 {
        return Err(SolverError::Dimension("mse operands".into()));
    }
    let mut s = 0.0;
    for k in 0..d {
        let w = hi[k] - lo[k];
        if !(w > 0.0) {
            return Err(SolverError::ZeroWidthBound(k));
        }
        let e = (u[k] - u_star[k]) / w;
        s += e * e;
    }
    Ok((s / d as f64).sqrt())
}

/// Theoretical gap bounds indexed by iteration `0..=i_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBounds {
    pub linear: Vec<f64>,
    pub sublinear: Vec<f64>,
}

/// `linear[i] = (1 - sqrt(mu / lip))^i * j0_gap`,
/// `sublinear[i] = 4 lip r2 / (i + 2)^2` with `r2` the squared initial distance.
pub fn convergence_bounds(
    mu: f64,
    lip: f64,
    j0_gap: f64,
    r2: f64,
    i_max: usize,
) -> Result<ConvergenceBounds, SolverError> {
    if !(mu > 0.0 && lip >= mu && lip.is_finite()) {
        return Err(SolverError::InvalidSpectrum { mu, lip });
    }
    let rate = 1.0 - (mu / lip).sqrt();
    Ok(ConvergenceBounds {
        linear: (0..=i_max).map(|i| rate.powi(i as i32) * j0_gap).collect(),
        sublinear: (0..=i_max)
            .map(|i| 4.0 * lip * r2 / ((i + 2) as f64).powi(2))
            .collect(),
    })
}

/// Smallest `i` with `(1 - sqrt(mu / lip))^i * j0_gap <= target`.
pub fn certified_iterations(mu: f64, lip: f64, j0_gap: f64, target: f64) -> Result<usize, SolverError> {
    if !(mu > 0.0 && lip >= mu && lip.is_finite()) {
        return Err(SolverError::InvalidSpectrum { mu, lip });
    }
    if j0_gap <= target {
        return Ok(0);
    }
    let rate = 1.0 - (mu / lip).sqrt();
    if rate <= 0.0 {
        return Ok(1);
    }
    let mut i = ((target / j0_gap).ln() / rate.ln()).ceil().max(0.0) as usize;
    // guard against rounding in the logarithms
    while i > 0 && rate.powi(i as i32 - 1) * j0_gap <= target {
        i -= 1;
    }
    while rate.powi(i as i32) * j0_gap > target {
        i += 1;
    }
    Ok(i)
}

/// Initial gap measure of the strongly convex bound for a cold start:
/// `J(0) - J* + mu / 2 * ||u*||_L^2`, and the squared `L`-distance `||u*||_L^2`.
pub fn initial_gap(qp: &CondensedQp, pre: &Preconditioner, x: &[f64], u_star: &[f64]) -> (f64, f64) {
    let zero = vec![0.0; u_star.len()];
    let gap = cost_of(qp, x, &zero) - cost_of(qp, x, u_star);
    let r2: f64 = u_star
        .iter()
        .zip(pre.l_diag.iter())
        .map(|(u, l)| l * u * u)
        .sum();
    (gap + 0.5 * pre.mu * r2, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{
        build_design, precondition, BetaSchedule, DesignOptions, MpcTuning, PreconditionerKind,
        ScalingSet,
    };
    use crate::ssmodel::{StateSpaceModel, TimeDomain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A design whose preconditioned problem is `min 1/2 h u^2 + f x u`.
    fn scalar_design(bound: f64, f_map: f64) -> MpcDesign {
        let model = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            TimeDomain::Discrete(1.0),
        )
        .unwrap();
        let tuning = MpcTuning {
            q_c: DMatrix::zeros(1, 1),
            r_c: DMatrix::from_element(1, 1, 1.0),
            horizon: 1,
            blocks: vec![1],
            u_min: DVector::from_element(1, -bound),
            u_max: DVector::from_element(1, bound),
            q_k: DMatrix::identity(1, 1),
            r_k: DMatrix::identity(1, 1),
        };
        let mut d = build_design(&model, &tuning, &ScalingSet::identity(1, 1, 1), &DesignOptions::default())
            .unwrap();
        // with A = 0 and Q = 0 the Riccati solution is 0, so H_c = R = 1
        assert_eq!(d.qp.h_c[(0, 0)], 1.0);
        d.qp.f[(0, 0)] = f_map;
        d.f_p[(0, 0)] = f_map;
        d
    }

    #[test]
    fn scalar_lands_on_unconstrained_optimum() {
        let d = scalar_design(10.0, -1.0);
        let r = fgm_solve(&d, &[1.0], 1, Backend::Full).unwrap();
        assert_eq!(r.u_opt, vec![1.0]);
        assert_eq!(r.cost_history.len(), 1);
    }

    #[test]
    fn scalar_active_upper_bound() {
        let d = scalar_design(2.0, -5.0);
        for backend in [Backend::Full, Backend::Reduced] {
            let r = fgm_solve(&d, &[1.0], 5, backend).unwrap();
            assert_eq!(r.u_opt, vec![2.0]);
        }
    }

    #[test]
    fn backend_parsing() {
        assert_eq!("fwl".parse::<Backend>().unwrap(), Backend::Fwl);
        assert!("double".parse::<Backend>().is_err());
        assert_eq!(Backend::Reduced.to_string(), "reduced");
    }

    #[test]
    fn beta_table_limit() {
        let d = scalar_design(2.0, -1.0);
        assert!(matches!(
            fgm_solve(&d, &[1.0], 51, Backend::Full),
            Err(SolverError::BetaTable { .. })
        ));
        assert!(fgm_solve(&d, &[1.0, 2.0], 1, Backend::Full).is_err());
    }

    #[test]
    fn oracle_unconstrained_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let h = &a * a.transpose() + DMatrix::identity(6, 6);
        let f = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let wide = DVector::from_element(6, 1e6);
        let sol = box_qp_solve(&h, &f, &(-&wide), &wide, 1e-12).unwrap();
        let exact = h.clone().cholesky().unwrap().solve(&(-&f));
        assert!((sol.u - exact).amax() < 1e-10);
    }

    #[test]
    fn oracle_separable_clipping() {
        let h = DMatrix::identity(2, 2);
        let f = DVector::from_vec(vec![-3.0, 3.0]);
        let b = DVector::from_element(2, 1.0);
        let sol = box_qp_solve(&h, &f, &(-&b), &b, 1e-12).unwrap();
        assert_eq!(sol.u.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn oracle_residual_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let d = rng.random_range(2..25);
            let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let h = &a * a.transpose() + DMatrix::identity(d, d) * 0.05;
            let f = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let b = DVector::from_element(d, 1.0);
            let sol = box_qp_solve(&h, &f, &(-&b), &b, 1e-12).unwrap();
            assert!(kkt_residual(&h, &f, &(-&b), &b, &sol.u) <= 1e-12);
            assert!(sol.u.iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn mse_examples() {
        let lo = vec![-1.0; 81];
        let hi = vec![1.0; 81];
        let u = vec![0.3; 81];
        assert_eq!(mse(&u, &u, &lo, &hi).unwrap(), 0.0);
        let off: Vec<f64> = u.iter().map(|x| x + 2.0).collect();
        assert!((mse(&off, &u, &lo, &hi).unwrap() - 1.0).abs() < 1e-15);
        let mut one = u.clone();
        one[40] += 2.0;
        assert!((mse(&one, &u, &lo, &hi).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!(matches!(mse(&u, &u, &hi, &hi), Err(SolverError::ZeroWidthBound(0))));
    }

    #[test]
    fn bound_curves() {
        let b = convergence_bounds(1.0, 1.0, 2.0, 1.0, 5).unwrap();
        assert_eq!(b.linear[0], 2.0);
        assert!(b.linear[1..].iter().all(|&x| x == 0.0));
        let b = convergence_bounds(0.04, 1.0, 1.0, 1.0, 40).unwrap();
        // rate 0.8: halves every ln 2 / -ln 0.8 ~ 3.1 steps, close to ln 2 / 0.2
        let half = (0.5f64).ln() / (0.8f64).ln();
        assert!((b.linear[7] / b.linear[0] - 0.8f64.powi(7)).abs() < 1e-15);
        assert!(half > 3.0 && half < 3.5);
        assert!((b.sublinear[0] - 1.0).abs() < 1e-15);
        assert!(convergence_bounds(0.0, 1.0, 1.0, 1.0, 3).is_err());
    }

    #[test]
    fn certified_count_is_minimal() {
        for (q, gap, target) in [(0.04, 1.0, 1e-4), (0.03, 3.0, 1e-4), (0.5, 10.0, 1e-6)] {
            let i = certified_iterations(q, 1.0, gap, target).unwrap();
            let rate: f64 = 1.0 - f64::sqrt(q);
            assert!(rate.powi(i as i32) * gap <= target);
            assert!(rate.powi(i as i32 - 1) * gap > target);
        }
        assert_eq!(certified_iterations(0.1, 1.0, 1e-5, 1e-4).unwrap(), 0);
    }

    fn random_design(seed: u64) -> MpcDesign {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (4, 3);
        let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.9 } else { rng.random_range(-0.2..0.2) });
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
        let model = StateSpaceModel::new(a, b, c, TimeDomain::Discrete(0.1)).unwrap();
        let tuning = MpcTuning {
            q_c: DMatrix::identity(n, n),
            r_c: DMatrix::identity(m, m) * 0.5,
            horizon: 6,
            blocks: vec![1, 2, 3],
            u_min: DVector::from_element(m, -1.0),
            u_max: DVector::from_element(m, 1.0),
            q_k: DMatrix::identity(n, n),
            r_k: DMatrix::identity(1, 1),
        };
        build_design(&model, &tuning, &ScalingSet::identity(m, n, 1), &DesignOptions::default()).unwrap()
    }

    #[test]
    fn iterates_stay_feasible_and_restarts_hold_costs() {
        let d = random_design(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            for backend in Backend::ALL {
                let mut opts = SolveOptions::new(50, backend);
                opts.record_iterates = true;
                let r = FgmKernel::new(&d, backend).unwrap().solve(&x, &opts).unwrap();
                for u in r.iterates.as_ref().unwrap() {
                    assert!(u.iter().all(|v| v.abs() <= 1.0));
                }
                for &it in &r.restarts {
                    if it >= 2 {
                        assert!(r.cost_history[it - 1] <= r.cost_history[it - 2]);
                    }
                }
            }
        }
    }

    #[test]
    fn full_backend_respects_linear_bound() {
        let d = random_design(5);
        let x = [2.0, -1.0, 0.5, 1.5];
        let r = fgm_solve(&d, &x, 50, Backend::Full).unwrap();
        let star = oracle_solve(&d.qp, &x, 1e-12).unwrap();
        let jstar = cost_of(&d.qp, &x, star.u.as_slice());
        let (gap0, r2) = initial_gap(&d.qp, &d.pre, &x, star.u.as_slice());
        let bounds = convergence_bounds(d.pre.mu, d.pre.lip, gap0, r2, 50).unwrap();
        for (i, j) in r.cost_history.iter().enumerate() {
            assert!(j - jstar <= bounds.linear[i + 1] + 1e-12, "iteration {}", i + 1);
        }
        let lo = d.qp.u_min_t.as_slice();
        let hi = d.qp.u_max_t.as_slice();
        let r20 = fgm_solve(&d, &x, 20, Backend::Full).unwrap();
        let e50 = mse(&r.u_opt, star.u.as_slice(), lo, hi).unwrap();
        let e20 = mse(&r20.u_opt, star.u.as_slice(), lo, hi).unwrap();
        assert!(e50 <= e20);
    }

    #[test]
    fn fwl_tracks_full_and_is_deterministic() {
        let d = random_design(6);
        let x = [0.5, -0.25, 0.75, 0.1];
        let a = fgm_solve(&d, &x, 20, Backend::Fwl).unwrap();
        let b = fgm_solve(&d, &x, 20, Backend::Fwl).unwrap();
        assert_eq!(a, b);
        let full = fgm_solve(&d, &x, 20, Backend::Full).unwrap();
        let e = mse(&a.u_opt, &full.u_opt, d.qp.u_min_t.as_slice(), d.qp.u_max_t.as_slice()).unwrap();
        assert!(e < 1e-6, "mse {e}");
        assert_eq!(a.saturations, 0);
    }

    #[test]
    fn fwl_layout_defaults() {
        let d = random_design(7);
        let cfg = &d.fwl;
        assert_eq!((cfg.iterate.width(), cfg.iterate.int_bits()), (27, 2));
        assert_eq!(cfg.restart.width(), 64);
        assert_eq!(cfg.hessian_tree.product.width(), 35.min(cfg.hessian.width() + 27));
        let _ = precondition(&d.qp.h_c).unwrap();
        let _ = (BetaSchedule::Constant, PreconditionerKind::Ruiz);
    }

    #[test]
    fn iterate_dump_has_one_row_per_iteration() {
        let d = random_design(8);
        let mut opts = SolveOptions::new(7, Backend::Full);
        opts.record_iterates = true;
        let r = FgmKernel::new(&d, Backend::Full).unwrap().solve(&[1.0, 0.0, 0.0, 0.0], &opts).unwrap();
        let mut buf = Vec::new();
        r.write_iterates_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 8);
        assert!(text.starts_with("iter,restart,cost,u_0"));
    }
}
