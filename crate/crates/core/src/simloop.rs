//! Closed-loop simulation: plant with power-supply dynamics, saturation,
//! sensor reduction, steady-state Kalman filter and the MPC (or a baseline)
//! controller. Also amplitude sweeps and solver latency benchmarks.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::MpcDesign;
use crate::solver::{self, Backend, FgmKernel, SolveOptions, SolverError};
use crate::ssmodel::{OutputReducer, StateSpaceModel};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("solver failed at step {step}: {source}")]
    Solver {
        step: usize,
        #[source]
        source: SolverError,
    },
    #[error(transparent)]
    Setup(#[from] SolverError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("plot: {0}")]
    Plot(String),
}

/// Discrete plant driven by power-supply inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    /// States `[x_ps; x_plant]`, outputs are the raw sensors, auxiliary
    /// outputs the coil currents.
    pub model: StateSpaceModel,
    /// Maps the state to the power-supply output voltages.
    #[serde(with = "crate::linalg::serde_matrix")]
    pub ps_output: DMatrix<f64>,
    pub reducer: OutputReducer,
}

impl Plant {
    pub fn validate(&self) -> Result<(), SimError> {
        let ts = self.model.ts();
        if ts.is_none() {
            return Err(SimError::Scenario("plant must be discrete".into()));
        }
        if self.ps_output.ncols() != self.model.nx() || self.ps_output.nrows() != self.model.nu() {
            return Err(SimError::Scenario("ps_output must be nu x nx".into()));
        }
        if self.reducer.sensors() != self.model.ny() {
            return Err(SimError::Scenario(format!(
                "reducer expects {} sensors, plant has {}",
                self.reducer.sensors(),
                self.model.ny()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ControllerKind {
    /// Zero input.
    Off,
    Mpc { backend: Backend, i_max: usize },
    /// `u_s = clip(-K_lq x_hat)`: the LQ gain from the terminal-cost Riccati
    /// solution, clipped at the design bounds.
    SaturatedLq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub noise_seed: u64,
    /// Per-sensor standard deviation; empty means no noise.
    pub meas_noise_std: Vec<f64>,
    pub sat_limits: (f64, f64),
    pub controller: ControllerKind,
    /// Solve the reference QP at every step and record the solver MSE.
    pub track_accuracy: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub ts: f64,
    /// Reduced outputs `[y_A, y_B]`.
    pub y: Vec<Vec<f64>>,
    pub y_m: Vec<Vec<f64>>,
    /// Controller output, volts.
    pub u: Vec<Vec<f64>>,
    /// Power-supply output voltages after saturation and PS dynamics.
    pub u_elm: Vec<Vec<f64>>,
    pub i_elm: Vec<Vec<f64>>,
    /// Scaled state estimate `x_hat(k|k)` fed to the solver.
    pub x_hat_s: Vec<Vec<f64>>,
    /// Norm of the true plant state.
    pub x_norm: Vec<f64>,
    /// Condensed cost of the applied solution (NaN without MPC).
    pub cost: Vec<f64>,
    /// Solver MSE against the reference (NaN unless tracked).
    pub mse: Vec<f64>,
    pub saturations: u64,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn y_norms(&self) -> Vec<f64> {
        self.y.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    pub fn peak_y(&self) -> f64 {
        self.y_norms().into_iter().fold(0.0, f64::max)
    }

    /// Largest `|y|` over the last 10% of the run.
    pub fn tail_y(&self) -> f64 {
        let n = self.len();
        let start = n - n.div_ceil(10);
        self.y_norms()[start..].iter().copied().fold(0.0, f64::max)
    }

    /// Tail below 1% of the peak (a run that never leaves zero counts).
    pub fn stabilized(&self) -> bool {
        let peak = self.peak_y();
        peak == 0.0 || self.tail_y() < 0.01 * peak
    }

    pub fn max_abs_u(&self) -> f64 {
        self.u.iter().flatten().fold(0.0, |a: f64, v| a.max(v.abs()))
    }

    pub fn metrics(&self) -> TraceMetrics {
        let finite_max = |v: &[f64]| v.iter().copied().filter(|x| x.is_finite()).fold(f64::NAN, f64::max);
        TraceMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            steps: self.len(),
            ts: self.ts,
            peak_y: self.peak_y(),
            tail_y: self.tail_y(),
            stabilized: self.stabilized(),
            max_abs_u: self.max_abs_u(),
            max_abs_u_elm: self.u_elm.iter().flatten().fold(0.0, |a: f64, v| a.max(v.abs())),
            max_mse: finite_max(&self.mse),
            saturations: self.saturations,
        }
    }

    /// One row per step with named columns for each signal group.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut out = csv::Writer::from_writer(w);
        let width = |v: &Vec<Vec<f64>>| v.first().map_or(0, |r| r.len());
        let mut header = vec!["step".to_string(), "t".into()];
        let groups: [(&str, &Vec<Vec<f64>>); 5] = [
            ("y", &self.y),
            ("y_m", &self.y_m),
            ("u", &self.u),
            ("u_elm", &self.u_elm),
            ("i_elm", &self.i_elm),
        ];
        for (name, g) in &groups {
            header.extend((0..width(g)).map(|k| format!("{name}_{k}")));
        }
        header.extend(["cost".into(), "mse".into()]);
        out.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![k.to_string(), (k as f64 * self.ts).to_string()];
            for (_, g) in &groups {
                if let Some(r) = g.get(k) {
                    row.extend(r.iter().map(|v| v.to_string()));
                }
            }
            // untracked or not applicable entries are left empty
            for v in [self.cost[k], self.mse[k]] {
                row.push(if v.is_nan() { String::new() } else { v.to_string() });
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub schema_version: u32,
    pub steps: usize,
    pub ts: f64,
    pub peak_y: f64,
    pub tail_y: f64,
    pub stabilized: bool,
    pub max_abs_u: f64,
    pub max_abs_u_elm: f64,
    pub max_mse: f64,
    pub saturations: u64,
}

/// One filter update in scaled coordinates:
/// `x_pred = A_s x_prev + B_s u_prev`, `x = x_pred + M_K (y_s - C_s x_pred)`.
pub fn kf_step(
    design: &MpcDesign,
    x_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    y_s: &DVector<f64>,
) -> DVector<f64> {
    let m = &design.model_s;
    let pred = &m.a * x_prev + &m.b * u_prev;
    let innov = y_s - &m.c * &pred;
    pred + &design.kalman.m_k * innov
}

/// Runs the loop: measure, reduce, scale, filter, solve, de-scale,
/// saturate, advance.
pub fn run_closed_loop(
    plant: &Plant,
    design: &MpcDesign,
    s: &ScenarioSpec,
) -> Result<SimulationTrace, SimError> {
    plant.validate()?;
    let pm = &plant.model;
    let ts = pm.ts().expect("validated");
    if design.model_s.ts().is_some_and(|t| (t - ts).abs() > 1e-12 * ts) {
        return Err(SimError::Scenario("plant and controller sampling times differ".into()));
    }
    if s.x0.len() != pm.nx() {
        return Err(SimError::Scenario(format!(
            "x0 has {} entries, plant has {} states",
            s.x0.len(),
            pm.nx()
        )));
    }
    if pm.nu() != design.nu() {
        return Err(SimError::Scenario("plant and controller input counts differ".into()));
    }
    if !s.meas_noise_std.is_empty() && s.meas_noise_std.len() != pm.ny() {
        return Err(SimError::Scenario("one noise level per sensor".into()));
    }
    let (sat_lo, sat_hi) = s.sat_limits;
    let bounds_lo = design.tuning_s.u_min.component_mul(&design.scaling.k_u);
    let bounds_hi = design.tuning_s.u_max.component_mul(&design.scaling.k_u);
    if !(sat_lo <= bounds_lo.min() && sat_hi >= bounds_hi.max()) {
        return Err(SimError::Scenario("saturation limits must contain the design bounds".into()));
    }
    let kernel = match s.controller {
        ControllerKind::Mpc { backend, .. } => Some(FgmKernel::new(design, backend)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(s.noise_seed);
    let noise: Vec<Normal<f64>> = s
        .meas_noise_std
        .iter()
        .map(|&sd| Normal::new(0.0, sd).map_err(|e| SimError::Scenario(e.to_string())))
        .collect::<Result<_, _>>()?;

    let nu = design.nu();
    let mut x = DVector::from_column_slice(&s.x0);
    let mut x_hat = DVector::zeros(design.nx());
    let mut u_s_prev = DVector::zeros(nu);
    let mut tr = SimulationTrace {
        ts,
        ..SimulationTrace::default()
    };
    let aux = pm.c_aux.as_ref();
    for step in 0..s.steps {
        let mut y_m = &pm.c * &x;
        for (i, n) in noise.iter().enumerate() {
            y_m[i] += n.sample(&mut rng);
        }
        let y = plant.reducer.reduce(&y_m).map_err(|e| SimError::Scenario(e.to_string()))?;
        let y_s = design.scaling.scale_y(&y);
        x_hat = kf_step(design, &x_hat, &u_s_prev, &y_s);
        let xs = x_hat.as_slice();
        let (u_s, cost, mse) = match s.controller {
            ControllerKind::Off => (DVector::zeros(nu), f64::NAN, f64::NAN),
            ControllerKind::SaturatedLq => {
                let raw = -(&design.k_lq * &x_hat);
                let u = DVector::from_fn(nu, |i, _| {
                    raw[i].clamp(design.tuning_s.u_min[i], design.tuning_s.u_max[i])
                });
                (u, f64::NAN, f64::NAN)
            }
            ControllerKind::Mpc { backend, i_max } => {
                let k = kernel.as_ref().expect("kernel built for MPC");
                let mut opts = SolveOptions::new(i_max, backend);
                opts.record_costs = false;
                let rep = k.solve(xs, &opts).map_err(|e| SimError::Solver { step, source: e })?;
                tr.saturations += rep.saturations;
                let cost = solver::cost_of(&design.qp, xs, &rep.u_opt);
                let mse = if s.track_accuracy {
                    let star = solver::oracle_solve(&design.qp, xs, solver::ORACLE_TOL)
                        .map_err(|e| SimError::Solver { step, source: e })?;
                    solver::mse(
                        &rep.u_opt,
                        star.u.as_slice(),
                        design.qp.u_min_t.as_slice(),
                        design.qp.u_max_t.as_slice(),
                    )
                    .map_err(|e| SimError::Solver { step, source: e })?
                } else {
                    f64::NAN
                };
                (DVector::from_column_slice(&rep.first_move), cost, mse)
            }
        };
        let u = design.scaling.descale_u(&u_s);
        let u_sat = u.map(|v| v.clamp(sat_lo, sat_hi));
        tr.y.push(y.as_slice().to_vec());
        tr.y_m.push(y_m.as_slice().to_vec());
        tr.u.push(u.as_slice().to_vec());
        tr.u_elm.push((&plant.ps_output * &x).as_slice().to_vec());
        tr.i_elm.push(aux.map(|c| (c * &x).as_slice().to_vec()).unwrap_or_default());
        tr.x_hat_s.push(xs.to_vec());
        tr.x_norm.push(x.norm());
        tr.cost.push(cost);
        tr.mse.push(mse);
        x = pm.step(&x, &u_sat);
        u_s_prev = u_s;
    }
    Ok(tr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub amplitude: f64,
    pub mpc_stabilized: bool,
    pub lq_stabilized: bool,
    pub mpc_tail_ratio: f64,
    pub lq_tail_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub points: Vec<SweepPoint>,
    /// Largest amplitude such that it and every smaller swept amplitude stabilized.
    pub max_stabilizable_mpc: f64,
    pub max_stabilizable_lq: f64,
    /// `max_stabilizable_mpc / max_stabilizable_lq` (infinite if LQ never stabilizes).
    pub margin_ratio: f64,
}

/// Runs the scenario for every amplitude with the MPC controller of
/// `base.controller` and with the saturated LQ baseline. `x0_of` builds the
/// initial state for an amplitude.
pub fn amplitude_sweep<F>(
    plant: &Plant,
    design: &MpcDesign,
    base: &ScenarioSpec,
    amplitudes: &[f64],
    x0_of: F,
) -> Result<SweepReport, SimError>
where
    F: Fn(f64) -> Vec<f64> + Sync,
{
    if !matches!(base.controller, ControllerKind::Mpc { .. }) {
        return Err(SimError::Scenario("sweep needs an MPC controller".into()));
    }
    let mut amps = amplitudes.to_vec();
    amps.sort_by(f64::total_cmp);
    let ratio = |t: &SimulationTrace| {
        let p = t.peak_y();
        if p == 0.0 {
            0.0
        } else {
            t.tail_y() / p
        }
    };
    let points = amps
        .par_iter()
        .map(|&a| {
            let mut s = base.clone();
            s.x0 = x0_of(a);
            s.track_accuracy = false;
            let mpc = run_closed_loop(plant, design, &s)?;
            s.controller = ControllerKind::SaturatedLq;
            let lq = run_closed_loop(plant, design, &s)?;
            Ok(SweepPoint {
                amplitude: a,
                mpc_stabilized: mpc.stabilized(),
                lq_stabilized: lq.stabilized(),
                mpc_tail_ratio: ratio(&mpc),
                lq_tail_ratio: ratio(&lq),
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let max_ok = |f: &dyn Fn(&SweepPoint) -> bool| {
        let mut best = 0.0;
        for p in &points {
            if !f(p) {
                break;
            }
            best = p.amplitude;
        }
        best
    };
    let mpc = max_ok(&|p| p.mpc_stabilized);
    let lq = max_ok(&|p| p.lq_stabilized);
    Ok(SweepReport {
        schema_version: METRICS_SCHEMA_VERSION,
        points,
        max_stabilizable_mpc: mpc,
        max_stabilizable_lq: lq,
        margin_ratio: if lq > 0.0 { mpc / lq } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub backend: Backend,
    pub i_max: usize,
    pub samples: usize,
    pub max_us: f64,
    pub avg_us: f64,
    /// Coefficient of variation of the per-solve times.
    pub cv: f64,
}

/// Times the online part of the solve (prepared kernel, cost recording off)
/// over every state, `repeats` times, after one discarded warm-up pass.
pub fn benchmark(
    design: &MpcDesign,
    states: &[Vec<f64>],
    backend: Backend,
    i_max: usize,
    repeats: usize,
) -> Result<LatencyStats, SolverError> {
    let kernel = FgmKernel::new(design, backend)?;
    let mut opts = SolveOptions::new(i_max, backend);
    opts.record_costs = false;
    for x in states {
        std::hint::black_box(kernel.solve(x, &opts)?);
    }
    let mut times = Vec::with_capacity(states.len() * repeats);
    for _ in 0..repeats.max(1) {
        for x in states {
            let t0 = Instant::now();
            let r = kernel.solve(std::hint::black_box(x), &opts)?;
            times.push(t0.elapsed().as_secs_f64() * 1e6);
            std::hint::black_box(r);
        }
    }
    let n = times.len().max(1) as f64;
    let avg = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - avg).powi(2)).sum::<f64>() / n;
    Ok(LatencyStats {
        backend,
        i_max,
        samples: times.len(),
        max_us: times.iter().copied().fold(0.0, f64::max),
        avg_us: avg,
        cv: if avg > 0.0 { var.sqrt() / avg } else { 0.0 },
    })
}

/// Six-panel SVG of a trace: `y`, `y_m`, `I_ELM`, `u`, `u_ELM` and the
/// solver cost (the coil power formula is not modeled).
pub fn plot_trace(trace: &SimulationTrace, path: &Path) -> Result<(), SimError> {
    use plotters::prelude::*;
    let err = |e: &dyn std::fmt::Display| SimError::Plot(e.to_string());
    let root = SVGBackend::new(path, (1500, 800)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let panels = root.split_evenly((2, 3));
    let cost: Vec<Vec<f64>> = trace.cost.iter().map(|&c| vec![c]).collect();
    let series: [(&str, &Vec<Vec<f64>>); 6] = [
        ("y (reduced)", &trace.y),
        ("y_m (sensors)", &trace.y_m),
        ("I_ELM", &trace.i_elm),
        ("u (PS input, V)", &trace.u),
        ("u_ELM (PS output, V)", &trace.u_elm),
        ("QP cost J", &cost),
    ];
    let t_end = (trace.len().max(2) - 1) as f64 * trace.ts;
    for (area, (title, data)) in panels.iter().zip(series) {
        let vals = data.iter().flatten().copied().filter(|v| v.is_finite());
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 1.0, lo + 1.0)
        } else {
            (-1.0, 1.0)
        };
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 18))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..t_end.max(trace.ts), lo..hi)
            .map_err(|e| err(&e))?;
        chart.configure_mesh().x_desc("t [s]").draw().map_err(|e| err(&e))?;
        let width = data.first().map_or(0, |r| r.len());
        for ch in 0..width {
            let pts = data
                .iter()
                .enumerate()
                .filter(|(_, r)| r[ch].is_finite())
                .map(|(k, r)| (k as f64 * trace.ts, r[ch]));
            chart
                .draw_series(LineSeries::new(pts, Palette99::pick(ch).stroke_width(1)))
                .map_err(|e| err(&e))?;
        }
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, DesignOptions, MpcTuning, ScalingSet};
    use crate::ssmodel::TimeDomain;

    fn scalar_design(mk: f64) -> MpcDesign {
        let model = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            TimeDomain::Discrete(0.1),
        )
        .unwrap();
        let tuning = MpcTuning {
            q_c: DMatrix::identity(1, 1),
            r_c: DMatrix::identity(1, 1),
            horizon: 2,
            blocks: vec![2],
            u_min: DVector::from_element(1, -1.0),
            u_max: DVector::from_element(1, 1.0),
            q_k: DMatrix::identity(1, 1),
            r_k: DMatrix::identity(1, 1),
        };
        let mut d = build_design(&model, &tuning, &ScalingSet::identity(1, 1, 1), &DesignOptions::default())
            .unwrap();
        d.kalman.m_k[(0, 0)] = mk;
        d
    }

    #[test]
    fn kf_full_trust_returns_measurement() {
        let d = scalar_design(1.0);
        let x = kf_step(&d, &DVector::from_element(1, 3.0), &DVector::from_element(1, 1.0), &DVector::from_element(1, 0.7));
        assert!((x[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn kf_zero_gain_predicts() {
        let d = scalar_design(0.0);
        let x = kf_step(&d, &DVector::from_element(1, 3.0), &DVector::from_element(1, 1.0), &DVector::from_element(1, 0.7));
        assert_eq!(x[0], 2.5);
    }

    #[test]
    fn kf_hand_rollout() {
        let d = scalar_design(0.4);
        let ys = [1.0, 0.5, -0.25];
        let us = [0.0, 0.2, -0.1];
        let mut x = DVector::zeros(1);
        let mut want = 0.0;
        for k in 0..3 {
            x = kf_step(&d, &x, &DVector::from_element(1, us[k]), &DVector::from_element(1, ys[k]));
            let pred = 0.5 * want + us[k];
            want = pred + 0.4 * (ys[k] - pred);
        }
        assert!((x[0] - want).abs() < 1e-15);
        let hand = {
            let x0 = 0.0 + 0.4 * (1.0 - 0.0);
            let p1 = 0.5 * x0 + 0.2;
            let x1 = p1 + 0.4 * (0.5 - p1);
            let p2 = 0.5 * x1 - 0.1;
            p2 + 0.4 * (-0.25 - p2)
        };
        assert!((x[0] - hand).abs() < 1e-15);
    }

    #[test]
    fn stabilization_criterion() {
        let mut t = SimulationTrace {
            ts: 1.0,
            ..Default::default()
        };
        for k in 0..100 {
            t.y.push(vec![(-(k as f64) / 5.0).exp(), 0.0]);
        }
        assert!(t.stabilized());
        t.y[95] = vec![0.5, 0.0];
        assert!(!t.stabilized());
        let zero = SimulationTrace {
            ts: 1.0,
            y: vec![vec![0.0, 0.0]; 10],
            ..Default::default()
        };
        assert!(zero.stabilized());
    }
}
