//! The default surrogate setup: 27 coil power supplies, six pick-up sensors,
//! an unstable `n = 1` mode and a few stable wall modes. One spec builds the
//! plant used in simulation, the lower-order design model, the tuning and
//! a calibrated scaling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{
    build_design, default_observer_tuning, make_scaling, DesignError, DesignOptions, MpcDesign,
    MpcTuning, ScalingSet,
};
use crate::simloop::{run_closed_loop, ControllerKind, Plant, ScenarioSpec, SimError};
use crate::solver::Backend;
use crate::ssmodel::{
    build_ps_model, build_surrogate, series_connect, truncate_states, with_output, zoh_discretize,
    ModelError, OutputReducer, PsSpec, StateSpaceModel, SurrogateSpec,
};

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("design: {0}")]
    Design(#[from] DesignError),
    #[error("calibration run: {0}")]
    Sim(#[from] SimError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetSpec {
    pub ts: f64,
    pub coils: usize,
    pub sensor_angles_deg: Vec<f64>,
    pub ps: PsSpec,
    pub gamma: f64,
    pub omega: f64,
    /// Stable wall modes in the simulated plant.
    pub plant_stable_modes: usize,
    /// Stable wall modes kept in the design model (the slowest ones).
    pub design_stable_modes: usize,
    pub stable_tau_range: (f64, f64),
    pub input_gain: f64,
    pub output_gain: f64,
    pub aux_gain: f64,
    pub seed: u64,
    pub horizon: usize,
    pub blocks: Vec<usize>,
    pub u_bound: f64,
    /// Output weight on `y / y_range` in the stage cost.
    pub y_range: f64,
    /// Input weight relative to `(u / u_bound)^2`.
    pub r_weight: f64,
    /// Small state-cost floor added to the output weight.
    pub state_weight: f64,
    pub i_max: usize,
    /// Perturbation amplitude on the unstable pair for the nominal scenario.
    pub amplitude: f64,
    /// Perturbation phase in the `(cos, sin)` plane, radians.
    pub phase: f64,
    pub t_sim: f64,
    /// Phases used for the scaling calibration runs.
    pub calibration_phases: usize,
    /// Safety factor on observed ranges.
    pub range_margin: f64,
    /// Lower limit of a state range, relative to the largest state range.
    pub range_floor: f64,
}

impl Default for PresetSpec {
    fn default() -> Self {
        Self {
            ts: 0.75e-3,
            coils: 27,
            sensor_angles_deg: vec![39.0, 101.0, 159.0, 221.0, 279.0, 341.0],
            ps: PsSpec {
                v_min: -144.0,
                v_max: 144.0,
                lag_tau: 7.5e-3,
                delay: 2.5e-3,
                pade_order: 3,
            },
            gamma: 19.0,
            omega: 0.26,
            plant_stable_modes: 12,
            design_stable_modes: 6,
            stable_tau_range: (2e-3, 50e-3),
            input_gain: 0.1,
            output_gain: 1.0,
            aux_gain: 1.0,
            seed: 7,
            horizon: 80,
            blocks: vec![2, 2, 76],
            u_bound: 34.0,
            y_range: 1.0,
            r_weight: 100.0,
            state_weight: 1e-6,
            i_max: 20,
            amplitude: 1.0,
            phase: 0.0,
            t_sim: 0.6,
            calibration_phases: 8,
            range_margin: 1.5,
            range_floor: 1e-3,
        }
    }
}

/// Plant, design model and physical tuning built from a [`PresetSpec`].
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: PresetSpec,
    pub plant: Plant,
    /// Discrete design model with the reduced outputs `[y_A, y_B]`.
    pub design_model: StateSpaceModel,
    pub tuning: MpcTuning,
    pub observer_rho: f64,
}

impl Setup {
    /// First plant state of the unstable pair.
    pub fn mode_index(&self) -> usize {
        self.spec.coils * (1 + self.spec.ps.pade_order * usize::from(self.spec.ps.delay > 0.0))
    }

    /// Plant initial state with the unstable pair at `amplitude (cos, sin)`.
    pub fn x0(&self, amplitude: f64, phase: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.plant.model.nx()];
        let k = self.mode_index();
        x[k] = amplitude * phase.cos();
        x[k + 1] = amplitude * phase.sin();
        x
    }

    pub fn steps(&self) -> usize {
        (self.spec.t_sim / self.spec.ts).round() as usize
    }

    pub fn scenario(&self, amplitude: f64, phase: f64, backend: Backend) -> ScenarioSpec {
        ScenarioSpec {
            x0: self.x0(amplitude, phase),
            steps: self.steps(),
            noise_seed: self.spec.seed,
            meas_noise_std: Vec::new(),
            sat_limits: (self.spec.ps.v_min, self.spec.ps.v_max),
            controller: ControllerKind::Mpc {
                backend,
                i_max: self.spec.i_max,
            },
            track_accuracy: false,
        }
    }

    pub fn nominal_scenario(&self, backend: Backend) -> ScenarioSpec {
        self.scenario(self.spec.amplitude, self.spec.phase, backend)
    }

    pub fn design_options(&self) -> DesignOptions {
        DesignOptions {
            i_max: self.spec.i_max,
            ..DesignOptions::default()
        }
    }

    /// Design with `K_u = u_bound` and unit state and output scaling.
    pub fn unscaled_design(&self) -> Result<MpcDesign, PresetError> {
        let m = &self.design_model;
        let mut s = ScalingSet::identity(m.nu(), m.nx(), m.ny());
        s.k_u.fill(self.spec.u_bound);
        self.design_with(&s)
    }

    pub fn design_with(&self, scaling: &ScalingSet) -> Result<MpcDesign, PresetError> {
        self.design_with_options(scaling, &self.design_options())
    }

    pub fn design_with_options(
        &self,
        scaling: &ScalingSet,
        options: &DesignOptions,
    ) -> Result<MpcDesign, PresetError> {
        let mut d = build_design(&self.design_model, &self.tuning, scaling, options)?;
        d.provenance.source = "preset surrogate".into();
        d.provenance.seeds = vec![self.spec.seed];
        d.provenance.notes.push(format!("observer rho = {:e}", self.observer_rho));
        Ok(d)
    }

    /// State and output ranges from closed-loop runs of the unscaled design at
    /// the nominal amplitude over evenly spaced phases, times the margin.
    pub fn calibrate_scaling(&self) -> Result<ScalingSet, PresetError> {
        let base = self.unscaled_design()?;
        let phases = self.spec.calibration_phases.max(1);
        let (nx, ny) = (base.nx(), self.design_model.ny());
        let mut x_max = vec![0.0f64; nx];
        let mut y_max = vec![0.0f64; ny];
        for k in 0..phases {
            let phase = self.spec.phase + 2.0 * PI * k as f64 / phases as f64;
            let tr = run_closed_loop(&self.plant, &base, &self.scenario(self.spec.amplitude, phase, Backend::Full))?;
            for x in &tr.x_hat_s {
                for (m, v) in x_max.iter_mut().zip(x) {
                    *m = m.max(v.abs());
                }
            }
            for y in &tr.y {
                for (m, v) in y_max.iter_mut().zip(y) {
                    *m = m.max(v.abs());
                }
            }
        }
        let top = x_max.iter().copied().fold(0.0, f64::max);
        if !(top > 0.0) {
            return Err(PresetError::Invalid("calibration runs never left the origin".into()));
        }
        let floor = self.spec.range_floor * top;
        let margin = self.spec.range_margin;
        let x_ranges: Vec<f64> = x_max.iter().map(|&v| margin * v.max(floor)).collect();
        let y_top = y_max.iter().copied().fold(0.0, f64::max);
        let y_ranges: Vec<f64> = y_max
            .iter()
            .map(|&v| margin * v.max(self.spec.range_floor * y_top))
            .collect();
        let u_max = vec![self.spec.u_bound; self.design_model.nu()];
        Ok(make_scaling(&u_max, &x_ranges, &y_ranges)?)
    }

    /// Calibrated scaling followed by the final design.
    pub fn scaled_design(&self) -> Result<MpcDesign, PresetError> {
        let s = self.calibrate_scaling()?;
        let mut d = self.design_with(&s)?;
        d.provenance.notes.push(format!(
            "state ranges: {} x observed max over {} calibration runs",
            self.spec.range_margin, self.spec.calibration_phases
        ));
        Ok(d)
    }

    /// Scaled state estimates visited by closed-loop runs from seeded random
    /// phases and amplitudes in `(0, amplitude]`, subsampled to `count`.
    pub fn trajectory_states(
        &self,
        design: &MpcDesign,
        count: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, PresetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let runs = count.div_ceil(50).max(1);
        let per_run = count.div_ceil(runs);
        let mut out = Vec::with_capacity(runs * per_run);
        for _ in 0..runs {
            let amp = self.spec.amplitude * rng.random_range(0.2..=1.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let tr = run_closed_loop(&self.plant, design, &self.scenario(amp, phase, Backend::Full))?;
            // quadratic spacing: the early transient is sampled densely
            let n = tr.x_hat_s.len();
            for j in 0..per_run {
                let t = j as f64 / per_run as f64;
                out.push(tr.x_hat_s[((t * t * n as f64) as usize).min(n - 1)].clone());
            }
        }
        out.truncate(count);
        Ok(out)
    }
}

/// Builds the plant and design model, the stage costs and the observer tuning.
pub fn build_setup(spec: &PresetSpec) -> Result<Setup, PresetError> {
    let n_blocks: usize = spec.blocks.iter().sum();
    if n_blocks != spec.horizon {
        return Err(PresetError::Invalid(format!("blocks sum to {n_blocks}, horizon is {}", spec.horizon)));
    }
    if spec.design_stable_modes > spec.plant_stable_modes {
        return Err(PresetError::Invalid("design model cannot have more modes than the plant".into()));
    }
    if !(spec.u_bound > 0.0 && spec.u_bound <= spec.ps.v_max && -spec.u_bound >= spec.ps.v_min) {
        return Err(PresetError::Invalid("u_bound must lie inside the supply limits".into()));
    }
    let reducer = OutputReducer::new(&spec.sensor_angles_deg)?;
    let ps = build_ps_model(&spec.ps, spec.coils)?;
    let surrogate = build_surrogate(&SurrogateSpec {
        gamma: spec.gamma,
        omega: spec.omega,
        n_stable: spec.plant_stable_modes,
        stable_tau_range: spec.stable_tau_range,
        n_inputs: spec.coils,
        n_outputs: 2,
        n_aux: spec.coils,
        input_gain: spec.input_gain,
        output_gain: spec.output_gain,
        aux_gain: spec.aux_gain,
        seed: spec.seed,
    })?;
    let full = zoh_discretize(&series_connect(&ps, &surrogate)?, spec.ts)?;
    let n_ps = ps.nx();
    let mut ps_output = DMatrix::zeros(spec.coils, full.nx());
    ps_output.view_mut((0, 0), (spec.coils, n_ps)).copy_from(&ps.c);
    let sensors = OutputReducer::basis(&spec.sensor_angles_deg) * &full.c;
    let plant_model = with_output(&full, sensors)?;
    let design_model = truncate_states(&full, n_ps + 2 + spec.design_stable_modes)?;
    let design_model = StateSpaceModel::new(
        design_model.a,
        design_model.b,
        design_model.c,
        design_model.domain,
    )?;

    let (nx, nu) = (design_model.nx(), design_model.nu());
    let w = 1.0 / (spec.y_range * spec.y_range);
    let q_c = design_model.c.transpose() * &design_model.c * w + DMatrix::identity(nx, nx) * spec.state_weight;
    let r_c = DMatrix::identity(nu, nu) * (spec.r_weight / (spec.u_bound * spec.u_bound));
    let (q_k, r_k, rho) = default_observer_tuning(&design_model.a, &design_model.c)?;
    let tuning = MpcTuning {
        q_c,
        r_c,
        horizon: spec.horizon,
        blocks: spec.blocks.clone(),
        u_min: DVector::from_element(nu, -spec.u_bound),
        u_max: DVector::from_element(nu, spec.u_bound),
        q_k,
        r_k,
    };
    Ok(Setup {
        spec: spec.clone(),
        plant: Plant {
            model: plant_model,
            ps_output,
            reducer,
        },
        design_model,
        tuning,
        observer_rho: rho,
    })
}
