//! Offline controller synthesis: Riccati solutions, signal scaling, move
//! blocking, condensing, diagonal preconditioning and the momentum schedule.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, serde_matrix, serde_vector};
use crate::solver::FwlSolverConfig;
use crate::ssmodel::{ModelError, StateSpaceModel, TimeDomain};

pub const DESIGN_SCHEMA_VERSION: u32 = 1;

/// Relative change at which the doubling iteration stops.
pub const DARE_STOP: f64 = 1e-14;
pub const DARE_MAX_ITER: usize = 100_000;
/// Accepted relative Riccati residual.
pub const DARE_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid tuning: {0}")]
    Tuning(String),
    #[error("Riccati iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    DareNotConverged { iterations: usize, residual: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("observer is not stable (spectral radius {0:.6})")]
    UnstableObserver(f64),
    #[error("invalid scaling: {0}")]
    Scaling(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DesignError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fixed-point layout: {0}")]
    Fixed(String),
}

impl DesignError {
    fn at(self, stage: &'static str) -> Self {
        DesignError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcTuning {
    #[serde(rename = "Q_C", with = "serde_matrix")]
    pub q_c: DMatrix<f64>,
    #[serde(rename = "R_C", with = "serde_matrix")]
    pub r_c: DMatrix<f64>,
    pub horizon: usize,
    pub blocks: Vec<usize>,
    #[serde(with = "serde_vector")]
    pub u_min: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub u_max: DVector<f64>,
    #[serde(rename = "Q_K", with = "serde_matrix")]
    pub q_k: DMatrix<f64>,
    #[serde(rename = "R_K", with = "serde_matrix")]
    pub r_k: DMatrix<f64>,
}

impl MpcTuning {
    pub fn validate(&self, nx: usize, nu: usize, ny: usize) -> Result<(), DesignError> {
        let sq = |m: &DMatrix<f64>, n: usize, name: &str| {
            if m.nrows() != n || m.ncols() != n {
                Err(DesignError::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        sq(&self.q_c, nx, "Q_C")?;
        sq(&self.r_c, nu, "R_C")?;
        sq(&self.q_k, nx, "Q_K")?;
        sq(&self.r_k, ny, "R_K")?;
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return Err(DesignError::Tuning("blocks must be non-empty and positive".into()));
        }
        let total: usize = self.blocks.iter().sum();
        if total != self.horizon {
            return Err(DesignError::Tuning(format!(
                "blocks sum to {total}, horizon is {}",
                self.horizon
            )));
        }
        if self.u_min.len() != nu || self.u_max.len() != nu {
            return Err(DesignError::Dimension("bounds need one entry per input".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(DesignError::Tuning("u_min must be < u_max elementwise".into()));
        }
        if !is_psd(&self.q_c) {
            return Err(DesignError::Tuning("Q_C must be positive semidefinite".into()));
        }
        if !is_pd(&self.r_c) {
            return Err(DesignError::Tuning("R_C must be positive definite".into()));
        }
        if !is_psd(&self.q_k) {
            return Err(DesignError::Tuning("Q_K must be positive semidefinite".into()));
        }
        if !is_pd(&self.r_k) {
            return Err(DesignError::Tuning("R_K must be positive definite".into()));
        }
        Ok(())
    }
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    let mut s = m.clone();
    linalg::symmetrize(&mut s);
    (m - &s).norm() <= 1e-10 * (1.0 + m.norm()) && s.cholesky().is_some()
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    let mut s = m.clone();
    linalg::symmetrize(&mut s);
    if (m - &s).norm() > 1e-10 * (1.0 + m.norm()) {
        return false;
    }
    let (min, max) = linalg::sym_extreme_eigenvalues(&s);
    min >= -1e-10 * max.abs().max(1.0)
}

/// Diagonal signal scalings: `u = K_u u_s`, `x = K_x x_s`, `y_s = K_y y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSet {
    #[serde(rename = "K_u", with = "serde_vector")]
    pub k_u: DVector<f64>,
    #[serde(rename = "K_x", with = "serde_vector")]
    pub k_x: DVector<f64>,
    #[serde(rename = "K_y", with = "serde_vector")]
    pub k_y: DVector<f64>,
}

impl ScalingSet {
    pub fn identity(nu: usize, nx: usize, ny: usize) -> Self {
        Self {
            k_u: DVector::from_element(nu, 1.0),
            k_x: DVector::from_element(nx, 1.0),
            k_y: DVector::from_element(ny, 1.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.k_u
            .iter()
            .chain(self.k_x.iter())
            .chain(self.k_y.iter())
            .all(|&k| k == 1.0)
    }

    fn check(&self, nx: usize, nu: usize, ny: usize) -> Result<(), DesignError> {
        if self.k_u.len() != nu || self.k_x.len() != nx || self.k_y.len() != ny {
            return Err(DesignError::Dimension(format!(
                "scaling sizes ({}, {}, {}) for model ({nu}, {nx}, {ny})",
                self.k_u.len(),
                self.k_x.len(),
                self.k_y.len()
            )));
        }
        if self
            .k_u
            .iter()
            .chain(self.k_x.iter())
            .chain(self.k_y.iter())
            .any(|&k| !(k > 0.0 && k.is_finite()))
        {
            return Err(DesignError::Scaling("scaling entries must be positive".into()));
        }
        Ok(())
    }

    /// Physical input from a scaled input.
    pub fn descale_u(&self, u_s: &DVector<f64>) -> DVector<f64> {
        u_s.component_mul(&self.k_u)
    }

    pub fn scale_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.component_mul(&self.k_y)
    }

    pub fn scale_x(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_div(&self.k_x)
    }

    pub fn descale_x(&self, x_s: &DVector<f64>) -> DVector<f64> {
        x_s.component_mul(&self.k_x)
    }
}

/// `K_u = u_max`, `K_x = state range`, `K_y = 1 / output range`, so that
/// signals within the given ranges map into `[-1, 1]`.
pub fn make_scaling(
    u_max: &[f64],
    state_ranges: &[f64],
    y_ranges: &[f64],
) -> Result<ScalingSet, DesignError> {
    let positive = |v: &[f64], name: &str| {
        if let Some((i, r)) = v.iter().enumerate().find(|(_, r)| !(**r > 0.0 && r.is_finite())) {
            Err(DesignError::Scaling(format!("{name}[{i}] = {r} is not a positive range")))
        } else {
            Ok(())
        }
    };
    positive(u_max, "u_max")?;
    positive(state_ranges, "state_ranges")?;
    positive(y_ranges, "y_ranges")?;
    Ok(ScalingSet {
        k_u: DVector::from_column_slice(u_max),
        k_x: DVector::from_column_slice(state_ranges),
        k_y: DVector::from_iterator(y_ranges.len(), y_ranges.iter().map(|r| 1.0 / r)),
    })
}

/// `A_s = K_x^-1 A K_x`, `B_s = K_x^-1 B K_u`, `C_s = K_y C K_x`,
/// `D_s = K_y D K_u`. Auxiliary outputs keep physical units: `C_aux K_x`.
pub fn scale_model(m: &StateSpaceModel, s: &ScalingSet) -> Result<StateSpaceModel, DesignError> {
    s.check(m.nx(), m.nu(), m.ny())?;
    let kx = &s.k_x;
    let a = DMatrix::from_fn(m.nx(), m.nx(), |i, j| m.a[(i, j)] * kx[j] / kx[i]);
    let b = DMatrix::from_fn(m.nx(), m.nu(), |i, j| m.b[(i, j)] * s.k_u[j] / kx[i]);
    let c = DMatrix::from_fn(m.ny(), m.nx(), |i, j| m.c[(i, j)] * kx[j] * s.k_y[i]);
    let mut out = StateSpaceModel::new(a, b, c, m.domain)?;
    if let Some(d) = &m.d {
        let ds = DMatrix::from_fn(m.ny(), m.nu(), |i, j| d[(i, j)] * s.k_y[i] * s.k_u[j]);
        out = out.with_feedthrough(ds)?;
    }
    if let Some(aux) = &m.c_aux {
        out = out.with_aux(DMatrix::from_fn(aux.nrows(), m.nx(), |i, j| aux[(i, j)] * kx[j]))?;
    }
    Ok(out)
}

/// Tuning in scaled coordinates; bounds become `u / K_u`.
pub fn scale_tuning(t: &MpcTuning, s: &ScalingSet) -> Result<MpcTuning, DesignError> {
    let (nx, nu, ny) = (s.k_x.len(), s.k_u.len(), s.k_y.len());
    t.validate(nx, nu, ny)?;
    let kx = &s.k_x;
    let ku = &s.k_u;
    let ky = &s.k_y;
    Ok(MpcTuning {
        q_c: DMatrix::from_fn(nx, nx, |i, j| kx[i] * t.q_c[(i, j)] * kx[j]),
        r_c: DMatrix::from_fn(nu, nu, |i, j| ku[i] * t.r_c[(i, j)] * ku[j]),
        horizon: t.horizon,
        blocks: t.blocks.clone(),
        u_min: t.u_min.component_div(ku),
        u_max: t.u_max.component_div(ku),
        q_k: DMatrix::from_fn(nx, nx, |i, j| t.q_k[(i, j)] / (kx[i] * kx[j])),
        r_k: DMatrix::from_fn(ny, ny, |i, j| ky[i] * t.r_k[(i, j)] * ky[j]),
    })
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Relative residual `||A'PA - A'PB (R + B'PB)^-1 B'PA + Q - P|| / (||P|| + ||Q||)`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let at = a.transpose();
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let rhs = pb.transpose() * a;
    let k = match s.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => match s.lu().solve(&rhs) {
            Some(k) => k,
            None => return f64::INFINITY,
        },
    };
    let res = &at * p * a - (&at * &pb) * k + q - p;
    res.norm() / (p.norm() + q.norm()).max(f64::MIN_POSITIVE)
}

/// One Newton correction: solves `D - Ac' D Ac = Res(P)` for the closed loop
/// `Ac = A - B K(P)` by Smith doubling and returns `P + D`.
fn newton_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let k = s.cholesky()?.solve(&(pb.transpose() * a));
    let at = a.transpose();
    let mut res = &at * p * a - (&at * &pb) * &k + q - p;
    linalg::symmetrize(&mut res);
    let mut m = (a - b * &k).transpose();
    let mut x = res;
    for _ in 0..60 {
        let step = &m * &x * m.transpose();
        x += &step;
        m = &m * &m;
        if !linalg::all_finite(&m) {
            return None;
        }
        if m.norm() <= 1e-18 || step.norm() <= 1e-18 * x.norm() {
            break;
        }
    }
    linalg::symmetrize(&mut x);
    let next = p + x;
    linalg::all_finite(&next).then_some(next)
}

/// Stabilizing solution of the discrete algebraic Riccati equation by the
/// structure-preserving doubling algorithm.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DareSolution, DesignError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols())
    {
        return Err(DesignError::Dimension("DARE operands".into()));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or(DesignError::NotPositiveDefinite("R"))?;
    let mut ak = a.clone();
    let mut gk = {
        let mut g = b * r_chol.solve(&b.transpose());
        linalg::symmetrize(&mut g);
        g
    };
    let mut hk = q.clone();
    linalg::symmetrize(&mut hk);
    let id = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < DARE_MAX_ITER {
        iterations += 1;
        let w = &id + &gk * &hk;
        let lu = w.lu();
        let (Some(wa), Some(wg)) = (lu.solve(&ak), lu.solve(&gk)) else {
            return Err(DesignError::DareNotConverged {
                iterations,
                residual: f64::INFINITY,
            });
        };
        let akt = ak.transpose();
        let mut g_next = &gk + &ak * &wg * &akt;
        let mut h_next = &hk + &akt * &hk * &wa;
        let a_next = &ak * &wa;
        linalg::symmetrize(&mut g_next);
        linalg::symmetrize(&mut h_next);
        if !linalg::all_finite(&h_next) || !linalg::all_finite(&a_next) {
            return Err(DesignError::DareNotConverged {
                iterations,
                residual: f64::INFINITY,
            });
        }
        let change = (&h_next - &hk).norm() / h_next.norm().max(f64::MIN_POSITIVE);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if change <= DARE_STOP || ak.norm() == 0.0 {
            converged = true;
            break;
        }
        // the doubling converges quadratically; after stagnation at rounding
        // level further steps only add noise
        if change <= 1e-13 && ak.norm() <= 1e-13 {
            converged = true;
            break;
        }
    }
    let mut p = hk;
    let mut residual = dare_residual(a, b, q, r, &p);
    for _ in 0..4 {
        let Some(next) = newton_step(a, b, q, r, &p) else {
            break;
        };
        let rn = dare_residual(a, b, q, r, &next);
        if !(rn < residual) {
            break;
        }
        p = next;
        residual = rn;
    }
    if residual > DARE_RESIDUAL_TOL {
        // polish with plain Riccati recursion steps while they help
        for _ in 0..200 {
            let next = riccati_step(a, b, q, r, &p);
            let rn = dare_residual(a, b, q, r, &next);
            if !(rn < residual) {
                break;
            }
            p = next;
            residual = rn;
            if residual <= DARE_RESIDUAL_TOL {
                break;
            }
        }
    }
    if !converged || residual > DARE_RESIDUAL_TOL {
        return Err(DesignError::DareNotConverged {
            iterations,
            residual,
        });
    }
    Ok(DareSolution {
        p,
        iterations,
        residual,
    })
}

fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let k = s
        .lu()
        .solve(&(pb.transpose() * a))
        .unwrap_or_else(|| DMatrix::zeros(b.ncols(), a.ncols()));
    let mut next = a.transpose() * p * a - (a.transpose() * &pb) * k + q;
    linalg::symmetrize(&mut next);
    next
}

/// LQ state feedback `u = -K x`, `K = (R + B'PB)^-1 B'PA`.
pub fn lq_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DesignError> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    s.cholesky()
        .map(|ch| ch.solve(&(pb.transpose() * a)))
        .ok_or(DesignError::NotPositiveDefinite("R + B'PB"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanGain {
    #[serde(rename = "M_K", with = "serde_matrix")]
    pub m_k: DMatrix<f64>,
    /// Steady-state prediction covariance.
    #[serde(with = "serde_matrix")]
    pub sigma: DMatrix<f64>,
    /// Spectral radius of `(I - M_K C) A`.
    pub observer_radius: f64,
}

/// Steady-state filter gain `M_K = S C' (C S C' + R_K)^-1`, where `S` solves
/// the dual (prediction) Riccati equation.
pub fn kalman_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q_k: &DMatrix<f64>,
    r_k: &DMatrix<f64>,
) -> Result<KalmanGain, DesignError> {
    let sol = solve_dare(&a.transpose(), &c.transpose(), q_k, r_k)?;
    let sigma = sol.p;
    let s = c * &sigma * c.transpose() + r_k;
    let m_k = s
        .cholesky()
        .map(|ch| ch.solve(&(c * &sigma)).transpose())
        .ok_or(DesignError::NotPositiveDefinite("C S C' + R_K"))?;
    let n = a.nrows();
    let radius = linalg::spectral_radius(&((DMatrix::identity(n, n) - &m_k * c) * a));
    if !(radius < 1.0) {
        return Err(DesignError::UnstableObserver(radius));
    }
    Ok(KalmanGain {
        m_k,
        sigma,
        observer_radius: radius,
    })
}

/// Observer tuning target for the default `Q_K = I`, `R_K = rho I` rule.
pub const OBSERVER_RADIUS_TARGET: f64 = 0.9;

/// Picks `rho` from the grid `10^-6 .. 10^2` (decades): the largest value
/// whose observer radius is within [`OBSERVER_RADIUS_TARGET`], or the one
/// with the smallest radius when none is.
pub fn default_observer_tuning(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64), DesignError> {
    let (n, p) = (a.nrows(), c.nrows());
    let mut best: Option<(f64, f64)> = None;
    let mut chosen = None;
    for k in -6..=2 {
        let rho = 10f64.powi(k);
        let Ok(g) = kalman_gain(a, c, &DMatrix::identity(n, n), &(DMatrix::identity(p, p) * rho))
        else {
            continue;
        };
        if g.observer_radius <= OBSERVER_RADIUS_TARGET {
            chosen = Some(rho);
        }
        if best.is_none_or(|(_, r)| g.observer_radius < r) {
            best = Some((rho, g.observer_radius));
        }
    }
    let rho = chosen
        .or(best.map(|b| b.0))
        .ok_or(DesignError::UnstableObserver(f64::INFINITY))?;
    Ok((DMatrix::identity(n, n), DMatrix::identity(p, p) * rho, rho))
}

/// `(N m) x (Nu m)` expansion from blocked moves to per-step inputs.
pub fn blocking_matrix(blocks: &[usize], m: usize) -> DMatrix<f64> {
    let n: usize = blocks.iter().sum();
    let mut t = DMatrix::zeros(n * m, blocks.len() * m);
    let mut step = 0;
    for (b, &len) in blocks.iter().enumerate() {
        for _ in 0..len {
            for ch in 0..m {
                t[(step * m + ch, b * m + ch)] = 1.0;
            }
            step += 1;
        }
    }
    t
}

/// The condensed QP `1/2 u'H_c u + (F x)'u + 1/2 x'W x` over `u_min_t <= u <= u_max_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedQp {
    #[serde(rename = "H_c", with = "serde_matrix")]
    pub h_c: DMatrix<f64>,
    #[serde(rename = "F", with = "serde_matrix")]
    pub f: DMatrix<f64>,
    /// Quadratic form of the constant term.
    #[serde(rename = "W", with = "serde_matrix")]
    pub w: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub u_min_t: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub u_max_t: DVector<f64>,
}

impl CondensedQp {
    pub fn dim(&self) -> usize {
        self.h_c.nrows()
    }

    pub fn f_c(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }

    pub fn c_c(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.w * x))
    }

    pub fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h_c * u)) + self.f_c(x).dot(u) + self.c_c(x)
    }
}

/// Eliminates the predicted states of the blocked finite-horizon problem
/// with stage cost `x'Q x + u'R u` and terminal cost `x'P x` (both halved).
pub fn condense(
    model_s: &StateSpaceModel,
    tuning_s: &MpcTuning,
    p: &DMatrix<f64>,
    blocks: &[usize],
) -> Result<CondensedQp, DesignError> {
    if !matches!(model_s.domain, TimeDomain::Discrete(_)) {
        return Err(DesignError::Dimension("condensing needs a discrete model".into()));
    }
    let (n, m) = (model_s.nx(), model_s.nu());
    if p.shape() != (n, n) || tuning_s.q_c.shape() != (n, n) || tuning_s.r_c.shape() != (m, m) {
        return Err(DesignError::Dimension("cost matrices".into()));
    }
    if blocks.is_empty() || blocks.contains(&0) {
        return Err(DesignError::Tuning("blocks must be non-empty and positive".into()));
    }
    if !is_psd(p) {
        return Err(DesignError::NotPositiveDefinite("P"));
    }
    let nb = blocks.len();
    let d = m * nb;
    let horizon: usize = blocks.iter().sum();
    let (a, b, q, r) = (&model_s.a, &model_s.b, &tuning_s.q_c, &tuning_s.r_c);

    let mut h = DMatrix::zeros(d, d);
    for (k, &len) in blocks.iter().enumerate() {
        h.view_mut((k * m, k * m), (m, m)).copy_from(&(r * len as f64));
    }
    let mut f = DMatrix::zeros(d, n);
    let mut w = q.clone();
    // x_k = Phi_k x + G_k u
    let mut g = DMatrix::<f64>::zeros(n, d);
    let mut phi = DMatrix::<f64>::identity(n, n);
    let mut block_of = Vec::with_capacity(horizon);
    for (k, &len) in blocks.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(k, len));
    }
    for (k, &blk) in block_of.iter().enumerate() {
        let mut g_next = a * &g;
        {
            let mut col = g_next.view_mut((0, blk * m), (n, m));
            col += b;
        }
        g = g_next;
        phi = a * &phi;
        let weight = if k + 1 == horizon { p } else { q };
        let wg = weight * &g;
        h += g.transpose() * &wg;
        f += wg.transpose() * &phi;
        w += phi.transpose() * weight * &phi;
    }
    linalg::symmetrize(&mut h);
    linalg::symmetrize(&mut w);
    let tile = |v: &DVector<f64>| DVector::from_fn(d, |i, _| v[i % m]);
    Ok(CondensedQp {
        h_c: h,
        f,
        w,
        u_min_t: tile(&tuning_s.u_min),
        u_max_t: tile(&tuning_s.u_max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    /// Lowest condition number among the candidates below.
    Auto,
    /// Iterated symmetric infinity-norm equilibration.
    Ruiz,
    /// Inverse square roots of the Hessian diagonal.
    Jacobi,
    /// Eigenvalue normalization only (no diagonal rescaling).
    Scalar,
    /// Numerical minimization of the condition number over diagonal
    /// scalings, started from the better of Ruiz and Jacobi.
    MinCondition,
}

/// Diagonal preconditioner: `H_cp = L^-1 H_c` with `L^-1 = D^2 / lambda`,
/// where `D H_c D / lambda` has largest eigenvalue 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    pub kind: PreconditionerKind,
    /// Diagonal of `L`.
    #[serde(rename = "L", with = "serde_vector")]
    pub l_diag: DVector<f64>,
    /// One-sided preconditioned Hessian used by the iteration.
    #[serde(rename = "H_cp", with = "serde_matrix")]
    pub h_cp: DMatrix<f64>,
    pub mu: f64,
    pub lip: f64,
    pub kappa_before: f64,
    pub kappa_after: f64,
}

impl Preconditioner {
    /// `D = L^-1/2`.
    pub fn d_sym(&self) -> DVector<f64> {
        self.l_diag.map(|l| 1.0 / l.sqrt())
    }

    /// The symmetric form `D H_c D`.
    pub fn symmetric(&self, h_c: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.d_sym();
        DMatrix::from_fn(h_c.nrows(), h_c.ncols(), |i, j| d[i] * h_c[(i, j)] * d[j])
    }
}

pub fn precondition(h_c: &DMatrix<f64>) -> Result<Preconditioner, DesignError> {
    precondition_with(h_c, PreconditionerKind::Auto)
}

pub fn precondition_with(
    h_c: &DMatrix<f64>,
    kind: PreconditionerKind,
) -> Result<Preconditioner, DesignError> {
    let n = h_c.nrows();
    if n == 0 || h_c.ncols() != n {
        return Err(DesignError::Dimension("Hessian must be square".into()));
    }
    if !is_pd(h_c) {
        return Err(DesignError::NotPositiveDefinite("H_c"));
    }
    let (lo, hi) = linalg::sym_extreme_eigenvalues(h_c);
    let kappa_before = hi / lo;
    let candidates: &[PreconditionerKind] = match kind {
        PreconditionerKind::Auto => &[
            PreconditionerKind::Ruiz,
            PreconditionerKind::Jacobi,
            PreconditionerKind::Scalar,
            PreconditionerKind::MinCondition,
        ],
        PreconditionerKind::Ruiz => &[PreconditionerKind::Ruiz],
        PreconditionerKind::Jacobi => &[PreconditionerKind::Jacobi],
        PreconditionerKind::Scalar => &[PreconditionerKind::Scalar],
        PreconditionerKind::MinCondition => &[PreconditionerKind::MinCondition],
    };
    let mut best: Option<Preconditioner> = None;
    for &k in candidates {
        let d = match k {
            PreconditionerKind::Ruiz => ruiz(h_c),
            PreconditionerKind::Jacobi => jacobi(h_c),
            PreconditionerKind::MinCondition => {
                let (r, j) = (ruiz(h_c), jacobi(h_c));
                let start = if sym_kappa(h_c, &r) <= sym_kappa(h_c, &j) { r } else { j };
                min_condition(h_c, start)
            }
            _ => DVector::from_element(n, 1.0),
        };
        let sym = DMatrix::from_fn(n, n, |i, j| d[i] * h_c[(i, j)] * d[j]);
        let (smin, smax) = linalg::sym_extreme_eigenvalues(&sym);
        if !(smin > 0.0) {
            continue;
        }
        let l_diag = d.map(|di| smax / (di * di));
        let h_cp = DMatrix::from_fn(n, n, |i, j| h_c[(i, j)] / l_diag[i]);
        let cand = Preconditioner {
            kind: k,
            l_diag,
            h_cp,
            mu: smin / smax,
            lip: 1.0,
            kappa_before,
            kappa_after: smax / smin,
        };
        if best.as_ref().is_none_or(|b| cand.kappa_after < b.kappa_after) {
            best = Some(cand);
        }
    }
    best.ok_or(DesignError::NotPositiveDefinite("preconditioned H_c"))
}

fn jacobi(h: &DMatrix<f64>) -> DVector<f64> {
    h.diagonal().map(|x| 1.0 / x.sqrt())
}

fn scaled(h: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| d[i] * h[(i, j)] * d[j])
}

fn sym_kappa(h: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let (lo, hi) = linalg::sym_extreme_eigenvalues(&scaled(h, d));
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Largest dimension handled by [`min_condition`]; beyond it the start
/// point is returned unchanged.
const MIN_CONDITION_MAX_DIM: usize = 256;

/// Smoothed log condition number of `D H D` with `D = exp(s)` and its
/// gradient. With `lambda_j` the eigenvalues and `v_j` the eigenvectors,
/// `d log(lambda_j) / d s_i = 2 v_ij^2`; the extremes are replaced by
/// log-sum-exp soft maxima with sharpness `t`.
fn smoothed_log_kappa(h: &DMatrix<f64>, s: &DVector<f64>, t: f64) -> Option<(f64, DVector<f64>, f64)> {
    let d = s.map(f64::exp);
    let eig = SymmetricEigen::new(scaled(h, &d));
    let logs: Vec<f64> = eig.eigenvalues.iter().map(|&l| if l > 0.0 { l.ln() } else { f64::NAN }).collect();
    if logs.iter().any(|l| !l.is_finite()) {
        return None;
    }
    let lmax = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lmin = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let wp: Vec<f64> = logs.iter().map(|l| (t * (l - lmax)).exp()).collect();
    let wm: Vec<f64> = logs.iter().map(|l| (-t * (l - lmin)).exp()).collect();
    let (sp, sm) = (wp.iter().sum::<f64>(), wm.iter().sum::<f64>());
    let f = lmax + sp.ln() / t - lmin + sm.ln() / t;
    let n = s.len();
    let mut g = DVector::zeros(n);
    for (j, v) in eig.eigenvectors.column_iter().enumerate() {
        let c = 2.0 * (wp[j] / sp - wm[j] / sm);
        for i in 0..n {
            g[i] += c * v[i] * v[i];
        }
    }
    Some((f, g, lmax - lmin))
}

/// BFGS on the smoothed objective with increasing sharpness; returns the
/// scaling with the smallest true condition number seen.
fn min_condition(h: &DMatrix<f64>, start: DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    if n > MIN_CONDITION_MAX_DIM || n < 2 {
        return start;
    }
    let mut s = start.map(f64::ln);
    let mut best = (f64::INFINITY, s.clone());
    for t in [8.0, 32.0, 128.0] {
        let Some((mut f, mut g, exact)) = smoothed_log_kappa(h, &s, t) else {
            break;
        };
        if exact < best.0 {
            best = (exact, s.clone());
        }
        let mut hinv = DMatrix::<f64>::identity(n, n);
        for _ in 0..80 {
            let mut dir = -(&hinv * &g);
            if dir.dot(&g) >= 0.0 {
                hinv = DMatrix::identity(n, n);
                dir = -g.clone();
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let trial = &s + &dir * step;
                if let Some((ft, gt, ex)) = smoothed_log_kappa(h, &trial, t) {
                    if ex < best.0 {
                        best = (ex, trial.clone());
                    }
                    if ft <= f + 1e-4 * step * dir.dot(&g) {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((trial, ft, gt)) = accepted else {
                break;
            };
            let ds = &trial - &s;
            let dg = &gt - &g;
            let sy = ds.dot(&dg);
            if sy > 1e-12 {
                let rho = 1.0 / sy;
                let id = DMatrix::<f64>::identity(n, n);
                let left = &id - &ds * dg.transpose() * rho;
                let right = &id - &dg * ds.transpose() * rho;
                hinv = &left * &hinv * &right + &ds * ds.transpose() * rho;
            }
            let done = (f - ft).abs() <= 1e-10 * f.abs().max(1.0);
            s = trial;
            f = ft;
            g = gt;
            if done {
                break;
            }
        }
    }
    best.1.map(f64::exp)
}

/// Symmetric Ruiz equilibration: scales rows and columns until every row of
/// `D H D` has unit infinity norm.
fn ruiz(h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    let mut d = DVector::from_element(n, 1.0);
    for _ in 0..200 {
        let mut worst: f64 = 0.0;
        let norms: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| (d[i] * h[(i, j)] * d[j]).abs()).fold(0.0, f64::max))
            .collect();
        for i in 0..n {
            worst = worst.max((1.0 - norms[i]).abs());
            d[i] /= norms[i].sqrt();
        }
        if worst <= 1e-10 {
            break;
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BetaSchedule {
    /// `(sqrt(lip) - sqrt(mu)) / (sqrt(lip) + sqrt(mu))` at every iteration.
    Constant,
    /// The accelerated-gradient `alpha` recursion; `alpha0 = sqrt(mu / lip)` when unset.
    Recursion { alpha0: Option<f64> },
}

impl Default for BetaSchedule {
    fn default() -> Self {
        BetaSchedule::Recursion { alpha0: None }
    }
}

/// Momentum coefficients; entry `i` is used in iteration `i + 1`.
pub fn beta_sequence(
    mu: f64,
    lip: f64,
    len: usize,
    schedule: BetaSchedule,
) -> Result<Vec<f64>, DesignError> {
    if !(mu > 0.0 && lip >= mu && lip.is_finite()) {
        return Err(DesignError::Tuning(format!(
            "need 0 < mu <= lip, got mu = {mu}, lip = {lip}"
        )));
    }
    let q = mu / lip;
    match schedule {
        BetaSchedule::Constant => {
            let beta = (lip.sqrt() - mu.sqrt()) / (lip.sqrt() + mu.sqrt());
            Ok(vec![beta; len])
        }
        BetaSchedule::Recursion { alpha0 } => {
            let mut alpha = alpha0.unwrap_or(q.sqrt());
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(DesignError::Tuning(format!("alpha0 = {alpha} outside (0, 1]")));
            }
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                // positive root of a^2 = (1 - a) alpha^2 + q a
                let t = alpha * alpha - q;
                let next = 0.5 * (-t + (t * t + 4.0 * alpha * alpha).sqrt());
                out.push(alpha * (1.0 - alpha) / (alpha * alpha + next));
                alpha = next;
            }
            Ok(out)
        }
    }
}

/// Options of [`build_design`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub i_max: usize,
    pub beta_len: usize,
    pub beta_schedule: BetaSchedule,
    pub preconditioner: PreconditionerKind,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            i_max: 20,
            beta_len: 50,
            beta_schedule: BetaSchedule::default(),
            preconditioner: PreconditionerKind::Auto,
        }
    }
}

/// Where a design came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seeds: Vec<u64>,
    pub notes: Vec<String>,
    /// Physical tuning before scaling.
    pub tuning: Option<MpcTuning>,
}

/// Everything the online solver and estimator need, in scaled coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcDesign {
    pub schema_version: u32,
    pub model_s: StateSpaceModel,
    pub tuning_s: MpcTuning,
    pub scaling: ScalingSet,
    pub qp: CondensedQp,
    pub pre: Preconditioner,
    /// `L^-1 F`, so that the gradient step reads `v - (H_cp v + F_p x)`.
    #[serde(rename = "F_p", with = "serde_matrix")]
    pub f_p: DMatrix<f64>,
    pub beta: Vec<f64>,
    pub i_max: usize,
    pub kalman: KalmanGain,
    #[serde(rename = "P", with = "serde_matrix")]
    pub p: DMatrix<f64>,
    /// LQ gain from the same `P`, scaled coordinates, `u_s = -K x_s`.
    #[serde(rename = "K_lq", with = "serde_matrix")]
    pub k_lq: DMatrix<f64>,
    pub fwl: FwlSolverConfig,
    pub report: DesignReport,
    pub provenance: Provenance,
}

/// Diagnostics emitted next to the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub d: usize,
    pub dare_iterations: usize,
    pub dare_residual: f64,
    pub kalman_residual: f64,
    pub observer_radius: f64,
    /// Spectral radius of the unconstrained controller with observer.
    pub closed_loop_radius: f64,
    pub open_loop_radius: f64,
    pub hessian_eigs: (f64, f64),
    pub kappa_before: f64,
    pub kappa_after: f64,
    pub mu: f64,
    pub lip: f64,
    pub max_abs_h_cp: f64,
    pub max_row_sum_f_p: f64,
}

impl MpcDesign {
    pub fn nx(&self) -> usize {
        self.model_s.nx()
    }

    pub fn nu(&self) -> usize {
        self.model_s.nu()
    }

    pub fn dim(&self) -> usize {
        self.qp.dim()
    }

    /// Unconstrained optimal first move `u_s = K_unc x_s`.
    pub fn unconstrained_gain(&self) -> Result<DMatrix<f64>, DesignError> {
        let full = self
            .qp
            .h_c
            .clone()
            .cholesky()
            .ok_or(DesignError::NotPositiveDefinite("H_c"))?
            .solve(&self.qp.f);
        Ok(-full.rows(0, self.nu()).into_owned())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("design serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let d: MpcDesign = serde_json::from_str(s)?;
        if d.schema_version != DESIGN_SCHEMA_VERSION {
            return Err(serde::de::Error::custom(format!(
                "unsupported schema_version {}",
                d.schema_version
            )));
        }
        Ok(d)
    }
}

/// Scales, condenses and preconditions a discrete design model.
pub fn build_design(
    model: &StateSpaceModel,
    tuning: &MpcTuning,
    scaling: &ScalingSet,
    options: &DesignOptions,
) -> Result<MpcDesign, DesignError> {
    if model.ts().is_none() {
        return Err(DesignError::Dimension("design model must be discrete".into()).at("model"));
    }
    if !model.is_strictly_proper() {
        return Err(DesignError::Dimension("design model must be strictly proper".into()).at("model"));
    }
    let (nx, nu, ny) = (model.nx(), model.nu(), model.ny());
    tuning.validate(nx, nu, ny).map_err(|e| e.at("tuning"))?;
    if options.i_max == 0 || options.i_max > options.beta_len {
        return Err(DesignError::Tuning(format!(
            "i_max {} must be in 1..={}",
            options.i_max, options.beta_len
        ))
        .at("options"));
    }
    let model_s = scale_model(model, scaling).map_err(|e| e.at("scaling"))?;
    let tuning_s = scale_tuning(tuning, scaling).map_err(|e| e.at("scaling"))?;
    let dare = solve_dare(&model_s.a, &model_s.b, &tuning_s.q_c, &tuning_s.r_c)
        .map_err(|e| e.at("terminal cost"))?;
    let kalman = kalman_gain(&model_s.a, &model_s.c, &tuning_s.q_k, &tuning_s.r_k)
        .map_err(|e| e.at("kalman gain"))?;
    let kalman_residual = {
        let (at, ct) = (model_s.a.transpose(), model_s.c.transpose());
        dare_residual(&at, &ct, &tuning_s.q_k, &tuning_s.r_k, &kalman.sigma)
    };
    let qp = condense(&model_s, &tuning_s, &dare.p, &tuning_s.blocks).map_err(|e| e.at("condense"))?;
    let pre = precondition_with(&qp.h_c, options.preconditioner).map_err(|e| e.at("precondition"))?;
    let beta = beta_sequence(pre.mu, pre.lip, options.beta_len, options.beta_schedule)
        .map_err(|e| e.at("beta"))?;
    let f_p = DMatrix::from_fn(qp.dim(), nx, |i, j| qp.f[(i, j)] / pre.l_diag[i]);
    let k_lq = lq_gain(&model_s.a, &model_s.b, &tuning_s.r_c, &dare.p).map_err(|e| e.at("lq gain"))?;
    let fwl = FwlSolverConfig::for_matrices(&pre.h_cp, &f_p)
        .map_err(|e| DesignError::Fixed(e.to_string()).at("fixed-point layout"))?;

    let (hmin, hmax) = linalg::sym_extreme_eigenvalues(&qp.h_c);
    let mut design = MpcDesign {
        schema_version: DESIGN_SCHEMA_VERSION,
        report: DesignReport {
            nx,
            nu,
            ny,
            d: qp.dim(),
            dare_iterations: dare.iterations,
            dare_residual: dare.residual,
            kalman_residual,
            observer_radius: kalman.observer_radius,
            closed_loop_radius: f64::NAN,
            open_loop_radius: linalg::spectral_radius(&model_s.a),
            hessian_eigs: (hmin, hmax),
            kappa_before: pre.kappa_before,
            kappa_after: pre.kappa_after,
            mu: pre.mu,
            lip: pre.lip,
            max_abs_h_cp: pre.h_cp.amax(),
            max_row_sum_f_p: max_row_abs_sum(&f_p),
        },
        model_s,
        tuning_s,
        scaling: scaling.clone(),
        qp,
        pre,
        f_p,
        beta,
        i_max: options.i_max,
        kalman,
        p: dare.p,
        k_lq,
        fwl,
        provenance: Provenance {
            tuning: Some(tuning.clone()),
            ..Provenance::default()
        },
    };
    let k_unc = design.unconstrained_gain().map_err(|e| e.at("unconstrained gain"))?;
    design.report.closed_loop_radius = closed_loop_radius(&design, &k_unc);
    Ok(design)
}

pub fn max_row_abs_sum(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral radius of the plant/filter loop with `u_s = K x_hat(k|k)`.
pub fn closed_loop_radius(design: &MpcDesign, k: &DMatrix<f64>) -> f64 {
    let m = &design.model_s;
    let n = m.nx();
    let mk = &design.kalman.m_k;
    let bk = &m.b * k;
    let mca = mk * &m.c * &m.a;
    let est = (DMatrix::identity(n, n) - mk * &m.c) * &m.a + &bk;
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&m.a);
    big.view_mut((0, n), (n, n)).copy_from(&bk);
    big.view_mut((n, 0), (n, n)).copy_from(&mca);
    big.view_mut((n, n), (n, n)).copy_from(&est);
    linalg::spectral_radius(&big)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssmodel::zoh_discretize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = random_matrix(rng, n, n);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn dare_scalar_closed_form() {
        let sol = solve_dare(&m1(2.0), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        assert!((sol.p[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 1e-12);
        assert!(sol.residual <= DARE_RESIDUAL_TOL);
    }

    #[test]
    fn dare_zero_dynamics() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sol = solve_dare(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &q, &DMatrix::identity(2, 2))
            .unwrap();
        assert!((sol.p - q).norm() < 1e-14);
    }

    #[test]
    fn dare_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 5, 5) * 1.2;
            let b = random_matrix(&mut rng, 5, 2);
            let q = random_pd(&mut rng, 5);
            let r = random_pd(&mut rng, 2);
            let sol = solve_dare(&a, &b, &q, &r).unwrap();
            assert!(sol.residual <= 1e-10);
            let k = lq_gain(&a, &b, &r, &sol.p).unwrap();
            assert!(linalg::spectral_radius(&(&a - &b * k)) < 1.0);
        }
    }

    #[test]
    fn newton_step_contracts() {
        // scalar case: starting 1e-3 off, one step lands quadratically close
        let p0 = m1(2.0 + 5f64.sqrt() + 1e-3);
        let p1 = newton_step(&m1(2.0), &m1(1.0), &m1(1.0), &m1(1.0), &p0).unwrap();
        let e1 = (p1[(0, 0)] - (2.0 + 5f64.sqrt())).abs();
        assert!(e1 < 1e-6, "{e1}");
    }

    #[test]
    fn dare_invariant_under_state_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 4) * 1.1;
        let b = random_matrix(&mut rng, 4, 2);
        let q = random_pd(&mut rng, 4);
        let r = random_pd(&mut rng, 2);
        let k = DVector::from_vec(vec![1e-2, 1.0, 10.0, 1e2]);
        let kd = DMatrix::from_diagonal(&k);
        let ki = DMatrix::from_diagonal(&k.map(|v| 1.0 / v));
        // x = K x_s: A_s = K^-1 A K, B_s = K^-1 B, Q_s = K Q K, P_s = K P K
        let p = solve_dare(&a, &b, &q, &r).unwrap().p;
        let ps = solve_dare(&(&ki * &a * &kd), &(&ki * &b), &(&kd * &q * &kd), &r).unwrap().p;
        let back = &ki * ps * &ki;
        assert!((back - &p).norm() <= 1e-12 * p.norm());
    }

    #[test]
    fn dare_unstabilizable_fails() {
        // unstable mode with no input
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(solve_dare(&a, &b, &DMatrix::identity(2, 2), &m1(1.0)).is_err());
    }

    #[test]
    fn kalman_scalar() {
        let g = kalman_gain(&m1(0.5), &m1(1.0), &m1(1.0), &m1(1.0)).unwrap();
        // prediction covariance fixed point by plain iteration as oracle
        let mut s = 1.0f64;
        for _ in 0..200 {
            s = 0.25 * s - 0.25 * s * s / (s + 1.0) + 1.0;
        }
        assert!((g.sigma[(0, 0)] - s).abs() < 1e-12);
        assert!((g.m_k[(0, 0)] - s / (s + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn kalman_perfect_measurement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 3);
        let g = kalman_gain(&a, &DMatrix::identity(3, 3), &DMatrix::identity(3, 3), &(DMatrix::identity(3, 3) * 1e-9))
            .unwrap();
        assert!((g.m_k - DMatrix::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn kalman_observer_stable_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 4, 4) * 1.1;
            let c = random_matrix(&mut rng, 2, 4);
            let g = kalman_gain(&a, &c, &DMatrix::identity(4, 4), &DMatrix::identity(2, 2)).unwrap();
            assert!(g.observer_radius < 1.0);
        }
    }

    #[test]
    fn scaling_definitions() {
        let s = make_scaling(&[34.0, 34.0], &[1.0, 2.0, 3.0], &[0.5]).unwrap();
        assert_eq!(s.k_u.as_slice(), &[34.0, 34.0]);
        assert_eq!(s.k_x.as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.k_y.as_slice(), &[2.0]);
        assert!(make_scaling(&[1.0], &[0.0], &[1.0]).is_err());
        assert!(make_scaling(&[1.0], &[1.0], &[-1.0]).is_err());
        assert!(make_scaling(&[1.0], &[1.0], &[1.0]).unwrap().is_identity());
    }

    fn small_discrete(rng: &mut ChaCha8Rng, n: usize, m: usize, p: usize) -> StateSpaceModel {
        StateSpaceModel::new(
            random_matrix(rng, n, n),
            random_matrix(rng, n, m),
            random_matrix(rng, p, n),
            TimeDomain::Discrete(0.1),
        )
        .unwrap()
    }

    #[test]
    fn scaled_model_preserves_transfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = small_discrete(&mut rng, 4, 2, 3);
        let s = make_scaling(&[34.0, 3.0], &[0.1, 2.0, 5.0, 1e-3], &[0.2, 1.0, 7.0]).unwrap();
        let ms = scale_model(&m, &s).unwrap();
        let z = nalgebra::Complex::new(1.1, 0.0);
        let h = m.transfer_at(z).unwrap();
        let hs = ms.transfer_at(z).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want = h[(i, j)] * s.k_y[i] * s.k_u[j];
                assert!((hs[(i, j)] - want).norm() <= 1e-10 * want.norm().max(1.0));
            }
        }
        let mut e: Vec<f64> = m.poles().unwrap().iter().map(|z| z.norm()).collect();
        let mut es: Vec<f64> = ms.poles().unwrap().iter().map(|z| z.norm()).collect();
        e.sort_by(f64::total_cmp);
        es.sort_by(f64::total_cmp);
        for (a, b) in e.iter().zip(&es) {
            assert!((a - b).abs() < 1e-10);
        }
        let id = scale_model(&m, &ScalingSet::identity(2, 4, 3)).unwrap();
        assert_eq!(id, m);
    }

    #[test]
    fn scaled_tuning_scalar() {
        let t = MpcTuning {
            q_c: m1(3.0),
            r_c: m1(1.0),
            horizon: 1,
            blocks: vec![1],
            u_min: DVector::from_element(1, -1.0),
            u_max: DVector::from_element(1, 1.0),
            q_k: m1(1.0),
            r_k: m1(1.0),
        };
        let s = ScalingSet {
            k_u: DVector::from_element(1, 1.0),
            k_x: DVector::from_element(1, 2.0),
            k_y: DVector::from_element(1, 1.0),
        };
        let ts = scale_tuning(&t, &s).unwrap();
        assert_eq!(ts.q_c[(0, 0)], 12.0);
        assert_eq!(ts.q_k[(0, 0)], 0.25);
        assert_eq!(scale_tuning(&t, &ScalingSet::identity(1, 1, 1)).unwrap(), t);
    }

    #[test]
    fn blocking_structure() {
        let t = blocking_matrix(&[2, 2, 76], 27);
        assert_eq!(t.shape(), (80 * 27, 81));
        for (b, len) in [2.0, 2.0, 76.0].iter().enumerate() {
            for ch in 0..27 {
                assert_eq!(t.column(b * 27 + ch).sum(), *len);
            }
        }
        assert_eq!(blocking_matrix(&[1, 1, 1], 2), DMatrix::identity(6, 6));
    }

    fn tuning_for(n: usize, m: usize, p: usize, blocks: Vec<usize>, q: DMatrix<f64>, r: DMatrix<f64>) -> MpcTuning {
        MpcTuning {
            q_c: q,
            r_c: r,
            horizon: blocks.iter().sum(),
            blocks,
            u_min: DVector::from_element(m, -1.0),
            u_max: DVector::from_element(m, 1.0),
            q_k: DMatrix::identity(n, n),
            r_k: DMatrix::identity(p, p),
        }
    }

    #[test]
    fn condense_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = small_discrete(&mut rng, 3, 2, 1);
        let r = random_pd(&mut rng, 2);
        let p = random_pd(&mut rng, 3);
        let t = tuning_for(3, 2, 1, vec![1], random_pd(&mut rng, 3), r.clone());
        let qp = condense(&m, &t, &p, &[1]).unwrap();
        let h = &r + m.b.transpose() * &p * &m.b;
        let f = m.b.transpose() * &p * &m.a;
        assert!((qp.h_c - h).amax() < 1e-12);
        assert!((qp.f - f).amax() < 1e-12);
    }

    #[test]
    fn condense_without_state_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = small_discrete(&mut rng, 3, 2, 1);
        let r = random_pd(&mut rng, 2);
        let t = tuning_for(3, 2, 1, vec![1, 3], DMatrix::zeros(3, 3), r.clone());
        let qp = condense(&m, &t, &DMatrix::zeros(3, 3), &[1, 3]).unwrap();
        let want = linalg::block_diag(&[&r, &(&r * 3.0)]);
        assert!((qp.h_c - want).amax() < 1e-14);
    }

    #[test]
    fn condensed_cost_matches_explicit_prediction_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, m, blocks) = (3, 2, vec![1, 2, 1]);
        let model = small_discrete(&mut rng, n, m, 1);
        let (q, r, p) = (random_pd(&mut rng, n), random_pd(&mut rng, m), random_pd(&mut rng, n));
        let t = tuning_for(n, m, 1, blocks.clone(), q.clone(), r.clone());
        let qp = condense(&model, &t, &p, &blocks).unwrap();
        // stacked Phi / Gamma over steps 1..N and block-diagonal weights
        let horizon = 4;
        let mut phi = DMatrix::zeros(n * horizon, n);
        let mut gamma = DMatrix::zeros(n * horizon, m * horizon);
        for k in 1..=horizon {
            phi.view_mut(((k - 1) * n, 0), (n, n)).copy_from(&model.a.pow((k) as u32));
            for j in 0..k {
                let blk = model.a.pow((k - 1 - j) as u32) * &model.b;
                gamma.view_mut(((k - 1) * n, j * m), (n, m)).copy_from(&blk);
            }
        }
        let qs: Vec<&DMatrix<f64>> = (0..horizon).map(|k| if k + 1 == horizon { &p } else { &q }).collect();
        let qbar = linalg::block_diag(&qs);
        let rbar = linalg::block_diag(&vec![&r; horizon]);
        let tb = blocking_matrix(&blocks, m);
        let h = tb.transpose() * (gamma.transpose() * &qbar * &gamma + rbar) * &tb;
        let f = tb.transpose() * gamma.transpose() * &qbar * &phi;
        assert!((qp.h_c - h).amax() < 1e-10);
        assert!((qp.f - f).amax() < 1e-10);
    }

    #[test]
    fn precondition_diagonal_is_exact() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 0.01, 250.0]));
        let pre = precondition(&h).unwrap();
        assert!((pre.h_cp.clone() - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!((pre.mu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn precondition_two_by_two() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        for kind in [PreconditionerKind::Jacobi, PreconditionerKind::Auto] {
            let pre = precondition_with(&h, kind).unwrap();
            let (lo, hi) = linalg::sym_extreme_eigenvalues(&pre.symmetric(&h));
            assert!((hi - 1.0).abs() < 1e-9);
            // eigenvalues 3 and 1 of H scaled by 1/3
            assert!((lo - 1.0 / 3.0).abs() < 1e-9);
            assert!((pre.mu - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn precondition_never_worsens_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let s = DVector::from_fn(n, |_, _| 10f64.powf(rng.random_range(-2.0..2.0)));
            let base = random_pd(&mut rng, n);
            let h = DMatrix::from_fn(n, n, |i, j| s[i] * base[(i, j)] * s[j]);
            let pre = precondition(&h).unwrap();
            assert!(pre.kappa_after <= pre.kappa_before * (1.0 + 1e-12));
            let ev = nalgebra::SymmetricEigen::new(pre.symmetric(&h)).eigenvalues;
            assert!((ev.max() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn precondition_rejects_indefinite() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(precondition(&h).is_err());
    }

    #[test]
    fn beta_examples() {
        let b = beta_sequence(0.25, 1.0, 5, BetaSchedule::Constant).unwrap();
        assert!(b.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let b = beta_sequence(1.0, 1.0, 3, BetaSchedule::default()).unwrap();
        assert!(b.iter().all(|&x| x.abs() < 1e-15));
        assert!(beta_sequence(0.0, 1.0, 3, BetaSchedule::Constant).is_err());
    }

    #[test]
    fn beta_recursion_limit() {
        let q: f64 = 0.04;
        let limit = (1.0 - q.sqrt()) / (1.0 + q.sqrt());
        let b = beta_sequence(q, 1.0, 400, BetaSchedule::Recursion { alpha0: Some(0.9) }).unwrap();
        assert!((b[399] - limit).abs() < 1e-10);
        assert!((b[0] - limit).abs() > 1e-3);
        let b = beta_sequence(q, 1.0, 10, BetaSchedule::default()).unwrap();
        assert!(b.iter().all(|x| (x - limit).abs() < 1e-12));
    }

    fn trivial_design() -> MpcDesign {
        let c = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            TimeDomain::Continuous,
        )
        .unwrap();
        let m = zoh_discretize(&c, 0.1).unwrap();
        let t = tuning_for(2, 1, 1, vec![2, 3], DMatrix::identity(2, 2), m1(0.1));
        build_design(&m, &t, &ScalingSet::identity(1, 2, 1), &DesignOptions::default()).unwrap()
    }

    #[test]
    fn trivial_design_builds() {
        let d = trivial_design();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.beta.len(), 50);
        assert!(d.pre.mu > 0.0 && d.pre.mu <= 1.0);
        assert!(d.report.closed_loop_radius < 1.0);
        let back = MpcDesign::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn design_errors_carry_stage() {
        let d = trivial_design();
        let mut t = d.tuning_s.clone();
        t.blocks = vec![1, 1];
        let err = build_design(&d.model_s, &t, &d.scaling, &DesignOptions::default()).unwrap_err();
        assert!(err.to_string().starts_with("tuning:"), "{err}");
    }
}
