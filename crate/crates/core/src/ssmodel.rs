//! Linear time-invariant models: discretization, power-supply and delay
//! blocks, series composition, the `n = 1` sensor reduction and a seeded
//! unstable surrogate plant.

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, block_diag};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("unsupported Pade order {0} (1..=8 supported)")]
    UnsupportedOrder(usize),
    #[error("surrogate unstable mode degenerate after {attempts} seeds (last: {reason})")]
    SurrogateDegenerate { attempts: u32, reason: String },
    #[error("model document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TimeDomain {
    Continuous,
    /// Sampling period in seconds.
    Discrete(f64),
}

/// `x' = A x + B u`, `y = C x + D u`, optional auxiliary outputs `C_aux x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: Option<DMatrix<f64>>,
    pub c_aux: Option<DMatrix<f64>>,
    pub domain: TimeDomain,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        domain: TimeDomain,
    ) -> Result<Self, ModelError> {
        let m = Self {
            a,
            b,
            c,
            d: None,
            c_aux: None,
            domain,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_feedthrough(mut self, d: DMatrix<f64>) -> Result<Self, ModelError> {
        self.d = Some(d);
        self.validate()?;
        Ok(self)
    }

    pub fn with_aux(mut self, c_aux: DMatrix<f64>) -> Result<Self, ModelError> {
        self.c_aux = Some(c_aux);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "A is {}x{}, expected square with n >= 1",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(ModelError::Dimension(format!(
                "B is {}x{}, expected {n}xm with m >= 1",
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        if self.c.ncols() != n || self.c.nrows() == 0 {
            return Err(ModelError::Dimension(format!(
                "C is {}x{}, expected px{n}",
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        if let Some(d) = &self.d {
            if d.nrows() != self.c.nrows() || d.ncols() != self.b.ncols() {
                return Err(ModelError::Dimension(format!(
                    "D is {}x{}, expected {}x{}",
                    d.nrows(),
                    d.ncols(),
                    self.c.nrows(),
                    self.b.ncols()
                )));
            }
        }
        if let Some(aux) = &self.c_aux {
            if aux.ncols() != n {
                return Err(ModelError::Dimension(format!(
                    "C_aux has {} columns, expected {n}",
                    aux.ncols()
                )));
            }
        }
        if let TimeDomain::Discrete(ts) = self.domain {
            if !(ts.is_finite() && ts > 0.0) {
                return Err(ModelError::Invalid(format!("sampling time {ts} must be > 0")));
            }
        }
        for (name, m) in [("A", &self.a), ("B", &self.b), ("C", &self.c)] {
            if !linalg::all_finite(m) {
                return Err(ModelError::NonFinite(name));
            }
        }
        if self.d.as_ref().is_some_and(|d| !linalg::all_finite(d)) {
            return Err(ModelError::NonFinite("D"));
        }
        if self.c_aux.as_ref().is_some_and(|d| !linalg::all_finite(d)) {
            return Err(ModelError::NonFinite("C_aux"));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    pub fn ny(&self) -> usize {
        self.c.nrows()
    }

    pub fn ts(&self) -> Option<f64> {
        match self.domain {
            TimeDomain::Discrete(ts) => Some(ts),
            TimeDomain::Continuous => None,
        }
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.d.as_ref().is_none_or(|d| d.iter().all(|&x| x == 0.0))
    }

    pub fn feedthrough(&self) -> DMatrix<f64> {
        self.d
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(self.ny(), self.nu()))
    }

    /// One discrete step `A x + B u`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.d {
            Some(d) => &self.c * x + d * u,
            None => &self.c * x,
        }
    }

    /// Transfer matrix `C (sI - A)^-1 B + D` at a complex point (`s` for
    /// continuous, `z` for discrete models).
    pub fn transfer_at(&self, s: Complex<f64>) -> Option<DMatrix<Complex<f64>>> {
        let n = self.nx();
        let to_c = |m: &DMatrix<f64>| m.map(|x| Complex::new(x, 0.0));
        let si_a = DMatrix::<Complex<f64>>::identity(n, n) * s - to_c(&self.a);
        let x = si_a.lu().solve(&to_c(&self.b))?;
        Some(to_c(&self.c) * x + to_c(&self.feedthrough()))
    }

    /// Eigenvalues of `A`.
    pub fn poles(&self) -> Option<Vec<Complex<f64>>> {
        linalg::eigenvalues(&self.a)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDoc::from(self)).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let doc: ModelDoc =
            serde_json::from_str(s).map_err(|e| ModelError::Document(e.to_string()))?;
        doc.try_into()
    }
}

/// JSON layout of a model: row-major nested arrays.
#[derive(Serialize, Deserialize)]
pub struct ModelDoc {
    schema_version: u32,
    time_domain: String,
    #[serde(rename = "Ts", default, skip_serializing_if = "Option::is_none")]
    ts: Option<f64>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    d: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C_aux", default, skip_serializing_if = "Option::is_none")]
    c_aux: Option<Vec<Vec<f64>>>,
}

impl From<&StateSpaceModel> for ModelDoc {
    fn from(m: &StateSpaceModel) -> Self {
        let (time_domain, ts) = match m.domain {
            TimeDomain::Continuous => ("continuous".to_string(), None),
            TimeDomain::Discrete(ts) => ("discrete".to_string(), Some(ts)),
        };
        ModelDoc {
            schema_version: MODEL_SCHEMA_VERSION,
            time_domain,
            ts,
            a: linalg::to_rows(&m.a),
            b: linalg::to_rows(&m.b),
            c: linalg::to_rows(&m.c),
            d: m.d.as_ref().map(linalg::to_rows),
            c_aux: m.c_aux.as_ref().map(linalg::to_rows),
        }
    }
}

impl From<StateSpaceModel> for ModelDoc {
    fn from(m: StateSpaceModel) -> Self {
        ModelDoc::from(&m)
    }
}

impl TryFrom<ModelDoc> for StateSpaceModel {
    type Error = ModelError;
    fn try_from(doc: ModelDoc) -> Result<Self, ModelError> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(ModelError::Document(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        let domain = match (doc.time_domain.as_str(), doc.ts) {
            ("continuous", None) => TimeDomain::Continuous,
            ("discrete", Some(ts)) => TimeDomain::Discrete(ts),
            ("discrete", None) => return Err(ModelError::Document("discrete model needs Ts".into())),
            (other, _) => {
                return Err(ModelError::Document(format!("unknown time_domain {other:?}")))
            }
        };
        let mat = |rows: &[Vec<f64>]| linalg::from_rows(rows, None).map_err(ModelError::Document);
        let mut m = StateSpaceModel {
            a: mat(&doc.a)?,
            b: mat(&doc.b)?,
            c: mat(&doc.c)?,
            d: None,
            c_aux: None,
            domain,
        };
        if let Some(d) = &doc.d {
            m.d = Some(mat(d)?);
        }
        if let Some(aux) = &doc.c_aux {
            m.c_aux = Some(mat(aux)?);
        }
        m.validate()?;
        Ok(m)
    }
}

/// Zero-order-hold discretization via the exponential of the augmented
/// matrix `[[A, B], [0, 0]] * Ts`.
pub fn zoh_discretize(m: &StateSpaceModel, ts: f64) -> Result<StateSpaceModel, ModelError> {
    if m.domain != TimeDomain::Continuous {
        return Err(ModelError::Invalid("model is already discrete".into()));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(ModelError::Invalid(format!("sampling time {ts} must be > 0")));
    }
    m.validate()?;
    let (n, nu) = (m.nx(), m.nu());
    let mut aug = DMatrix::zeros(n + nu, n + nu);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&m.a * ts));
    aug.view_mut((0, n), (n, nu)).copy_from(&(&m.b * ts));
    let e = aug.exp();
    if !linalg::all_finite(&e) {
        return Err(ModelError::NonFinite("matrix exponential"));
    }
    Ok(StateSpaceModel {
        a: e.view((0, 0), (n, n)).into_owned(),
        b: e.view((0, n), (n, nu)).into_owned(),
        c: m.c.clone(),
        d: m.d.clone(),
        c_aux: m.c_aux.clone(),
        domain: TimeDomain::Discrete(ts),
    })
}

/// `[order/order]` Pade approximant of `exp(-s * delay)` in controllable
/// canonical form, realized in time-normalized coordinates so that the
/// companion entries stay `O(1 / delay)`.
pub fn pade_delay(delay: f64, order: usize) -> Result<StateSpaceModel, ModelError> {
    if !(1..=8).contains(&order) {
        return Err(ModelError::UnsupportedOrder(order));
    }
    if !(delay.is_finite() && delay > 0.0) {
        return Err(ModelError::Invalid(format!("delay {delay} must be > 0")));
    }
    // denominator coefficients in p = s * delay:
    // c_k = (2n - k)! n! / ((2n)! k! (n - k)!)
    let n = order;
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    let coef: Vec<f64> = (0..=n)
        .map(|k| fact(2 * n - k) * fact(n) / (fact(2 * n) * fact(k) * fact(n - k)))
        .collect();
    let lead = coef[n];
    let den: Vec<f64> = coef.iter().map(|c| c / lead).collect();
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    // numerator is den(-p); split off the feedthrough (-1)^n
    let resid: Vec<f64> = (0..n)
        .map(|k| {
            let nk = if k % 2 == 0 { den[k] } else { -den[k] };
            nk - sign * den[k]
        })
        .collect();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        a[(i, i + 1)] = 1.0;
    }
    for k in 0..n {
        a[(n - 1, k)] = -den[k];
    }
    let mut b = DMatrix::zeros(n, 1);
    b[(n - 1, 0)] = 1.0;
    let c = DMatrix::from_fn(1, n, |_, k| resid[k]);
    StateSpaceModel::new(a / delay, b / delay, c, TimeDomain::Continuous)?
        .with_feedthrough(DMatrix::from_element(1, 1, sign))
}

/// Power-supply parameters. Saturation is applied by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsSpec {
    pub v_min: f64,
    pub v_max: f64,
    pub lag_tau: f64,
    pub delay: f64,
    pub pade_order: usize,
}

impl PsSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.v_min < self.v_max) {
            return Err(ModelError::Invalid("v_min must be < v_max".into()));
        }
        if !(self.lag_tau > 0.0) {
            return Err(ModelError::Invalid("lag_tau must be > 0".into()));
        }
        if !(self.delay >= 0.0) {
            return Err(ModelError::Invalid("delay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-channel first-order lag followed by the Pade delay, replicated over
/// `channels` independent channels.
pub fn build_ps_model(spec: &PsSpec, channels: usize) -> Result<StateSpaceModel, ModelError> {
    spec.validate()?;
    if channels == 0 {
        return Err(ModelError::Invalid("at least one channel".into()));
    }
    let lag = StateSpaceModel::new(
        DMatrix::from_element(1, 1, -1.0 / spec.lag_tau),
        DMatrix::from_element(1, 1, 1.0 / spec.lag_tau),
        DMatrix::from_element(1, 1, 1.0),
        TimeDomain::Continuous,
    )?;
    let channel = if spec.delay > 0.0 {
        series_connect(&lag, &pade_delay(spec.delay, spec.pade_order)?)?
    } else {
        lag
    };
    replicate(&channel, channels)
}

/// Block-diagonal stack of `count` copies of a model.
pub fn replicate(m: &StateSpaceModel, count: usize) -> Result<StateSpaceModel, ModelError> {
    let rep = |x: &DMatrix<f64>| block_diag(&vec![x; count]);
    let mut out = StateSpaceModel::new(rep(&m.a), rep(&m.b), rep(&m.c), m.domain)?;
    if let Some(d) = &m.d {
        out = out.with_feedthrough(rep(d))?;
    }
    if let Some(aux) = &m.c_aux {
        out = out.with_aux(rep(aux))?;
    }
    Ok(out)
}

/// Series composition: the outputs of `m1` drive the inputs of `m2`.
/// State is `[x1; x2]`. Auxiliary outputs of both are stacked (`m1` first).
pub fn series_connect(
    m1: &StateSpaceModel,
    m2: &StateSpaceModel,
) -> Result<StateSpaceModel, ModelError> {
    if m1.ny() != m2.nu() {
        return Err(ModelError::Dimension(format!(
            "{} outputs feed {} inputs",
            m1.ny(),
            m2.nu()
        )));
    }
    let same_domain = match (m1.domain, m2.domain) {
        (TimeDomain::Continuous, TimeDomain::Continuous) => true,
        (TimeDomain::Discrete(a), TimeDomain::Discrete(b)) => a == b,
        _ => false,
    };
    if !same_domain {
        return Err(ModelError::Invalid("time domains differ".into()));
    }
    let (n1, n2) = (m1.nx(), m2.nx());
    let d1 = m1.feedthrough();
    let d2 = m2.feedthrough();
    let mut a = DMatrix::zeros(n1 + n2, n1 + n2);
    a.view_mut((0, 0), (n1, n1)).copy_from(&m1.a);
    a.view_mut((n1, 0), (n2, n1)).copy_from(&(&m2.b * &m1.c));
    a.view_mut((n1, n1), (n2, n2)).copy_from(&m2.a);
    let mut b = DMatrix::zeros(n1 + n2, m1.nu());
    b.view_mut((0, 0), (n1, m1.nu())).copy_from(&m1.b);
    b.view_mut((n1, 0), (n2, m1.nu())).copy_from(&(&m2.b * &d1));
    let mut c = DMatrix::zeros(m2.ny(), n1 + n2);
    c.view_mut((0, 0), (m2.ny(), n1)).copy_from(&(&d2 * &m1.c));
    c.view_mut((0, n1), (m2.ny(), n2)).copy_from(&m2.c);
    let mut out = StateSpaceModel::new(a, b, c, m1.domain)?;
    if m1.d.is_some() && m2.d.is_some() {
        out = out.with_feedthrough(&d2 * &d1)?;
    } else if m2.d.is_some() {
        // D2 * D1 with D1 = 0
        out = out.with_feedthrough(DMatrix::zeros(m2.ny(), m1.nu()))?;
    }
    let aux1 = m1.c_aux.as_ref().map(|x| {
        let mut p = DMatrix::zeros(x.nrows(), n1 + n2);
        p.view_mut((0, 0), (x.nrows(), n1)).copy_from(x);
        p
    });
    let aux2 = m2.c_aux.as_ref().map(|x| {
        let mut p = DMatrix::zeros(x.nrows(), n1 + n2);
        p.view_mut((0, n1), (x.nrows(), n2)).copy_from(x);
        p
    });
    let aux = match (aux1, aux2) {
        (Some(a1), Some(a2)) => {
            let mut s = DMatrix::zeros(a1.nrows() + a2.nrows(), n1 + n2);
            s.view_mut((0, 0), (a1.nrows(), n1 + n2)).copy_from(&a1);
            s.view_mut((a1.nrows(), 0), (a2.nrows(), n1 + n2)).copy_from(&a2);
            Some(s)
        }
        (a1, a2) => a1.or(a2),
    };
    if let Some(aux) = aux {
        out = out.with_aux(aux)?;
    }
    Ok(out)
}

/// Replaces the output map, dropping any feedthrough.
pub fn with_output(m: &StateSpaceModel, c: DMatrix<f64>) -> Result<StateSpaceModel, ModelError> {
    let mut out = StateSpaceModel::new(m.a.clone(), m.b.clone(), c, m.domain)?;
    if let Some(aux) = &m.c_aux {
        out = out.with_aux(aux.clone())?;
    }
    Ok(out)
}

/// Keeps the leading `keep` states of a block-triangular (modal) model.
/// Fails when the kept states are driven by the dropped ones.
pub fn truncate_states(m: &StateSpaceModel, keep: usize) -> Result<StateSpaceModel, ModelError> {
    let n = m.nx();
    if keep == 0 || keep > n {
        return Err(ModelError::Dimension(format!("cannot keep {keep} of {n} states")));
    }
    if keep < n && m.a.view((0, keep), (keep, n - keep)).iter().any(|&x| x != 0.0) {
        return Err(ModelError::Invalid(
            "kept states depend on truncated states".into(),
        ));
    }
    let mut out = StateSpaceModel::new(
        m.a.view((0, 0), (keep, keep)).into_owned(),
        m.b.rows(0, keep).into_owned(),
        m.c.columns(0, keep).into_owned(),
        m.domain,
    )?;
    if let Some(d) = &m.d {
        out = out.with_feedthrough(d.clone())?;
    }
    if let Some(aux) = &m.c_aux {
        out = out.with_aux(aux.columns(0, keep).into_owned())?;
    }
    Ok(out)
}

/// Parameters of the synthetic unstable plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    /// Growth rate of the unstable pair, 1/s.
    pub gamma: f64,
    /// Rotation frequency of the unstable pair, 1/s.
    pub omega: f64,
    pub n_stable: usize,
    /// `(min, max)` time constants of the stable modes, seconds.
    pub stable_tau_range: (f64, f64),
    pub n_inputs: usize,
    pub n_outputs: usize,
    /// Rows of the auxiliary output map; zero disables it.
    pub n_aux: usize,
    pub input_gain: f64,
    pub output_gain: f64,
    pub aux_gain: f64,
    pub seed: u64,
}

/// Seeds tried after the first one when the unstable mode is degenerate.
pub const SURROGATE_RETRIES: u32 = 8;
/// Minimum `sigma_min / sigma_max` of the unstable-pair couplings.
pub const SURROGATE_COUPLING_RATIO: f64 = 0.05;

impl SurrogateSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ModelError::Invalid("gamma must be > 0".into()));
        }
        if !self.omega.is_finite() {
            return Err(ModelError::Invalid("omega must be finite".into()));
        }
        let (lo, hi) = self.stable_tau_range;
        if self.n_stable > 0 && !(lo > 0.0 && hi >= lo) {
            return Err(ModelError::Invalid("stable_tau_range must satisfy 0 < min <= max".into()));
        }
        if self.n_inputs == 0 || self.n_outputs == 0 {
            return Err(ModelError::Invalid("need at least one input and one output".into()));
        }
        if !(self.input_gain > 0.0 && self.output_gain > 0.0) {
            return Err(ModelError::Invalid("gains must be > 0".into()));
        }
        Ok(())
    }

    /// Stable-mode time constants, log-spaced, slowest first.
    pub fn stable_taus(&self) -> Vec<f64> {
        let (lo, hi) = self.stable_tau_range;
        match self.n_stable {
            0 => vec![],
            1 => vec![hi],
            k => (0..k)
                .map(|i| {
                    let t = i as f64 / (k - 1) as f64;
                    (hi.ln() + t * (lo.ln() - hi.ln())).exp()
                })
                .collect(),
        }
    }
}

/// Modal-form continuous surrogate: an unstable pair `gamma +- j omega`
/// followed by `n_stable` real modes. Couplings are drawn state by state
/// from a seeded ChaCha stream, so a surrogate with more stable modes shares
/// the leading rows and columns of one with fewer modes over the same range
/// only when the tau grids coincide; use [`truncate_states`] for an exact
/// reduced design model.
///
/// When the unstable-pair couplings are degenerate the seed is replaced by
/// `seed + k * 0x9E37_79B9_7F4A_7C15` for `k = 1..=8`.
pub fn build_surrogate(spec: &SurrogateSpec) -> Result<StateSpaceModel, ModelError> {
    spec.validate()?;
    let mut last = String::new();
    for attempt in 0..=SURROGATE_RETRIES {
        let seed = spec
            .seed
            .wrapping_add(u64::from(attempt).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let m = draw_surrogate(spec, seed)?;
        match check_unstable_coupling(&m) {
            Ok(()) => return Ok(m),
            Err(reason) => last = reason,
        }
    }
    Err(ModelError::SurrogateDegenerate {
        attempts: SURROGATE_RETRIES + 1,
        reason: last,
    })
}

fn draw_surrogate(spec: &SurrogateSpec, seed: u64) -> Result<StateSpaceModel, ModelError> {
    let n = 2 + spec.n_stable;
    let (m, p, q) = (spec.n_inputs, spec.n_outputs, spec.n_aux);
    let mut a = DMatrix::zeros(n, n);
    a[(0, 0)] = spec.gamma;
    a[(1, 1)] = spec.gamma;
    a[(0, 1)] = spec.omega;
    a[(1, 0)] = -spec.omega;
    for (i, tau) in spec.stable_taus().into_iter().enumerate() {
        a[(2 + i, 2 + i)] = -1.0 / tau;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut b = DMatrix::zeros(n, m);
    let mut c = DMatrix::zeros(p, n);
    let mut aux = DMatrix::zeros(q, n);
    for i in 0..n {
        for j in 0..m {
            b[(i, j)] = spec.input_gain * normal();
        }
        for r in 0..p {
            c[(r, i)] = spec.output_gain * normal();
        }
        for r in 0..q {
            aux[(r, i)] = spec.aux_gain * normal();
        }
    }
    let model = StateSpaceModel::new(a, b, c, TimeDomain::Continuous)?;
    if q > 0 {
        model.with_aux(aux)
    } else {
        Ok(model)
    }
}

fn coupling_ratio(block: DMatrix<f64>) -> (f64, f64) {
    let sv = block.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    (min, max)
}

fn check_unstable_coupling(m: &StateSpaceModel) -> Result<(), String> {
    let bu = m.b.rows(0, 2).into_owned();
    let (min, max) = coupling_ratio(bu);
    if !(max > 0.0) || min < SURROGATE_COUPLING_RATIO * max {
        return Err(format!("unstable pair weakly controllable ({min:.3e}/{max:.3e})"));
    }
    let cu = m.c.columns(0, 2).into_owned();
    if cu.nrows() >= 2 {
        let (min, max) = coupling_ratio(cu);
        if !(max > 0.0) || min < SURROGATE_COUPLING_RATIO * max {
            return Err(format!("unstable pair weakly observable ({min:.3e}/{max:.3e})"));
        }
    } else if cu.norm() == 0.0 {
        return Err("unstable pair unobservable".into());
    }
    Ok(())
}

/// Least-squares estimate of the cosine and sine components of an `n = 1`
/// mode from sensors at known toroidal angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputReducer {
    pub angles_deg: Vec<f64>,
    #[serde(with = "crate::linalg::serde_matrix")]
    pub t_out: DMatrix<f64>,
}

impl OutputReducer {
    pub fn new(angles_deg: &[f64]) -> Result<Self, ModelError> {
        if angles_deg.len() < 2 {
            return Err(ModelError::Invalid("need at least two sensor angles".into()));
        }
        let basis = Self::basis(angles_deg);
        let t_out = basis
            .pseudo_inverse(1e-12)
            .map_err(|e| ModelError::Invalid(e.to_string()))?;
        Ok(Self {
            angles_deg: angles_deg.to_vec(),
            t_out,
        })
    }

    /// The `p x 2` matrix of `[cos phi_i, sin phi_i]` rows.
    pub fn basis(angles_deg: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(angles_deg.len(), 2, |i, j| {
            let phi = angles_deg[i].to_radians();
            if j == 0 {
                phi.cos()
            } else {
                phi.sin()
            }
        })
    }

    pub fn sensors(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn reduce(&self, y_m: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        if y_m.len() != self.sensors() {
            return Err(ModelError::Dimension(format!(
                "{} measurements for {} sensors",
                y_m.len(),
                self.sensors()
            )));
        }
        Ok(&self.t_out * y_m)
    }

    /// Sensor pattern of a mode with components `(y_a, y_b)`.
    pub fn compose(&self, y_a: f64, y_b: f64) -> DVector<f64> {
        Self::basis(&self.angles_deg) * DVector::from_vec(vec![y_a, y_b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn scalar(a: f64, b: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, 1.0),
            TimeDomain::Continuous,
        )
        .unwrap()
    }

    #[test]
    fn zoh_scalar_closed_form() {
        let d = zoh_discretize(&scalar(-1.0, 1.0), 0.1).unwrap();
        let ad = (-0.1f64).exp();
        assert!((d.a[(0, 0)] - ad).abs() < 1e-14);
        assert!((d.b[(0, 0)] - (1.0 - ad)).abs() < 1e-14);
        assert_eq!(d.ts(), Some(0.1));
    }

    #[test]
    fn zoh_zero_dynamics() {
        let m = StateSpaceModel::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 1, &[1.0, -2.0]),
            DMatrix::identity(2, 2),
            TimeDomain::Continuous,
        )
        .unwrap();
        let d = zoh_discretize(&m, 0.25).unwrap();
        assert!((d.a.clone() - DMatrix::identity(2, 2)).norm() < 1e-15);
        assert!((d.b[(0, 0)] - 0.25).abs() < 1e-15 && (d.b[(1, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zoh_double_integrator() {
        let m = StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            TimeDomain::Continuous,
        )
        .unwrap();
        let d = zoh_discretize(&m, 1.0).unwrap();
        let aex = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let bex = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        assert!((d.a - aex).norm() < 1e-14);
        assert!((d.b - bex).norm() < 1e-14);
    }

    #[test]
    fn zoh_rejects_bad_input() {
        let d = zoh_discretize(&scalar(-1.0, 1.0), 0.1).unwrap();
        assert!(zoh_discretize(&d, 0.1).is_err());
        assert!(zoh_discretize(&scalar(-1.0, 1.0), 0.0).is_err());
        let mut bad = scalar(-1.0, 1.0);
        bad.a[(0, 0)] = f64::NAN;
        assert!(matches!(zoh_discretize(&bad, 0.1), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn zoh_eigenvalues_map_through_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 5, 12, 20] {
            let lam: Vec<f64> = (0..n).map(|_| -rng.random_range(0.1..50.0)).collect();
            let v = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    1.0
                } else {
                    rng.random_range(-0.3..0.3)
                }
            });
            let a = &v * DMatrix::from_diagonal(&DVector::from_vec(lam.clone()))
                * v.clone().try_inverse().unwrap();
            let m = StateSpaceModel::new(a, DMatrix::zeros(n, 1), DMatrix::zeros(1, n), TimeDomain::Continuous)
                .unwrap();
            let ts = 0.01;
            let d = zoh_discretize(&m, ts).unwrap();
            let mut got: Vec<f64> = d.poles().unwrap().iter().map(|z| z.re).collect();
            let mut want: Vec<f64> = lam.iter().map(|l| (l * ts).exp()).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9 * w.abs(), "n={n}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn pade_unit_dc_gain_and_all_pass() {
        for delay in [1e-3, 2.5e-3, 0.1] {
            let p = pade_delay(delay, 3).unwrap();
            let h0 = p.transfer_at(Complex::new(0.0, 0.0)).unwrap()[(0, 0)];
            assert!((h0 - Complex::new(1.0, 0.0)).norm() < 1e-12);
        }
        let p = pade_delay(2.5e-3, 3).unwrap();
        for w in [1.0, 100.0, 1e3, 1e4] {
            let h = p.transfer_at(Complex::new(0.0, w)).unwrap()[(0, 0)];
            assert!((h.norm() - 1.0).abs() < 1e-9, "|H(j{w})| = {}", h.norm());
        }
    }

    #[test]
    fn pade_phase_tracks_delay() {
        let delay = 2.5e-3;
        let p = pade_delay(delay, 3).unwrap();
        for k in 1..20 {
            let w = k as f64 * 0.05 / delay;
            let h = p.transfer_at(Complex::new(0.0, w)).unwrap()[(0, 0)];
            let phase = h.arg();
            let want = -w * delay;
            assert!(((phase - want) / want).abs() < 0.01, "w*T = {}", w * delay);
        }
    }

    #[test]
    fn pade_orders() {
        assert!(matches!(pade_delay(1e-3, 0), Err(ModelError::UnsupportedOrder(0))));
        assert!(matches!(pade_delay(1e-3, 9), Err(ModelError::UnsupportedOrder(9))));
        assert!(pade_delay(0.0, 3).is_err());
        for order in 1..=6 {
            let p = pade_delay(1e-2, order).unwrap();
            let h = p.transfer_at(Complex::new(0.0, 30.0)).unwrap()[(0, 0)];
            assert!((h.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pade_step_settles_to_one() {
        let delay = 2.5e-3;
        let d = zoh_discretize(&pade_delay(delay, 3).unwrap(), 1e-4).unwrap();
        let mut x = DVector::zeros(3);
        let u = DVector::from_element(1, 1.0);
        for _ in 0..2000 {
            x = d.step(&x, &u);
        }
        assert!((d.output(&x, &u)[0] - 1.0).abs() < 1e-9);
    }

    fn ps_spec(delay: f64) -> PsSpec {
        PsSpec {
            v_min: -144.0,
            v_max: 144.0,
            lag_tau: 7.5e-3,
            delay,
            pade_order: 3,
        }
    }

    #[test]
    fn ps_model_structure() {
        let lag_only = build_ps_model(&ps_spec(0.0), 1).unwrap();
        assert_eq!(lag_only.nx(), 1);
        let h0 = lag_only.transfer_at(Complex::new(0.0, 0.0)).unwrap()[(0, 0)];
        assert!((h0.re - 1.0).abs() < 1e-14);

        let full = build_ps_model(&ps_spec(2.5e-3), 27).unwrap();
        assert_eq!((full.nx(), full.nu(), full.ny()), (108, 27, 27));
        assert!(full.is_strictly_proper());
        let h0 = full.transfer_at(Complex::new(0.0, 0.0)).unwrap();
        assert!((h0[(3, 3)].re - 1.0).abs() < 1e-12);
        assert!(h0[(3, 4)].norm() < 1e-15);
        assert!(full.poles().unwrap().iter().all(|z| z.re < 0.0));
    }

    #[test]
    fn ps_spec_validation() {
        let mut s = ps_spec(1e-3);
        s.v_min = 200.0;
        assert!(build_ps_model(&s, 1).is_err());
        let mut s = ps_spec(1e-3);
        s.lag_tau = 0.0;
        assert!(build_ps_model(&s, 1).is_err());
        assert!(build_ps_model(&ps_spec(-1.0), 1).is_err());
    }

    #[test]
    fn series_of_lags() {
        let s = series_connect(&scalar(-1.0, 1.0), &scalar(-3.0, 3.0)).unwrap();
        assert_eq!(s.nx(), 2);
        let mut poles: Vec<f64> = s.poles().unwrap().iter().map(|z| z.re).collect();
        poles.sort_by(f64::total_cmp);
        assert!((poles[0] + 3.0).abs() < 1e-12 && (poles[1] + 1.0).abs() < 1e-12);
        let z = Complex::new(0.3, 2.0);
        let h = s.transfer_at(z).unwrap()[(0, 0)];
        let want = Complex::new(1.0, 0.0) / (z + 1.0) * 3.0 / (z + 3.0);
        assert!((h - want).norm() < 1e-12);
    }

    #[test]
    fn series_with_identity_gain() {
        let id = StateSpaceModel::new(
            DMatrix::from_element(1, 1, -1e6),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            TimeDomain::Continuous,
        )
        .unwrap()
        .with_feedthrough(DMatrix::identity(1, 1))
        .unwrap();
        let m = scalar(-2.0, 1.0);
        let s = series_connect(&id, &m).unwrap();
        let z = Complex::new(0.0, 5.0);
        let a = s.transfer_at(z).unwrap()[(0, 0)];
        let b = m.transfer_at(z).unwrap()[(0, 0)];
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn series_rejects_mismatch() {
        let two_out = StateSpaceModel::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::from_element(2, 1, 1.0),
            TimeDomain::Continuous,
        )
        .unwrap();
        assert!(series_connect(&two_out, &scalar(-1.0, 1.0)).is_err());
        let d = zoh_discretize(&scalar(-1.0, 1.0), 0.1).unwrap();
        assert!(series_connect(&d, &scalar(-1.0, 1.0)).is_err());
    }

    fn surrogate_spec() -> SurrogateSpec {
        SurrogateSpec {
            gamma: 19.0,
            omega: 0.26,
            n_stable: 6,
            stable_tau_range: (1e-3, 5e-2),
            n_inputs: 27,
            n_outputs: 6,
            n_aux: 27,
            input_gain: 1.0,
            output_gain: 1.0,
            aux_gain: 1.0,
            seed: 42,
        }
    }

    #[test]
    fn surrogate_unstable_pair_exact() {
        let m = build_surrogate(&surrogate_spec()).unwrap();
        let poles = m.poles().unwrap();
        let unstable: Vec<_> = poles.iter().filter(|z| z.re > 0.0).collect();
        assert_eq!(unstable.len(), 2);
        for z in unstable {
            assert!((z.re - 19.0).abs() < 1e-12 && (z.im.abs() - 0.26).abs() < 1e-12);
        }
        assert_eq!(m.c_aux.as_ref().unwrap().nrows(), 27);
    }

    #[test]
    fn surrogate_minimal_rotation() {
        let mut s = surrogate_spec();
        s.n_stable = 0;
        s.n_inputs = 1;
        s.n_outputs = 1;
        s.n_aux = 0;
        let m = build_surrogate(&s).unwrap();
        assert_eq!(m.a, DMatrix::from_row_slice(2, 2, &[19.0, 0.26, -0.26, 19.0]));
    }

    #[test]
    fn surrogate_single_input_is_degenerate() {
        // one input column cannot excite both components independently
        let mut s = surrogate_spec();
        s.n_inputs = 1;
        // sigma_min of a 2x1 block is its norm, so this draw passes; the
        // 1-output observability check uses the norm as well
        assert!(build_surrogate(&s).is_ok());
    }

    #[test]
    fn surrogate_reproducible() {
        let a = build_surrogate(&surrogate_spec()).unwrap();
        let b = build_surrogate(&surrogate_spec()).unwrap();
        assert_eq!(a, b);
        let mut s = surrogate_spec();
        s.seed = 43;
        assert_ne!(build_surrogate(&s).unwrap().b, a.b);
    }

    #[test]
    fn surrogate_open_loop_growth() {
        let m = build_surrogate(&surrogate_spec()).unwrap();
        let ts = 1e-3;
        let d = zoh_discretize(&m, ts).unwrap();
        let mut x = DVector::zeros(m.nx());
        x[0] = 1.0;
        let u = DVector::zeros(m.nu());
        let steps = (3.0 / 19.0 / ts).round() as usize;
        for _ in 0..steps {
            x = d.step(&x, &u);
        }
        let want = (19.0 * steps as f64 * ts).exp();
        assert!((x.norm() / want - 1.0).abs() < 0.05);
    }

    #[test]
    fn truncation_keeps_leading_modes() {
        let m = build_surrogate(&surrogate_spec()).unwrap();
        let t = truncate_states(&m, 4).unwrap();
        assert_eq!(t.a, m.a.view((0, 0), (4, 4)).into_owned());
        assert_eq!(t.b, m.b.rows(0, 4).into_owned());
        let ps = build_ps_model(&ps_spec(2.5e-3), 27).unwrap();
        let full = series_connect(&ps, &m).unwrap();
        assert_eq!(full.nx(), 108 + 8);
        // PS states drive the plant, so only the leading PS block can be kept
        assert!(truncate_states(&full, 108).is_ok());
    }

    #[test]
    fn reducer_recovers_components() {
        let r = OutputReducer::new(&[39.0, 101.0, 159.0, 221.0, 279.0, 341.0]).unwrap();
        let prod = &r.t_out * OutputReducer::basis(&r.angles_deg);
        assert!((prod - DMatrix::identity(2, 2)).norm() < 1e-12);
        let y = r.reduce(&r.compose(1.0, 0.0)).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
        let y = r.reduce(&r.compose(0.0, 1.0)).unwrap();
        assert!(y[0].abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reducer_is_least_squares() {
        let r = OutputReducer::new(&[39.0, 101.0, 159.0, 221.0, 279.0, 341.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = r.compose(0.7, -0.2)
            + DVector::from_fn(6, |_, _| rng.random_range(-0.05..0.05));
        let y = r.reduce(&noisy).unwrap();
        // normal equations solved independently
        let m = OutputReducer::basis(&r.angles_deg);
        let mtm = m.transpose() * &m;
        let rhs = m.transpose() * &noisy;
        let ls = mtm.cholesky().unwrap().solve(&rhs);
        assert!((y - ls).norm() < 1e-12);
        assert!(r.reduce(&DVector::zeros(5)).is_err());
    }

    #[test]
    fn model_json_roundtrip_and_validation() {
        let m = build_surrogate(&surrogate_spec()).unwrap();
        let d = zoh_discretize(&m, 7.5e-4).unwrap();
        let js = d.to_json();
        assert!(js.contains("\"time_domain\": \"discrete\""));
        assert!(js.contains("\"Ts\": 0.00075"));
        let back = StateSpaceModel::from_json(&js).unwrap();
        assert_eq!(back, d);
        let broken = js.replacen("\"B\": [", "\"B\": [[1.0],", 1);
        assert!(StateSpaceModel::from_json(&broken).is_err());
        let no_ts = js.replace("\"Ts\": 0.00075,", "");
        assert!(StateSpaceModel::from_json(&no_ts).is_err());
    }
}
