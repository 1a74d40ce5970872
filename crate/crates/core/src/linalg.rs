//! Small dense linear-algebra helpers shared by the modeling, design and
//! simulation code, plus serde adapters for row-major matrix documents.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};

/// Eigenvalues of a general real square matrix.
///
/// Returns `None` when the Schur iteration does not converge.
pub fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    if m.nrows() == 0 {
        return Some(Vec::new());
    }
    if m.nrows() == 1 {
        return Some(vec![Complex::new(m[(0, 0)], 0.0)]);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 30 * m.nrows() + 100)?;
    Some(schur.complex_eigenvalues().iter().copied().collect())
}

/// Largest eigenvalue modulus. When the Schur iteration fails (it can on
/// large models with many repeated poles) this falls back to
/// [`radius_by_squaring`].
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    match eigenvalues(m) {
        Some(ev) => ev.iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => radius_by_squaring(m, 40),
    }
}

/// `||A^(2^k)||^(1 / 2^k)` by repeated normalized squaring: an upper bound
/// on the spectral radius that tightens as `k` grows.
pub fn radius_by_squaring(m: &DMatrix<f64>, k: u32) -> f64 {
    let mut log_c = 0.0;
    let mut w = m.clone();
    let nrm = w.norm();
    if nrm == 0.0 {
        return 0.0;
    }
    w /= nrm;
    log_c += nrm.ln();
    for _ in 0..k {
        let sq = &w * &w;
        let nrm = sq.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        w = sq / nrm;
        log_c = 2.0 * log_c + nrm.ln();
        if !log_c.is_finite() {
            break;
        }
    }
    (log_c / 2f64.powi(k as i32)).exp()
}

/// Symmetric eigenvalue extremes `(min, max)`. Dense decomposition up to
/// `d = 512`, power / inverse iteration beyond.
pub fn sym_extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let n = m.nrows();
    if n <= 512 {
        let e = SymmetricEigen::new(m.clone()).eigenvalues;
        let min = e.iter().copied().fold(f64::INFINITY, f64::min);
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return (min, max);
    }
    let max = power_iteration(m, 1e-12, 100_000);
    let min = match m.clone().cholesky() {
        Some(ch) => {
            let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
            let mut lam = 0.0;
            for _ in 0..100_000 {
                let w = ch.solve(&v);
                let nrm = w.norm();
                let next = 1.0 / nrm;
                v = w / nrm;
                if (next - lam).abs() <= 1e-12 * next.abs() {
                    lam = next;
                    break;
                }
                lam = next;
            }
            lam
        }
        None => f64::NAN,
    };
    (min, max)
}

/// Dominant eigenvalue of a symmetric positive semidefinite matrix.
pub fn power_iteration(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lam = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let next = v.dot(&w);
        let nrm = w.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        v = w / nrm;
        if (next - lam).abs() <= tol * next.abs() {
            return next;
        }
        lam = next;
    }
    lam
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Builds a matrix from row-major nested rows; `cols` is needed for the
/// zero-row case.
pub fn from_rows(rows: &[Vec<f64>], cols: Option<usize>) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map(|r| r.len()).or(cols).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Serde adapter: `DMatrix<f64>` as a row-major array of rows.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows, None).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `Option<DMatrix<f64>>`.
pub mod serde_opt_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(super::to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            Some(rows) => super::from_rows(&rows, None)
                .map(Some)
                .map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

/// Serde adapter: `DVector<f64>` as a plain array.
pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}
