//! Two's-complement fixed-point emulation with `ap_fixed`-style formats.
//!
//! A [`FixedFormat`] is `(width, int_bits)` plus a rounding and an overflow
//! mode. The stored integer `raw` represents `raw * 2^(int_bits - width)`.
//! Every arithmetic operation is carried out exactly on the integer level and
//! then converted into the requested output format with a single rounding and
//! a single overflow resolution, which is what HLS hardware does when a wide
//! intermediate is assigned to a narrower variable.
//!
//! The carrier is `i128`; formats wider than 128 bits are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest format the `i128` carrier can hold.
pub const MAX_WIDTH: u32 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FxpError {
    #[error("invalid fixed-point format (width {width}, int_bits {int_bits}): {reason}")]
    InvalidFormat {
        width: u32,
        int_bits: i32,
        reason: &'static str,
    },
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("formats mix inside one matrix or vector")]
    MixedFormats,
}

/// Rounding applied when fractional bits are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Round to nearest, ties toward +infinity (`AP_RND`).
    RoundHalfUp,
    /// Drop the bits, i.e. round toward -infinity (`AP_TRN`).
    Truncate,
}

/// Resolution of values that do not fit the integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overflow {
    Saturate,
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FormatDoc", into = "FormatDoc")]
pub struct FixedFormat {
    width: u32,
    int_bits: i32,
    rounding: Rounding,
    overflow: Overflow,
}

#[derive(Serialize, Deserialize)]
struct FormatDoc {
    width: u32,
    int_bits: i32,
    rounding: Rounding,
    overflow: Overflow,
}

impl TryFrom<FormatDoc> for FixedFormat {
    type Error = FxpError;
    fn try_from(d: FormatDoc) -> Result<Self, FxpError> {
        FixedFormat::with_modes(d.width, d.int_bits, d.rounding, d.overflow)
    }
}

impl From<FixedFormat> for FormatDoc {
    fn from(f: FixedFormat) -> Self {
        FormatDoc {
            width: f.width,
            int_bits: f.int_bits,
            rounding: f.rounding,
            overflow: f.overflow,
        }
    }
}

impl FixedFormat {
    /// Round-half-up, saturating format.
    pub fn new(width: u32, int_bits: i32) -> Result<Self, FxpError> {
        Self::with_modes(width, int_bits, Rounding::RoundHalfUp, Overflow::Saturate)
    }

    pub fn with_modes(
        width: u32,
        int_bits: i32,
        rounding: Rounding,
        overflow: Overflow,
    ) -> Result<Self, FxpError> {
        let bad = |reason| FxpError::InvalidFormat {
            width,
            int_bits,
            reason,
        };
        if width < 2 {
            return Err(bad("width must be at least 2"));
        }
        if width > MAX_WIDTH {
            return Err(bad("width exceeds the 128-bit carrier"));
        }
        if int_bits > width as i32 {
            return Err(bad("int_bits may not exceed width"));
        }
        // keep the ulp inside the normal f64 range
        if (width as i32 - int_bits) > 900 {
            return Err(bad("too many fractional bits"));
        }
        Ok(Self {
            width,
            int_bits,
            rounding,
            overflow,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn int_bits(&self) -> i32 {
        self.int_bits
    }

    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    pub fn overflow(&self) -> Overflow {
        self.overflow
    }

    /// Number of bits right of the binary point (may exceed `width`).
    pub fn frac_bits(&self) -> i32 {
        self.width as i32 - self.int_bits
    }

    /// Resolution, `2^(int_bits - width)`.
    pub fn ulp(&self) -> f64 {
        pow2(-self.frac_bits())
    }

    pub fn max_raw(&self) -> i128 {
        if self.width == 128 {
            i128::MAX
        } else {
            (1i128 << (self.width - 1)) - 1
        }
    }

    pub fn min_raw(&self) -> i128 {
        if self.width == 128 {
            i128::MIN
        } else {
            -(1i128 << (self.width - 1))
        }
    }

    pub fn max_value(&self) -> f64 {
        raw_to_f64(self.max_raw(), self.frac_bits())
    }

    pub fn min_value(&self) -> f64 {
        raw_to_f64(self.min_raw(), self.frac_bits())
    }

    /// Format that holds every exact product of `a` and `b`.
    pub fn full_product(a: &FixedFormat, b: &FixedFormat) -> Result<Self, FxpError> {
        Self::with_modes(
            a.width + b.width,
            a.int_bits + b.int_bits,
            a.rounding,
            a.overflow,
        )
    }

    /// Format that holds every exact sum of `a` and `b`.
    pub fn full_sum(a: &FixedFormat, b: &FixedFormat) -> Result<Self, FxpError> {
        let int_bits = a.int_bits.max(b.int_bits) + 1;
        let frac = a.frac_bits().max(b.frac_bits());
        let width = int_bits + frac;
        if width < 2 {
            return Self::with_modes(2, int_bits, a.rounding, a.overflow);
        }
        Self::with_modes(width as u32, int_bits, a.rounding, a.overflow)
    }

    /// Same mode flags, different size.
    pub fn resized(&self, width: u32, int_bits: i32) -> Result<Self, FxpError> {
        Self::with_modes(width, int_bits, self.rounding, self.overflow)
    }

    /// Smallest `int_bits` such that every value with magnitude `<= bound`
    /// fits without saturation at the given width.
    pub fn covering(width: u32, bound: f64) -> Result<Self, FxpError> {
        if !bound.is_finite() {
            return Err(FxpError::NonFinite(bound));
        }
        let mut int_bits = -(width as i32) + 2;
        let bound = bound.abs();
        loop {
            let f = Self::new(width, int_bits)?;
            if f.max_value() >= bound && f.min_value() <= -bound {
                return Ok(f);
            }
            int_bits += 1;
        }
    }
}

impl std::fmt::Display for FixedFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fx<{},{}>", self.width, self.int_bits)
    }
}

fn pow2(e: i32) -> f64 {
    // powi with huge exponents is exact for powers of two in range
    2f64.powi(e)
}

fn raw_to_f64(raw: i128, frac_bits: i32) -> f64 {
    // split to keep the i128 -> f64 conversion exact for narrow values
    (raw as f64) * pow2(-frac_bits)
}

/// Converts an exact integer `raw * 2^-frac_in` into `out`.
/// Returns the new raw value and whether the overflow rule was applied.
pub fn convert(raw: i128, frac_in: i32, out: &FixedFormat) -> (i128, bool) {
    let shift = frac_in - out.frac_bits();
    let scaled = if shift > 0 {
        shift_right_rounded(raw, shift as u32, out.rounding)
    } else if shift < 0 {
        let s = (-shift) as u32;
        if raw == 0 {
            0
        } else if s >= 127 || raw.unsigned_abs() > (i128::MAX as u128 >> s) {
            // out of any 128-bit format
            return match out.overflow {
                Overflow::Saturate => {
                    if raw > 0 {
                        (out.max_raw(), true)
                    } else {
                        (out.min_raw(), true)
                    }
                }
                Overflow::Wrap => (wrap(raw.wrapping_shl(s), out.width), true),
            };
        } else {
            raw << s
        }
    } else {
        raw
    };
    resolve_overflow(scaled, out)
}

fn shift_right_rounded(raw: i128, shift: u32, rounding: Rounding) -> i128 {
    if shift >= 127 {
        // |raw| < 2^127 <= 2^shift, so the value lies in [-1, 1)
        return match rounding {
            Rounding::Truncate => {
                if raw < 0 {
                    -1
                } else {
                    0
                }
            }
            Rounding::RoundHalfUp => {
                if shift == 127 && raw == i128::MIN {
                    -1
                } else {
                    0
                }
            }
        };
    }
    match rounding {
        Rounding::Truncate => raw >> shift,
        Rounding::RoundHalfUp => {
            let floor = raw >> shift;
            let rem = raw - (floor << shift);
            let half = 1i128 << (shift - 1);
            if rem >= half {
                floor + 1
            } else {
                floor
            }
        }
    }
}

fn resolve_overflow(raw: i128, out: &FixedFormat) -> (i128, bool) {
    if raw > out.max_raw() {
        match out.overflow {
            Overflow::Saturate => (out.max_raw(), true),
            Overflow::Wrap => (wrap(raw, out.width), true),
        }
    } else if raw < out.min_raw() {
        match out.overflow {
            Overflow::Saturate => (out.min_raw(), true),
            Overflow::Wrap => (wrap(raw, out.width), true),
        }
    } else {
        (raw, false)
    }
}

fn wrap(raw: i128, width: u32) -> i128 {
    if width >= 128 {
        return raw;
    }
    let s = 128 - width;
    (raw << s) >> s
}

/// Running count of overflow events.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowCount(pub u64);

impl OverflowCount {
    pub fn record(&mut self, hit: bool) {
        if hit {
            self.0 += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedValue {
    raw: i128,
    format: FixedFormat,
}

impl FixedValue {
    /// Wraps a raw pattern; fails when it does not fit `format`.
    pub fn from_raw(raw: i128, format: FixedFormat) -> Result<Self, FxpError> {
        if raw > format.max_raw() || raw < format.min_raw() {
            return Err(FxpError::InvalidFormat {
                width: format.width,
                int_bits: format.int_bits,
                reason: "raw value does not fit the format",
            });
        }
        Ok(Self { raw, format })
    }

    pub fn zero(format: FixedFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn raw(&self) -> i128 {
        self.raw
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn to_f64(&self) -> f64 {
        raw_to_f64(self.raw, self.format.frac_bits())
    }

    /// Converts into another format (one rounding, one overflow resolution).
    pub fn cast(&self, out: FixedFormat) -> FixedValue {
        self.cast_tracked(out, &mut OverflowCount::default())
    }

    pub fn cast_tracked(&self, out: FixedFormat, ovf: &mut OverflowCount) -> FixedValue {
        let (raw, hit) = convert(self.raw, self.format.frac_bits(), &out);
        ovf.record(hit);
        FixedValue { raw, format: out }
    }
}

/// Nearest representable value under the format's rounding rule.
pub fn quantize(x: f64, f: FixedFormat) -> Result<FixedValue, FxpError> {
    quantize_tracked(x, f, &mut OverflowCount::default())
}

pub fn quantize_tracked(
    x: f64,
    f: FixedFormat,
    ovf: &mut OverflowCount,
) -> Result<FixedValue, FxpError> {
    if !x.is_finite() {
        return Err(FxpError::NonFinite(x));
    }
    // x * 2^frac is exact (power-of-two scaling) unless it overflows to inf,
    // which the range checks below treat as out of range.
    let y = x * pow2(f.frac_bits());
    let fl = y.floor();
    let r = match f.rounding {
        Rounding::Truncate => fl,
        Rounding::RoundHalfUp => {
            if y - fl >= 0.5 {
                fl + 1.0
            } else {
                fl
            }
        }
    };
    let limit = pow2(f.width as i32 - 1);
    let raw = if r >= limit || r < -limit {
        match f.overflow {
            Overflow::Saturate => {
                ovf.record(true);
                if r > 0.0 {
                    f.max_raw()
                } else {
                    f.min_raw()
                }
            }
            Overflow::Wrap => {
                ovf.record(true);
                // reduce modulo 2^width in floating point, exact for powers of two
                let m = pow2(f.width as i32);
                let mut w = r.rem_euclid(m);
                if w >= limit {
                    w -= m;
                }
                if w.is_finite() {
                    w as i128
                } else {
                    0
                }
            }
        }
    } else {
        r as i128
    };
    Ok(FixedValue { raw, format: f })
}

/// Exact sum, converted to `out`.
pub fn fx_add(a: FixedValue, b: FixedValue, out: FixedFormat) -> Result<FixedValue, FxpError> {
    FixedFormat::full_sum(&a.format, &b.format)?;
    Ok(fx_add_tracked(a, b, out, &mut OverflowCount::default()))
}

pub fn fx_add_tracked(
    a: FixedValue,
    b: FixedValue,
    out: FixedFormat,
    ovf: &mut OverflowCount,
) -> FixedValue {
    let (raw, frac) = exact_sum(a.raw, a.format.frac_bits(), b.raw, b.format.frac_bits());
    let (raw, hit) = convert(raw, frac, &out);
    ovf.record(hit);
    FixedValue { raw, format: out }
}

/// Exact difference `a - b`, converted to `out`.
pub fn fx_sub_tracked(
    a: FixedValue,
    b: FixedValue,
    out: FixedFormat,
    ovf: &mut OverflowCount,
) -> FixedValue {
    let (raw, frac) = exact_sum(a.raw, a.format.frac_bits(), -b.raw, b.format.frac_bits());
    let (raw, hit) = convert(raw, frac, &out);
    ovf.record(hit);
    FixedValue { raw, format: out }
}

/// Exact product, converted to `out`.
pub fn fx_mul(a: FixedValue, b: FixedValue, out: FixedFormat) -> Result<FixedValue, FxpError> {
    FixedFormat::full_product(&a.format, &b.format)?;
    Ok(fx_mul_tracked(a, b, out, &mut OverflowCount::default()))
}

pub fn fx_mul_tracked(
    a: FixedValue,
    b: FixedValue,
    out: FixedFormat,
    ovf: &mut OverflowCount,
) -> FixedValue {
    let (raw, hit) = convert(
        a.raw * b.raw,
        a.format.frac_bits() + b.format.frac_bits(),
        &out,
    );
    ovf.record(hit);
    FixedValue { raw, format: out }
}

/// Aligns two raw values to the larger fractional count and adds them.
fn exact_sum(a: i128, fa: i32, b: i128, fb: i32) -> (i128, i32) {
    if fa == fb {
        (a + b, fa)
    } else if fa > fb {
        (a + (b << (fa - fb)), fa)
    } else {
        ((a << (fb - fa)) + b, fb)
    }
}

/// Column vector of values sharing one format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedVector {
    format: FixedFormat,
    raw: Vec<i128>,
}

impl FixedVector {
    pub fn zeros(len: usize, format: FixedFormat) -> Self {
        Self {
            format,
            raw: vec![0; len],
        }
    }

    /// Wraps raw bit patterns; each must fit the format.
    pub fn from_raw(raw: Vec<i128>, format: FixedFormat) -> Result<Self, FxpError> {
        if let Some(&bad) = raw.iter().find(|&&r| r > format.max_raw() || r < format.min_raw()) {
            return Err(FxpError::Dimension(format!("raw value {bad} does not fit {format}")));
        }
        Ok(Self { format, raw })
    }

    pub fn quantize(xs: &[f64], format: FixedFormat) -> Result<Self, FxpError> {
        Self::quantize_tracked(xs, format, &mut OverflowCount::default())
    }

    pub fn quantize_tracked(
        xs: &[f64],
        format: FixedFormat,
        ovf: &mut OverflowCount,
    ) -> Result<Self, FxpError> {
        let raw = xs
            .iter()
            .map(|&x| quantize_tracked(x, format, ovf).map(|v| v.raw))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { format, raw })
    }

    pub fn from_values(values: &[FixedValue]) -> Result<Self, FxpError> {
        let format = values
            .first()
            .map(|v| v.format)
            .ok_or_else(|| FxpError::Dimension("empty vector".into()))?;
        if values.iter().any(|v| v.format != format) {
            return Err(FxpError::MixedFormats);
        }
        Ok(Self {
            format,
            raw: values.iter().map(|v| v.raw).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn raw(&self) -> &[i128] {
        &self.raw
    }

    pub fn get(&self, i: usize) -> FixedValue {
        FixedValue {
            raw: self.raw[i],
            format: self.format,
        }
    }

    pub fn set(&mut self, i: usize, v: FixedValue) -> Result<(), FxpError> {
        if v.format != self.format {
            return Err(FxpError::MixedFormats);
        }
        self.raw[i] = v.raw;
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        let f = self.format.frac_bits();
        self.raw.iter().map(|&r| raw_to_f64(r, f)).collect()
    }
}

/// Row-major matrix of values sharing one format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMatrix {
    rows: usize,
    cols: usize,
    format: FixedFormat,
    raw: Vec<i128>,
}

impl FixedMatrix {
    /// Quantizes a row-major slice.
    pub fn quantize(
        rows: usize,
        cols: usize,
        row_major: &[f64],
        format: FixedFormat,
    ) -> Result<Self, FxpError> {
        Self::quantize_tracked(rows, cols, row_major, format, &mut OverflowCount::default())
    }

    pub fn quantize_tracked(
        rows: usize,
        cols: usize,
        row_major: &[f64],
        format: FixedFormat,
        ovf: &mut OverflowCount,
    ) -> Result<Self, FxpError> {
        if rows == 0 || cols == 0 {
            return Err(FxpError::Dimension("matrix dimensions must be positive".into()));
        }
        if row_major.len() != rows * cols {
            return Err(FxpError::Dimension(format!(
                "{} elements for a {rows}x{cols} matrix",
                row_major.len()
            )));
        }
        let raw = row_major
            .iter()
            .map(|&x| quantize_tracked(x, format, ovf).map(|v| v.raw))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            rows,
            cols,
            format,
            raw,
        })
    }

    pub fn from_nalgebra(
        m: &nalgebra::DMatrix<f64>,
        format: FixedFormat,
        ovf: &mut OverflowCount,
    ) -> Result<Self, FxpError> {
        let row_major: Vec<f64> = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect();
        Self::quantize_tracked(m.nrows(), m.ncols(), &row_major, format, ovf)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn get(&self, i: usize, j: usize) -> FixedValue {
        FixedValue {
            raw: self.raw[i * self.cols + j],
            format: self.format,
        }
    }

    fn row_raw(&self, i: usize) -> &[i128] {
        &self.raw[i * self.cols..(i + 1) * self.cols]
    }
}

/// Number of pairwise summation levels for `n` terms, `ceil(log2 n)`.
pub fn tree_levels(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Formats used by [`tree_matvec`]: one for the elementwise products, one per
/// intermediate summation level, and one for the final level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSchedule {
    pub product: FixedFormat,
    /// Intermediate levels; level `k` (0-based) is stored in `stages[k]`.
    pub stages: Vec<FixedFormat>,
    pub output: FixedFormat,
}

impl TreeSchedule {
    /// The HLS kernel layout: products keep `m.int_bits + v.int_bits` integer
    /// bits at width `min(m.width + v.width, product_width_cap)`, each
    /// summation level adds one integer bit (fractional bits unchanged) and
    /// the last level is stored in `output`.
    pub fn widening(
        matrix: FixedFormat,
        vector: FixedFormat,
        output: FixedFormat,
        product_width_cap: u32,
        terms: usize,
    ) -> Result<Self, FxpError> {
        let width = (matrix.width + vector.width).min(product_width_cap);
        let product = matrix.resized(width, matrix.int_bits + vector.int_bits)?;
        let levels = tree_levels(terms);
        let stages = (1..levels)
            .map(|k| product.resized(product.width + k as u32, product.int_bits + k as i32))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            product,
            stages,
            output,
        })
    }

    fn check(&self, terms: usize) -> Result<(), FxpError> {
        let need = tree_levels(terms).saturating_sub(1);
        if self.stages.len() < need {
            return Err(FxpError::Dimension(format!(
                "schedule has {} intermediate stages, {terms} terms need {need}",
                self.stages.len()
            )));
        }
        Ok(())
    }
}

/// Matrix-vector product with elementwise products followed by a pairwise
/// binary-tree summation in the fixed order of the HLS kernel.
///
/// At a level with `c` partial sums, `half = ceil(c / 2)` and
/// `out[j] = in[j] + in[j + half]` for `j < c / 2`; when `c` is odd the
/// element `in[half - 1]` is carried into `out[half - 1]`.
pub fn tree_matvec(
    h: &FixedMatrix,
    v: &FixedVector,
    schedule: &TreeSchedule,
) -> Result<FixedVector, FxpError> {
    tree_matvec_tracked(h, v, schedule, &mut OverflowCount::default())
}

pub fn tree_matvec_tracked(
    h: &FixedMatrix,
    v: &FixedVector,
    schedule: &TreeSchedule,
    ovf: &mut OverflowCount,
) -> Result<FixedVector, FxpError> {
    if h.cols != v.len() {
        return Err(FxpError::Dimension(format!(
            "matrix has {} columns, vector has {} elements",
            h.cols,
            v.len()
        )));
    }
    schedule.check(h.cols)?;
    // products and pairwise sums must fit the i128 carrier
    FixedFormat::full_product(&h.format, &v.format)?;
    let widest = schedule
        .stages
        .iter()
        .chain([&schedule.product, &schedule.output])
        .map(|f| f.width)
        .max()
        .unwrap_or(0);
    if h.format.width + v.format.width >= MAX_WIDTH || widest >= MAX_WIDTH {
        return Err(FxpError::InvalidFormat {
            width: widest.max(h.format.width + v.format.width),
            int_bits: schedule.product.int_bits,
            reason: "tree stages need headroom in the 128-bit carrier",
        });
    }
    let n = h.cols;
    let prod_frac = h.format.frac_bits() + v.format.frac_bits();
    let mut out = Vec::with_capacity(h.rows);
    let mut cur = vec![0i128; n];
    let mut next = vec![0i128; n];
    for i in 0..h.rows {
        let row = h.row_raw(i);
        for j in 0..n {
            let (r, hit) = convert(row[j] * v.raw[j], prod_frac, &schedule.product);
            ovf.record(hit);
            cur[j] = r;
        }
        let mut count = n;
        let mut fmt = schedule.product;
        let mut level = 0;
        if count == 1 {
            let (r, hit) = convert(cur[0], fmt.frac_bits(), &schedule.output);
            ovf.record(hit);
            out.push(r);
            continue;
        }
        while count > 1 {
            let half = count.div_ceil(2);
            let target = if half == 1 {
                schedule.output
            } else {
                schedule.stages[level]
            };
            let (in_frac, out_frac) = (fmt.frac_bits(), target.frac_bits());
            if count % 2 == 1 {
                let (r, hit) = convert(cur[half - 1], in_frac, &target);
                ovf.record(hit);
                next[half - 1] = r;
            }
            for j in 0..count / 2 {
                let (r, hit) = convert(cur[j] + cur[j + half], in_frac, &target);
                ovf.record(hit);
                next[j] = r;
            }
            debug_assert_eq!(out_frac, target.frac_bits());
            std::mem::swap(&mut cur, &mut next);
            count = half;
            fmt = target;
            level += 1;
        }
        out.push(cur[0]);
    }
    Ok(FixedVector {
        format: schedule.output,
        raw: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(w: u32, i: i32) -> FixedFormat {
        FixedFormat::new(w, i).unwrap()
    }

    #[test]
    fn format_limits() {
        let q = f(27, 2);
        assert_eq!(q.ulp(), 2f64.powi(-25));
        assert_eq!(q.max_value(), 2.0 - 2f64.powi(-25));
        assert_eq!(q.min_value(), -2.0);
        let h = f(27, -1);
        assert_eq!(h.max_value(), 0.25 - 2f64.powi(-28));
        assert_eq!(h.min_value(), -0.25);
    }

    #[test]
    fn invalid_formats_rejected() {
        assert!(FixedFormat::new(1, 0).is_err());
        assert!(FixedFormat::new(27, 35).is_err());
        assert!(FixedFormat::new(129, 2).is_err());
        assert!(FixedFormat::new(128, 2).is_ok());
        assert!(FixedFormat::new(8, -20).is_ok());
    }

    #[test]
    fn quantize_examples() {
        let q = f(27, 2);
        let half = quantize(0.5, q).unwrap();
        assert_eq!(half.raw(), 1 << 24);
        assert_eq!(half.to_f64(), 0.5);
        assert_eq!(quantize(3.7, q).unwrap().to_f64(), q.max_value());
        let ulp = 2f64.powi(-25);
        // 1.5 ulp is a tie, rounds toward +inf
        assert_eq!(quantize(1.5 * ulp, q).unwrap().to_f64(), 2.0 * ulp);
        assert_eq!(quantize(-1.5 * ulp, q).unwrap().to_f64(), -ulp);
        assert_eq!(quantize(-2.5 * ulp, q).unwrap().to_f64(), -2.0 * ulp);
        assert_eq!(quantize(-9.0, q).unwrap().to_f64(), -2.0);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let q = f(27, 2);
        assert!(matches!(quantize(f64::NAN, q), Err(FxpError::NonFinite(_))));
        assert!(matches!(quantize(f64::INFINITY, q), Err(FxpError::NonFinite(_))));
    }

    #[test]
    fn truncate_rounds_down() {
        let t = FixedFormat::with_modes(8, 4, Rounding::Truncate, Overflow::Saturate).unwrap();
        assert_eq!(quantize(0.99 * t.ulp(), t).unwrap().raw(), 0);
        assert_eq!(quantize(-0.01 * t.ulp(), t).unwrap().raw(), -1);
    }

    #[test]
    fn wrap_mode_wraps() {
        let w = FixedFormat::with_modes(4, 4, Rounding::RoundHalfUp, Overflow::Wrap).unwrap();
        // range -8..7, 9 wraps to -7
        assert_eq!(quantize(9.0, w).unwrap().raw(), -7);
        let a = FixedValue::from_raw(7, w).unwrap();
        assert_eq!(fx_add(a, a, w).unwrap().raw(), -2);
    }

    #[test]
    fn mul_and_add_examples() {
        let qh = quantize(0.25, f(27, -1));
        // 0.25 saturates in <27,-1>; use a representable quarter-ish value
        assert!(qh.unwrap().to_f64() < 0.25);
        let a = quantize(0.25, f(27, 0)).unwrap();
        let b = quantize(1.0, f(27, 2)).unwrap();
        assert_eq!(fx_mul(a, b, f(35, 1)).unwrap().to_f64(), 0.25);

        let q = f(27, 2);
        let m = FixedValue::from_raw(q.max_raw(), q).unwrap();
        assert_eq!(fx_add(m, m, q).unwrap().raw(), q.max_raw());
    }

    #[test]
    fn narrow_product_within_half_ulp() {
        let q = f(16, 1);
        let a = quantize(0.1, q).unwrap();
        let out = f(12, 1);
        let p = fx_mul(a, a, out).unwrap();
        // exact rational product of the two quantized operands
        let exact = a.to_f64() * a.to_f64();
        assert!((p.to_f64() - exact).abs() <= out.ulp() / 2.0);
        assert!((p.to_f64() - 0.01).abs() <= out.ulp());
    }

    #[test]
    fn oversized_product_rejected() {
        let a = FixedValue::zero(f(100, 2));
        assert!(fx_mul(a, a, f(27, 2)).is_err());
    }

    #[test]
    fn tree_levels_count() {
        assert_eq!(tree_levels(1), 0);
        assert_eq!(tree_levels(2), 1);
        assert_eq!(tree_levels(3), 2);
        assert_eq!(tree_levels(4), 2);
        assert_eq!(tree_levels(81), 7);
        assert_eq!(tree_levels(128), 7);
        assert_eq!(tree_levels(129), 8);
    }

    #[test]
    fn dyadic_row_sums_exactly() {
        let hf = f(27, 0);
        let vf = f(27, 2);
        let h = FixedMatrix::quantize(1, 4, &[0.25, -0.25, 0.125, 0.0625], hf).unwrap();
        let v = FixedVector::quantize(&[1.0; 4], vf).unwrap();
        let s = TreeSchedule::widening(hf, vf, vf, 35, 4).unwrap();
        let y = tree_matvec(&h, &v, &s).unwrap();
        assert_eq!(y.to_f64(), vec![0.1875]);
    }

    #[test]
    fn zero_vector_gives_zero() {
        let hf = f(27, -1);
        let vf = f(27, 2);
        let vals: Vec<f64> = (0..25).map(|k| (k as f64 - 12.0) / 60.0).collect();
        let h = FixedMatrix::quantize(5, 5, &vals, hf).unwrap();
        let v = FixedVector::zeros(5, vf);
        let s = TreeSchedule::widening(hf, vf, vf, 35, 5).unwrap();
        assert!(tree_matvec(&h, &v, &s).unwrap().raw().iter().all(|&r| r == 0));
    }

    #[test]
    fn tree_order_matches_hls_layout() {
        // Five terms: 5 -> 3 -> 2 -> 1. Level 1 pairs (0,3),(1,4) and carries 2,
        // level 2 pairs (0,2) and carries 1, level 3 adds the two.
        // With truncation at a coarse stage format the order becomes visible.
        let hf = FixedFormat::with_modes(16, 4, Rounding::Truncate, Overflow::Saturate).unwrap();
        let vf = hf;
        let coarse = FixedFormat::with_modes(8, 6, Rounding::Truncate, Overflow::Saturate).unwrap();
        let s = TreeSchedule {
            product: hf,
            stages: vec![coarse, coarse],
            output: coarse,
        };
        let terms = [0.75, 0.5, 0.25, 0.5, 0.25];
        let h = FixedMatrix::quantize(1, 5, &terms, hf).unwrap();
        let v = FixedVector::quantize(&[1.0; 5], vf).unwrap();
        let y = tree_matvec(&h, &v, &s).unwrap().to_f64()[0];
        // coarse ulp is 0.25 with floor rounding:
        // level1: [0.75+0.5, 0.5+0.25, 0.25] = [1.25, 0.75, 0.25]
        // level2: [1.25+0.25, 0.75] = [1.5, 0.75]
        // level3: 2.25
        assert_eq!(y, 2.25);
    }

    #[test]
    fn schedule_must_cover_levels() {
        let hf = f(27, -1);
        let vf = f(27, 2);
        let s = TreeSchedule {
            product: f(35, 1),
            stages: vec![],
            output: vf,
        };
        let h = FixedMatrix::quantize(1, 4, &[0.0; 4], hf).unwrap();
        let v = FixedVector::zeros(4, vf);
        assert!(tree_matvec(&h, &v, &s).is_err());
        let v3 = FixedVector::zeros(3, vf);
        assert!(matches!(tree_matvec(&h, &v3, &s), Err(FxpError::Dimension(_))));
    }

    #[test]
    fn format_json_shape() {
        let s = serde_json::to_string(&f(27, -1)).unwrap();
        assert_eq!(
            s,
            r#"{"width":27,"int_bits":-1,"rounding":"round_half_up","overflow":"saturate"}"#
        );
        let bad: Result<FixedFormat, _> =
            serde_json::from_str(r#"{"width":27,"int_bits":35,"rounding":"truncate","overflow":"wrap"}"#);
        assert!(bad.is_err());
        let v = quantize(-0.75, f(27, 2)).unwrap();
        let js = serde_json::to_string(&v).unwrap();
        assert!(js.starts_with(r#"{"raw":-25165824,"#));
        let back: FixedValue = serde_json::from_str(&js).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn covering_picks_minimal_int_bits() {
        assert_eq!(FixedFormat::covering(27, 0.2).unwrap().int_bits(), -1);
        assert_eq!(FixedFormat::covering(27, 0.25).unwrap().int_bits(), 0);
        assert_eq!(FixedFormat::covering(27, 1.9).unwrap().int_bits(), 2);
        assert_eq!(FixedFormat::covering(27, 3.0).unwrap().int_bits(), 3);
    }
}
