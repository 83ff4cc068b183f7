//! Truncated Fourier representation of the Bessel scale `H^{2γ}(T^n)`.
//!
//! A field holds `(2K+1)^n` coefficients per channel. Frequencies are stored
//! row-major with axis 0 slowest, each axis running from `-K` to `K`, so the
//! mirror image `-k` of slot `i` is slot `modes - 1 - i`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{domain, shape, Result};

pub type C64 = Complex64;

/// Scale index `γ`; the corresponding space is `H^{2γ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceIndex(pub f64);

impl SpaceIndex {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return domain("scale index must be finite");
        }
        Ok(Self(gamma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Eq for SpaceIndex {}

impl PartialOrd for SpaceIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SpaceIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl From<f64> for SpaceIndex {
    fn from(g: f64) -> Self {
        Self(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldShape {
    pub dim_n: usize,
    pub trunc_k: usize,
    pub channels: usize,
}

impl FieldShape {
    pub fn new(dim_n: usize, trunc_k: usize, channels: usize) -> Result<Self> {
        if dim_n == 0 || channels == 0 {
            return domain("field shape needs dim_n >= 1 and channels >= 1");
        }
        Ok(Self { dim_n, trunc_k, channels })
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.trunc_k + 1
    }

    #[inline]
    pub fn modes(&self) -> usize {
        self.side().pow(self.dim_n as u32)
    }

    /// Number of coefficients across all channels.
    #[inline]
    pub fn len(&self) -> usize {
        self.modes() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Frequency vector of mode slot `idx`.
    pub fn frequency(&self, idx: usize, out: &mut [i64]) {
        let side = self.side();
        let k = self.trunc_k as i64;
        let mut rem = idx;
        for a in (0..self.dim_n).rev() {
            out[a] = (rem % side) as i64 - k;
            rem /= side;
        }
    }

    pub fn frequencies(&self, idx: usize) -> Vec<i64> {
        let mut out = vec![0; self.dim_n];
        self.frequency(idx, &mut out);
        out
    }

    /// Slot of frequency `k`, if inside the truncation.
    pub fn index_of(&self, k: &[i64]) -> Option<usize> {
        if k.len() != self.dim_n {
            return None;
        }
        let side = self.side();
        let kk = self.trunc_k as i64;
        let mut idx = 0usize;
        for &ka in k {
            if ka.abs() > kk {
                return None;
            }
            idx = idx * side + (ka + kk) as usize;
        }
        Some(idx)
    }

    #[inline]
    pub fn mirror(&self, idx: usize) -> usize {
        self.modes() - 1 - idx
    }

    /// `|k|²` per mode slot.
    pub fn squared_wavenumbers(&self) -> Vec<f64> {
        let mut k = vec![0i64; self.dim_n];
        (0..self.modes())
            .map(|i| {
                self.frequency(i, &mut k);
                k.iter().map(|&x| (x * x) as f64).sum()
            })
            .collect()
    }

    /// Bessel weights `(1 + 4π²|k|²)^{2γ}` per mode slot.
    pub fn bessel_weights(&self, gamma: f64) -> Vec<f64> {
        self.squared_wavenumbers()
            .into_iter()
            .map(|k2| bessel_weight(k2, gamma))
            .collect()
    }
}

#[inline]
pub fn bessel_weight(k2: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        (1.0 + 4.0 * PI * PI * k2).powf(2.0 * gamma)
    }
}

/// `Σ_c Σ_k w_k |c_k|²` for a channel-major coefficient slice.
#[inline]
pub fn weighted_sq_norm(weights: &[f64], data: &[C64]) -> f64 {
    let modes = weights.len();
    let mut acc = 0.0;
    for chunk in data.chunks_exact(modes) {
        for (w, c) in weights.iter().zip(chunk) {
            acc += w * c.norm_sqr();
        }
    }
    acc
}

/// `|v|^m` from `|v|²`, skipping the root for the common case `m = 2`.
#[inline]
pub fn moment_term(sq: f64, m: f64) -> f64 {
    if m == 2.0 {
        sq
    } else {
        sq.sqrt().powf(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    shape: FieldShape,
    real_valued: bool,
    coeffs: Vec<C64>,
}

impl SpectralField {
    pub fn zeros(shape: FieldShape, real_valued: bool) -> Self {
        Self { shape, real_valued, coeffs: vec![C64::new(0.0, 0.0); shape.len()] }
    }

    pub fn from_coeffs(shape: FieldShape, real_valued: bool, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != shape.len() {
            return shape_err(shape.len(), coeffs.len());
        }
        Ok(Self { shape, real_valued, coeffs })
    }

    /// One nonzero coefficient at frequency `k` of `channel`. Not flagged real.
    pub fn single_mode(shape: FieldShape, channel: usize, k: &[i64], value: C64) -> Result<Self> {
        let Some(idx) = shape.index_of(k) else {
            return domain(format!("frequency {k:?} outside truncation {}", shape.trunc_k));
        };
        if channel >= shape.channels {
            return domain(format!("channel {channel} out of range"));
        }
        let mut f = Self::zeros(shape, false);
        f.coeffs[channel * shape.modes() + idx] = value;
        Ok(f)
    }

    /// Real field `amp·cos(2π k·x)` in `channel`.
    pub fn cosine_mode(shape: FieldShape, channel: usize, k: &[i64], amp: f64) -> Result<Self> {
        let mut f = Self::single_mode(shape, channel, k, C64::new(0.5 * amp, 0.0))?;
        let idx = shape.index_of(k).unwrap();
        let m = channel * shape.modes() + shape.mirror(idx);
        f.coeffs[m] += C64::new(0.5 * amp, 0.0);
        f.real_valued = true;
        Ok(f)
    }

    pub fn constant(shape: FieldShape, values: &[f64]) -> Result<Self> {
        if values.len() != shape.channels {
            return shape_err(shape.channels, values.len());
        }
        let mut f = Self::zeros(shape, true);
        let zero = shape.modes() / 2;
        for (c, v) in values.iter().enumerate() {
            f.coeffs[c * shape.modes() + zero] = C64::new(*v, 0.0);
        }
        Ok(f)
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn is_real_valued(&self) -> bool {
        self.real_valued
    }

    pub fn set_real_valued(&mut self, flag: bool) {
        self.real_valued = flag;
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    pub fn channel(&self, c: usize) -> &[C64] {
        let m = self.shape.modes();
        &self.coeffs[c * m..(c + 1) * m]
    }

    pub fn coeff(&self, channel: usize, k: &[i64]) -> Option<C64> {
        let idx = self.shape.index_of(k)?;
        self.coeffs.get(channel * self.shape.modes() + idx).copied()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    pub fn norm(&self, gamma: SpaceIndex) -> f64 {
        sobolev_norm(self, gamma)
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|c| *c *= a);
        out
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: f64, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape("fields have different shapes");
        }
        let mut out = self.clone();
        for (x, y) in out.coeffs.iter_mut().zip(&other.coeffs) {
            *x += y * a;
        }
        out.real_valued = self.real_valued && other.real_valued;
        Ok(out)
    }

    /// Largest `|c(-k) - conj(c(k))|` over all channels and modes.
    pub fn hermitian_defect(&self) -> f64 {
        hermitian_defect(self.shape, &self.coeffs)
    }
}

fn shape_err<T>(want: usize, got: usize) -> Result<T> {
    shape(format!("expected {want} coefficients, got {got}"))
}

pub fn hermitian_defect(shape: FieldShape, data: &[C64]) -> f64 {
    let modes = shape.modes();
    let mut worst: f64 = 0.0;
    for chunk in data.chunks_exact(modes) {
        for i in 0..modes {
            let d = (chunk[modes - 1 - i] - chunk[i].conj()).norm();
            worst = worst.max(d);
        }
    }
    worst
}

/// `|u|_γ = (Σ_c Σ_k (1+|2πk|²)^{2γ} |û_k|²)^{1/2}`.
pub fn sobolev_norm(u: &SpectralField, gamma: SpaceIndex) -> f64 {
    weighted_sq_norm(&u.shape.bessel_weights(gamma.0), &u.coeffs).sqrt()
}

/// `|u|_{γ2}^{γ3-γ1} / (|u|_{γ1}^{γ3-γ2} |u|_{γ3}^{γ2-γ1})`, evaluated in logs.
pub fn interpolation_defect(
    u: &SpectralField,
    g1: SpaceIndex,
    g2: SpaceIndex,
    g3: SpaceIndex,
) -> Result<f64> {
    if !(g1 <= g2 && g2 <= g3) {
        return domain("interpolation indices must satisfy γ1 <= γ2 <= γ3");
    }
    if u.is_zero() {
        return domain("interpolation defect is undefined for the zero field");
    }
    let (n1, n2, n3) = (sobolev_norm(u, g1), sobolev_norm(u, g2), sobolev_norm(u, g3));
    let log = (g3.0 - g1.0) * n2.ln() - (g3.0 - g2.0) * n1.ln() - (g2.0 - g1.0) * n3.ln();
    Ok(log.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn shape1(k: usize) -> FieldShape {
        FieldShape::new(1, k, 1).unwrap()
    }

    #[test]
    fn frequency_layout_round_trips() {
        let s = FieldShape::new(2, 2, 1).unwrap();
        for i in 0..s.modes() {
            let k = s.frequencies(i);
            assert_eq!(s.index_of(&k), Some(i));
            let neg: Vec<i64> = k.iter().map(|x| -x).collect();
            assert_eq!(s.index_of(&neg), Some(s.mirror(i)));
        }
        assert_eq!(s.frequencies(s.modes() / 2), vec![0, 0]);
    }

    #[test]
    fn norms_of_single_modes() {
        let s = shape1(3);
        assert_eq!(SpectralField::zeros(s, true).norm(SpaceIndex(2.0)), 0.0);
        let u0 = SpectralField::single_mode(s, 0, &[0], C64::new(1.0, 0.0)).unwrap();
        assert_eq!(u0.norm(SpaceIndex(3.0)), 1.0);
        let u1 = SpectralField::single_mode(s, 0, &[1], C64::new(1.0, 0.0)).unwrap();
        let want = (1.0 + 4.0 * PI * PI).powf(0.25);
        assert_relative_eq!(u1.norm(SpaceIndex(0.25)), want, max_relative = 1e-14);
    }

    #[test]
    fn interpolation_defect_single_mode_is_one() {
        let s = FieldShape::new(2, 2, 2).unwrap();
        let u = SpectralField::single_mode(s, 1, &[1, -2], C64::new(0.3, -0.7)).unwrap();
        let d = interpolation_defect(&u, SpaceIndex(-0.5), SpaceIndex(0.1), SpaceIndex(1.3)).unwrap();
        assert_relative_eq!(d, 1.0, max_relative = 1e-12);
        let d = interpolation_defect(&u, SpaceIndex(0.4), SpaceIndex(0.4), SpaceIndex(0.4)).unwrap();
        assert_relative_eq!(d, 1.0, max_relative = 1e-12);
        assert!(interpolation_defect(&SpectralField::zeros(s, true), SpaceIndex(0.0), SpaceIndex(0.0), SpaceIndex(1.0)).is_err());
    }

    #[test]
    fn interpolation_defect_two_modes_matches_scalar_arithmetic() {
        let s = shape1(1);
        let mut u = SpectralField::zeros(s, false);
        u.coeffs_mut()[1] = C64::new(1.0, 0.0);
        u.coeffs_mut()[2] = C64::new(1.0, 0.0);
        let w = 1.0 + 4.0 * PI * PI;
        // norms at γ = 0, 1/2, 1: sqrt(2), sqrt(1 + w), sqrt(1 + w²)
        let want = (1.0 + w).sqrt() / (2f64.sqrt().powf(0.5) * (1.0 + w * w).sqrt().powf(0.5));
        let d = interpolation_defect(&u, SpaceIndex(0.0), SpaceIndex(0.5), SpaceIndex(1.0)).unwrap();
        assert_relative_eq!(d, want, max_relative = 1e-12);
        assert!(d <= 1.0);
    }

    #[test]
    fn cosine_mode_is_hermitian() {
        let s = FieldShape::new(2, 3, 1).unwrap();
        let u = SpectralField::cosine_mode(s, 0, &[1, 2], 2.0).unwrap();
        assert!(u.is_real_valued());
        assert_eq!(u.hermitian_defect(), 0.0);
        let v = SpectralField::single_mode(s, 0, &[1, 2], C64::new(1.0, 0.0)).unwrap();
        assert_eq!(v.hermitian_defect(), 1.0);
    }

    #[test]
    fn space_index_total_order() {
        let mut v = vec![SpaceIndex(0.5), SpaceIndex(-1.0), SpaceIndex(0.25)];
        v.sort();
        assert_eq!(v, vec![SpaceIndex(-1.0), SpaceIndex(0.25), SpaceIndex(0.5)]);
        assert!(SpaceIndex::new(f64::NAN).is_err());
    }
}
