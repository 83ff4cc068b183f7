//! Physical-space collocation for truncated Fourier fields.
//!
//! Coefficients are placed on a uniform grid with `P` points per axis and
//! transformed with n-dimensional FFTs. `P` is chosen large enough that
//! quadratic products of band-limited fields are not aliased.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::spectral::{FieldShape, C64};

pub struct Collocation {
    dim_n: usize,
    trunc_k: usize,
    points: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Grid position of each mode slot.
    slots: Vec<usize>,
}

impl std::fmt::Debug for Collocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Collocation")
            .field("dim_n", &self.dim_n)
            .field("trunc_k", &self.trunc_k)
            .field("points", &self.points)
            .finish()
    }
}

impl Collocation {
    /// Dealiased grid for products of two band-`K` fields.
    pub fn for_products(dim_n: usize, trunc_k: usize) -> Self {
        Self::with_points(dim_n, trunc_k, (3 * trunc_k + 2).next_power_of_two().max(4))
    }

    pub fn with_points(dim_n: usize, trunc_k: usize, points: usize) -> Self {
        assert!(points > 2 * trunc_k, "collocation grid too coarse for truncation");
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(points);
        let inverse = planner.plan_fft_inverse(points);
        let side = 2 * trunc_k + 1;
        let modes = side.pow(dim_n as u32);
        let k = trunc_k as i64;
        let slots = (0..modes)
            .map(|idx| {
                let mut rem = idx;
                let mut pos = 0usize;
                let mut stride = 1usize;
                for _ in 0..dim_n {
                    let ka = (rem % side) as i64 - k;
                    rem /= side;
                    pos += ka.rem_euclid(points as i64) as usize * stride;
                    stride *= points;
                }
                pos
            })
            .collect();
        Self { dim_n, trunc_k, points, forward, inverse, slots }
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.pow(self.dim_n as u32)
    }

    pub fn dim_n(&self) -> usize {
        self.dim_n
    }

    pub fn trunc_k(&self) -> usize {
        self.trunc_k
    }

    /// Coordinates of grid point `p`, written into `x`.
    pub fn point(&self, p: usize, x: &mut [f64]) {
        // Row-major like the mode layout: the last axis varies fastest.
        let mut rem = p;
        let h = 1.0 / self.points as f64;
        for xa in x.iter_mut().take(self.dim_n).rev() {
            *xa = (rem % self.points) as f64 * h;
            rem /= self.points;
        }
    }

    /// Field values `u(x_p) = Σ_k c_k e^{2πik·x_p}` for one channel.
    pub fn to_physical(&self, coeffs: &[C64], out: &mut Vec<C64>) {
        out.clear();
        out.resize(self.num_points(), C64::new(0.0, 0.0));
        for (c, &slot) in coeffs.iter().zip(&self.slots) {
            out[slot] = *c;
        }
        self.transform(out, &self.inverse);
    }

    /// Projects grid values back onto the truncated modes of one channel.
    pub fn from_physical(&self, values: &mut [C64], coeffs: &mut [C64]) {
        self.transform(values, &self.forward);
        let scale = 1.0 / self.num_points() as f64;
        for (c, &slot) in coeffs.iter_mut().zip(&self.slots) {
            *c = values[slot] * scale;
        }
    }

    /// Spectral partial derivative along `axis`: multiplies by `2πi k_axis`.
    pub fn derivative(shape: FieldShape, axis: usize, coeffs: &[C64], out: &mut [C64]) {
        let mut k = vec![0i64; shape.dim_n];
        let modes = shape.modes();
        for i in 0..modes {
            shape.frequency(i, &mut k);
            let m = C64::new(0.0, 2.0 * PI * k[axis] as f64);
            for c in 0..coeffs.len() / modes {
                out[c * modes + i] = coeffs[c * modes + i] * m;
            }
        }
    }

    fn transform(&self, data: &mut [C64], fft: &Arc<dyn Fft<f64>>) {
        let p = self.points;
        if self.dim_n == 1 {
            fft.process(data);
            return;
        }
        let mut line = vec![C64::new(0.0, 0.0); p];
        let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let total = data.len();
        let mut stride = 1usize;
        for _ in 0..self.dim_n {
            let block = stride * p;
            for base in (0..total).step_by(block) {
                for off in 0..stride {
                    for (q, v) in line.iter_mut().enumerate() {
                        *v = data[base + off + q * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (q, v) in line.iter().enumerate() {
                        data[base + off + q * stride] = *v;
                    }
                }
            }
            stride *= p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectralField;
    use approx::assert_relative_eq;

    #[test]
    fn round_trip_is_exact_on_truncated_modes() {
        let shape = FieldShape::new(2, 3, 1).unwrap();
        let col = Collocation::for_products(2, 3);
        let coeffs: Vec<C64> = (0..shape.modes())
            .map(|i| C64::new((i as f64).sin(), (i as f64 * 0.7).cos()))
            .collect();
        let mut phys = Vec::new();
        col.to_physical(&coeffs, &mut phys);
        let mut back = vec![C64::new(0.0, 0.0); shape.modes()];
        col.from_physical(&mut phys, &mut back);
        for (a, b) in coeffs.iter().zip(&back) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn physical_values_match_direct_sum() {
        let shape = FieldShape::new(2, 2, 1).unwrap();
        let col = Collocation::for_products(2, 2);
        let u = SpectralField::single_mode(shape, 0, &[1, -2], C64::new(0.5, 0.25)).unwrap();
        let mut phys = Vec::new();
        col.to_physical(u.coeffs(), &mut phys);
        let mut x = [0.0; 2];
        for (p, v) in phys.iter().enumerate() {
            col.point(p, &mut x);
            let arg = 2.0 * PI * (x[0] - 2.0 * x[1]);
            let want = C64::new(0.5, 0.25) * C64::new(arg.cos(), arg.sin());
            assert!((v - want).norm() < 1e-13);
        }
    }

    #[test]
    fn products_of_band_limited_fields_are_not_aliased() {
        let shape = FieldShape::new(1, 4, 1).unwrap();
        let col = Collocation::for_products(1, 4);
        let a = SpectralField::cosine_mode(shape, 0, &[4], 1.0).unwrap();
        let mut pa = Vec::new();
        col.to_physical(a.coeffs(), &mut pa);
        let mut sq: Vec<C64> = pa.iter().map(|v| v * v).collect();
        let mut out = vec![C64::new(0.0, 0.0); shape.modes()];
        col.from_physical(&mut sq, &mut out);
        // cos² = 1/2 + cos(16πx)/2; the k = 8 part is truncated away.
        assert_relative_eq!(out[4].re, 0.5, epsilon = 1e-14);
        assert!(out.iter().enumerate().all(|(i, c)| i == 4 || c.norm() < 1e-14));
    }

    #[test]
    fn derivative_multiplies_by_two_pi_i_k() {
        let shape = FieldShape::new(1, 3, 1).unwrap();
        let u = SpectralField::single_mode(shape, 0, &[2], C64::new(1.0, 0.0)).unwrap();
        let mut d = vec![C64::new(0.0, 0.0); shape.modes()];
        Collocation::derivative(shape, 0, u.coeffs(), &mut d);
        assert_eq!(d[5], C64::new(0.0, 4.0 * PI));
    }
}
