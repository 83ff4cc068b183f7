//! Monte Carlo ensembles of field-valued processes, Brownian drivers and the
//! mixed `L^m(Ω)` / time-Hölder / Sobolev norm estimators.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{domain, shape, Result};
use crate::grid::{PairPolicy, TimeGrid};
use crate::propagator::GridPropagator;
use crate::rng::{stream_rng, STREAM_DRIVER};
use crate::spectral::{moment_term, weighted_sq_norm, FieldShape, SpectralField, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Field values for every `(sample, node)`, stored sample-major, then node,
/// then channel, then frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEnsemble {
    shape: FieldShape,
    grid: TimeGrid,
    num_samples: usize,
    real_valued: bool,
    adapted: bool,
    master_seed: u64,
    data: Vec<C64>,
}

impl SampleEnsemble {
    pub fn zeros(shape: FieldShape, grid: &TimeGrid, num_samples: usize, real_valued: bool) -> Self {
        let len = shape.len() * grid.num_nodes() * num_samples;
        Self { shape, grid: grid.clone(), num_samples, real_valued, adapted: false, master_seed: 0, data: vec![ZERO; len] }
    }

    pub fn from_data(shape: FieldShape, grid: &TimeGrid, num_samples: usize, real_valued: bool, data: Vec<C64>) -> Result<Self> {
        if num_samples == 0 {
            return domain("ensemble needs at least one sample");
        }
        if data.len() != shape.len() * grid.num_nodes() * num_samples {
            return shape_err("ensemble data length does not match its shape");
        }
        Ok(Self { shape, grid: grid.clone(), num_samples, real_valued, adapted: false, master_seed: 0, data })
    }

    /// Fills every `(sample, node)` slot with `f(sample, node, out)`, in
    /// parallel over samples.
    pub fn from_fn<F>(shape: FieldShape, grid: &TimeGrid, num_samples: usize, real_valued: bool, f: F) -> Self
    where
        F: Fn(usize, usize, &mut [C64]) + Sync,
    {
        let mut out = Self::zeros(shape, grid, num_samples, real_valued);
        let per_sample = shape.len() * grid.num_nodes();
        let len = shape.len();
        out.data.par_chunks_mut(per_sample).enumerate().for_each(|(s, block)| {
            for (i, slot) in block.chunks_exact_mut(len).enumerate() {
                f(s, i, slot);
            }
        });
        out
    }

    /// The same field at every node and sample.
    pub fn constant(field: &SpectralField, grid: &TimeGrid, num_samples: usize) -> Self {
        Self::from_fn(field.shape(), grid, num_samples, field.is_real_valued(), |_, _, out| {
            out.copy_from_slice(field.coeffs())
        })
        .adapted(true)
    }

    /// Declares that the value at node `i` depends only on driver increments
    /// before step `i`.
    pub fn adapted(mut self, flag: bool) -> Self {
        self.adapted = flag;
        self
    }

    pub fn is_adapted(&self) -> bool {
        self.adapted
    }

    /// Repeats a single-sample ensemble `num_samples` times.
    pub fn broadcast(&self, num_samples: usize) -> Result<Self> {
        if self.num_samples == num_samples {
            return Ok(self.clone());
        }
        if self.num_samples != 1 {
            return shape_err("only single-sample ensembles can be broadcast");
        }
        let mut data = Vec::with_capacity(self.data.len() * num_samples);
        for _ in 0..num_samples {
            data.extend_from_slice(&self.data);
        }
        Ok(Self { num_samples, data, ..self.header() })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_nodes(&self) -> usize {
        self.grid.num_nodes()
    }

    pub fn is_real_valued(&self) -> bool {
        self.real_valued
    }

    pub fn set_real_valued(&mut self, flag: bool) {
        self.real_valued = flag;
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    #[inline]
    pub fn field(&self, sample: usize, node: usize) -> &[C64] {
        let len = self.shape.len();
        let off = (sample * self.grid.num_nodes() + node) * len;
        &self.data[off..off + len]
    }

    #[inline]
    pub fn field_mut(&mut self, sample: usize, node: usize) -> &mut [C64] {
        let len = self.shape.len();
        let off = (sample * self.grid.num_nodes() + node) * len;
        &mut self.data[off..off + len]
    }

    pub fn sample_block(&self, sample: usize) -> &[C64] {
        let per = self.shape.len() * self.grid.num_nodes();
        &self.data[sample * per..(sample + 1) * per]
    }

    pub fn to_field(&self, sample: usize, node: usize) -> SpectralField {
        SpectralField::from_coeffs(self.shape, self.real_valued, self.field(sample, node).to_vec()).unwrap()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape || self.grid != other.grid || self.num_samples != other.num_samples {
            return shape_err("ensembles differ in shape, grid or sample count");
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.data.par_iter_mut().zip(&other.data).for_each(|(x, y)| *x = *x * a + *y * b);
        out.real_valued = self.real_valued && other.real_valued;
        out.adapted = self.adapted && other.adapted;
        Ok(out)
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.data.par_iter_mut().for_each(|x| *x *= a);
        out
    }

    /// Nodes `a..=b` on the window grid.
    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        let grid = self.grid.restrict(a, b)?;
        let len = self.shape.len();
        let mut data = Vec::with_capacity(self.num_samples * (b - a + 1) * len);
        for s in 0..self.num_samples {
            for i in a..=b {
                data.extend_from_slice(self.field(s, i));
            }
        }
        Ok(Self { grid, data, ..self.header() })
    }

    /// Copy of everything but the data.
    fn header(&self) -> Self {
        Self {
            shape: self.shape,
            grid: self.grid.clone(),
            num_samples: self.num_samples,
            real_valued: self.real_valued,
            adapted: self.adapted,
            master_seed: self.master_seed,
            data: Vec::new(),
        }
    }

    /// Per-node `(mean_ω |Y_t|_γ^m)^{1/m}`.
    pub fn lm_norms_by_node(&self, m: f64, gamma: f64) -> Vec<f64> {
        let w = self.shape.bessel_weights(gamma);
        let nodes = self.grid.num_nodes();
        let per_sample: Vec<Vec<f64>> = (0..self.num_samples)
            .into_par_iter()
            .map(|s| (0..nodes).map(|i| moment_term(weighted_sq_norm(&w, self.field(s, i)), m)).collect())
            .collect();
        (0..nodes)
            .map(|i| {
                let sum: f64 = per_sample.iter().map(|v| v[i]).sum();
                (sum / self.num_samples as f64).powf(1.0 / m)
            })
            .collect()
    }

    /// `‖Y‖_{0,m,γ} = sup_t ‖Y_t‖_{m,γ}`.
    pub fn lm_sup_norm(&self, m: f64, gamma: f64) -> f64 {
        self.lm_norms_by_node(m, gamma).into_iter().fold(0.0, f64::max)
    }

    /// `‖Y_t‖_{m,γ}` at one node.
    pub fn lm_norm_at(&self, node: usize, m: f64, gamma: f64) -> f64 {
        let w = self.shape.bessel_weights(gamma);
        let sum: f64 = (0..self.num_samples).map(|s| moment_term(weighted_sq_norm(&w, self.field(s, node)), m)).sum();
        (sum / self.num_samples as f64).powf(1.0 / m)
    }

    /// `‖δY‖_{β,m,γ}`, or `‖δ̂Y‖_{β,m,γ}` when a propagator is given.
    pub fn lm_holder_seminorm(&self, m: f64, gamma: f64, beta: f64, mild: Option<&GridPropagator>) -> Result<f64> {
        if self.is_zero() {
            return Ok(0.0);
        }
        let w = self.shape.bessel_weights(gamma);
        let policy = PairPolicy::for_grid(&self.grid);
        let n = self.grid.num_steps();
        let len = self.shape.len();
        if let Some(p) = mild {
            if p.grid().num_nodes() != self.grid.num_nodes() {
                return shape_err("propagator grid does not match the ensemble");
            }
        }
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let last = if policy.is_anchor(i) { n } else { i + 1 };
                let mut sums = vec![0.0; last - i];
                let mut state = vec![ZERO; len];
                let mut diff = vec![ZERO; len];
                let mut scratch = Vec::new();
                for s in 0..self.num_samples {
                    state.copy_from_slice(self.field(s, i));
                    for j in i + 1..=last {
                        if let Some(p) = mild {
                            p.advance(j - 1, &mut state, &mut scratch);
                        }
                        if !policy.contains(i, j) {
                            continue;
                        }
                        for ((d, y), x) in diff.iter_mut().zip(self.field(s, j)).zip(&state) {
                            *d = y - x;
                        }
                        sums[j - i - 1] += moment_term(weighted_sq_norm(&w, &diff), m);
                    }
                }
                let mut best: f64 = 0.0;
                for j in i + 1..=last {
                    if policy.contains(i, j) {
                        let h = self.grid.node(j) - self.grid.node(i);
                        let v = (sums[j - i - 1] / self.num_samples as f64).powf(1.0 / m) / h.powf(beta);
                        best = best.max(v);
                    }
                }
                best
            })
            .collect();
        Ok(rows.into_iter().fold(0.0, f64::max))
    }

    /// Largest Hermitian-symmetry defect over all slots.
    pub fn hermitian_defect(&self) -> f64 {
        self.data
            .par_chunks(self.shape.len())
            .map(|c| crate::spectral::hermitian_defect(self.shape, c))
            .reduce(|| 0.0, f64::max)
    }
}

fn shape_err<T>(msg: &str) -> Result<T> {
    shape(msg.to_string())
}

/// Independent Brownian increments per sample and grid step.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianDriver {
    dim_d: usize,
    grid: TimeGrid,
    num_samples: usize,
    master_seed: u64,
    increments: Vec<f64>,
}

impl BrownianDriver {
    pub fn sample(master_seed: u64, grid: &TimeGrid, dim_d: usize, num_samples: usize) -> Result<Self> {
        if num_samples == 0 || dim_d == 0 {
            return domain("driver needs at least one sample and one component");
        }
        let per = grid.num_steps() * dim_d;
        let mut increments = vec![0.0; per * num_samples];
        increments.par_chunks_mut(per).enumerate().for_each(|(s, block)| {
            let mut rng = stream_rng(master_seed, STREAM_DRIVER, s as u64);
            for (i, step) in block.chunks_exact_mut(dim_d).enumerate() {
                let sd = grid.step(i).sqrt();
                for v in step {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = sd * z;
                }
            }
        });
        Ok(Self { dim_d, grid: grid.clone(), num_samples, master_seed, increments })
    }

    pub fn zero(grid: &TimeGrid, dim_d: usize, num_samples: usize) -> Self {
        Self { dim_d, grid: grid.clone(), num_samples, master_seed: 0, increments: vec![0.0; grid.num_steps() * dim_d * num_samples] }
    }

    pub fn from_increments(grid: &TimeGrid, dim_d: usize, num_samples: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.num_steps() * dim_d * num_samples {
            return shape_err("driver increments do not match grid and sample count");
        }
        Ok(Self { dim_d, grid: grid.clone(), num_samples, master_seed: 0, increments })
    }

    pub fn dim_d(&self) -> usize {
        self.dim_d
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    #[inline]
    pub fn increment(&self, sample: usize, step: usize) -> &[f64] {
        let off = (sample * self.grid.num_steps() + step) * self.dim_d;
        &self.increments[off..off + self.dim_d]
    }

    /// `W` at every node for one sample, node-major.
    pub fn path(&self, sample: usize) -> Vec<f64> {
        let d = self.dim_d;
        let mut out = vec![0.0; self.grid.num_nodes() * d];
        for i in 0..self.grid.num_steps() {
            let inc = self.increment(sample, i);
            for a in 0..d {
                out[(i + 1) * d + a] = out[i * d + a] + inc[a];
            }
        }
        out
    }

    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        let grid = self.grid.restrict(a, b)?;
        let mut increments = Vec::with_capacity(self.num_samples * (b - a) * self.dim_d);
        for s in 0..self.num_samples {
            for i in a..b {
                increments.extend_from_slice(self.increment(s, i));
            }
        }
        Ok(Self { dim_d: self.dim_d, grid, num_samples: self.num_samples, master_seed: self.master_seed, increments })
    }
}

/// Mean and standard error of a sample.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::Propagator;
    use approx::assert_relative_eq;

    fn shape1() -> FieldShape {
        FieldShape::new(1, 3, 1).unwrap()
    }

    #[test]
    fn constant_ensemble_norms() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let u = SpectralField::cosine_mode(shape1(), 0, &[1], 2.0).unwrap();
        let e = SampleEnsemble::constant(&u, &grid, 3);
        assert_relative_eq!(e.lm_sup_norm(2.0, 0.3), u.norm(0.3.into()), max_relative = 1e-14);
        assert_eq!(e.lm_holder_seminorm(2.0, 0.0, 0.5, None).unwrap(), 0.0);
        assert_eq!(SampleEnsemble::zeros(shape1(), &grid, 2, true).lm_sup_norm(4.0, 1.0), 0.0);
    }

    #[test]
    fn linear_in_time_seminorm() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let u = SpectralField::cosine_mode(shape1(), 0, &[2], 1.0).unwrap();
        let e = SampleEnsemble::from_fn(shape1(), &grid, 1, true, |_, i, out| {
            let t = grid.node(i);
            for (o, c) in out.iter_mut().zip(u.coeffs()) {
                *o = c * t;
            }
        });
        let beta = 0.3;
        assert_relative_eq!(e.lm_holder_seminorm(2.0, 0.2, beta, None).unwrap(), u.norm(0.2.into()), max_relative = 1e-12);
    }

    #[test]
    fn mild_seminorm_of_constant_matches_multiplier_oracle() {
        let grid = TimeGrid::uniform(0.5, 8).unwrap();
        let u = SpectralField::cosine_mode(shape1(), 0, &[1], 1.0).unwrap();
        let e = SampleEnsemble::constant(&u, &grid, 1);
        let gp = GridPropagator::new(&Propagator::heat(1.0), &grid, shape1()).unwrap();
        let got = e.lm_holder_seminorm(2.0, 0.0, 0.5, Some(&gp)).unwrap();
        let lam = 4.0 * std::f64::consts::PI.powi(2);
        let want = (1..=8)
            .map(|k| {
                let h = 0.5 * k as f64 / 8.0;
                (1.0 - (-lam * h).exp()) * u.norm(0.0.into()) / h.sqrt()
            })
            .fold(0.0, f64::max);
        assert_relative_eq!(got, want, max_relative = 1e-12);
    }

    #[test]
    fn driver_is_reproducible_and_restricts() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let a = BrownianDriver::sample(3, &grid, 2, 4).unwrap();
        let b = BrownianDriver::sample(3, &grid, 2, 4).unwrap();
        assert_eq!(a, b);
        let r = a.restrict(2, 7).unwrap();
        assert_eq!(r.increment(1, 0), a.increment(1, 2));
    }
}
