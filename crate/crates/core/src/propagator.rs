//! Generator families and the propagators they generate on truncated fields.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{domain, shape, Result};
use crate::grid::TimeGrid;
use crate::spectral::{weighted_sq_norm, FieldShape, SpaceIndex, SpectralField, C64};
use crate::transform::Collocation;

pub type MultiplierFn = Arc<dyn Fn(&[i64]) -> f64 + Send + Sync>;
/// Diffusion matrix `a(t, x)`, written row-major into an `n×n` slice.
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum GeneratorFamily {
    /// `L` acts diagonally on Fourier modes with a time-independent symbol.
    ConstantMultiplier { multiplier: MultiplierFn, label: &'static str },
    /// `L_t u = ∇·(a(t,x)∇u)` realized on the Galerkin space.
    DivergenceForm { dim_n: usize, a: DiffusionFn, ellipticity: f64, autonomous: bool },
}

impl fmt::Debug for GeneratorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ConstantMultiplier { label, .. } => write!(f, "ConstantMultiplier({label})"),
            Self::DivergenceForm { dim_n, ellipticity, autonomous, .. } => f
                .debug_struct("DivergenceForm")
                .field("dim_n", dim_n)
                .field("ellipticity", ellipticity)
                .field("autonomous", autonomous)
                .finish(),
        }
    }
}

impl GeneratorFamily {
    pub fn constant_multiplier(multiplier: MultiplierFn) -> Self {
        Self::ConstantMultiplier { multiplier, label: "custom" }
    }

    /// `κΔ`, symbol `-4π²κ|k|²`.
    pub fn heat(kappa: f64) -> Self {
        let m = move |k: &[i64]| -4.0 * PI * PI * kappa * k.iter().map(|&x| (x * x) as f64).sum::<f64>();
        Self::ConstantMultiplier { multiplier: Arc::new(m), label: "heat" }
    }

    /// `Δ - 1`, symbol `-(1 + 4π²|k|²)`.
    pub fn bessel_heat() -> Self {
        let m = |k: &[i64]| -(1.0 + 4.0 * PI * PI * k.iter().map(|&x| (x * x) as f64).sum::<f64>());
        Self::ConstantMultiplier { multiplier: Arc::new(m), label: "bessel_heat" }
    }

    /// The zero generator; its propagator is the identity.
    pub fn zero() -> Self {
        Self::ConstantMultiplier { multiplier: Arc::new(|_: &[i64]| 0.0), label: "zero" }
    }

    pub fn divergence_form(
        dim_n: usize,
        a: DiffusionFn,
        ellipticity: f64,
        autonomous: bool,
    ) -> Result<Self> {
        if !(ellipticity > 0.0) {
            return domain("ellipticity constant must be positive");
        }
        Ok(Self::DivergenceForm { dim_n, a, ellipticity, autonomous })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::ConstantMultiplier { label: "zero", .. })
    }

    /// Symbol values per mode slot (constant case only).
    pub fn multipliers(&self, shape: FieldShape) -> Option<Vec<f64>> {
        match self {
            Self::ConstantMultiplier { multiplier, .. } => {
                let mut k = vec![0i64; shape.dim_n];
                Some(
                    (0..shape.modes())
                        .map(|i| {
                            shape.frequency(i, &mut k);
                            multiplier(&k)
                        })
                        .collect(),
                )
            }
            Self::DivergenceForm { .. } => None,
        }
    }

    /// Sampled checks of the structural assumptions. The divergence-form test
    /// probes `vᵀ a v >= K|v|²` through the smallest eigenvalue of the
    /// symmetric part on a `(t, x)` lattice.
    pub fn validate(&self, shape: FieldShape, horizon: f64) -> Result<()> {
        match self {
            Self::ConstantMultiplier { .. } => {
                let m = self.multipliers(shape).unwrap();
                if let Some((i, v)) = m.iter().enumerate().find(|(_, v)| !(**v <= 0.0)) {
                    return domain(format!(
                        "multiplier {v} > 0 at frequency {:?}",
                        shape.frequencies(i)
                    ));
                }
                Ok(())
            }
            Self::DivergenceForm { dim_n, a, ellipticity, .. } => {
                let n = *dim_n;
                if n != shape.dim_n {
                    return shape_err();
                }
                let per_axis = 16usize;
                let mut x = vec![0.0; n];
                let mut buf = vec![0.0; n * n];
                for it in 0..=8 {
                    let t = horizon * it as f64 / 8.0;
                    for p in 0..per_axis.pow(n as u32) {
                        let mut rem = p;
                        for xa in x.iter_mut() {
                            *xa = (rem % per_axis) as f64 / per_axis as f64;
                            rem /= per_axis;
                        }
                        a(t, &x, &mut buf);
                        let m = DMatrix::from_fn(n, n, |r, c| 0.5 * (buf[r * n + c] + buf[c * n + r]));
                        let lmin = SymmetricEigen::new(m).eigenvalues.min();
                        if !(lmin >= ellipticity * (1.0 - 1e-12)) {
                            return domain(format!(
                                "ellipticity violated at t = {t}, x = {x:?}: smallest eigenvalue {lmin} < {ellipticity}"
                            ));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Galerkin matrix `L_{kj} = -4π² Σ_{p,q} k_p j_q â_{pq}(k - j)` at time `t`.
    pub fn galerkin_matrix(&self, t: f64, shape: FieldShape) -> Result<DMatrix<C64>> {
        match self {
            Self::ConstantMultiplier { .. } => {
                let m = self.multipliers(shape).unwrap();
                Ok(DMatrix::from_fn(m.len(), m.len(), |r, c| {
                    if r == c {
                        C64::new(m[r], 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                }))
            }
            Self::DivergenceForm { dim_n, a, .. } => {
                let n = *dim_n;
                if n != shape.dim_n {
                    return shape_err();
                }
                let kk = shape.trunc_k;
                let wide = FieldShape::new(n, 2 * kk, 1)?;
                let col = Collocation::with_points(n, 2 * kk, (4 * kk + 2).next_power_of_two().max(4));
                let np = col.num_points();
                let mut samples = vec![0.0; np * n * n];
                let mut x = vec![0.0; n];
                for p in 0..np {
                    col.point(p, &mut x);
                    a(t, &x, &mut samples[p * n * n..(p + 1) * n * n]);
                }
                let mut hat = vec![vec![C64::new(0.0, 0.0); wide.modes()]; n * n];
                let mut vals = vec![C64::new(0.0, 0.0); np];
                for (e, h) in hat.iter_mut().enumerate() {
                    for (p, v) in vals.iter_mut().enumerate() {
                        *v = C64::new(samples[p * n * n + e], 0.0);
                    }
                    col.from_physical(&mut vals, h);
                }
                let modes = shape.modes();
                let freqs: Vec<Vec<i64>> = (0..modes).map(|i| shape.frequencies(i)).collect();
                let mut diff = vec![0i64; n];
                let mut l = DMatrix::from_element(modes, modes, C64::new(0.0, 0.0));
                for (r, kr) in freqs.iter().enumerate() {
                    for (c, kc) in freqs.iter().enumerate() {
                        for a_ in 0..n {
                            diff[a_] = kr[a_] - kc[a_];
                        }
                        let slot = wide.index_of(&diff).unwrap();
                        let mut acc = C64::new(0.0, 0.0);
                        for p in 0..n {
                            for q in 0..n {
                                acc += hat[p * n + q][slot] * (kr[p] * kc[q]) as f64;
                            }
                        }
                        l[(r, c)] = acc * (-4.0 * PI * PI);
                    }
                }
                Ok(l)
            }
        }
    }
}

fn shape_err<T>() -> Result<T> {
    shape("generator and field dimensions differ")
}

/// Linear map on the coefficients of one channel.
#[derive(Clone, Debug)]
pub enum StepOperator {
    Identity,
    Diagonal(Vec<f64>),
    Dense(Arc<DMatrix<C64>>),
}

impl StepOperator {
    /// Applies the operator to every channel of `data` in place.
    pub fn apply(&self, data: &mut [C64], scratch: &mut Vec<C64>) {
        match self {
            Self::Identity => {}
            Self::Diagonal(f) => {
                let modes = f.len();
                for chunk in data.chunks_exact_mut(modes) {
                    for (c, w) in chunk.iter_mut().zip(f) {
                        *c *= *w;
                    }
                }
            }
            Self::Dense(m) => {
                let modes = m.nrows();
                scratch.resize(modes, C64::new(0.0, 0.0));
                let s = m.as_slice();
                for chunk in data.chunks_exact_mut(modes) {
                    scratch.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                    for (j, xj) in chunk.iter().enumerate() {
                        if xj.re == 0.0 && xj.im == 0.0 {
                            continue;
                        }
                        let col = &s[j * modes..(j + 1) * modes];
                        for (y, a) in scratch.iter_mut().zip(col) {
                            *y += a * xj;
                        }
                    }
                    chunk.copy_from_slice(scratch);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Propagator {
    generator: GeneratorFamily,
    substep: f64,
}

impl Propagator {
    pub fn new(generator: GeneratorFamily, substep: f64) -> Result<Self> {
        if !(substep > 0.0) {
            return domain("propagator substep must be positive");
        }
        Ok(Self { generator, substep })
    }

    pub fn identity() -> Self {
        Self { generator: GeneratorFamily::zero(), substep: 1.0 }
    }

    pub fn heat(kappa: f64) -> Self {
        Self { generator: GeneratorFamily::heat(kappa), substep: 1.0 }
    }

    pub fn generator(&self) -> &GeneratorFamily {
        &self.generator
    }

    pub fn substep(&self) -> f64 {
        self.substep
    }

    pub fn is_identity(&self) -> bool {
        self.generator.is_zero()
    }

    /// `S_{s,t}` on fields of the given shape.
    pub fn step_operator(&self, s: f64, t: f64, shape: FieldShape) -> Result<StepOperator> {
        if s > t {
            return domain(format!("propagator needs s <= t, got s = {s}, t = {t}"));
        }
        if s == t || self.is_identity() {
            return Ok(StepOperator::Identity);
        }
        match &self.generator {
            GeneratorFamily::ConstantMultiplier { .. } => {
                let m = self.generator.multipliers(shape).unwrap();
                Ok(StepOperator::Diagonal(m.iter().map(|v| (v * (t - s)).exp()).collect()))
            }
            GeneratorFamily::DivergenceForm { autonomous, .. } => {
                if *autonomous {
                    let l = self.generator.galerkin_matrix(s, shape)?;
                    return Ok(StepOperator::Dense(Arc::new((l * C64::new(t - s, 0.0)).exp())));
                }
                let count = ((t - s) / self.substep - 1e-9).ceil().max(1.0) as usize;
                let h = (t - s) / count as f64;
                let mut total: Option<DMatrix<C64>> = None;
                for q in 0..count {
                    let mid = s + (q as f64 + 0.5) * h;
                    let e = (self.generator.galerkin_matrix(mid, shape)? * C64::new(h, 0.0)).exp();
                    total = Some(match total {
                        None => e,
                        Some(acc) => e * acc,
                    });
                }
                Ok(StepOperator::Dense(Arc::new(total.unwrap())))
            }
        }
    }

    pub fn apply(&self, s: f64, t: f64, u: &SpectralField) -> Result<SpectralField> {
        let op = self.step_operator(s, t, u.shape())?;
        let mut out = u.clone();
        op.apply(out.coeffs_mut(), &mut Vec::new());
        Ok(out)
    }
}

/// Propagator specialized to the steps of one time grid and one truncation.
#[derive(Clone, Debug)]
pub struct GridPropagator {
    grid: TimeGrid,
    modes: usize,
    kind: GridKind,
}

#[derive(Clone, Debug)]
enum GridKind {
    Identity,
    Multiplier { symbol: Vec<f64>, steps: Vec<Arc<Vec<f64>>> },
    Dense { steps: Vec<Arc<DMatrix<C64>>> },
}

impl GridPropagator {
    pub fn new(prop: &Propagator, grid: &TimeGrid, shape: FieldShape) -> Result<Self> {
        let modes = shape.modes();
        let kind = match prop.generator() {
            _ if prop.is_identity() => GridKind::Identity,
            GeneratorFamily::ConstantMultiplier { .. } => {
                let symbol = prop.generator().multipliers(shape).unwrap();
                let mut cache: HashMap<u64, Arc<Vec<f64>>> = HashMap::new();
                let steps = (0..grid.num_steps())
                    .map(|i| {
                        let h = grid.step(i);
                        cache
                            .entry(h.to_bits())
                            .or_insert_with(|| Arc::new(symbol.iter().map(|m| (m * h).exp()).collect()))
                            .clone()
                    })
                    .collect();
                GridKind::Multiplier { symbol, steps }
            }
            GeneratorFamily::DivergenceForm { autonomous, .. } => {
                let mut cache: HashMap<u64, Arc<DMatrix<C64>>> = HashMap::new();
                let mut steps = Vec::with_capacity(grid.num_steps());
                for i in 0..grid.num_steps() {
                    let (s, t) = (grid.node(i), grid.node(i + 1));
                    let op = if *autonomous {
                        if let Some(m) = cache.get(&(t - s).to_bits()) {
                            steps.push(m.clone());
                            continue;
                        }
                        prop.step_operator(s, t, shape)?
                    } else {
                        prop.step_operator(s, t, shape)?
                    };
                    let StepOperator::Dense(m) = op else { unreachable!() };
                    if *autonomous {
                        cache.insert((t - s).to_bits(), m.clone());
                    }
                    steps.push(m);
                }
                GridKind::Dense { steps }
            }
        };
        Ok(Self { grid: grid.clone(), modes, kind })
    }

    pub fn identity(grid: &TimeGrid, shape: FieldShape) -> Self {
        Self { grid: grid.clone(), modes: shape.modes(), kind: GridKind::Identity }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, GridKind::Identity)
    }

    /// Applies `S_{t_i, t_{i+1}}` in place.
    #[inline]
    pub fn advance(&self, step: usize, data: &mut [C64], scratch: &mut Vec<C64>) {
        match &self.kind {
            GridKind::Identity => {}
            GridKind::Multiplier { steps, .. } => {
                let f = &steps[step];
                for chunk in data.chunks_exact_mut(self.modes) {
                    for (c, w) in chunk.iter_mut().zip(f.iter()) {
                        *c *= *w;
                    }
                }
            }
            GridKind::Dense { steps } => {
                StepOperator::Dense(steps[step].clone()).apply(data, scratch)
            }
        }
    }

    /// Applies `S_{t_i, t_j}` in place.
    pub fn apply(&self, i: usize, j: usize, data: &mut [C64], scratch: &mut Vec<C64>) {
        match &self.kind {
            GridKind::Identity => {}
            GridKind::Multiplier { symbol, .. } => {
                let h = self.grid.node(j) - self.grid.node(i);
                for chunk in data.chunks_exact_mut(self.modes) {
                    for (c, m) in chunk.iter_mut().zip(symbol) {
                        *c *= (m * h).exp();
                    }
                }
            }
            GridKind::Dense { .. } => {
                for k in i..j {
                    self.advance(k, data, scratch);
                }
            }
        }
    }

    /// The same operators on the node window `a..=b`.
    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        let grid = self.grid.restrict(a, b)?;
        let kind = match &self.kind {
            GridKind::Identity => GridKind::Identity,
            GridKind::Multiplier { symbol, steps } => {
                GridKind::Multiplier { symbol: symbol.clone(), steps: steps[a..b].to_vec() }
            }
            GridKind::Dense { steps } => GridKind::Dense { steps: steps[a..b].to_vec() },
        };
        Ok(Self { grid, modes: self.modes, kind })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingReport {
    /// `max |S_{s,t}u|_{γ2} |t-s|^{γ2-γ1} / |u|_{γ1}`.
    pub ratio: f64,
    /// `max |S_{s,t}u - u|_{γ1} / (|t-s|^{γ2-γ1} |u|_{γ2})`.
    pub companion: f64,
}

/// Empirical constants of the parabolic smoothing estimates. Zero probes
/// carry no information and are skipped.
pub fn smoothing_ratio(
    prop: &Propagator,
    g1: SpaceIndex,
    g2: SpaceIndex,
    pairs: &[(f64, f64)],
    probes: &[SpectralField],
) -> Result<SmoothingReport> {
    if !(g1 <= g2 && g2.0 <= g1.0 + 1.0) {
        return domain("smoothing ratio needs γ1 <= γ2 <= γ1 + 1");
    }
    let probes: Vec<&SpectralField> = probes.iter().filter(|u| !u.is_zero()).collect();
    if probes.is_empty() || pairs.is_empty() {
        return domain("smoothing ratio needs at least one nonzero probe and one pair");
    }
    if pairs.iter().any(|(s, t)| !(s < t)) {
        return domain("smoothing ratio pairs must satisfy s < t");
    }
    let theta = g2.0 - g1.0;
    let mut report = SmoothingReport { ratio: 0.0, companion: 0.0 };
    for u in probes {
        let shape = u.shape();
        let (w1, w2) = (shape.bessel_weights(g1.0), shape.bessel_weights(g2.0));
        let (n1, n2) = (weighted_sq_norm(&w1, u.coeffs()).sqrt(), weighted_sq_norm(&w2, u.coeffs()).sqrt());
        for &(s, t) in pairs {
            let su = prop.apply(s, t, u)?;
            let h = (t - s).powf(theta);
            let r = weighted_sq_norm(&w2, su.coeffs()).sqrt() * h / n1;
            let diff: Vec<C64> = su.coeffs().iter().zip(u.coeffs()).map(|(a, b)| a - b).collect();
            let c = weighted_sq_norm(&w1, &diff).sqrt() / (h * n2);
            report.ratio = report.ratio.max(r);
            report.companion = report.companion.max(c);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn identity_diffusion(n: usize) -> DiffusionFn {
        Arc::new(move |_t, _x, out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..n {
                out[a * n + a] = 1.0;
            }
        })
    }

    #[test]
    fn identity_at_equal_times() {
        let shape = FieldShape::new(1, 4, 1).unwrap();
        let u = SpectralField::cosine_mode(shape, 0, &[2], 1.0).unwrap();
        let p = Propagator::heat(1.0);
        assert_eq!(p.apply(0.3, 0.3, &u).unwrap(), u);
        assert!(p.apply(0.4, 0.3, &u).is_err());
    }

    #[test]
    fn heat_mode_decays_by_e_at_unit_time() {
        let shape = FieldShape::new(3, 1, 1).unwrap();
        let u = SpectralField::single_mode(shape, 0, &[1, 0, 0], C64::new(1.0, 0.0)).unwrap();
        let p = Propagator::heat(1.0);
        let v = p.apply(0.0, 1.0 / (4.0 * PI * PI), &u).unwrap();
        assert_relative_eq!(v.coeff(0, &[1, 0, 0]).unwrap().re, (-1.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn divergence_form_identity_matches_heat() {
        let shape = FieldShape::new(1, 6, 1).unwrap();
        let g = GeneratorFamily::divergence_form(1, identity_diffusion(1), 1.0, false).unwrap();
        let p = Propagator::new(g, 1e-3).unwrap();
        let u = SpectralField::cosine_mode(shape, 0, &[3], 1.0)
            .unwrap()
            .axpy(0.5, &SpectralField::cosine_mode(shape, 0, &[1], 1.0).unwrap())
            .unwrap();
        let a = p.apply(0.0, 0.01, &u).unwrap();
        let b = Propagator::heat(1.0).apply(0.0, 0.01, &u).unwrap();
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            assert!((x - y).norm() <= 1e-8 * y.norm().max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn ellipticity_check_names_offending_point() {
        let bad: DiffusionFn = Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = 0.1 + x[0]);
        let g = GeneratorFamily::divergence_form(1, bad, 0.5, true).unwrap();
        let err = g.validate(FieldShape::new(1, 2, 1).unwrap(), 1.0).unwrap_err();
        assert!(err.to_string().contains("x = [0.0]"));
    }

    #[test]
    fn galerkin_form_is_dissipative() {
        let a: DiffusionFn = Arc::new(|t, x: &[f64], out: &mut [f64]| {
            out[0] = 1.0 + 0.5 * (2.0 * PI * (x[0] + t)).sin()
        });
        let shape = FieldShape::new(1, 5, 1).unwrap();
        let g = GeneratorFamily::divergence_form(1, a, 0.5, false).unwrap();
        let l = g.galerkin_matrix(0.2, shape).unwrap();
        for seed in 0..20u32 {
            let u: Vec<C64> = (0..shape.modes())
                .map(|i| C64::new(((i as u32 * 7 + seed) as f64).sin(), ((i as u32 + 3 * seed) as f64).cos()))
                .collect();
            let mut q = C64::new(0.0, 0.0);
            let mut grad = 0.0;
            for r in 0..shape.modes() {
                let k = shape.frequencies(r)[0] as f64;
                grad += 4.0 * PI * PI * k * k * u[r].norm_sqr();
                for c in 0..shape.modes() {
                    q += u[r].conj() * l[(r, c)] * u[c];
                }
            }
            assert!(q.re <= -0.5 * grad * (1.0 - 1e-10));
        }
    }

    #[test]
    fn grid_propagator_composes_steps() {
        let shape = FieldShape::new(1, 3, 2).unwrap();
        let grid = TimeGrid::uniform(0.1, 5).unwrap();
        let gp = GridPropagator::new(&Propagator::heat(0.5), &grid, shape).unwrap();
        let u = SpectralField::cosine_mode(shape, 1, &[2], 1.0).unwrap();
        let mut a = u.coeffs().to_vec();
        let mut scratch = Vec::new();
        for k in 1..4 {
            gp.advance(k, &mut a, &mut scratch);
        }
        let mut b = u.coeffs().to_vec();
        gp.apply(1, 4, &mut b, &mut scratch);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn smoothing_ratio_single_mode_matches_scalar_formula() {
        let shape = FieldShape::new(1, 3, 1).unwrap();
        let u = SpectralField::single_mode(shape, 0, &[2], C64::new(1.0, 0.0)).unwrap();
        let (s, t) = (0.0, 0.003);
        let rep = smoothing_ratio(&Propagator::heat(1.0), SpaceIndex(0.0), SpaceIndex(0.5), &[(s, t)], &[u, SpectralField::zeros(shape, true)]).unwrap();
        let lam = 16.0 * PI * PI;
        let w = 1.0 + lam;
        let want = w.sqrt() * (-lam * t).exp() * t.sqrt();
        assert_relative_eq!(rep.ratio, want, max_relative = 1e-12);
        let comp = (1.0 - (-lam * t).exp()) / (t.sqrt() * w.sqrt());
        assert_relative_eq!(rep.companion, comp, max_relative = 1e-12);
    }
}
