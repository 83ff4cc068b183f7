//! Picard iteration for mild solutions
//! `u_t = S_{0,t}ξ + ∫S f(u) dr + ∫S (Gu+g) d𝐗 + ∫S h(u) dW`
//! with interval splitting, plus the continuity and regularity probes.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::controlled::{compose, operator_family_distance, scrp_distance, ControlledEnsemble, ControlledOperatorFamily, ScrpNormReport};
use crate::convolution::{bochner_convolution, ito_convolution, rough_convolution_values};
use crate::ensemble::{BrownianDriver, SampleEnsemble};
use crate::error::{domain, shape, Error, Result};
use crate::grid::TimeGrid;
use crate::increment::Increment;
use crate::propagator::GridPropagator;
use crate::rng::{stream_rng, STREAM_TEST};
use crate::rough_path::{HolderExponents, LiftEnsemble};
use crate::sewing::loglog_slope;
use crate::spectral::{moment_term, weighted_sq_norm, FieldShape, SpectralField, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// `(node, sample, u, out)`: the coefficients of `f(t_node, ω, u)`.
pub type FieldMap = Arc<dyn Fn(usize, usize, &[C64], &mut [C64]) + Send + Sync>;

/// A nodewise map between truncated fields.
#[derive(Clone)]
pub struct Nonlinearity {
    in_channels: usize,
    out_channels: usize,
    map: FieldMap,
    offset: usize,
}

impl std::fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("in_channels", &self.in_channels)
            .field("out_channels", &self.out_channels)
            .field("offset", &self.offset)
            .finish()
    }
}

impl Nonlinearity {
    pub fn new(in_channels: usize, out_channels: usize, map: FieldMap) -> Self {
        Self { in_channels, out_channels, map, offset: 0 }
    }

    /// `u ↦ A u` for a constant `out × in` matrix acting on channels.
    pub fn linear(in_channels: usize, out_channels: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != in_channels * out_channels {
            return shape(format!("linear map needs {} entries", in_channels * out_channels));
        }
        let map: FieldMap = Arc::new(move |_, _, u: &[C64], out: &mut [C64]| {
            let modes = u.len() / in_channels;
            out.fill(ZERO);
            for r in 0..out_channels {
                for c in 0..in_channels {
                    let w = matrix[r * in_channels + c];
                    if w != 0.0 {
                        out[r * modes..(r + 1) * modes]
                            .iter_mut()
                            .zip(&u[c * modes..(c + 1) * modes])
                            .for_each(|(o, v)| *o += v * w);
                    }
                }
            }
        });
        Ok(Self::new(in_channels, out_channels, map))
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    #[inline]
    pub fn eval(&self, node: usize, sample: usize, u: &[C64], out: &mut [C64]) {
        (self.map)(node + self.offset, sample, u, out)
    }

    /// The same map seen from a window starting at node `a`.
    pub fn shifted(&self, a: usize) -> Self {
        Self { offset: self.offset + a, ..self.clone() }
    }

    /// `f(u)` at every node and sample of `u`.
    fn apply(&self, u: &SampleEnsemble) -> SampleEnsemble {
        let shape = u.shape().with_channels(self.out_channels);
        SampleEnsemble::from_fn(shape, u.grid(), u.num_samples(), u.is_real_valued(), |s, i, out| {
            self.eval(i, s, u.field(s, i), out)
        })
        .adapted(true)
    }
}

/// Scale shifts of the coefficients: `f` maps into `𝓗_{γ−λ}`, `h` into
/// `𝓗_{γ−μ}` and the forcing lives at `𝓗_{γ−ν}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleShifts {
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
}

/// A semilinear equation with a linear rough term on a fixed time grid.
#[derive(Clone, Debug)]
pub struct RspdeProblem {
    prop: Arc<GridPropagator>,
    shape: FieldShape,
    lifts: LiftEnsemble,
    driver: Option<BrownianDriver>,
    xi: Vec<SpectralField>,
    f: Option<Nonlinearity>,
    h: Option<Nonlinearity>,
    gg: ControlledOperatorFamily,
    forcing: Option<ControlledEnsemble>,
    exps: HolderExponents,
    gamma: f64,
    shifts: ScaleShifts,
    m: f64,
}

impl RspdeProblem {
    /// A problem with `G = 0`, `f = h = g = 0`. `xi` holds one field or one
    /// per sample; its shape fixes the solution channels.
    pub fn new(
        prop: Arc<GridPropagator>,
        lifts: LiftEnsemble,
        xi: Vec<SpectralField>,
        exps: HolderExponents,
        gamma: f64,
    ) -> Result<Self> {
        let Some(first) = xi.first() else {
            return domain("initial datum needs at least one sample");
        };
        let fs = first.shape();
        if xi.iter().any(|x| x.shape() != fs) {
            return shape("initial data have different shapes".to_string());
        }
        let gg = ControlledOperatorFamily::zero(fs.channels, fs.channels * lifts.dim_e(), &lifts, fs);
        Ok(Self {
            prop,
            shape: fs,
            lifts,
            driver: None,
            xi,
            f: None,
            h: None,
            gg,
            forcing: None,
            exps,
            gamma,
            shifts: ScaleShifts { lambda: 0.0, mu: 0.0, nu: 0.0 },
            m: 2.0,
        })
    }

    pub fn with_f(mut self, f: Nonlinearity, lambda: f64) -> Self {
        self.f = Some(f);
        self.shifts.lambda = lambda;
        self
    }

    pub fn with_h(mut self, h: Nonlinearity, driver: BrownianDriver, mu: f64) -> Self {
        self.h = Some(h);
        self.driver = Some(driver);
        self.shifts.mu = mu;
        self
    }

    pub fn with_operator_family(mut self, gg: ControlledOperatorFamily) -> Self {
        self.gg = gg;
        self
    }

    pub fn with_forcing(mut self, forcing: ControlledEnsemble, nu: f64) -> Self {
        self.forcing = Some(forcing);
        self.shifts.nu = nu;
        self
    }

    pub fn with_moment(mut self, m: f64) -> Self {
        self.m = m;
        self
    }

    pub fn with_initial(mut self, xi: Vec<SpectralField>) -> Self {
        self.xi = xi;
        self
    }

    pub fn propagator(&self) -> &Arc<GridPropagator> {
        &self.prop
    }

    pub fn grid(&self) -> &TimeGrid {
        self.prop.grid()
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn lifts(&self) -> &LiftEnsemble {
        &self.lifts
    }

    pub fn driver(&self) -> Option<&BrownianDriver> {
        self.driver.as_ref()
    }

    pub fn initial(&self) -> &[SpectralField] {
        &self.xi
    }

    pub fn f(&self) -> Option<&Nonlinearity> {
        self.f.as_ref()
    }

    pub fn h(&self) -> Option<&Nonlinearity> {
        self.h.as_ref()
    }

    pub fn operator_family(&self) -> &ControlledOperatorFamily {
        &self.gg
    }

    pub fn forcing(&self) -> Option<&ControlledEnsemble> {
        self.forcing.as_ref()
    }

    pub fn exps(&self) -> HolderExponents {
        self.exps
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn shifts(&self) -> ScaleShifts {
        self.shifts
    }

    pub fn moment(&self) -> f64 {
        self.m
    }

    /// Largest sample count among the random inputs.
    pub fn num_samples(&self) -> usize {
        let d = self.driver.as_ref().map_or(1, |d| d.num_samples());
        let g = self.forcing.as_ref().map_or(1, |g| g.num_samples());
        self.xi.len().max(self.lifts.len()).max(d).max(g)
    }

    fn xi_at(&self, sample: usize) -> &SpectralField {
        &self.xi[if self.xi.len() == 1 { 0 } else { sample }]
    }

    /// Checks the structural assumptions and the consistency of all inputs.
    pub fn validate(&self) -> Result<()> {
        self.exps.check_solver()?;
        let ScaleShifts { lambda, mu, nu } = self.shifts;
        if !(0.0..1.0).contains(&lambda) {
            return domain(format!("λ = {lambda} must lie in [0, 1)"));
        }
        if !(0.0..0.5).contains(&mu) {
            return domain(format!("μ = {mu} must lie in [0, 1/2)"));
        }
        if !(0.0..=self.exps.beta_prime).contains(&nu) {
            return domain(format!("ν = {nu} must lie in [0, β′ = {}]", self.exps.beta_prime));
        }
        if !(self.m >= 2.0) {
            return domain(format!("moment m = {} must be at least 2", self.m));
        }
        let grid = self.grid();
        let nodes = grid.num_nodes();
        let m = self.num_samples();
        let counts = [
            self.xi.len(),
            self.lifts.len(),
            self.driver.as_ref().map_or(1, |d| d.num_samples()),
            self.forcing.as_ref().map_or(1, |g| g.num_samples()),
        ];
        if counts.iter().any(|&k| k != 1 && k != m) {
            return shape(format!("sample counts {counts:?} are inconsistent"));
        }
        if self.lifts.grid().num_nodes() != nodes || self.prop.modes() != self.shape.modes() {
            return shape("lift, propagator and initial datum disagree on grid or truncation".to_string());
        }
        let (e1, e) = (self.shape.channels, self.lifts.dim_e());
        if self.gg.in_channels() != e1 || self.gg.out_channels() != e1 * e {
            return shape(format!("operator family must map {e1} channels to {}", e1 * e));
        }
        if self.gg.lifts().grid().num_nodes() != nodes {
            return shape("operator family lives on a different grid".to_string());
        }
        if let Some(f) = &self.f {
            if f.in_channels != e1 || f.out_channels != e1 {
                return shape(format!("f must map {e1} channels to {e1}"));
            }
        }
        match (&self.h, &self.driver) {
            (Some(h), Some(d)) => {
                if h.in_channels != e1 || h.out_channels != e1 * d.dim_d() {
                    return shape(format!("h must map {e1} channels to {}", e1 * d.dim_d()));
                }
                if d.grid().num_nodes() != nodes {
                    return shape("driver lives on a different grid".to_string());
                }
            }
            (Some(_), None) => return domain("h needs a Brownian driver"),
            _ => {}
        }
        if let Some(g) = &self.forcing {
            if g.shape() != self.shape.with_channels(e1 * e) || g.grid().num_nodes() != nodes {
                return shape("forcing must carry e1·e channels on the problem grid".to_string());
            }
            if g.lifts() != &self.lifts {
                return domain("forcing must be controlled by the problem lift");
            }
        }
        let lip = lipschitz_probe(self, 8, 0)?;
        if [lip.f_lipschitz, lip.h_lipschitz, lip.f_at_zero, lip.h_at_zero].iter().any(|v| !v.is_finite()) {
            return domain(format!("coefficient probe returned non-finite bounds: {lip:?}"));
        }
        Ok(())
    }

    /// The problem on nodes `a..=b` started from `xi` at `t_a`.
    pub fn window(&self, a: usize, b: usize, xi: Vec<SpectralField>) -> Result<Self> {
        Ok(Self {
            prop: Arc::new(self.prop.restrict(a, b)?),
            shape: self.shape,
            lifts: self.lifts.restrict(a, b)?,
            driver: self.driver.as_ref().map(|d| d.restrict(a, b)).transpose()?,
            xi,
            f: self.f.as_ref().map(|f| f.shifted(a)),
            h: self.h.as_ref().map(|h| h.shifted(a)),
            gg: self.gg.restrict(a, b)?,
            forcing: self.forcing.as_ref().map(|g| g.restrict(a, b)).transpose()?,
            exps: self.exps,
            gamma: self.gamma,
            shifts: self.shifts,
            m: self.m,
        })
    }
}

/// Sampled bounds of the coefficient assumptions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LipschitzReport {
    /// `max |f(u) − f(ū)|_{γ−λ} / |u − ū|_γ`.
    pub f_lipschitz: f64,
    /// `max |h(u) − h(ū)|_{γ−μ} / |u − ū|_γ`.
    pub h_lipschitz: f64,
    /// `max |f(0)|_{γ−λ}`.
    pub f_at_zero: f64,
    pub h_at_zero: f64,
}

fn random_real_field(shape: FieldShape, gamma: f64, rng: &mut impl Rng) -> SpectralField {
    let modes = shape.modes();
    let w = shape.bessel_weights(gamma);
    let mut c: Vec<C64> = (0..shape.len())
        .map(|i| {
            let s = 1.0 / w[i % modes].sqrt();
            C64::new(rng.sample::<f64, _>(StandardNormal) * s, rng.sample::<f64, _>(StandardNormal) * s)
        })
        .collect();
    for ch in 0..shape.channels {
        for k in 0..modes {
            let (p, q) = (ch * modes + k, ch * modes + shape.mirror(k));
            if p <= q {
                let v = 0.5 * (c[p] + c[q].conj());
                c[p] = v;
                c[q] = v.conj();
            }
        }
    }
    SpectralField::from_coeffs(shape, true, c).unwrap()
}

/// Difference quotients of `f` and `h` on `probes` random pairs at the first,
/// middle and last node.
pub fn lipschitz_probe(prob: &RspdeProblem, probes: usize, seed: u64) -> Result<LipschitzReport> {
    let mut rep = LipschitzReport::default();
    let shape = prob.shape;
    let mut rng = stream_rng(seed, STREAM_TEST, 0);
    let n = prob.grid().num_steps();
    let ScaleShifts { lambda, mu, .. } = prob.shifts;
    let gamma = prob.gamma;
    let wg = shape.bessel_weights(gamma);
    for (map, shift, lip, zero) in [
        (&prob.f, lambda, &mut rep.f_lipschitz, &mut rep.f_at_zero),
        (&prob.h, mu, &mut rep.h_lipschitz, &mut rep.h_at_zero),
    ] {
        let Some(map) = map else { continue };
        let out_shape = shape.with_channels(map.out_channels);
        let wo = out_shape.bessel_weights(gamma - shift);
        let (mut a, mut b) = (vec![ZERO; out_shape.len()], vec![ZERO; out_shape.len()]);
        let z = vec![ZERO; shape.len()];
        for node in [0, n / 2, n] {
            map.eval(node, 0, &z, &mut a);
            *zero = zero.max(weighted_sq_norm(&wo, &a).sqrt());
            for _ in 0..probes {
                let u = random_real_field(shape, gamma, &mut rng);
                let v = random_real_field(shape, gamma, &mut rng);
                map.eval(node, 0, u.coeffs(), &mut a);
                map.eval(node, 0, v.coeffs(), &mut b);
                let du: Vec<C64> = u.coeffs().iter().zip(v.coeffs()).map(|(x, y)| x - y).collect();
                let df: Vec<C64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                let den = weighted_sq_norm(&wg, &du).sqrt();
                if den > 0.0 {
                    *lip = lip.max(weighted_sq_norm(&wo, &df).sqrt() / den);
                }
            }
        }
    }
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PicardConfig {
    /// Largest subinterval length; `None` selects it by [`auto_epsilon`].
    pub epsilon: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub theta_probe: Vec<f64>,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { epsilon: None, tol: 1e-8, max_iter: 60, theta_probe: vec![0.1, 0.25, 0.4] }
    }
}

impl PicardConfig {
    fn check(&self, horizon: f64) -> Result<()> {
        if !(self.tol > 0.0) {
            return domain("tolerance must be positive");
        }
        if self.max_iter == 0 {
            return domain("max_iter must be at least 1");
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps <= horizon * (1.0 + 1e-12)) {
                return domain(format!("ε = {eps} must lie in (0, T = {horizon}]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MildSolution {
    /// `(u, u′)` with `u′ = Gu + g` at every node and sample.
    pub u: ControlledEnsemble,
    /// Successive-difference distances per subinterval.
    pub picard_trace: Vec<Vec<f64>>,
    /// Node windows `(a, b)` of the subintervals.
    pub windows: Vec<(usize, usize)>,
    pub epsilon: f64,
    pub converged: bool,
    pub solution_norm: ScrpNormReport,
    /// `sup_t ‖u_t − Φ^u_t‖_{m,γ}` with `Φ` recomputed on the whole grid.
    pub residual: f64,
}

/// `S_{0,t}ξ` at every node.
fn propagate_initial(xi: &[SpectralField], prop: &GridPropagator) -> Result<SampleEnsemble> {
    let shape = xi[0].shape();
    let grid = prop.grid();
    let real = xi.iter().all(|x| x.is_real_valued());
    let mut out = SampleEnsemble::zeros(shape, grid, xi.len(), real).adapted(true);
    let len = shape.len();
    let per = len * grid.num_nodes();
    out.data_mut().par_chunks_mut(per).zip(xi.par_iter()).for_each(|(block, x)| {
        let mut cur = x.coeffs().to_vec();
        let mut scratch = Vec::new();
        block[..len].copy_from_slice(&cur);
        for k in 0..grid.num_steps() {
            prop.advance(k, &mut cur, &mut scratch);
            block[(k + 1) * len..(k + 2) * len].copy_from_slice(&cur);
        }
    });
    Ok(out)
}

/// `G_0ξ + g_0` for one sample.
fn initial_derivative(prob: &RspdeProblem, sample: usize, out: &mut [C64]) {
    let modes = prob.shape.modes();
    let gg = &prob.gg;
    gg.g().apply(gg.collocation(), modes, 0, sample, prob.xi_at(sample).coeffs(), out);
    if let Some(g) = &prob.forcing {
        let gs = if g.y().num_samples() == 1 { 0 } else { sample };
        out.iter_mut().zip(g.y().field(gs, 0)).for_each(|(o, v)| *o += v);
    }
}

/// The starting pair `u_t = ξ + (G_0ξ + g_0)δX_{0,t}`, `u′ = G_0ξ + g_0`.
pub fn initial_iterate(prob: &RspdeProblem) -> Result<ControlledEnsemble> {
    let grid = prob.grid();
    let shape = prob.shape;
    let e = prob.lifts.dim_e();
    let e1 = shape.channels;
    let modes = shape.modes();
    let yp_shape = shape.with_channels(e1 * e);
    let samples = prob.num_samples();
    let real = prob.xi.iter().all(|x| x.is_real_valued()) && prob.forcing.as_ref().is_none_or(|g| g.y().is_real_valued());
    let y0: Vec<Vec<C64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut out = vec![ZERO; yp_shape.len()];
            initial_derivative(prob, s, &mut out);
            out
        })
        .collect();
    let y = SampleEnsemble::from_fn(shape, grid, samples, real, |s, i, out| {
        out.copy_from_slice(prob.xi_at(s).coeffs());
        let x = prob.lifts.get(s).x(i);
        for c in 0..e1 {
            for (a, xa) in x.iter().enumerate() {
                if *xa != 0.0 {
                    let src = &y0[s][(c * e + a) * modes..(c * e + a + 1) * modes];
                    out[c * modes..(c + 1) * modes].iter_mut().zip(src).for_each(|(o, v)| *o += v * *xa);
                }
            }
        }
    })
    .adapted(true);
    let yp = SampleEnsemble::from_fn(yp_shape, grid, samples, real, |s, _, out| out.copy_from_slice(&y0[s])).adapted(true);
    ControlledEnsemble::new(y, yp, &prob.lifts, prob.gamma, prob.exps)
}

/// The pieces of one application of the solution map.
struct PicardParts {
    u: SampleEnsemble,
    y: ControlledEnsemble,
    martingale: Increment,
}

fn same_field(a: &[C64], b: &[C64]) -> bool {
    let scale = a.iter().chain(b).map(|c| c.norm()).fold(1.0, f64::max);
    a.iter().zip(b).all(|(x, y)| (x - y).norm() <= 1e-12 * scale)
}

fn sum_ensembles(parts: Vec<SampleEnsemble>) -> Result<SampleEnsemble> {
    let m = parts.iter().map(|p| p.num_samples()).max().unwrap();
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap().broadcast(m)?;
    for p in iter {
        if p.is_zero() {
            continue;
        }
        acc = acc.combine(1.0, &p.broadcast(m)?, 1.0)?;
    }
    Ok(acc)
}

fn picard_parts(prob: &RspdeProblem, cur: &ControlledEnsemble) -> Result<PicardParts> {
    if cur.shape() != prob.shape || cur.grid().num_nodes() != prob.grid().num_nodes() {
        return shape("iterate does not match the problem shape or grid".to_string());
    }
    let mut y = compose(&prob.gg, cur)?;
    if let Some(g) = &prob.forcing {
        y = y.combine(1.0, g, 1.0)?;
    }
    let y = y.with_gamma(prob.gamma - prob.shifts.nu);
    for s in 0..cur.num_samples() {
        let us = if cur.y().num_samples() == 1 { 0 } else { s };
        if !same_field(cur.y().field(us, 0), prob.xi_at(s).coeffs()) {
            return domain(format!("iterate violates u₀ = ξ in sample {s}"));
        }
        let ps = if cur.y_prime().num_samples() == 1 { 0 } else { s };
        let ys = if y.y().num_samples() == 1 { 0 } else { s };
        if !same_field(cur.y_prime().field(ps, 0), y.y().field(ys, 0)) {
            return domain(format!("iterate violates u′₀ = G₀ξ + g₀ in sample {s}"));
        }
    }
    let prop = &*prob.prop;
    let mut parts = vec![propagate_initial(&prob.xi, prop)?];
    let mut martingale = Increment::zero(prob.shape.channels);
    if !(y.y().is_zero() && y.y_prime().is_zero()) {
        let z = Arc::new(rough_convolution_values(&y, prop)?.adapted(true));
        if prob.lifts.is_martingale() {
            martingale = martingale.plus(Increment::Mild(z.clone())).minus(Increment::Linear {
                coeff: y.y_arc().clone(),
                lifts: prob.lifts.clone(),
                propagated: false,
            });
        }
        parts.push((*z).clone());
    }
    if let Some(f) = &prob.f {
        parts.push(bochner_convolution(&f.apply(cur.y()), prop)?);
    }
    if let (Some(h), Some(drv)) = (&prob.h, &prob.driver) {
        let hu = Arc::new(ito_convolution(&h.apply(cur.y()), drv, prop)?);
        martingale = martingale.plus(Increment::Mild(hu.clone()));
        parts.push((*hu).clone());
    }
    let u = sum_ensembles(parts)?.adapted(true);
    Ok(PicardParts { u, y, martingale })
}

impl PicardParts {
    fn assemble(self, prob: &RspdeProblem) -> Result<ControlledEnsemble> {
        let yp = (*self.y.y_arc().clone()).clone();
        let m = self.u.num_samples().max(yp.num_samples());
        let out = ControlledEnsemble::new(self.u.broadcast(m)?, yp.broadcast(m)?, &prob.lifts, prob.gamma, prob.exps)?;
        if self.martingale.is_trivially_zero() {
            Ok(out)
        } else {
            Ok(out.with_martingale(self.martingale, prob.prop.clone()))
        }
    }
}

/// `Φ(u, u′) = (S_{0,·}ξ + F + Z + H, Gu + g)`.
pub fn picard_map(prob: &RspdeProblem, current: &ControlledEnsemble) -> Result<ControlledEnsemble> {
    picard_parts(prob, current)?.assemble(prob)
}

/// Picard iterates on one window; returns the last iterate, the trace and
/// whether the tolerance was met.
fn iterate_window(prob: &RspdeProblem, cfg: &PicardConfig) -> Result<(ControlledEnsemble, Vec<f64>, bool)> {
    let mut cur = initial_iterate(prob)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut rises = 0;
    for _ in 0..cfg.max_iter {
        let next = picard_map(prob, &cur)?;
        let d = scrp_distance(&next, &cur, prob.m)?.total;
        if !d.is_finite() {
            trace.push(d);
            return Err(Error::NonContraction { trace });
        }
        if trace.last().is_some_and(|&last| d > last) {
            rises += 1;
        } else {
            rises = 0;
        }
        trace.push(d);
        cur = next;
        if rises >= 3 {
            return Err(Error::NonContraction { trace });
        }
        if d <= cfg.tol {
            return Ok((cur, trace, true));
        }
    }
    Ok((cur, trace, false))
}

/// Greedy node windows of time length at most `eps`, each at least one step.
pub fn partition(grid: &TimeGrid, eps: f64) -> Vec<(usize, usize)> {
    let n = grid.num_steps();
    let mut out = Vec::new();
    let mut a = 0;
    while a < n {
        let mut b = a + 1;
        while b < n && grid.node(b + 1) - grid.node(a) <= eps * (1.0 + 1e-12) {
            b += 1;
        }
        out.push((a, b));
        a = b;
    }
    out
}

fn terminal_fields(u: &SampleEnsemble) -> Vec<SpectralField> {
    let last = u.num_nodes() - 1;
    (0..u.num_samples()).map(|s| u.to_field(s, last)).collect()
}

/// `u′ = Gu + g` for a given `u`.
fn derivative_of(prob: &RspdeProblem, u: &SampleEnsemble) -> Result<SampleEnsemble> {
    let gu = prob.gg.apply_g(u)?;
    match &prob.forcing {
        Some(g) => {
            let m = gu.num_samples().max(g.num_samples());
            gu.broadcast(m)?.combine(1.0, &g.y().broadcast(m)?, 1.0)
        }
        None => Ok(gu),
    }
}

/// Solves on subintervals of length at most `ε`, chaining terminal values.
pub fn solve_rspde(prob: &RspdeProblem, cfg: &PicardConfig) -> Result<MildSolution> {
    prob.validate()?;
    let grid = prob.grid().clone();
    cfg.check(grid.horizon() - grid.start())?;
    let epsilon = match cfg.epsilon {
        Some(e) => e,
        None => auto_epsilon(prob)?,
    };
    let auto = cfg.epsilon.is_none();
    let mut pending: VecDeque<(usize, usize)> = partition(&grid, epsilon).into();
    let mut windows = Vec::with_capacity(pending.len());
    let mut xi = prob.xi.clone();
    let mut pieces: Vec<SampleEnsemble> = Vec::with_capacity(pending.len());
    let mut picard_trace = Vec::with_capacity(pending.len());
    let mut converged = true;
    while let Some((a, b)) = pending.pop_front() {
        let w = prob.window(a, b, xi.clone())?;
        let (u, trace, ok) = match iterate_window(&w, cfg) {
            Ok(r) => r,
            Err(Error::NonContraction { .. }) if auto && b - a >= 2 => {
                split_window(&mut pending, a, b);
                continue;
            }
            Err(Error::NonContraction { trace }) => {
                let mut all: Vec<f64> = picard_trace.iter().flat_map(|t: &Vec<f64>| t.iter().copied()).collect();
                all.extend(trace);
                return Err(Error::NonContraction { trace: all });
            }
            Err(e) => return Err(e),
        };
        // The automatic policy refines any window that contracts by less than one half per step.
        if auto && b - a >= 2 && max_trace_ratio(&trace, cfg.tol) > 0.5 {
            split_window(&mut pending, a, b);
            continue;
        }
        converged &= ok;
        xi = terminal_fields(u.y());
        windows.push((a, b));
        picard_trace.push(trace);
        pieces.push(u.y().clone());
    }
    let epsilon = windows.iter().map(|&(a, b)| grid.node(b) - grid.node(a)).fold(0.0, f64::max);
    let samples = pieces.iter().map(|p| p.num_samples()).max().unwrap();
    let pieces: Vec<SampleEnsemble> = pieces.into_iter().map(|p| p.broadcast(samples)).collect::<Result<_>>()?;
    let real = pieces.iter().all(|p| p.is_real_valued());
    let owner: Vec<(usize, usize)> = {
        let mut v = vec![(0, 0); grid.num_nodes()];
        for (w, &(a, b)) in windows.iter().enumerate() {
            for (i, slot) in v.iter_mut().enumerate().take(b + 1).skip(a) {
                *slot = (w, i - a);
            }
        }
        v
    };
    let u = SampleEnsemble::from_fn(prob.shape, &grid, samples, real, |s, i, out| {
        let (w, local) = owner[i];
        out.copy_from_slice(pieces[w].field(s, local))
    })
    .adapted(true);
    let u_prime = derivative_of(prob, &u)?;
    let m = samples.max(u_prime.num_samples());
    let pair = ControlledEnsemble::new(u.broadcast(m)?, u_prime.broadcast(m)?, &prob.lifts, prob.gamma, prob.exps)?;
    let parts = picard_parts(prob, &pair)?;
    let mm = m.max(parts.u.num_samples());
    let residual = pair.y().broadcast(mm)?.combine(1.0, &parts.u.broadcast(mm)?, -1.0)?.lm_sup_norm(prob.m, prob.gamma);
    let u = if parts.martingale.is_trivially_zero() {
        pair
    } else {
        pair.with_martingale(parts.martingale, prob.prop.clone())
    };
    let solution_norm = u.scrp_norm(prob.m)?;
    Ok(MildSolution { u, picard_trace, windows, epsilon, converged, solution_norm, residual })
}

fn split_window(pending: &mut VecDeque<(usize, usize)>, a: usize, b: usize) {
    let mid = a + (b - a) / 2;
    pending.push_front((mid, b));
    pending.push_front((a, mid));
}

/// Largest ratio `d_{k+1}/d_k` of successive Picard differences, over the
/// steps that start above `floor`.
pub fn max_trace_ratio(trace: &[f64], floor: f64) -> f64 {
    trace.windows(2).filter(|p| p[0] > floor).map(|p| p[1] / p[0]).fold(0.0, f64::max)
}

/// Halves `ε` from `T` until two further Picard steps on the first window
/// contract by at least one half each.
pub fn auto_epsilon(prob: &RspdeProblem) -> Result<f64> {
    let grid = prob.grid();
    let mut eps = grid.horizon() - grid.start();
    loop {
        let (a, b) = partition(grid, eps)[0];
        let w = prob.window(a, b, prob.xi.clone())?;
        let u0 = initial_iterate(&w)?;
        let u1 = picard_map(&w, &u0)?;
        let u2 = picard_map(&w, &u1)?;
        let u3 = picard_map(&w, &u2)?;
        let d1 = scrp_distance(&u1, &u0, w.m)?.total;
        let d2 = scrp_distance(&u2, &u1, w.m)?.total;
        let d3 = scrp_distance(&u3, &u2, w.m)?.total;
        let ratio = |x: f64, y: f64| if y <= 1e-14 * d1.max(1e-300) || y == 0.0 { 0.0 } else { x / y };
        let ok = ratio(d2, d1) <= 0.5 && ratio(d3, d2) <= 0.5 && d3.is_finite();
        if ok || b - a == 1 {
            return Ok(eps.min(grid.node(b) - grid.node(a)));
        }
        eps *= 0.5;
    }
}

/// `‖Φ(u, u′) − (u, u′)‖` for a computed solution on the whole grid.
pub fn fixed_point_residual(prob: &RspdeProblem, sol: &MildSolution) -> Result<f64> {
    let next = picard_map(prob, &sol.u)?;
    Ok(scrp_distance(&next, &sol.u, prob.m)?.total)
}

fn lm_of_fields(fields: &[SpectralField], m: f64, gamma: f64) -> f64 {
    let w = fields[0].shape().bessel_weights(gamma);
    let sum: f64 = fields.iter().map(|f| moment_term(weighted_sq_norm(&w, f.coeffs()), m)).sum();
    (sum / fields.len() as f64).powf(1.0 / m)
}

/// Size of the data: `‖ξ‖_{m,γ} + ‖f(·,0)‖_{0,m,γ−λ} + ‖h(·,0)‖_{0,m,γ−μ} + ‖g, g′‖`.
pub fn apriori_rhs(prob: &RspdeProblem) -> Result<f64> {
    let m = prob.m;
    let mut total = lm_of_fields(&prob.xi, m, prob.gamma);
    let samples = prob.num_samples();
    let zero = SampleEnsemble::zeros(prob.shape, prob.grid(), samples, true);
    if let Some(f) = &prob.f {
        total += f.apply(&zero).lm_sup_norm(m, prob.gamma - prob.shifts.lambda);
    }
    if let Some(h) = &prob.h {
        total += h.apply(&zero).lm_sup_norm(m, prob.gamma - prob.shifts.mu);
    }
    if let Some(g) = &prob.forcing {
        total += g.scrp_norm(m)?.total;
    }
    Ok(total)
}

/// Distance of two solutions and the data distance
/// `ρ_α(𝐗,𝐗̄) + ‖Δξ‖_{m,γ} + ‖G,G′;Ḡ,Ḡ′‖ + ‖g,g′;ḡ,ḡ′‖` it is controlled by.
pub fn solution_map_distance(p1: &RspdeProblem, p2: &RspdeProblem, cfg: &PicardConfig) -> Result<(f64, f64)> {
    if p1.grid() != p2.grid() || p1.shape != p2.shape {
        return shape("problems differ in grid or shape".to_string());
    }
    let s1 = solve_rspde(p1, cfg)?;
    let s2 = solve_rspde(p2, cfg)?;
    let dist = scrp_distance(&s1.u, &s2.u, p1.m)?.total;
    let exps = p1.exps;
    let rho = p1.lifts.distance(&p2.lifts, exps.alpha)?;
    let n = p1.xi.len().max(p2.xi.len());
    let dxi: Vec<SpectralField> = (0..n).map(|s| p1.xi_at(s).axpy(-1.0, p2.xi_at(s))).collect::<Result<_>>()?;
    let dxi = lm_of_fields(&dxi, p1.m, p1.gamma);
    let dg = operator_family_distance(&p1.gg, &p2.gg, p1.gamma, exps)?.total;
    let dforce = match (&p1.forcing, &p2.forcing) {
        (None, None) => 0.0,
        (Some(a), Some(b)) => scrp_distance(a, b, p1.m)?.total,
        (Some(a), None) | (None, Some(a)) => a.scrp_norm(p1.m)?.total,
    };
    Ok((dist, rho + dxi + dg + dforce))
}

/// One row of the spatial-regularity table.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularityRow {
    pub theta: f64,
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// Least-squares slope of `log ‖u_t‖_{m,γ+θ}` against `log t`.
    pub slope: f64,
}

/// Nodes `2^k`, `k = 0..=6`, that lie on a grid with `num_steps` steps.
pub fn regularity_ladder(num_steps: usize) -> Vec<usize> {
    (0..=6).map(|k| 1usize << k).filter(|&i| i <= num_steps).collect()
}

/// Fits the blow-up exponent of `‖u_t‖_{m,γ+θ}` as `t → 0` for each `θ`.
pub fn spatial_regularity_probe(sol: &MildSolution, prob: &RspdeProblem, thetas: &[f64]) -> Result<Vec<RegularityRow>> {
    if thetas.is_empty() {
        return domain("regularity probe needs at least one θ");
    }
    let ScaleShifts { lambda, mu, nu } = prob.shifts;
    let bound = (1.0 - lambda).min(0.5 - mu).min(prob.exps.alpha - nu);
    if let Some(t) = thetas.iter().find(|t| !(**t >= 0.0 && **t < bound)) {
        return domain(format!("θ = {t} must lie in [0, {bound})"));
    }
    regularity_rows(sol.u.y(), prob.m, prob.gamma, thetas)
}

/// Regularity table of an ensemble on the ladder nodes, in units where the
/// ensemble lives at scale `gamma`.
pub fn regularity_rows(u: &SampleEnsemble, m: f64, gamma: f64, thetas: &[f64]) -> Result<Vec<RegularityRow>> {
    let grid = u.grid();
    let ladder = regularity_ladder(grid.num_steps());
    if ladder.len() < 2 {
        return domain("grid too coarse for the regularity ladder");
    }
    let times: Vec<f64> = ladder.iter().map(|&i| grid.node(i) - grid.start()).collect();
    Ok(thetas
        .iter()
        .map(|&theta| {
            let norms: Vec<f64> = ladder.iter().map(|&i| u.lm_norm_at(i, m, gamma + theta)).collect();
            let slope = if norms.iter().all(|v| *v > 0.0) { loglog_slope(&times, &norms) } else { 0.0 };
            RegularityRow { theta, times: times.clone(), norms, slope }
        })
        .collect())
}

/// The probe for pure propagation `u_t = S_{0,t}ξ`, where no Picard
/// iteration is needed.
pub fn propagation_regularity_probe(prop: &GridPropagator, xi: &SpectralField, thetas: &[f64]) -> Result<Vec<RegularityRow>> {
    if thetas.iter().any(|t| !(*t >= 0.0 && *t < 0.5)) {
        return domain("θ must lie in [0, 1/2)");
    }
    let u = propagate_initial(std::slice::from_ref(xi), prop)?;
    regularity_rows(&u, 2.0, 0.0, thetas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controlled::MultiplicationSymbol;
    use crate::propagator::{GeneratorFamily, Propagator};
    use crate::rough_path::lift_smooth;
    use approx::assert_relative_eq;

    fn exps() -> HolderExponents {
        HolderExponents::new(0.45, 0.4, 0.3).unwrap()
    }

    fn scalar_problem(n: usize, c: f64, lam: f64) -> RspdeProblem {
        let shape = FieldShape::new(1, 0, 1).unwrap();
        let grid = TimeGrid::uniform(0.5, n).unwrap();
        let gen = GeneratorFamily::constant_multiplier(Arc::new(move |_: &[i64]| lam));
        let prop = Arc::new(GridPropagator::new(&Propagator::new(gen, 1.0).unwrap(), &grid, shape).unwrap());
        let lift = lift_smooth(&|t, x: &mut [f64]| x[0] = (2.0 * std::f64::consts::PI * t).sin(), &grid, 1, 8).unwrap();
        let lifts = LiftEnsemble::shared(lift);
        let xi = SpectralField::constant(shape, &[1.5]).unwrap();
        let gg = ControlledOperatorFamily::new(MultiplicationSymbol::constant(1, 1, vec![c]).unwrap(), MultiplicationSymbol::zero(1, 1), &lifts, shape).unwrap();
        RspdeProblem::new(prop, lifts, vec![xi], exps(), 0.0).unwrap().with_operator_family(gg)
    }

    #[test]
    fn zero_data_gives_zero() {
        let mut p = scalar_problem(32, 0.7, -1.0);
        p.xi = vec![SpectralField::zeros(p.shape, true)];
        let sol = solve_rspde(&p, &PicardConfig { epsilon: Some(0.5), ..Default::default() }).unwrap();
        assert!(sol.u.y().is_zero() && sol.u.y_prime().is_zero());
        assert_eq!(sol.residual, 0.0);
    }

    #[test]
    fn pure_propagation_is_fixed_after_one_step() {
        let p = scalar_problem(16, 0.0, -2.0);
        let u0 = initial_iterate(&p).unwrap();
        let u1 = picard_map(&p, &u0).unwrap();
        let u2 = picard_map(&p, &u1).unwrap();
        assert_eq!(u1.y(), u2.y());
        for i in 0..=16 {
            assert_relative_eq!(u1.y().field(0, i)[0].re, 1.5 * (-2.0 * p.grid().node(i)).exp(), max_relative = 1e-14);
        }
    }

    #[test]
    fn scalar_linear_mode_matches_closed_form() {
        let (c, lam) = (0.5, -1.0);
        let p = scalar_problem(1 << 9, c, lam);
        let cfg = PicardConfig { tol: 1e-11, ..Default::default() };
        let sol = solve_rspde(&p, &cfg).unwrap();
        assert!(sol.converged);
        let n = p.grid().num_steps();
        let want = 1.5 * (lam * 0.5 + c * p.lifts().get(0).x(n)[0]).exp();
        assert_relative_eq!(sol.u.y().field(0, n)[0].re, want, max_relative = 1e-3);
        for i in 0..=n {
            assert_eq!(sol.u.y_prime().field(0, i)[0], sol.u.y().field(0, i)[0] * c);
        }
        assert!(sol.residual < 1e-9);
    }

    #[test]
    fn initial_data_mismatch_is_rejected() {
        let p = scalar_problem(8, 0.3, -1.0);
        let u0 = initial_iterate(&p).unwrap();
        let bad = u0.combine(2.0, &u0, 0.0).unwrap();
        assert!(matches!(picard_map(&p, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn chained_and_direct_solutions_agree() {
        let p = scalar_problem(64, 0.5, -1.0);
        let tol = 1e-10;
        let a = solve_rspde(&p, &PicardConfig { epsilon: Some(0.5), tol, ..Default::default() }).unwrap();
        let b = solve_rspde(&p, &PicardConfig { epsilon: Some(0.125), tol, ..Default::default() }).unwrap();
        assert_eq!(b.windows.len(), 4);
        let d = scrp_distance(&a.u, &b.u, 2.0).unwrap().total;
        assert!(d <= 3.0 * tol, "{d}");
    }

    #[test]
    fn partition_covers_grid() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(partition(&grid, 0.35), vec![(0, 3), (3, 6), (6, 9), (9, 10)]);
        assert_eq!(partition(&grid, 0.01), (0..10).map(|i| (i, i + 1)).collect::<Vec<_>>());
    }

    #[test]
    fn regularity_probe_rejects_bad_thetas() {
        let p = scalar_problem(64, 0.0, -0.05);
        let sol = solve_rspde(&p, &PicardConfig { epsilon: Some(0.5), ..Default::default() }).unwrap();
        assert!(spatial_regularity_probe(&sol, &p, &[]).is_err());
        assert!(spatial_regularity_probe(&sol, &p, &[0.6]).is_err());
        let rows = spatial_regularity_probe(&sol, &p, &[0.0]).unwrap();
        assert!(rows[0].slope >= -0.1);
    }
}
