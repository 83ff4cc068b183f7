//! The concrete equation on the torus `Tⁿ`:
//! `du = ∇·(a∇u) dt + f(t,x,u,∇u) dt + (Gu + g) d𝐗 + h(t,x,u) dW`,
//! realized on a spectral Galerkin space, and named benchmark scenarios.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::controlled::{ControlledEnsemble, ControlledOperatorFamily, MultiplicationSymbol};
use crate::ensemble::{mean_and_stderr, BrownianDriver, SampleEnsemble};
use crate::error::{domain, shape, Result};
use crate::grid::TimeGrid;
use crate::propagator::{DiffusionFn, GeneratorFamily, GridPropagator, Propagator};
use crate::rough_path::{lift_smooth, BrownianMode, HolderExponents, LiftEnsemble};
use crate::solver::{FieldMap, MildSolution, Nonlinearity, PicardConfig, RspdeProblem};
use crate::spectral::{FieldShape, SpectralField, C64};
use crate::transform::Collocation;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// `(t, x, u, ∇u, out)`: `∇u` holds `∂_a u^c` at `c·n + a`; writes `e1` values.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, u, out)`: writes `e1·d` values, `(c, a)` at `c·d + a`.
pub type NoiseFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, out)`: a row-major matrix field.
pub type MatrixFieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, g, g′)`: forcing values with `e1·e` and `e1·e·e` entries.
pub type ForcingFn = Arc<dyn Fn(f64, &[f64], &mut [f64], &mut [f64]) + Send + Sync>;
pub type PathFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum Diffusion {
    /// `a = κ I`, realized by the constant-multiplier heat propagator.
    Heat { kappa: f64 },
    DivergenceForm { a: DiffusionFn, ellipticity: f64, autonomous: bool },
}

#[derive(Clone)]
pub enum LiftSpec {
    /// The zero path in `e` dimensions.
    Zero,
    Smooth { path: PathFn, fine_factor: usize },
    Brownian { mode: BrownianMode, fine_factor: usize },
    Fbm { hurst: f64, refine_level: u32 },
}

/// Reference values a scenario can be checked against.
#[derive(Clone, Debug, PartialEq)]
pub enum Oracle {
    None,
    /// `G = c`, heat generator, `f = h = g = 0`: every mode solves
    /// `u_k(t) = ξ_k e^{λ_k t + c X_t}`.
    LinearRough { c: f64 },
    /// `h = σu` on the heat generator: `E|u_T(k)|² = |ξ_k|² e^{(2λ_k + σ²)T}`.
    GbmMoment { sigma: f64, k: Vec<i64> },
}

/// Coefficients of the torus equation plus the discretization and seeds of a
/// reproducible scenario.
#[derive(Clone)]
pub struct TorusProblemSpec {
    pub name: String,
    pub dim_n: usize,
    pub trunc_k: usize,
    pub channels: usize,
    pub diffusion: Diffusion,
    pub f_spec: Option<DriftFn>,
    /// Noise dimension `d` and `h`.
    pub h_spec: Option<(usize, NoiseFn)>,
    /// `G`: `e1·e × e1` matrices; the flag marks symbols constant in `x`.
    pub g_sym: Option<(bool, MatrixFieldFn)>,
    /// `G′`: `e1·e·e × e1` matrices.
    pub g_sym_prime: Option<MatrixFieldFn>,
    pub g_pair: Option<ForcingFn>,
    pub xi: SpectralField,
    pub dim_e: usize,
    pub horizon: f64,
    pub num_steps: usize,
    pub num_samples: usize,
    pub lift: LiftSpec,
    pub exps: HolderExponents,
    pub m: f64,
    pub seed: u64,
    pub picard: PicardConfig,
    pub oracle: Oracle,
}

impl std::fmt::Debug for TorusProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TorusProblemSpec")
            .field("name", &self.name)
            .field("dim_n", &self.dim_n)
            .field("trunc_k", &self.trunc_k)
            .field("num_steps", &self.num_steps)
            .field("num_samples", &self.num_samples)
            .field("oracle", &self.oracle)
            .finish()
    }
}

/// Scale shift of `f` for a drift depending on `∇u`: `H^{-1} = 𝓗_{-1/2}`.
pub const TORUS_LAMBDA: f64 = 0.5;

impl TorusProblemSpec {
    pub fn shape(&self) -> Result<FieldShape> {
        FieldShape::new(self.dim_n, self.trunc_k, self.channels)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.num_steps)
    }

    pub fn generator(&self) -> Result<GeneratorFamily> {
        match &self.diffusion {
            Diffusion::Heat { kappa } => Ok(GeneratorFamily::heat(*kappa)),
            Diffusion::DivergenceForm { a, ellipticity, autonomous } => {
                GeneratorFamily::divergence_form(self.dim_n, a.clone(), *ellipticity, *autonomous)
            }
        }
    }

    /// The lift ensemble and Brownian driver drawn from `seed`.
    pub fn sample_inputs(&self, seed: u64) -> Result<(LiftEnsemble, Option<BrownianDriver>)> {
        let grid = self.grid()?;
        let e = self.dim_e;
        let m = self.num_samples;
        let lifts = match &self.lift {
            LiftSpec::Zero => LiftEnsemble::zero(&grid, e),
            LiftSpec::Smooth { path, fine_factor } => {
                let p = path.clone();
                LiftEnsemble::shared(lift_smooth(&move |t, x: &mut [f64]| p(t, x), &grid, e, *fine_factor)?)
            }
            LiftSpec::Brownian { mode, fine_factor } => LiftEnsemble::brownian(seed, &grid, e, *mode, *fine_factor, m)?,
            LiftSpec::Fbm { hurst, refine_level } => LiftEnsemble::fbm(seed, &grid, e, *hurst, *refine_level, m)?,
        };
        let driver = match &self.h_spec {
            Some((d, _)) => Some(BrownianDriver::sample(seed, &grid, *d, m)?),
            None => None,
        };
        Ok((lifts, driver))
    }

    /// [`build_problem`] with inputs drawn from the scenario seed.
    pub fn problem(&self) -> Result<RspdeProblem> {
        let (lifts, driver) = self.sample_inputs(self.seed)?;
        build_problem(self, &lifts, driver, self.exps, self.m)
    }
}

/// Physical values of each channel and of its gradient at the collocation points.
struct PhysicalState {
    u: Vec<Vec<C64>>,
    grad: Vec<Vec<C64>>,
}

fn to_physical(col: &Collocation, shape: FieldShape, coeffs: &[C64], with_grad: bool) -> PhysicalState {
    let modes = shape.modes();
    let n = shape.dim_n;
    let mut u = Vec::with_capacity(shape.channels);
    let mut grad = Vec::new();
    let mut d = vec![ZERO; modes];
    for c in 0..shape.channels {
        let src = &coeffs[c * modes..(c + 1) * modes];
        let mut v = Vec::new();
        col.to_physical(src, &mut v);
        u.push(v);
        if with_grad {
            for a in 0..n {
                Collocation::derivative(shape.with_channels(1), a, src, &mut d);
                let mut g = Vec::new();
                col.to_physical(&d, &mut g);
                grad.push(g);
            }
        }
    }
    PhysicalState { u, grad }
}

/// Evaluates `kernel(x, u, ∇u, out)` at the collocation points and projects
/// the `out_channels` results back onto the truncation.
fn collocate(
    col: &Collocation,
    shape: FieldShape,
    out_channels: usize,
    coeffs: &[C64],
    with_grad: bool,
    kernel: &dyn Fn(&[f64], &[f64], &[f64], &mut [f64]),
    out: &mut [C64],
) {
    let state = to_physical(col, shape, coeffs, with_grad);
    let (e1, n) = (shape.channels, shape.dim_n);
    let np = col.num_points();
    let mut phys = vec![vec![ZERO; np]; out_channels];
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; e1];
    let mut g = vec![0.0; if with_grad { e1 * n } else { 0 }];
    let mut v = vec![0.0; out_channels];
    for p in 0..np {
        col.point(p, &mut x);
        for c in 0..e1 {
            u[c] = state.u[c][p].re;
        }
        for (q, gq) in g.iter_mut().enumerate() {
            *gq = state.grad[q][p].re;
        }
        kernel(&x, &u, &g, &mut v);
        for (r, val) in v.iter().enumerate() {
            phys[r][p] = C64::new(*val, 0.0);
        }
    }
    let modes = shape.modes();
    for (r, vals) in phys.iter_mut().enumerate() {
        col.from_physical(vals, &mut out[r * modes..(r + 1) * modes]);
    }
}

/// Spectral fields of a matrix-free `(t, x)` function with `channels` outputs.
fn project_field(col: &Collocation, shape: FieldShape, channels: usize, f: &mut dyn FnMut(&[f64], &mut [f64]), out: &mut [C64]) {
    let np = col.num_points();
    let mut phys = vec![vec![ZERO; np]; channels];
    let mut x = vec![0.0; shape.dim_n];
    let mut v = vec![0.0; channels];
    for p in 0..np {
        col.point(p, &mut x);
        f(&x, &mut v);
        for (r, val) in v.iter().enumerate() {
            phys[r][p] = C64::new(*val, 0.0);
        }
    }
    let modes = shape.modes();
    for (r, vals) in phys.iter_mut().enumerate() {
        col.from_physical(vals, &mut out[r * modes..(r + 1) * modes]);
    }
}

/// Wires the torus coefficients into a solver problem at `γ = 0`,
/// `λ = 1/2`, `μ = ν = 0`.
pub fn build_problem(
    spec: &TorusProblemSpec,
    lifts: &LiftEnsemble,
    driver: Option<BrownianDriver>,
    exps: HolderExponents,
    m: f64,
) -> Result<RspdeProblem> {
    let shape = spec.shape()?;
    if spec.xi.shape() != shape {
        return shape_mismatch("initial datum does not match the spec truncation");
    }
    let grid = lifts.grid().clone();
    if lifts.dim_e() != spec.dim_e {
        return shape_mismatch("lift dimension differs from the spec");
    }
    let generator = spec.generator()?;
    generator.validate(shape, grid.horizon())?;
    let substep = grid.max_step();
    let prop = Arc::new(GridPropagator::new(&Propagator::new(generator, substep)?, &grid, shape)?);
    let col = Arc::new(Collocation::for_products(spec.dim_n, spec.trunc_k));
    let (e1, e, n) = (spec.channels, spec.dim_e, spec.dim_n);
    let mut prob = RspdeProblem::new(prop, lifts.clone(), vec![spec.xi.clone()], exps, 0.0)?.with_moment(m);
    if let Some(f) = &spec.f_spec {
        let (f, col, nodes) = (f.clone(), col.clone(), grid.nodes().to_vec());
        let map: FieldMap = Arc::new(move |node, _s, u: &[C64], out: &mut [C64]| {
            let t = nodes[node];
            collocate(&col, shape, e1, u, true, &|x, u, g, o| f(t, x, u, g, o), out)
        });
        prob = prob.with_f(Nonlinearity::new(e1, e1, map), TORUS_LAMBDA);
    }
    if let Some((d, h)) = &spec.h_spec {
        let Some(driver) = driver else {
            return domain("noise coefficient needs a Brownian driver");
        };
        if driver.dim_d() != *d {
            return shape_mismatch("driver dimension differs from the noise coefficient");
        }
        let (h, col, nodes, d) = (h.clone(), col.clone(), grid.nodes().to_vec(), *d);
        let map: FieldMap = Arc::new(move |node, _s, u: &[C64], out: &mut [C64]| {
            let t = nodes[node];
            collocate(&col, shape, e1 * d, u, false, &|x, u, _g, o| h(t, x, u, o), out)
        });
        prob = prob.with_h(Nonlinearity::new(e1, e1 * d, map), driver, 0.0);
    }
    let nodes = Arc::new(grid.nodes().to_vec());
    let symbol = |rows: usize, space_constant: bool, f: &MatrixFieldFn| {
        let (f, nodes) = (f.clone(), nodes.clone());
        MultiplicationSymbol::function(
            rows,
            e1,
            space_constant,
            Arc::new(move |node, _s, x: &[f64], out: &mut [f64]| f(nodes[node], x, out)),
        )
    };
    let g = match &spec.g_sym {
        Some((true, f)) => {
            let mut mat = vec![0.0; e1 * e * e1];
            f(0.0, &vec![0.0; n], &mut mat);
            if spec.g_sym_prime.is_none() && time_constant(f, &grid, n, e1 * e * e1) {
                MultiplicationSymbol::constant(e1 * e, e1, mat)?
            } else {
                symbol(e1 * e, true, f)
            }
        }
        Some((false, f)) => symbol(e1 * e, false, f),
        None => MultiplicationSymbol::zero(e1 * e, e1),
    };
    let gp = match &spec.g_sym_prime {
        Some(f) => symbol(e1 * e * e, false, f),
        None => MultiplicationSymbol::zero(e1 * e * e, e1),
    };
    if !(g.is_zero() && gp.is_zero()) {
        prob = prob.with_operator_family(ControlledOperatorFamily::new(g, gp, lifts, shape)?);
    }
    if let Some(gf) = &spec.g_pair {
        let (gs, gps) = (shape.with_channels(e1 * e), shape.with_channels(e1 * e * e));
        let eval = |i: usize, which: usize, out: &mut [C64]| {
            let t = grid.node(i);
            let ch = if which == 0 { e1 * e } else { e1 * e * e };
            let sh = if which == 0 { gs } else { gps };
            let mut a = vec![0.0; e1 * e];
            let mut b = vec![0.0; e1 * e * e];
            project_field(&col, sh, ch, &mut |x, v| {
                gf(t, x, &mut a, &mut b);
                v.copy_from_slice(if which == 0 { &a } else { &b });
            }, out)
        };
        let y = SampleEnsemble::from_fn(gs, &grid, 1, true, |_, i, out| eval(i, 0, out)).adapted(true);
        let yp = SampleEnsemble::from_fn(gps, &grid, 1, true, |_, i, out| eval(i, 1, out)).adapted(true);
        let forcing = ControlledEnsemble::new(y, yp, lifts, 0.0, exps)?;
        prob = prob.with_forcing(forcing, 0.0);
    }
    prob.validate()?;
    Ok(prob)
}

fn time_constant(f: &MatrixFieldFn, grid: &TimeGrid, n: usize, len: usize) -> bool {
    let x = vec![0.0; n];
    let (mut a, mut b) = (vec![0.0; len], vec![0.0; len]);
    f(grid.node(0), &x, &mut a);
    (1..grid.num_nodes()).all(|i| {
        f(grid.node(i), &x, &mut b);
        a == b
    })
}

fn shape_mismatch<T>(msg: &str) -> Result<T> {
    shape(msg.to_string())
}

/// Real datum with equal `L²` energy in every dyadic shell
/// `2^j ≤ |k|_∞ < 2^{j+1}` and unit mean; it lies in `L²` but in no `H^s`
/// with `s > 0` uniformly in `K`.
pub fn dyadic_shell_datum(shape: FieldShape) -> SpectralField {
    let modes = shape.modes();
    let shell = |k: &[i64]| {
        let m = k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
        if m == 0 {
            None
        } else {
            Some(63 - m.leading_zeros())
        }
    };
    let mut counts = vec![0usize; 64];
    for i in 0..modes {
        if let Some(j) = shell(&shape.frequencies(i)) {
            counts[j as usize] += 1;
        }
    }
    let mut coeffs = vec![ZERO; shape.len()];
    for c in 0..shape.channels {
        for i in 0..modes {
            coeffs[c * modes + i] = match shell(&shape.frequencies(i)) {
                None => C64::new(1.0, 0.0),
                Some(j) => C64::new(1.0 / (counts[j as usize] as f64).sqrt(), 0.0),
            };
        }
    }
    SpectralField::from_coeffs(shape, true, coeffs).unwrap()
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: [&str; 4] = ["heat_linear", "divform_rough", "gbm_mode", "full_mix"];

/// Amplitudes of the optional terms of the `full_mix` scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixAmplitudes {
    /// Relative oscillation of the diffusion coefficient.
    pub diffusion: f64,
    pub drift: f64,
    pub noise: f64,
    /// Oscillating part of `G`.
    pub rough: f64,
    pub forcing: f64,
}

impl MixAmplitudes {
    pub fn zero() -> Self {
        Self { diffusion: 0.0, drift: 0.0, noise: 0.0, rough: 0.0, forcing: 0.0 }
    }
}

impl Default for MixAmplitudes {
    fn default() -> Self {
        Self { diffusion: 0.5, drift: 1.0, noise: 0.3, rough: 0.25, forcing: 0.2 }
    }
}

const HEAT_KAPPA: f64 = 0.05;
const HEAT_C: f64 = 0.5;
const MIX_SAMPLES: usize = 32;

fn sine_path() -> PathFn {
    Arc::new(|t, x: &mut [f64]| x[0] = (2.0 * PI * t).sin())
}

fn cosines(shape: FieldShape, amps: &[(i64, f64)]) -> SpectralField {
    let mut xi = SpectralField::zeros(shape, true);
    for &(k, a) in amps {
        xi = xi.axpy(1.0, &SpectralField::cosine_mode(shape, 0, &[k], a).unwrap()).unwrap();
    }
    xi
}

fn scalar_g(c: f64, osc: f64) -> (bool, MatrixFieldFn) {
    if osc == 0.0 {
        (true, Arc::new(move |_t, _x: &[f64], out: &mut [f64]| out[0] = c))
    } else {
        (false, Arc::new(move |_t, x: &[f64], out: &mut [f64]| out[0] = c + osc * (2.0 * PI * x[0]).cos()))
    }
}

/// `heat_linear` with the optional terms switched on by `amps`; all-zero
/// amplitudes give exactly the `heat_linear` scenario.
pub fn full_mix_with(amps: MixAmplitudes) -> TorusProblemSpec {
    let shape = FieldShape::new(1, 16, 1).unwrap();
    let diffusion = if amps.diffusion == 0.0 {
        Diffusion::Heat { kappa: HEAT_KAPPA }
    } else {
        let q = amps.diffusion;
        Diffusion::DivergenceForm {
            a: Arc::new(move |t, x: &[f64], out: &mut [f64]| {
                out[0] = HEAT_KAPPA * (1.0 + 0.5 * q * (2.0 * PI * (x[0] + t)).sin())
            }),
            ellipticity: HEAT_KAPPA * (1.0 - 0.5 * q.abs()),
            autonomous: false,
        }
    };
    let f_spec: Option<DriftFn> = (amps.drift != 0.0).then(|| {
        let q = amps.drift;
        Arc::new(move |_t: f64, _x: &[f64], u: &[f64], g: &[f64], out: &mut [f64]| {
            out[0] = q * (-u[0] + 0.1 * g[0].sin())
        }) as DriftFn
    });
    let h_spec: Option<(usize, NoiseFn)> = (amps.noise != 0.0).then(|| {
        let q = amps.noise;
        (1, Arc::new(move |_t: f64, _x: &[f64], u: &[f64], out: &mut [f64]| out[0] = q * u[0] / (1.0 + u[0] * u[0]).sqrt()) as NoiseFn)
    });
    let g_pair: Option<ForcingFn> = (amps.forcing != 0.0).then(|| {
        let q = amps.forcing;
        Arc::new(move |t: f64, x: &[f64], g: &mut [f64], gp: &mut [f64]| {
            g[0] = q * (2.0 * PI * x[0]).cos() * (1.0 + t);
            gp[0] = 0.0;
        }) as ForcingFn
    });
    let any = amps != MixAmplitudes::zero();
    TorusProblemSpec {
        name: if any { "full_mix" } else { "heat_linear" }.to_string(),
        dim_n: 1,
        trunc_k: 16,
        channels: 1,
        diffusion,
        f_spec,
        h_spec,
        g_sym: Some(scalar_g(HEAT_C, amps.rough)),
        g_sym_prime: None,
        g_pair,
        xi: cosines(shape, &[(1, 1.0), (3, 0.5)]),
        dim_e: 1,
        horizon: 0.5,
        num_steps: 128,
        num_samples: if amps.noise != 0.0 { MIX_SAMPLES } else { 1 },
        lift: LiftSpec::Smooth { path: sine_path(), fine_factor: 8 },
        exps: HolderExponents::new(0.45, 0.4, 0.3).unwrap(),
        m: 2.0,
        seed: 20240601,
        picard: PicardConfig { epsilon: None, tol: 1e-10, max_iter: 60, theta_probe: vec![0.1, 0.25, 0.4] },
        oracle: if any { Oracle::None } else { Oracle::LinearRough { c: HEAT_C } },
    }
}

fn divform_rough() -> TorusProblemSpec {
    let shape = FieldShape::new(1, 16, 1).unwrap();
    let amps: Vec<(i64, f64)> = (1..=16).map(|k| (k, 1.0 / (1.0 + k as f64))).collect();
    TorusProblemSpec {
        name: "divform_rough".to_string(),
        dim_n: 1,
        trunc_k: 16,
        channels: 1,
        diffusion: Diffusion::DivergenceForm {
            a: Arc::new(|t, x: &[f64], out: &mut [f64]| out[0] = 1.0 + 0.5 * (2.0 * PI * (x[0] + t)).sin()),
            ellipticity: 0.5,
            autonomous: false,
        },
        f_spec: None,
        h_spec: None,
        g_sym: Some((false, Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = 0.5 * (2.0 * PI * x[0]).cos()))),
        g_sym_prime: None,
        g_pair: None,
        xi: cosines(shape, &amps),
        dim_e: 1,
        horizon: 1.0 / 64.0,
        num_steps: 128,
        num_samples: 8,
        lift: LiftSpec::Fbm { hurst: 0.47, refine_level: 2 },
        exps: HolderExponents::new(0.44, 0.35, 0.3).unwrap(),
        m: 2.0,
        seed: 20240602,
        picard: PicardConfig { epsilon: None, tol: 1e-8, max_iter: 60, theta_probe: vec![0.1, 0.25, 0.4] },
        oracle: Oracle::None,
    }
}

fn gbm_mode() -> TorusProblemSpec {
    let shape = FieldShape::new(1, 1, 1).unwrap();
    let sigma = 0.5;
    TorusProblemSpec {
        name: "gbm_mode".to_string(),
        dim_n: 1,
        trunc_k: 1,
        channels: 1,
        diffusion: Diffusion::Heat { kappa: HEAT_KAPPA },
        f_spec: None,
        h_spec: Some((1, Arc::new(move |_t, _x: &[f64], u: &[f64], out: &mut [f64]| out[0] = sigma * u[0]))),
        g_sym: None,
        g_sym_prime: None,
        g_pair: None,
        xi: cosines(shape, &[(1, 1.0)]),
        dim_e: 1,
        horizon: 0.125,
        num_steps: 32,
        num_samples: 10_000,
        lift: LiftSpec::Zero,
        exps: HolderExponents::new(0.45, 0.4, 0.3).unwrap(),
        m: 2.0,
        seed: 20240603,
        picard: PicardConfig { epsilon: None, tol: 1e-6, max_iter: 60, theta_probe: vec![0.1, 0.25, 0.4] },
        oracle: Oracle::GbmMoment { sigma, k: vec![1] },
    }
}

/// A named, fully seeded scenario.
pub fn preset(name: &str) -> Result<TorusProblemSpec> {
    match name {
        "heat_linear" => Ok(full_mix_with(MixAmplitudes::zero())),
        "divform_rough" => Ok(divform_rough()),
        "gbm_mode" => Ok(gbm_mode()),
        "full_mix" => Ok(full_mix_with(MixAmplitudes::default())),
        _ => domain(format!("unknown preset {name:?}; expected one of {PRESET_NAMES:?}")),
    }
}

fn heat_multiplier(spec: &TorusProblemSpec, k: &[i64]) -> Result<f64> {
    match spec.diffusion {
        Diffusion::Heat { kappa } => Ok(-4.0 * PI * PI * kappa * k.iter().map(|v| (v * v) as f64).sum::<f64>()),
        Diffusion::DivergenceForm { .. } => domain("closed forms need the heat generator"),
    }
}

/// Relative `L²` error at `T` of sample 0 against `ξ_k e^{λ_k T + c X_T}`.
pub fn closed_form_rel_err(spec: &TorusProblemSpec, prob: &RspdeProblem, sol: &MildSolution) -> Result<f64> {
    let Oracle::LinearRough { c } = spec.oracle else {
        return domain("scenario has no linear closed form");
    };
    let shape = spec.shape()?;
    let grid = prob.grid();
    let n = grid.num_steps();
    let t = grid.horizon() - grid.start();
    let xt = prob.lifts().get(0).x(n)[0];
    let got = sol.u.y().field(0, n);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..shape.modes() {
        let k = shape.frequencies(i);
        let want = spec.xi.coeffs()[i] * (heat_multiplier(spec, &k)? * t + c * xt).exp();
        num += (got[i] - want).norm_sqr();
        den += want.norm_sqr();
    }
    Ok((num / den).sqrt())
}

/// Monte Carlo second moment of one mode against its closed form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentCheck {
    pub mean: f64,
    pub stderr: f64,
    pub exact: f64,
    /// `|mean − exact| / stderr`.
    pub sigmas: f64,
}

pub fn gbm_moment_check(spec: &TorusProblemSpec, prob: &RspdeProblem, sol: &MildSolution) -> Result<MomentCheck> {
    let Oracle::GbmMoment { sigma, ref k } = spec.oracle else {
        return domain("scenario has no moment oracle");
    };
    let shape = spec.shape()?;
    let Some(idx) = shape.index_of(k) else {
        return domain(format!("frequency {k:?} outside the truncation"));
    };
    let grid = prob.grid();
    let n = grid.num_steps();
    let t = grid.horizon() - grid.start();
    let u = sol.u.y();
    let xs: Vec<f64> = (0..u.num_samples()).map(|s| u.field(s, n)[idx].norm_sqr()).collect();
    let (mean, stderr) = mean_and_stderr(&xs);
    let exact = spec.xi.coeffs()[idx].norm_sqr() * ((2.0 * heat_multiplier(spec, k)? + sigma * sigma) * t).exp();
    Ok(MomentCheck { mean, stderr, exact, sigmas: (mean - exact).abs() / stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_rspde;
    use approx::assert_relative_eq;

    #[test]
    fn pure_propagation_slopes() {
        let shape = FieldShape::new(1, 256, 1).unwrap();
        let grid = TimeGrid::uniform(1024.0 * 2f64.powi(-16), 1024).unwrap();
        let prop = GridPropagator::new(&Propagator::heat(0.25), &grid, shape).unwrap();
        let rows = crate::solver::propagation_regularity_probe(&prop, &dyadic_shell_datum(shape), &[0.1, 0.25, 0.4]).unwrap();
        for r in rows {
            assert!((r.slope + r.theta).abs() <= 0.1, "θ = {}: slope {}", r.theta, r.slope);
        }
    }

    #[test]
    fn presets_build_and_validate() {
        for name in PRESET_NAMES {
            let spec = preset(name).unwrap();
            assert_eq!(spec.name, name);
            if name != "gbm_mode" {
                spec.problem().unwrap();
            }
        }
        assert!(preset("wave").is_err());
    }

    #[test]
    fn ellipticity_failure_names_the_point() {
        let mut spec = preset("divform_rough").unwrap();
        spec.diffusion = Diffusion::DivergenceForm {
            a: Arc::new(|_t, x: &[f64], out: &mut [f64]| out[0] = 0.4 + x[0]),
            ellipticity: 0.5,
            autonomous: true,
        };
        let err = spec.problem().unwrap_err().to_string();
        assert!(err.contains("x = [0.0]"), "{err}");
    }

    #[test]
    fn gradient_collocation_matches_multiplier() {
        let shape = FieldShape::new(1, 5, 1).unwrap();
        let col = Collocation::for_products(1, 5);
        let u = SpectralField::cosine_mode(shape, 0, &[3], 1.4).unwrap();
        let mut out = vec![ZERO; shape.len()];
        collocate(&col, shape, 1, u.coeffs(), true, &|_x, _u, g, o| o[0] = g[0], &mut out);
        let (ip, im) = (shape.index_of(&[3]).unwrap(), shape.index_of(&[-3]).unwrap());
        let want = C64::new(0.0, 0.7 * 2.0 * PI * 3.0);
        assert!((out[ip] - want).norm() < 1e-12);
        assert!((out[im] + want).norm() < 1e-12);
        assert!(out.iter().enumerate().all(|(j, c)| j == ip || j == im || c.norm() < 1e-12));
    }

    #[test]
    fn identity_divergence_form_is_the_heat_flow() {
        let mut spec = preset("heat_linear").unwrap();
        spec.g_sym = None;
        spec.oracle = Oracle::None;
        let heat = solve_rspde(&spec.problem().unwrap(), &spec.picard).unwrap();
        spec.diffusion = Diffusion::DivergenceForm {
            a: Arc::new(|_t, _x: &[f64], out: &mut [f64]| out[0] = HEAT_KAPPA),
            ellipticity: HEAT_KAPPA,
            autonomous: true,
        };
        let div = solve_rspde(&spec.problem().unwrap(), &spec.picard).unwrap();
        let n = spec.num_steps;
        for (a, b) in heat.u.y().field(0, n).iter().zip(div.u.y().field(0, n)) {
            assert!((a - b).norm() <= 1e-8);
        }
    }

    #[test]
    fn linear_damping_matches_scalar_ode() {
        let mut spec = preset("heat_linear").unwrap();
        spec.g_sym = None;
        spec.oracle = Oracle::None;
        spec.num_steps = 512;
        spec.f_spec = Some(Arc::new(|_t, _x: &[f64], u: &[f64], _g: &[f64], out: &mut [f64]| out[0] = -u[0]));
        let sol = solve_rspde(&spec.problem().unwrap(), &spec.picard).unwrap();
        let shape = spec.shape().unwrap();
        let i = shape.index_of(&[1]).unwrap();
        let lam = -4.0 * PI * PI * HEAT_KAPPA;
        let want = 0.5 * ((lam - 1.0) * spec.horizon).exp();
        assert_relative_eq!(sol.u.y().field(0, spec.num_steps)[i].re, want, max_relative = 1e-3);
    }

    #[test]
    fn heat_linear_meets_its_closed_form() {
        let spec = preset("heat_linear").unwrap();
        let prob = spec.problem().unwrap();
        let sol = solve_rspde(&prob, &spec.picard).unwrap();
        assert!(closed_form_rel_err(&spec, &prob, &sol).unwrap() <= 1e-3);
        assert!(sol.u.y().hermitian_defect() <= 1e-10);
    }

    #[test]
    fn zero_amplitude_mix_is_heat_linear() {
        let a = preset("heat_linear").unwrap();
        let b = full_mix_with(MixAmplitudes::zero());
        let sa = solve_rspde(&a.problem().unwrap(), &a.picard).unwrap();
        let sb = solve_rspde(&b.problem().unwrap(), &b.picard).unwrap();
        assert_eq!(sa.u.y().data(), sb.u.y().data());
        assert_eq!(sa.picard_trace, sb.picard_trace);
    }
}
