//! Rough stochastic convolution `∫ S_{r,·} Y_r d𝐗_r`, the Bochner convolution
//! `∫ S_{r,·} f_r dr` and the Itô convolution `∫ S_{r,·} h_r dW_r`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::controlled::{scrp_distance, ControlledEnsemble, ScrpNormReport};
use crate::ensemble::{BrownianDriver, SampleEnsemble};
use crate::error::{domain, shape, Result};
use crate::increment::Increment;
use crate::propagator::GridPropagator;
use crate::rough_path::{HolderExponents, LiftEnsemble, PairWalker};
use crate::sewing::{germ_gap_check, mild_sew, DeclaredRates, Germ, SewingConfig};
use crate::spectral::{weighted_sq_norm, FieldShape, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Sup, plain Hölder and mild Hölder norms of one ensemble.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormReport {
    pub sup_norm: f64,
    pub holder_seminorm: f64,
    pub mild_holder_seminorm: f64,
    pub m: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl NormReport {
    /// `‖Y‖_{0,m,γ}`, `‖δY‖_{β,m,γ}` and `‖δ̂Y‖_{β,m,γ}`.
    pub fn compute(y: &SampleEnsemble, m: f64, gamma: f64, beta: f64, prop: &GridPropagator) -> Result<Self> {
        Ok(Self {
            sup_norm: y.lm_sup_norm(m, gamma),
            holder_seminorm: y.lm_holder_seminorm(m, gamma, beta, None)?,
            mild_holder_seminorm: y.lm_holder_seminorm(m, gamma, beta, Some(prop))?,
            m,
            gamma,
            beta,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvolutionDiagnostics {
    /// `sup ‖δ̂Z − A‖ / (|t−s|^{α+β} + |t−s|^{α+β+β′})` over lattice pairs.
    pub local_expansion_ratio: f64,
    /// Norms of `Z` at index `γ+θ−α` with Hölder exponent `α`.
    pub holder_report: NormReport,
    /// `‖Z, Y‖` at index `γ+θ`.
    pub output_scrp_norm: ScrpNormReport,
    pub level_diffs_rate: f64,
}

/// The compensated germ `S_{s,t}(Y_s δX_{s,t} + Y′_s 𝕏_{s,t})`.
pub struct ConvolutionGerm<'a> {
    y: &'a SampleEnsemble,
    y_prime: &'a SampleEnsemble,
    lifts: &'a LiftEnsemble,
    prop: &'a GridPropagator,
    shape: FieldShape,
    samples: usize,
    rates: DeclaredRates,
}

impl<'a> ConvolutionGerm<'a> {
    pub fn new(c: &'a ControlledEnsemble, prop: &'a GridPropagator) -> Result<Self> {
        let e = c.lifts().dim_e();
        let channels = c.shape().channels;
        if !channels.is_multiple_of(e) {
            return shape(format!("integrand channels {channels} are not a multiple of e = {e}"));
        }
        if prop.grid().num_nodes() != c.grid().num_nodes() || prop.modes() != c.shape().modes() {
            return shape("propagator does not match the integrand grid or truncation".to_string());
        }
        let exps = c.exps();
        Ok(Self {
            y: c.y(),
            y_prime: c.y_prime(),
            lifts: c.lifts(),
            prop,
            shape: c.shape().with_channels(channels / e),
            samples: c.num_samples(),
            rates: DeclaredRates {
                z1: exps.alpha + exps.beta,
                z2: exps.alpha + exps.beta + exps.beta_prime,
                k1: 1.0,
                k2: 1.0,
            },
        })
    }

    fn local(&self, sample: usize, i: usize, walker: &PairWalker, out: &mut [C64]) {
        let modes = self.shape.modes();
        let e = self.lifts.dim_e();
        let ys = if self.y.num_samples() == 1 { 0 } else { sample };
        let yps = if self.y_prime.num_samples() == 1 { 0 } else { sample };
        let y = self.y.field(ys, i);
        let yp = self.y_prime.field(yps, i);
        for c in 0..self.shape.channels {
            let o = &mut out[c * modes..(c + 1) * modes];
            o.fill(ZERO);
            for a in 0..e {
                let w = walker.dx[a];
                if w != 0.0 {
                    let src = &y[(c * e + a) * modes..(c * e + a + 1) * modes];
                    o.iter_mut().zip(src).for_each(|(x, v)| *x += v * w);
                }
                for b in 0..e {
                    // Y′^{(c,a,b)} 𝕏^{ba}
                    let w = walker.xx[b * e + a];
                    if w != 0.0 {
                        let r = (c * e + a) * e + b;
                        let src = &yp[r * modes..(r + 1) * modes];
                        o.iter_mut().zip(src).for_each(|(x, v)| *x += v * w);
                    }
                }
            }
        }
    }
}

impl Germ for ConvolutionGerm<'_> {
    fn shape(&self) -> FieldShape {
        self.shape
    }

    fn num_samples(&self) -> usize {
        self.samples
    }

    fn eval(&self, sample: usize, i: usize, j: usize, out: &mut [C64]) {
        let lift = self.lifts.get(sample);
        let mut w = PairWalker::new(lift, i);
        for k in i..j {
            w.step(lift, k);
        }
        self.local(sample, i, &w, out);
        let mut scratch = Vec::new();
        self.prop.apply(i, j, out, &mut scratch);
    }

    fn declared_rates(&self) -> Option<DeclaredRates> {
        Some(self.rates)
    }
}

fn check_exponents(exps: HolderExponents, theta: f64) -> Result<()> {
    if exps.alpha + exps.beta + exps.beta_prime <= 1.0 {
        return domain(format!(
            "need α+β+β′ > 1, got {}",
            exps.alpha + exps.beta + exps.beta_prime
        ));
    }
    if !(0.0..=exps.beta_prime).contains(&theta) {
        return domain(format!("θ = {theta} must lie in [0, β′ = {}]", exps.beta_prime));
    }
    Ok(())
}

/// `Z` at every node: `Z_{k+1} = S_{k,k+1} Z_k + A(t_k, t_{k+1})`.
pub fn rough_convolution_values(c: &ControlledEnsemble, prop: &GridPropagator) -> Result<SampleEnsemble> {
    let germ = ConvolutionGerm::new(c, prop)?;
    let shape = germ.shape;
    let len = shape.len();
    let grid = c.grid();
    let n = grid.num_steps();
    let samples = germ.samples;
    let blocks: Vec<Vec<C64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let lift = c.lifts().get(s);
            let mut out = vec![ZERO; grid.num_nodes() * len];
            let mut z = vec![ZERO; len];
            let mut a = vec![ZERO; len];
            let mut scratch = Vec::new();
            for k in 0..n {
                let mut w = PairWalker::new(lift, k);
                w.step(lift, k);
                germ.local(s, k, &w, &mut a);
                z.iter_mut().zip(&a).for_each(|(x, v)| *x += v);
                prop.advance(k, &mut z, &mut scratch);
                out[(k + 1) * len..(k + 2) * len].copy_from_slice(&z);
            }
            out
        })
        .collect();
    let real = c.y().is_real_valued() && c.y_prime().is_real_valued();
    Ok(SampleEnsemble::from_data(shape, grid, samples, real, blocks.concat())?.adapted(c.y().is_adapted()))
}

/// Wraps `(Z, Y)` as a controlled path with the martingale tag of the lift.
fn convolution_output(z: SampleEnsemble, c: &ControlledEnsemble, prop: &GridPropagator, gamma: f64) -> Result<ControlledEnsemble> {
    let z = Arc::new(z);
    let out = ControlledEnsemble::new((*z).clone(), c.y().clone(), c.lifts(), gamma, c.exps())?;
    if c.lifts().is_martingale() {
        // E_s of the mild increment of an Itô integral and of Y_s δX vanish.
        let tag = Increment::Mild(z).minus(Increment::Linear {
            coeff: c.y_arc().clone(),
            lifts: c.lifts().clone(),
            propagated: false,
        });
        Ok(out.with_martingale(tag, Arc::new(prop.clone())))
    } else {
        Ok(out)
    }
}

/// The rough stochastic convolution of `(Y, Y′)` as a controlled path
/// `(Z, Y)` at index `γ+θ`, plus diagnostics.
pub fn rough_convolution(c: &ControlledEnsemble, prop: &GridPropagator, theta: f64, m: f64) -> Result<(ControlledEnsemble, ConvolutionDiagnostics)> {
    check_exponents(c.exps(), theta)?;
    let germ = ConvolutionGerm::new(c, prop)?;
    let mut cfg = SewingConfig::for_steps(c.grid().num_steps());
    cfg.target_gamma = c.gamma();
    cfg.m = m;
    let sewn = mild_sew(&germ, prop, &cfg)?;
    let local_expansion_ratio = germ_gap_check(&sewn, &germ, prop, &cfg)?;
    let z = sewn.limit.clone().adapted(c.y().is_adapted());
    let mut z = z;
    z.set_real_valued(c.y().is_real_valued() && c.y_prime().is_real_valued());
    let exps = c.exps();
    let gamma_out = c.gamma() + theta;
    let holder_report = NormReport::compute(&z, m, gamma_out - exps.alpha, exps.alpha, prop)?;
    let out = convolution_output(z, c, prop, gamma_out)?;
    let output_scrp_norm = out.scrp_norm(m)?;
    Ok((out, ConvolutionDiagnostics { local_expansion_ratio, holder_report, output_scrp_norm, level_diffs_rate: sewn.fitted_rate }))
}

/// `(Z, Y)` without diagnostics, for use inside fixed-point iterations.
pub fn rough_convolution_controlled(c: &ControlledEnsemble, prop: &GridPropagator, theta: f64) -> Result<ControlledEnsemble> {
    check_exponents(c.exps(), theta)?;
    let z = rough_convolution_values(c, prop)?;
    convolution_output(z, c, prop, c.gamma() + theta)
}

/// Relative `L²` distance at the terminal node between the rough
/// convolution and the left-point Itô sum `Σ S_{t_{k+1},T} S_{t_k,t_{k+1}} Y_k δX_k`.
pub fn ito_reduction_check(c: &ControlledEnsemble, prop: &GridPropagator) -> Result<f64> {
    if !c.lifts().is_martingale() {
        return domain("Itô reduction needs an Itô Brownian lift");
    }
    if !c.y().is_adapted() {
        return domain("Itô reduction needs an adapted integrand");
    }
    let z = rough_convolution_values(c, prop)?;
    let shape = z.shape();
    let len = shape.len();
    let grid = c.grid();
    let n = grid.num_steps();
    let e = c.lifts().dim_e();
    let modes = shape.modes();
    let weights = shape.bessel_weights(c.gamma());
    let per: Vec<(f64, f64)> = (0..z.num_samples())
        .into_par_iter()
        .map(|s| {
            let lift = c.lifts().get(s);
            let ys = if c.y().num_samples() == 1 { 0 } else { s };
            let mut acc = vec![ZERO; len];
            let mut scratch = Vec::new();
            for k in 0..n {
                let y = c.y().field(ys, k);
                let (x0, x1) = (lift.x(k), lift.x(k + 1));
                for ch in 0..shape.channels {
                    for a in 0..e {
                        let d = x1[a] - x0[a];
                        let src = &y[(ch * e + a) * modes..(ch * e + a + 1) * modes];
                        acc[ch * modes..(ch + 1) * modes].iter_mut().zip(src).for_each(|(o, v)| *o += v * d);
                    }
                }
                prop.advance(k, &mut acc, &mut scratch);
            }
            let diff: Vec<C64> = z.field(s, n).iter().zip(&acc).map(|(a, b)| a - b).collect();
            (weighted_sq_norm(&weights, &diff), weighted_sq_norm(&weights, &acc))
        })
        .collect();
    let num: f64 = per.iter().map(|p| p.0).sum();
    let den: f64 = per.iter().map(|p| p.1).sum();
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

/// Left-endpoint quadrature `F_{k+1} = S_{k,k+1}(F_k + f_k Δ_k)`.
pub fn bochner_convolution(f: &SampleEnsemble, prop: &GridPropagator) -> Result<SampleEnsemble> {
    if prop.grid().num_nodes() != f.grid().num_nodes() || prop.modes() != f.shape().modes() {
        return shape("propagator does not match the integrand".to_string());
    }
    let grid = f.grid();
    let len = f.shape().len();
    let blocks: Vec<Vec<C64>> = (0..f.num_samples())
        .into_par_iter()
        .map(|s| {
            let mut out = vec![ZERO; grid.num_nodes() * len];
            let mut acc = vec![ZERO; len];
            let mut scratch = Vec::new();
            for k in 0..grid.num_steps() {
                let h = grid.step(k);
                acc.iter_mut().zip(f.field(s, k)).for_each(|(a, v)| *a += v * h);
                prop.advance(k, &mut acc, &mut scratch);
                out[(k + 1) * len..(k + 2) * len].copy_from_slice(&acc);
            }
            out
        })
        .collect();
    Ok(SampleEnsemble::from_data(f.shape(), grid, f.num_samples(), f.is_real_valued(), blocks.concat())?.adapted(f.is_adapted()))
}

/// Itô sums `H_{k+1} = S_{k,k+1}(H_k + Σ_a h_k^{(c,a)} δW_k^a)`.
pub fn ito_convolution(h: &SampleEnsemble, drv: &BrownianDriver, prop: &GridPropagator) -> Result<SampleEnsemble> {
    if !h.is_adapted() {
        return domain("Itô convolution needs an integrand flagged as adapted");
    }
    let d = drv.dim_d();
    let in_shape = h.shape();
    if !in_shape.channels.is_multiple_of(d) {
        return shape(format!("integrand channels {} are not a multiple of d = {d}", in_shape.channels));
    }
    if drv.grid().num_nodes() != h.grid().num_nodes() || prop.grid().num_nodes() != h.grid().num_nodes() {
        return shape("driver, propagator and integrand grids differ".to_string());
    }
    let samples = h.num_samples().max(drv.num_samples());
    if drv.num_samples() != samples {
        return shape("driver must carry one path per sample".to_string());
    }
    let out_shape = in_shape.with_channels(in_shape.channels / d);
    let len = out_shape.len();
    let modes = out_shape.modes();
    let grid = h.grid();
    let blocks: Vec<Vec<C64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let hs = if h.num_samples() == 1 { 0 } else { s };
            let mut out = vec![ZERO; grid.num_nodes() * len];
            let mut acc = vec![ZERO; len];
            let mut scratch = Vec::new();
            for k in 0..grid.num_steps() {
                let dw = drv.increment(s, k);
                let src = h.field(hs, k);
                for c in 0..out_shape.channels {
                    for (a, w) in dw.iter().enumerate() {
                        let r = c * d + a;
                        acc[c * modes..(c + 1) * modes]
                            .iter_mut()
                            .zip(&src[r * modes..(r + 1) * modes])
                            .for_each(|(o, v)| *o += v * *w);
                    }
                }
                prop.advance(k, &mut acc, &mut scratch);
                out[(k + 1) * len..(k + 2) * len].copy_from_slice(&acc);
            }
            out
        })
        .collect();
    Ok(SampleEnsemble::from_data(out_shape, grid, samples, h.is_real_valued(), blocks.concat())?.adapted(true))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityReport {
    pub out_distance: f64,
    pub rhs_aggregate: f64,
    pub ratio: f64,
}

/// Ratio of the output distance of two convolutions to
/// `ρ_α(𝐗,𝐗̄) + ‖ΔY₀‖ + ‖ΔY′₀‖ + T^{(α−β)∧(β−β′)} ‖Y,Y′;Ȳ,Ȳ′‖`.
pub fn convolution_stability(
    c1: &ControlledEnsemble,
    c2: &ControlledEnsemble,
    prop: &GridPropagator,
    theta: f64,
    m: f64,
) -> Result<StabilityReport> {
    let o1 = rough_convolution_controlled(c1, prop, theta)?;
    let o2 = rough_convolution_controlled(c2, prop, theta)?;
    let out_distance = scrp_distance(&o1, &o2, m)?.total;
    let exps = c1.exps();
    let gamma = c1.gamma();
    let rho = c1.lifts().distance(c2.lifts(), exps.alpha)?;
    let samples = c1.num_samples().max(c2.num_samples());
    let dy = c1.y().broadcast(samples)?.combine(1.0, &c2.y().broadcast(samples)?, -1.0)?;
    let dyp = c1.y_prime().broadcast(samples)?.combine(1.0, &c2.y_prime().broadcast(samples)?, -1.0)?;
    let horizon = c1.grid().horizon() - c1.grid().start();
    let kappa = (exps.alpha - exps.beta).min(exps.beta - exps.beta_prime);
    let rhs_aggregate = rho
        + dy.lm_norm_at(0, m, gamma)
        + dyp.lm_norm_at(0, m, gamma - exps.beta)
        + horizon.powf(kappa) * scrp_distance(c1, c2, m)?.total;
    let ratio = if rhs_aggregate == 0.0 { 0.0 } else { out_distance / rhs_aggregate };
    Ok(StabilityReport { out_distance, rhs_aggregate, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::propagator::Propagator;
    use crate::rough_path::{lift_smooth, BrownianMode};
    use crate::spectral::SpectralField;
    use approx::assert_relative_eq;

    fn exps() -> HolderExponents {
        HolderExponents::new(0.45, 0.4, 0.3).unwrap()
    }

    fn scalar() -> FieldShape {
        FieldShape::new(1, 0, 1).unwrap()
    }

    #[test]
    fn constant_integrand_gives_c_times_x() {
        let grid = TimeGrid::dyadic(1.0, 6).unwrap();
        let lifts = LiftEnsemble::shared(lift_smooth(&|t, x: &mut [f64]| x[0] = (3.0 * t).sin(), &grid, 1, 4).unwrap());
        let y = SampleEnsemble::constant(&SpectralField::constant(scalar(), &[2.5]).unwrap(), &grid, 1);
        let c = ControlledEnsemble::new(y, SampleEnsemble::zeros(scalar(), &grid, 1, true), &lifts, 0.0, exps()).unwrap();
        let prop = GridPropagator::identity(&grid, scalar());
        let (z, diag) = rough_convolution(&c, &prop, 0.0, 2.0).unwrap();
        for i in 0..grid.num_nodes() {
            assert_relative_eq!(z.y().field(0, i)[0].re, 2.5 * lifts.get(0).x(i)[0], epsilon = 1e-13);
        }
        assert!(diag.local_expansion_ratio < 1e-12);
    }

    #[test]
    fn x_dx_is_half_x_squared() {
        let grid = TimeGrid::dyadic(1.0, 12).unwrap();
        let lift = lift_smooth(&|t, x: &mut [f64]| x[0] = (2.0 * std::f64::consts::PI * t).sin() + t, &grid, 1, 4).unwrap();
        let xs: Vec<f64> = (0..grid.num_nodes()).map(|i| lift.x(i)[0]).collect();
        let lifts = LiftEnsemble::shared(lift);
        let y = SampleEnsemble::from_fn(scalar(), &grid, 1, true, |_, i, out| out[0] = C64::new(xs[i], 0.0));
        let yp = SampleEnsemble::constant(&SpectralField::constant(scalar(), &[1.0]).unwrap(), &grid, 1);
        let c = ControlledEnsemble::new(y, yp, &lifts, 0.0, exps()).unwrap();
        let prop = GridPropagator::identity(&grid, scalar());
        let z = rough_convolution_values(&c, &prop).unwrap();
        let want = 0.5 * xs[4096] * xs[4096];
        assert_relative_eq!(z.field(0, 4096)[0].re, want, max_relative = 1e-12);
    }

    #[test]
    fn bochner_and_ito_closed_forms() {
        let shape = FieldShape::new(1, 2, 1).unwrap();
        let grid = TimeGrid::dyadic(1.0, 10).unwrap();
        let e1 = SpectralField::single_mode(shape, 0, &[1], C64::new(1.0, 0.0)).unwrap();
        let f = SampleEnsemble::constant(&e1, &grid, 1);
        let prop = GridPropagator::new(&Propagator::heat(0.1), &grid, shape).unwrap();
        let big_f = bochner_convolution(&f, &prop).unwrap();
        let w = 0.1 * 4.0 * std::f64::consts::PI.powi(2);
        assert_relative_eq!(big_f.field(0, 1024)[3].re, (1.0 - (-w).exp()) / w, max_relative = 3e-3);

        let drv = BrownianDriver::sample(9, &grid, 1, 3).unwrap();
        let c = SampleEnsemble::constant(&SpectralField::constant(scalar(), &[0.7]).unwrap(), &grid, 1);
        let id = GridPropagator::identity(&grid, scalar());
        let h = ito_convolution(&c, &drv, &id).unwrap();
        for s in 0..3 {
            let wp = drv.path(s);
            assert_relative_eq!(h.field(s, 1024)[0].re, 0.7 * wp[1024], epsilon = 1e-12);
        }
        assert!(ito_convolution(&c.clone().adapted(false), &drv, &id).is_err());
    }

    #[test]
    fn ito_reduction_for_w_dw() {
        let grid = TimeGrid::dyadic(1.0, 9).unwrap();
        let lifts = LiftEnsemble::brownian(4, &grid, 1, BrownianMode::Ito, 4, 100).unwrap();
        let y = SampleEnsemble::from_fn(scalar(), &grid, 100, true, |s, i, out| out[0] = C64::new(lifts.get(s).x(i)[0], 0.0)).adapted(true);
        let yp = SampleEnsemble::constant(&SpectralField::constant(scalar(), &[1.0]).unwrap(), &grid, 1);
        let c = ControlledEnsemble::new(y, yp, &lifts, 0.0, exps()).unwrap();
        let prop = GridPropagator::identity(&grid, scalar());
        let d = ito_reduction_check(&c, &prop).unwrap();
        assert!(d < 5e-2, "distance {d}");
    }

    #[test]
    fn exponent_preconditions() {
        let grid = TimeGrid::dyadic(1.0, 3).unwrap();
        let lifts = LiftEnsemble::zero(&grid, 1);
        let weak = HolderExponents::new(0.34, 0.33, 0.32).unwrap();
        let c = ControlledEnsemble::zero(scalar(), &grid, &lifts, 0.0, weak);
        let prop = GridPropagator::identity(&grid, scalar());
        assert!(rough_convolution(&c, &prop, 0.0, 2.0).is_err());
        let c = ControlledEnsemble::zero(scalar(), &grid, &lifts, 0.0, exps());
        assert!(rough_convolution(&c, &prop, 0.5, 2.0).is_err());
    }
}
