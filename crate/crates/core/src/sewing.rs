//! Mild stochastic sewing: limits of compensated Riemann sums
//! `Σ S_{v,t} A_{r,v}` over dyadic partitions, with per-level diagnostics.

use rayon::prelude::*;

use crate::ensemble::SampleEnsemble;
use crate::error::{domain, shape, Result};
use crate::grid::TimeGrid;
use crate::increment::Increment;
use crate::propagator::GridPropagator;
use crate::spectral::{moment_term, weighted_sq_norm, FieldShape, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Constants of the two-rate bound `K₁|t−s|^{z₁−(η+z₁−z₂)⁺} + K₂|t−s|^{z₂−η}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeclaredRates {
    pub z1: f64,
    pub z2: f64,
    pub k1: f64,
    pub k2: f64,
}

impl DeclaredRates {
    pub fn bound(&self, h: f64, eta: f64) -> f64 {
        let e1 = self.z1 - (eta + self.z1 - self.z2).max(0.0);
        self.k1 * h.powf(e1) + self.k2 * h.powf(self.z2 - eta)
    }
}

/// A two-parameter germ `A(t_i, t_j)` evaluable at any pair of fine-grid nodes.
pub trait Germ: Sync {
    fn shape(&self) -> FieldShape;
    fn num_samples(&self) -> usize;
    fn eval(&self, sample: usize, i: usize, j: usize, out: &mut [C64]);
    fn declared_rates(&self) -> Option<DeclaredRates> {
        None
    }
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// A germ given by a closure over `(sample, i, j, out)`.
pub struct FnGerm<F> {
    pub shape: FieldShape,
    pub num_samples: usize,
    pub deterministic: bool,
    pub rates: Option<DeclaredRates>,
    pub f: F,
}

impl<F> Germ for FnGerm<F>
where
    F: Fn(usize, usize, usize, &mut [C64]) + Sync,
{
    fn shape(&self) -> FieldShape {
        self.shape
    }

    fn num_samples(&self) -> usize {
        self.num_samples
    }

    fn eval(&self, sample: usize, i: usize, j: usize, out: &mut [C64]) {
        (self.f)(sample, i, j, out)
    }

    fn declared_rates(&self) -> Option<DeclaredRates> {
        self.rates
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SewingConfig {
    /// Dyadic depth of the coarsest-to-finest level ladder.
    pub max_level: u32,
    /// Output scale shift `η`.
    pub eta: f64,
    pub target_gamma: f64,
    pub m: f64,
    /// The last level difference must fall below this fraction of the first.
    pub richardson_fraction: f64,
    /// Largest number of lattice nodes on which the germ gap is evaluated.
    pub gap_nodes: usize,
}

impl SewingConfig {
    pub fn new(max_level: u32) -> Self {
        Self { max_level, eta: 0.0, target_gamma: 0.0, m: 2.0, richardson_fraction: 0.5, gap_nodes: 33 }
    }

    /// Deepest ladder supported by a grid with `num_steps` steps.
    pub fn for_steps(num_steps: usize) -> Self {
        Self::new(num_steps.trailing_zeros())
    }
}

#[derive(Clone, Debug)]
pub struct SewingResult {
    /// `𝒜` at every fine-grid node, with `𝒜₀ = 0`.
    pub limit: SampleEnsemble,
    /// `‖Aⁿ⁺¹(0,T) − Aⁿ(0,T)‖_{m,γ}` for `n = 0..max_level`.
    pub level_diffs: Vec<f64>,
    /// `Aⁿ(0,T)` per level, sample-major.
    pub level_terminals: Vec<Vec<C64>>,
    pub fitted_rate: f64,
    pub fitted_intercept: f64,
    /// `sup ‖δ̂𝒜(s,t) − A(s,t)‖_{m,γ+η}` over lattice pairs.
    pub germ_gap: f64,
    pub richardson_ok: bool,
}

impl SewingResult {
    pub fn level_terminal(&self, level: usize, sample: usize) -> &[C64] {
        let len = self.limit.shape().len();
        &self.level_terminals[level][sample * len..(sample + 1) * len]
    }
}

fn lm_norm(values: &[Vec<C64>], weights: &[f64], m: f64) -> f64 {
    let sum: f64 = values.iter().map(|v| moment_term(weighted_sq_norm(weights, v), m)).sum();
    (sum / values.len() as f64).powf(1.0 / m)
}

/// Sews `germ` against the propagator on its fine grid.
pub fn mild_sew(germ: &dyn Germ, prop: &GridPropagator, cfg: &SewingConfig) -> Result<SewingResult> {
    let grid = prop.grid().clone();
    let n = grid.num_steps();
    let levels = 1usize << cfg.max_level;
    if !n.is_multiple_of(levels) {
        return domain(format!("grid with {n} steps does not support dyadic depth {}", cfg.max_level));
    }
    let shape = germ.shape();
    if shape.modes() != prop.modes() {
        return shape_err("germ and propagator truncations differ");
    }
    if let Some(r) = germ.declared_rates() {
        if cfg.eta >= r.z2 {
            return domain(format!("η = {} must lie below z₂ = {}", cfg.eta, r.z2));
        }
    }
    let len = shape.len();
    let samples = germ.num_samples();
    let per_sample: Vec<(Vec<C64>, Vec<Vec<C64>>)> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut values = vec![ZERO; grid.num_nodes() * len];
            let mut z = vec![ZERO; len];
            let mut a = vec![ZERO; len];
            let mut scratch = Vec::new();
            for k in 0..n {
                prop.advance(k, &mut z, &mut scratch);
                germ.eval(s, k, k + 1, &mut a);
                z.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
                values[(k + 1) * len..(k + 2) * len].copy_from_slice(&z);
            }
            let terminals = (0..=cfg.max_level)
                .map(|lvl| {
                    let stride = n >> lvl;
                    let mut z = vec![ZERO; len];
                    for p in 0..(1usize << lvl) {
                        let (r, v) = (p * stride, (p + 1) * stride);
                        prop.apply(r, v, &mut z, &mut scratch);
                        germ.eval(s, r, v, &mut a);
                        z.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
                    }
                    z
                })
                .collect();
            (values, terminals)
        })
        .collect();
    let mut data = Vec::with_capacity(samples * grid.num_nodes() * len);
    for (v, _) in &per_sample {
        data.extend_from_slice(v);
    }
    let limit = SampleEnsemble::from_data(shape, &grid, samples, false, data)?;
    let weights = shape.bessel_weights(cfg.target_gamma);
    let level_terminals: Vec<Vec<C64>> = (0..=cfg.max_level as usize)
        .map(|l| per_sample.iter().flat_map(|(_, t)| t[l].iter().copied()).collect())
        .collect();
    let level_diffs: Vec<f64> = (0..cfg.max_level as usize)
        .map(|l| {
            let diffs: Vec<Vec<C64>> = per_sample
                .iter()
                .map(|(_, t)| t[l + 1].iter().zip(&t[l]).map(|(a, b)| a - b).collect())
                .collect();
            lm_norm(&diffs, &weights, cfg.m)
        })
        .collect();
    let (fitted_rate, fitted_intercept) = rate_fit(&level_diffs);
    let richardson_ok = match (level_diffs.first(), level_diffs.last()) {
        (Some(&f), Some(&l)) => l <= cfg.richardson_fraction * f || f == 0.0,
        _ => true,
    };
    let mut out = SewingResult {
        limit,
        level_diffs,
        level_terminals,
        fitted_rate,
        fitted_intercept,
        germ_gap: 0.0,
        richardson_ok,
    };
    let gamma = cfg.target_gamma + cfg.eta;
    out.germ_gap = gap_sup(&out, germ, prop, cfg, gamma, |_| 1.0)?;
    Ok(out)
}

fn shape_err<T>(msg: &str) -> Result<T> {
    shape(msg.to_string())
}

fn gap_lattice(n: usize, nodes: usize) -> Vec<usize> {
    let stride = n.div_ceil(nodes.max(2) - 1).max(1);
    let mut out: Vec<usize> = (0..=n).step_by(stride).collect();
    if *out.last().unwrap() != n {
        out.push(n);
    }
    out
}

/// `sup ‖δ̂𝒜(s,t) − A(s,t)‖_{m,γ} / scale(|t−s|)` over lattice pairs.
fn gap_sup(
    res: &SewingResult,
    germ: &dyn Germ,
    prop: &GridPropagator,
    cfg: &SewingConfig,
    gamma: f64,
    scale: impl Fn(f64) -> f64 + Sync,
) -> Result<f64> {
    let grid = prop.grid();
    let shape = germ.shape();
    let len = shape.len();
    let weights = shape.bessel_weights(gamma);
    let lattice = gap_lattice(grid.num_steps(), cfg.gap_nodes);
    let samples = germ.num_samples();
    let lim = &res.limit;
    let rows: Vec<f64> = (0..lattice.len())
        .into_par_iter()
        .map(|p| {
            let i = lattice[p];
            let mut best: f64 = 0.0;
            let mut sums = vec![0.0; lattice.len()];
            let mut state = vec![ZERO; len];
            let mut a = vec![ZERO; len];
            let mut scratch = Vec::new();
            for s in 0..samples {
                state.copy_from_slice(lim.field(s, i));
                let mut at = i;
                for (q, &j) in lattice.iter().enumerate().skip(p + 1) {
                    prop.apply(at, j, &mut state, &mut scratch);
                    at = j;
                    germ.eval(s, i, j, &mut a);
                    let diff: Vec<C64> = lim.field(s, j).iter().zip(&state).zip(&a).map(|((z, sz), g)| z - sz - g).collect();
                    sums[q] += moment_term(weighted_sq_norm(&weights, &diff), cfg.m);
                }
            }
            for (q, &j) in lattice.iter().enumerate().skip(p + 1) {
                let h = grid.node(j) - grid.node(i);
                best = best.max((sums[q] / samples as f64).powf(1.0 / cfg.m) / scale(h));
            }
            best
        })
        .collect();
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// Least-squares slope and intercept of `log₂ diffs` against level, over the
/// nonzero entries. All-zero input gives `(+∞, 0)`.
pub fn rate_fit(diffs: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = diffs
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0 && d.is_finite())
        .map(|(l, d)| (l as f64, d.log2()))
        .collect();
    if pts.len() < 2 {
        return (f64::INFINITY, 0.0);
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

/// `max ‖δ̂𝒜(s,t) − A(s,t)‖_{m,γ+η}` divided by the declared two-rate bound.
pub fn germ_gap_check(res: &SewingResult, germ: &dyn Germ, prop: &GridPropagator, cfg: &SewingConfig) -> Result<f64> {
    let Some(rates) = germ.declared_rates() else {
        return domain("germ declares no rates");
    };
    let eta = cfg.eta;
    gap_sup(res, germ, prop, cfg, cfg.target_gamma + eta, |h| rates.bound(h, eta))
}

/// `𝒜(t_a, t_b)` by balanced binary accumulation of the fine steps of
/// `[t_a, t_b]`, as an order-independence check of the left-to-right sum.
pub fn balanced_sum(germ: &dyn Germ, prop: &GridPropagator, sample: usize, a: usize, b: usize) -> Vec<C64> {
    let len = germ.shape().len();
    if b == a + 1 {
        let mut out = vec![ZERO; len];
        germ.eval(sample, a, b, &mut out);
        return out;
    }
    if b == a {
        return vec![ZERO; len];
    }
    let mid = a + (b - a) / 2;
    let mut left = balanced_sum(germ, prop, sample, a, mid);
    let right = balanced_sum(germ, prop, sample, mid, b);
    let mut scratch = Vec::new();
    prop.apply(mid, b, &mut left, &mut scratch);
    left.iter_mut().zip(&right).for_each(|(x, y)| *x += y);
    left
}

/// `δ̂𝒜` as a lazy increment, for norm estimates of the limit.
pub fn mild_increment(res: &SewingResult) -> Increment {
    Increment::Mild(std::sync::Arc::new(res.limit.clone()))
}

/// Checks the mild Chasles relation `δ̂𝒜(s,t) = S_{r,t}δ̂𝒜(s,r) + δ̂𝒜(r,t)`
/// on all lattice triples, returning the largest relative defect.
pub fn mild_chasles_defect(limit: &SampleEnsemble, prop: &GridPropagator, lattice_nodes: usize) -> f64 {
    let grid: &TimeGrid = limit.grid();
    let lattice = gap_lattice(grid.num_steps(), lattice_nodes);
    let len = limit.shape().len();
    let mut worst: f64 = 0.0;
    let mut scratch = Vec::new();
    let mild = |s: usize, i: usize, j: usize, scratch: &mut Vec<C64>| {
        let mut v = limit.field(s, i).to_vec();
        prop.apply(i, j, &mut v, scratch);
        limit.field(s, j).iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<C64>>()
    };
    for s in 0..limit.num_samples() {
        for (p, &i) in lattice.iter().enumerate() {
            for (q, &r) in lattice.iter().enumerate().skip(p + 1) {
                for &t in lattice.iter().skip(q + 1) {
                    let whole = mild(s, i, t, &mut scratch);
                    let mut left = mild(s, i, r, &mut scratch);
                    prop.apply(r, t, &mut left, &mut scratch);
                    let right = mild(s, r, t, &mut scratch);
                    let scale = whole.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
                    let d = (0..len).map(|k| (whole[k] - left[k] - right[k]).norm()).fold(0.0, f64::max);
                    worst = worst.max(d / scale);
                }
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::BrownianDriver;
    use crate::propagator::Propagator;
    use approx::assert_relative_eq;

    fn scalar() -> FieldShape {
        FieldShape::new(1, 0, 1).unwrap()
    }

    #[test]
    fn additive_germ_sews_to_itself() {
        let grid = TimeGrid::dyadic(1.0, 8).unwrap();
        let nodes = grid.nodes().to_vec();
        let germ = FnGerm {
            shape: scalar(),
            num_samples: 1,
            deterministic: true,
            rates: None,
            f: move |_, i: usize, j: usize, out: &mut [C64]| out[0] = C64::new(nodes[j] - nodes[i], 0.0),
        };
        let prop = GridPropagator::identity(&grid, scalar());
        let res = mild_sew(&germ, &prop, &SewingConfig::new(8)).unwrap();
        assert!(res.level_diffs.iter().all(|d| *d < 1e-14));
        assert_relative_eq!(res.limit.field(0, 256)[0].re, 1.0, epsilon = 1e-13);
        assert!(res.germ_gap < 1e-13);
        assert_eq!(rate_fit(&[0.0, 0.0, 0.0]).0, f64::INFINITY);
    }

    #[test]
    fn riemann_germ_approaches_one_half() {
        let grid = TimeGrid::dyadic(1.0, 10).unwrap();
        let nodes = grid.nodes().to_vec();
        let germ = FnGerm {
            shape: scalar(),
            num_samples: 1,
            deterministic: true,
            rates: None,
            f: move |_, i: usize, j: usize, out: &mut [C64]| out[0] = C64::new(nodes[i] * (nodes[j] - nodes[i]), 0.0),
        };
        let prop = GridPropagator::identity(&grid, scalar());
        let res = mild_sew(&germ, &prop, &SewingConfig::new(10)).unwrap();
        let z = res.limit.field(0, 1024)[0].re;
        assert!((z - 0.5).abs() <= 2f64.powi(-10));
        assert_relative_eq!(res.fitted_rate, -1.0, epsilon = 1e-6);
        let b = balanced_sum(&germ, &prop, 0, 0, 1024);
        assert_relative_eq!(b[0].re, z, max_relative = 1e-12);
    }

    #[test]
    fn ito_germ_matches_ito_formula() {
        let grid = TimeGrid::dyadic(1.0, 10).unwrap();
        let drv = BrownianDriver::sample(5, &grid, 1, 200).unwrap();
        let paths: Vec<Vec<f64>> = (0..200).map(|s| drv.path(s)).collect();
        let germ = FnGerm {
            shape: scalar(),
            num_samples: 200,
            deterministic: false,
            rates: None,
            f: |s: usize, i: usize, j: usize, out: &mut [C64]| {
                let w = &paths[s];
                out[0] = C64::new(w[i] * (w[j] - w[i]), 0.0);
            },
        };
        let prop = GridPropagator::identity(&grid, scalar());
        let res = mild_sew(&germ, &prop, &SewingConfig::new(10)).unwrap();
        assert!((res.fitted_rate + 0.5).abs() < 0.25, "slope {}", res.fitted_rate);
        let mut err = 0.0;
        for (s, w) in paths.iter().enumerate() {
            let exact = 0.5 * (w[1024] * w[1024] - 1.0);
            err += (res.limit.field(s, 1024)[0].re - exact).powi(2);
        }
        // L² error of the finest sum is (2T²/N)^{1/2}/2.
        let rms = (err / 200.0).sqrt();
        assert!(rms < 3.0 * (2.0 / 1024.0f64).sqrt() / 2.0);
    }

    #[test]
    fn heat_limit_satisfies_mild_chasles() {
        let shape = FieldShape::new(1, 2, 1).unwrap();
        let grid = TimeGrid::dyadic(1.0, 6).unwrap();
        let nodes = grid.nodes().to_vec();
        let germ = FnGerm {
            shape,
            num_samples: 1,
            deterministic: true,
            rates: None,
            f: move |_, i: usize, j: usize, out: &mut [C64]| {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = C64::new((nodes[j] - nodes[i]) * (1.0 + nodes[i] * k as f64), 0.0);
                }
            },
        };
        let prop = GridPropagator::new(&Propagator::heat(0.05), &grid, shape).unwrap();
        let res = mild_sew(&germ, &prop, &SewingConfig::new(6)).unwrap();
        assert!(mild_chasles_defect(&res.limit, &prop, 9) < 1e-12);
        let b = balanced_sum(&germ, &prop, 0, 0, 64);
        for (x, y) in b.iter().zip(res.limit.field(0, 64)) {
            assert!((x - y).norm() <= 1e-12 * y.norm().max(1.0));
        }
    }

    #[test]
    fn non_dyadic_grid_is_rejected() {
        let grid = TimeGrid::uniform(1.0, 12).unwrap();
        let germ = FnGerm { shape: scalar(), num_samples: 1, deterministic: true, rates: None, f: |_, _, _, _: &mut [C64]| {} };
        let prop = GridPropagator::identity(&grid, scalar());
        assert!(mild_sew(&germ, &prop, &SewingConfig::new(3)).is_err());
    }
}
