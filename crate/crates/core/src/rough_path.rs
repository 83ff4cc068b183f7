//! Two-step rough paths `(X, 𝕏)` sampled on a time grid.
//!
//! Only the consecutive-step values `𝕏(t_i, t_{i+1})` are stored. The value on
//! an arbitrary pair is assembled with Chen's relation, so the relation holds
//! by construction.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{domain, shape, Result};
use crate::grid::{PairPolicy, TimeGrid};
use crate::rng::{stream_rng, STREAM_BROWNIAN_LIFT, STREAM_FBM_LIFT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrownianMode {
    Ito,
    Strat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LiftKind {
    Smooth,
    Brownian { mode: BrownianMode, master_seed: u64, fine_factor: usize },
    Fbm { hurst: f64, master_seed: u64, refine_level: u32 },
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderExponents {
    pub alpha: f64,
    pub beta: f64,
    pub beta_prime: f64,
}

impl HolderExponents {
    pub fn new(alpha: f64, beta: f64, beta_prime: f64) -> Result<Self> {
        if !(alpha > 1.0 / 3.0 && alpha <= 0.5) {
            return domain(format!("alpha = {alpha} must lie in (1/3, 1/2]"));
        }
        if !(beta_prime > 0.0 && beta_prime <= beta && beta <= alpha) {
            return domain("exponents must satisfy 0 < beta' <= beta <= alpha");
        }
        Ok(Self { alpha, beta, beta_prime })
    }

    /// The stricter conditions needed by the convolution and the solver.
    pub fn check_solver(&self) -> Result<()> {
        if !(self.alpha + self.beta + self.beta_prime > 1.0) {
            return domain("solver needs alpha + beta + beta' > 1");
        }
        if !(self.beta_prime < self.beta && self.beta < self.alpha) {
            return domain("solver needs beta' < beta < alpha");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoughPathLift {
    grid: TimeGrid,
    dim_e: usize,
    x: Vec<f64>,
    xx: Vec<f64>,
    sample_id: u64,
    kind: LiftKind,
}

impl RoughPathLift {
    /// `x` holds `X(t_i)` node-major, `xx_step` holds `𝕏(t_i, t_{i+1})`
    /// step-major with row-major `e×e` blocks. The path is shifted so that
    /// `X(t_0) = 0`.
    pub fn new(grid: TimeGrid, dim_e: usize, mut x: Vec<f64>, xx_step: Vec<f64>, kind: LiftKind) -> Result<Self> {
        if dim_e == 0 {
            return domain("lift dimension must be at least 1");
        }
        if x.len() != grid.num_nodes() * dim_e || xx_step.len() != grid.num_steps() * dim_e * dim_e {
            return shape("lift arrays do not match the grid");
        }
        let base: Vec<f64> = x[..dim_e].to_vec();
        for node in x.chunks_exact_mut(dim_e) {
            for (v, b) in node.iter_mut().zip(&base) {
                *v -= b;
            }
        }
        Ok(Self { grid, dim_e, x, xx: xx_step, sample_id: 0, kind })
    }

    pub fn zero(grid: TimeGrid, dim_e: usize) -> Self {
        let (n, s) = (grid.num_nodes(), grid.num_steps());
        Self { grid, dim_e, x: vec![0.0; n * dim_e], xx: vec![0.0; s * dim_e * dim_e], sample_id: 0, kind: LiftKind::Smooth }
    }

    pub fn with_sample_id(mut self, id: u64) -> Self {
        self.sample_id = id;
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn sample_id(&self) -> u64 {
        self.sample_id
    }

    pub fn kind(&self) -> LiftKind {
        self.kind
    }

    pub fn x_values(&self) -> &[f64] {
        &self.x
    }

    pub fn xx_steps(&self) -> &[f64] {
        &self.xx
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim_e..(i + 1) * self.dim_e]
    }

    #[inline]
    pub fn xx_step(&self, i: usize) -> &[f64] {
        let e2 = self.dim_e * self.dim_e;
        &self.xx[i * e2..(i + 1) * e2]
    }

    pub fn dx(&self, i: usize, j: usize, out: &mut [f64]) {
        for a in 0..self.dim_e {
            out[a] = self.x[j * self.dim_e + a] - self.x[i * self.dim_e + a];
        }
    }

    /// `𝕏(t_i, t_j)` by Chen composition of the stored steps.
    pub fn xx(&self, i: usize, j: usize, out: &mut [f64]) {
        let mut walker = PairWalker::new(self, i);
        out.iter_mut().for_each(|v| *v = 0.0);
        for k in i..j {
            walker.step(self, k);
        }
        out.copy_from_slice(&walker.xx);
    }

    /// All-pairs arrays: `X` per node and `𝕏(t_i, t_j)` at `[(i·(N+1) + j)·e²]`.
    pub fn expand(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.num_nodes();
        let e2 = self.dim_e * self.dim_e;
        let mut full = vec![0.0; n * n * e2];
        full.par_chunks_mut(n * e2).enumerate().for_each(|(i, row)| {
            let mut w = PairWalker::new(self, i);
            for j in i + 1..n {
                w.step(self, j - 1);
                row[j * e2..(j + 1) * e2].copy_from_slice(&w.xx);
            }
        });
        (self.x.clone(), full)
    }

    /// `(|δX|_α, |𝕏|_{2α})` over the shared pair policy.
    pub fn holder_norms(&self, alpha: f64) -> (f64, f64) {
        let zero = Self::zero(self.grid.clone(), self.dim_e);
        holder_distance_parts(self, &zero, alpha)
    }

    /// Nodes `a..=b` as a lift on a window grid, rebased so `X(t_a) = 0`.
    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        let grid = self.grid.restrict(a, b)?;
        let e = self.dim_e;
        let x = self.x[a * e..(b + 1) * e].to_vec();
        let xx = self.xx[a * e * e..b * e * e].to_vec();
        let mut out = Self::new(grid, e, x, xx, self.kind)?;
        out.sample_id = self.sample_id;
        Ok(out)
    }

    /// Canonical rescaling `(cX, c²𝕏)`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.x.iter_mut().for_each(|v| *v *= c);
        out.xx.iter_mut().for_each(|v| *v *= c * c);
        out.kind = match self.kind {
            LiftKind::Smooth => LiftKind::Smooth,
            _ => LiftKind::Custom,
        };
        out
    }

    /// Is `E_s δX(s,t) = 0` and `E_s 𝕏(s,t) = 0` for this lift.
    pub fn is_martingale(&self) -> bool {
        matches!(self.kind, LiftKind::Brownian { mode: BrownianMode::Ito, .. })
    }
}

/// Incremental evaluation of `δX(t_i, t_j)` and `𝕏(t_i, t_j)` for fixed `i`
/// and increasing `j`.
#[derive(Clone, Debug)]
pub struct PairWalker {
    pub dx: Vec<f64>,
    pub xx: Vec<f64>,
}

impl PairWalker {
    pub fn new(lift: &RoughPathLift, _i: usize) -> Self {
        let e = lift.dim_e;
        Self { dx: vec![0.0; e], xx: vec![0.0; e * e] }
    }

    /// Extends the pair from `(t_i, t_k)` to `(t_i, t_{k+1})`.
    #[inline]
    pub fn step(&mut self, lift: &RoughPathLift, k: usize) {
        let e = lift.dim_e;
        let step = lift.xx_step(k);
        let (x0, x1) = (lift.x(k), lift.x(k + 1));
        for a in 0..e {
            let da = self.dx[a];
            for b in 0..e {
                self.xx[a * e + b] += step[a * e + b] + da * (x1[b] - x0[b]);
            }
        }
        for a in 0..e {
            self.dx[a] += x1[a] - x0[a];
        }
    }
}

fn check_same_grid(a: &RoughPathLift, b: &RoughPathLift) -> Result<()> {
    if a.grid != b.grid || a.dim_e != b.dim_e {
        return domain("lifts live on different grids or dimensions");
    }
    Ok(())
}

fn holder_distance_parts(a: &RoughPathLift, b: &RoughPathLift, alpha: f64) -> (f64, f64) {
    let policy = PairPolicy::for_grid(&a.grid);
    let n = a.grid.num_steps();
    let rows: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut wa, mut wb) = (PairWalker::new(a, i), PairWalker::new(b, i));
            let mut best = (0.0f64, 0.0f64);
            let last = if policy.is_anchor(i) { n } else { i + 1 };
            for j in i + 1..=last {
                wa.step(a, j - 1);
                wb.step(b, j - 1);
                if !policy.contains(i, j) {
                    continue;
                }
                let h = a.grid.node(j) - a.grid.node(i);
                let d1: f64 = wa.dx.iter().zip(&wb.dx).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let d2: f64 = wa.xx.iter().zip(&wb.xx).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                best.0 = best.0.max(d1 / h.powf(alpha));
                best.1 = best.1.max(d2 / h.powf(2.0 * alpha));
            }
            best
        })
        .collect();
    rows.into_iter().fold((0.0, 0.0), |acc, r| (acc.0.max(r.0), acc.1.max(r.1)))
}

/// `ρ_α = |δX - δX̄|_α + |𝕏 - 𝕏̄|_{2α}`.
pub fn rough_distance(a: &RoughPathLift, b: &RoughPathLift, alpha: f64) -> Result<f64> {
    check_same_grid(a, b)?;
    let (d1, d2) = holder_distance_parts(a, b, alpha);
    Ok(d1 + d2)
}

/// Largest Frobenius violation of Chen's relation over all grid triples.
/// `x` holds `X` per node; `xx` holds `𝕏` for all pairs as produced by
/// [`RoughPathLift::expand`].
pub fn chen_defect(x: &[f64], xx: &[f64], dim_e: usize) -> Result<f64> {
    if dim_e == 0 || !x.len().is_multiple_of(dim_e) {
        return domain("path array does not match the dimension");
    }
    let n = x.len() / dim_e;
    let e2 = dim_e * dim_e;
    if xx.len() != n * n * e2 {
        return domain(format!("expected {} second-level entries, got {}", n * n * e2, xx.len()));
    }
    let at = |i: usize, j: usize| &xx[(i * n + j) * e2..(i * n + j + 1) * e2];
    let worst = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut worst: f64 = 0.0;
            for r in s..n {
                for t in r..n {
                    let (st, sr, rt) = (at(s, t), at(s, r), at(r, t));
                    let mut acc = 0.0;
                    for a in 0..dim_e {
                        let dsr = x[r * dim_e + a] - x[s * dim_e + a];
                        for b in 0..dim_e {
                            let drt = x[t * dim_e + b] - x[r * dim_e + b];
                            let d = st[a * dim_e + b] - sr[a * dim_e + b] - rt[a * dim_e + b] - dsr * drt;
                            acc += d * d;
                        }
                    }
                    worst = worst.max(acc.sqrt());
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

/// Adds the piecewise-linear lift of one step from fine increments `dx`
/// (`count` rows of `e` values) into `xx` and returns the step increment.
fn piecewise_linear_step(dx: &[f64], e: usize, xx: &mut [f64], running: &mut [f64]) {
    running.iter_mut().for_each(|v| *v = 0.0);
    for inc in dx.chunks_exact(e) {
        for a in 0..e {
            for b in 0..e {
                xx[a * e + b] += (running[a] + 0.5 * inc[a]) * inc[b];
            }
        }
        for a in 0..e {
            running[a] += inc[a];
        }
    }
}

/// Canonical lift of a smooth path from its piecewise-linear interpolation on
/// a `fine_factor`-times finer grid.
pub fn lift_smooth(
    path: &dyn Fn(f64, &mut [f64]),
    grid: &TimeGrid,
    dim_e: usize,
    fine_factor: usize,
) -> Result<RoughPathLift> {
    if fine_factor == 0 {
        return domain("fine_factor must be at least 1");
    }
    let e = dim_e;
    let mut x = vec![0.0; grid.num_nodes() * e];
    for i in 0..grid.num_nodes() {
        path(grid.node(i), &mut x[i * e..(i + 1) * e]);
    }
    let mut xx = vec![0.0; grid.num_steps() * e * e];
    let mut prev = vec![0.0; e];
    let mut cur = vec![0.0; e];
    let mut incs = vec![0.0; fine_factor * e];
    let mut running = vec![0.0; e];
    for i in 0..grid.num_steps() {
        let (s, h) = (grid.node(i), grid.step(i) / fine_factor as f64);
        prev.copy_from_slice(&x[i * e..(i + 1) * e]);
        for q in 0..fine_factor {
            if q + 1 == fine_factor {
                cur.copy_from_slice(&x[(i + 1) * e..(i + 2) * e]);
            } else {
                path(s + (q + 1) as f64 * h, &mut cur);
            }
            for a in 0..e {
                incs[q * e + a] = cur[a] - prev[a];
            }
            prev.copy_from_slice(&cur);
        }
        piecewise_linear_step(&incs, e, &mut xx[i * e * e..(i + 1) * e * e], &mut running);
    }
    RoughPathLift::new(grid.clone(), e, x, xx, LiftKind::Smooth)
}

/// Brownian increments on the `fine_factor`-refined grid for one sample,
/// `fine_steps × e` values.
pub fn brownian_fine_increments(
    master_seed: u64,
    sample_id: u64,
    grid: &TimeGrid,
    dim_e: usize,
    fine_factor: usize,
) -> Vec<f64> {
    let mut rng = stream_rng(master_seed, STREAM_BROWNIAN_LIFT, sample_id);
    let mut out = Vec::with_capacity(grid.num_steps() * fine_factor * dim_e);
    for i in 0..grid.num_steps() {
        let sd = (grid.step(i) / fine_factor as f64).sqrt();
        for _ in 0..fine_factor * dim_e {
            let z: f64 = rng.sample(StandardNormal);
            out.push(sd * z);
        }
    }
    out
}

/// Brownian lift with Itô (left-point) or Stratonovich second level.
pub fn lift_brownian(
    master_seed: u64,
    sample_id: u64,
    grid: &TimeGrid,
    dim_e: usize,
    mode: BrownianMode,
    fine_factor: usize,
) -> Result<RoughPathLift> {
    if fine_factor == 0 {
        return domain("fine_factor must be at least 1");
    }
    let e = dim_e;
    let incs = brownian_fine_increments(master_seed, sample_id, grid, e, fine_factor);
    let mut x = vec![0.0; grid.num_nodes() * e];
    let mut xx = vec![0.0; grid.num_steps() * e * e];
    let mut running = vec![0.0; e];
    for i in 0..grid.num_steps() {
        running.iter_mut().for_each(|v| *v = 0.0);
        let block = &incs[i * fine_factor * e..(i + 1) * fine_factor * e];
        let step = &mut xx[i * e * e..(i + 1) * e * e];
        for inc in block.chunks_exact(e) {
            for a in 0..e {
                for b in 0..e {
                    step[a * e + b] += running[a] * inc[b];
                }
            }
            for a in 0..e {
                running[a] += inc[a];
            }
        }
        if mode == BrownianMode::Strat {
            for a in 0..e {
                step[a * e + a] += 0.5 * grid.step(i);
            }
        }
        for a in 0..e {
            x[(i + 1) * e + a] = x[i * e + a] + running[a];
        }
    }
    Ok(RoughPathLift::new(grid.clone(), e, x, xx, LiftKind::Brownian { mode, master_seed, fine_factor })?
        .with_sample_id(sample_id))
}

/// Fractional Gaussian noise increments of one component on a uniform grid
/// of `n` steps of length `h`, by circulant embedding.
fn fgn_circulant(n: usize, h: f64, hurst: f64, rng: &mut impl Rng) -> Vec<f64> {
    let two_h = 2.0 * hurst;
    let gamma = |k: usize| {
        let k = k as f64;
        0.5 * h.powf(two_h) * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
    };
    let m = 2 * n;
    let mut c: Vec<Complex64> = (0..m)
        .map(|j| {
            let k = if j <= n { j } else { m - j };
            Complex64::new(gamma(k), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut c);
    let mut w: Vec<Complex64> = c
        .iter()
        .map(|l| {
            let a = (l.re.max(0.0) / m as f64).sqrt();
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            Complex64::new(a * z1, a * z2)
        })
        .collect();
    fft.process(&mut w);
    w[..n].iter().map(|v| v.re).collect()
}

/// fBm values (excluding the origin) at the given positive times by Cholesky
/// factorization of the covariance.
fn fbm_cholesky(times: &[f64], hurst: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let n = times.len();
    let two_h = 2.0 * hurst;
    let cov = DMatrix::from_fn(n, n, |i, j| {
        let (s, t) = (times[i], times[j]);
        0.5 * (s.powf(two_h) + t.powf(two_h) - (t - s).abs().powf(two_h))
    });
    let Some(chol) = cov.cholesky() else {
        return domain("fBm covariance is not positive definite on this grid");
    };
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((chol.l() * z).iter().copied().collect())
}

fn is_uniform(grid: &TimeGrid) -> bool {
    let h = grid.step(0);
    (0..grid.num_steps()).all(|i| (grid.step(i) - h).abs() <= 1e-12 * h.max(1.0))
}

/// Geometric lift of fBm sampled on a `2^refine_level`-times finer grid.
pub fn lift_fbm(
    master_seed: u64,
    sample_id: u64,
    grid: &TimeGrid,
    dim_e: usize,
    hurst: f64,
    refine_level: u32,
) -> Result<RoughPathLift> {
    if !(hurst > 1.0 / 3.0 && hurst <= 0.5) {
        return domain(format!("Hurst parameter {hurst} outside (1/3, 1/2]"));
    }
    let e = dim_e;
    let factor = 1usize << refine_level;
    let fine = grid.refine(factor);
    let nf = fine.num_steps();
    let mut rng = stream_rng(master_seed, STREAM_FBM_LIFT, sample_id);
    // incs[q * e + a]
    let mut incs = vec![0.0; nf * e];
    let uniform = is_uniform(&fine) && grid.start() == 0.0;
    for a in 0..e {
        let comp = if uniform {
            fgn_circulant(nf, fine.step(0), hurst, &mut rng)
        } else {
            let vals = fbm_cholesky(&fine.nodes()[1..], hurst, &mut rng)?;
            let mut prev = 0.0;
            vals.iter()
                .map(|v| {
                    let d = v - prev;
                    prev = *v;
                    d
                })
                .collect()
        };
        for (q, v) in comp.into_iter().enumerate() {
            incs[q * e + a] = v;
        }
    }
    let mut x = vec![0.0; grid.num_nodes() * e];
    let mut xx = vec![0.0; grid.num_steps() * e * e];
    let mut running = vec![0.0; e];
    for i in 0..grid.num_steps() {
        let block = &incs[i * factor * e..(i + 1) * factor * e];
        piecewise_linear_step(block, e, &mut xx[i * e * e..(i + 1) * e * e], &mut running);
        for a in 0..e {
            x[(i + 1) * e + a] = x[i * e + a] + running[a];
        }
    }
    Ok(RoughPathLift::new(grid.clone(), e, x, xx, LiftKind::Fbm { hurst, master_seed, refine_level })?
        .with_sample_id(sample_id))
}

/// One lift shared by all samples, or one lift per sample.
#[derive(Clone, Debug)]
pub struct LiftEnsemble {
    members: Arc<Vec<RoughPathLift>>,
}

impl PartialEq for LiftEnsemble {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.members, &other.members) || self.members == other.members
    }
}

impl LiftEnsemble {
    pub fn shared(lift: RoughPathLift) -> Self {
        Self { members: Arc::new(vec![lift]) }
    }

    pub fn from_members(members: Vec<RoughPathLift>) -> Result<Self> {
        let Some(first) = members.first() else {
            return domain("lift ensemble needs at least one member");
        };
        if members.iter().any(|m| m.grid != first.grid || m.dim_e != first.dim_e) {
            return shape("lift ensemble members must share grid and dimension");
        }
        Ok(Self { members: Arc::new(members) })
    }

    pub fn zero(grid: &TimeGrid, dim_e: usize) -> Self {
        Self::shared(RoughPathLift::zero(grid.clone(), dim_e))
    }

    pub fn brownian(master_seed: u64, grid: &TimeGrid, dim_e: usize, mode: BrownianMode, fine_factor: usize, samples: usize) -> Result<Self> {
        let members = (0..samples as u64)
            .into_par_iter()
            .map(|s| lift_brownian(master_seed, s, grid, dim_e, mode, fine_factor))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members)
    }

    pub fn fbm(master_seed: u64, grid: &TimeGrid, dim_e: usize, hurst: f64, refine_level: u32, samples: usize) -> Result<Self> {
        let members = (0..samples as u64)
            .into_par_iter()
            .map(|s| lift_fbm(master_seed, s, grid, dim_e, hurst, refine_level))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members)
    }

    #[inline]
    pub fn get(&self, sample: usize) -> &RoughPathLift {
        if self.members.len() == 1 {
            &self.members[0]
        } else {
            &self.members[sample]
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_shared(&self) -> bool {
        self.members.len() == 1
    }

    pub fn members(&self) -> &[RoughPathLift] {
        &self.members
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.members[0].grid
    }

    pub fn dim_e(&self) -> usize {
        self.members[0].dim_e
    }

    pub fn is_martingale(&self) -> bool {
        self.members.iter().all(|m| m.is_martingale())
    }

    pub fn restrict(&self, a: usize, b: usize) -> Result<Self> {
        let members = self.members.iter().map(|m| m.restrict(a, b)).collect::<Result<Vec<_>>>()?;
        Ok(Self { members: Arc::new(members) })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { members: Arc::new(self.members.iter().map(|m| m.scaled(c)).collect()) }
    }

    /// Largest `|𝐗|_α = |δX|_α + |𝕏|_{2α}` over the members.
    pub fn holder_norm(&self, alpha: f64) -> f64 {
        self.members.iter().map(|m| {
            let (a, b) = m.holder_norms(alpha);
            a + b
        }).fold(0.0, f64::max)
    }

    /// Largest `ρ_α` between corresponding members.
    pub fn distance(&self, other: &Self, alpha: f64) -> Result<f64> {
        let n = self.len().max(other.len());
        let mut worst: f64 = 0.0;
        for s in 0..n {
            worst = worst.max(rough_distance(self.get(s), other.get(s), alpha)?);
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn linear_path_has_exact_second_level() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let v = [2.0, -1.0];
        let lift = lift_smooth(&|t, out: &mut [f64]| { out[0] = v[0] * t; out[1] = v[1] * t; }, &grid, 2, 3).unwrap();
        let mut xx = [0.0; 4];
        lift.xx(3, 11, &mut xx);
        let h = grid.node(11) - grid.node(3);
        for a in 0..2 {
            for b in 0..2 {
                assert_relative_eq!(xx[a * 2 + b], v[a] * v[b] * h * h / 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_path_lifts_to_zero() {
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let lift = lift_smooth(&|_t, out: &mut [f64]| out[0] = 3.0, &grid, 1, 4).unwrap();
        assert!(lift.x_values().iter().all(|v| *v == 0.0));
        assert!(lift.xx_steps().iter().all(|v| *v == 0.0));
        assert_eq!(lift.holder_norms(0.4), (0.0, 0.0));
    }

    #[test]
    fn chen_defect_detects_forced_violation() {
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let lift = lift_smooth(&|t, out: &mut [f64]| out[0] = (3.0 * t).sin(), &grid, 1, 4).unwrap();
        let (x, xx) = lift.expand();
        assert!(chen_defect(&x, &xx, 1).unwrap() <= 1e-14);
        let zero = vec![0.0; xx.len()];
        let d = chen_defect(&x, &zero, 1).unwrap();
        assert!(d > 0.0);
        assert!(chen_defect(&x, &xx[1..], 1).is_err());
    }

    #[test]
    fn holder_norms_of_linear_paths() {
        let grid = TimeGrid::uniform(1.0, 32).unwrap();
        let lift = lift_smooth(&|t, out: &mut [f64]| out[0] = t, &grid, 1, 1).unwrap();
        assert_relative_eq!(lift.holder_norms(0.4).0, 1.0, epsilon = 1e-12);
        let lift2 = lift_smooth(&|t, out: &mut [f64]| out[0] = 2.0 * t, &grid, 1, 1).unwrap();
        assert_relative_eq!(lift2.holder_norms(0.5).1, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn circle_area_matches_quadrature() {
        let grid = TimeGrid::uniform(1.0, 1 << 10).unwrap();
        let lift = lift_smooth(
            &|t, out: &mut [f64]| {
                out[0] = (2.0 * PI * t).cos() - 1.0;
                out[1] = (2.0 * PI * t).sin();
            },
            &grid,
            2,
            64,
        )
        .unwrap();
        let mut xx = [0.0; 4];
        lift.xx(0, grid.num_steps(), &mut xx);
        assert_relative_eq!(0.5 * (xx[1] - xx[2]), PI, max_relative = 1e-6);
    }

    #[test]
    fn strat_and_ito_differ_by_half_time() {
        let grid = TimeGrid::uniform(0.5, 8).unwrap();
        let a = lift_brownian(11, 2, &grid, 2, BrownianMode::Ito, 4).unwrap();
        let b = lift_brownian(11, 2, &grid, 2, BrownianMode::Strat, 4).unwrap();
        assert_eq!(a.x_values(), b.x_values());
        let (mut p, mut q) = ([0.0; 4], [0.0; 4]);
        a.xx(1, 6, &mut p);
        b.xx(1, 6, &mut q);
        let h = grid.node(6) - grid.node(1);
        assert_relative_eq!(q[0] - p[0], 0.5 * h, epsilon = 1e-12);
        assert_relative_eq!(q[1] - p[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn fbm_lift_is_geometric() {
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let lift = lift_fbm(5, 0, &grid, 2, 0.4, 3).unwrap();
        let (mut dx, mut xx) = ([0.0; 2], [0.0; 4]);
        lift.dx(2, 13, &mut dx);
        lift.xx(2, 13, &mut xx);
        for a in 0..2 {
            for b in 0..2 {
                let sym = 0.5 * (xx[a * 2 + b] + xx[b * 2 + a]);
                assert_relative_eq!(sym, 0.5 * dx[a] * dx[b], epsilon = 1e-12);
            }
        }
        assert!(lift_fbm(5, 0, &grid, 1, 0.3, 2).is_err());
    }

    #[test]
    fn restrict_rebases_the_path() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let lift = lift_smooth(&|t, out: &mut [f64]| out[0] = t * t, &grid, 1, 2).unwrap();
        let w = lift.restrict(4, 9).unwrap();
        assert_eq!(w.x(0), &[0.0]);
        let (mut a, mut b) = ([0.0], [0.0]);
        w.xx(1, 4, &mut a);
        lift.xx(5, 8, &mut b);
        assert_relative_eq!(a[0], b[0], epsilon = 1e-15);
    }
}
