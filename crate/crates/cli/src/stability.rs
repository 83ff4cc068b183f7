//! `rspde stability`: perturbation ladders for the solution map and the
//! rough convolution.

use rspde_core::convolution::convolution_stability;
use rspde_core::solver::solution_map_distance;
use rspde_core::torus::build_problem;
use rspde_core::{preset, ControlledEnsemble, RspdeProblem, SampleEnsemble, SpectralField, TorusProblemSpec};
use serde::Serialize;

use crate::config::{Perturbation, StabilityConfig};
use crate::{csv_bytes, json_bytes, Check, CliError, Outcome};

pub const MAX_RATIO_SPREAD: f64 = 3.0;
pub const HALVING: (f64, f64) = (0.4, 0.6);

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LadderRow {
    pub eps: f64,
    pub out_distance: f64,
    pub rhs_aggregate: f64,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
struct StabilityReport<'a> {
    preset: &'a str,
    perturbation: &'a str,
    seed: u64,
    rows: &'a [LadderRow],
    ratio_spread: Option<f64>,
    checks: &'a [Check],
}

/// A unit cosine in the first channel along the first axis.
fn direction(spec: &TorusProblemSpec) -> Result<SpectralField, CliError> {
    let mut k = vec![0i64; spec.dim_n];
    k[0] = 1;
    Ok(SpectralField::cosine_mode(spec.shape()?, 0, &k, 1.0)?)
}

fn ratio(out: f64, rhs: f64) -> f64 {
    if rhs == 0.0 {
        0.0
    } else {
        out / rhs
    }
}

/// `ξ ⊗ 1` in every driver direction, constant in time, with `Y′ = 0`.
fn constant_integrand(field: &SpectralField, base: &RspdeProblem) -> Result<ControlledEnsemble, CliError> {
    let e = base.lifts().dim_e();
    let shape = field.shape();
    let ys = shape.with_channels(shape.channels * e);
    let mut coeffs = Vec::with_capacity(ys.len());
    for c in 0..shape.channels {
        for _ in 0..e {
            coeffs.extend_from_slice(field.channel(c));
        }
    }
    let y = SampleEnsemble::constant(&SpectralField::from_coeffs(ys, field.is_real_valued(), coeffs)?, base.grid(), 1);
    let yp = SampleEnsemble::zeros(shape.with_channels(shape.channels * e * e), base.grid(), 1, true);
    Ok(ControlledEnsemble::new(y, yp, base.lifts(), 0.0, base.exps())?)
}

pub fn ladder(cfg: &StabilityConfig, spec: &TorusProblemSpec) -> Result<Vec<LadderRow>, CliError> {
    let (lifts, driver) = spec.sample_inputs(spec.seed)?;
    let base = build_problem(spec, &lifts, driver.clone(), spec.exps, spec.m)?;
    let dir = direction(spec)?;
    let mut rows = Vec::with_capacity(cfg.eps.len());
    for &eps in &cfg.eps {
        let row = match cfg.perturbation {
            Perturbation::Xi => {
                let mut other = spec.clone();
                other.xi = spec.xi.axpy(eps, &dir)?;
                let p2 = build_problem(&other, &lifts, driver.clone(), spec.exps, spec.m)?;
                let (out, rhs) = solution_map_distance(&base, &p2, &spec.picard)?;
                LadderRow { eps, out_distance: out, rhs_aggregate: rhs, ratio: ratio(out, rhs) }
            }
            Perturbation::Lift => {
                let p2 = build_problem(spec, &lifts.scaled(1.0 + eps), driver.clone(), spec.exps, spec.m)?;
                let (out, rhs) = solution_map_distance(&base, &p2, &spec.picard)?;
                LadderRow { eps, out_distance: out, rhs_aggregate: rhs, ratio: ratio(out, rhs) }
            }
            Perturbation::Convolution => {
                let c1 = constant_integrand(&spec.xi, &base)?;
                let c2 = constant_integrand(&spec.xi.axpy(eps, &dir)?, &base)?;
                let r = convolution_stability(&c1, &c2, base.propagator(), 0.0, spec.m)?;
                LadderRow { eps, out_distance: r.out_distance, rhs_aggregate: r.rhs_aggregate, ratio: r.ratio }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// `max/min` of the ratio column over the nonzero rungs.
pub fn ratio_spread(rows: &[LadderRow]) -> Option<f64> {
    let r: Vec<f64> = rows.iter().filter(|r| r.eps > 0.0).map(|r| r.ratio).collect();
    if r.len() < 2 {
        return None;
    }
    let (lo, hi) = r.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    Some(if lo > 0.0 { hi / lo } else { f64::INFINITY })
}

pub fn ladder_checks(cfg: &StabilityConfig, rows: &[LadderRow]) -> Vec<Check> {
    let mut checks = Vec::new();
    for r in rows.iter().filter(|r| r.eps == 0.0) {
        checks.push(Check::at_most("eps0_out_distance", r.out_distance, 0.0));
    }
    if let Some(s) = ratio_spread(rows) {
        checks.push(Check::at_most("ratio_spread", s, MAX_RATIO_SPREAD));
    }
    if cfg.perturbation == Perturbation::Xi {
        for big in rows.iter().filter(|r| r.eps > 0.0) {
            let half = rows.iter().find(|r| (r.eps - 0.5 * big.eps).abs() <= 1e-12 * big.eps);
            if let Some(h) = half {
                let q = if big.out_distance > 0.0 { h.out_distance / big.out_distance } else { f64::NAN };
                checks.push(Check::within(format!("halving_ratio[{}]", big.eps), q, HALVING.0, HALVING.1));
            }
        }
    }
    checks
}

pub fn run(cfg: &StabilityConfig, seed: Option<u64>) -> Result<Outcome, CliError> {
    let mut spec = preset(&cfg.preset)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = cfg.steps {
        spec.num_steps = n;
    }
    let rows = ladder(cfg, &spec)?;
    let checks = ladder_checks(cfg, &rows);
    let perturbation = match cfg.perturbation {
        Perturbation::Xi => "xi",
        Perturbation::Lift => "lift",
        Perturbation::Convolution => "convolution",
    };
    let report = StabilityReport {
        preset: &cfg.preset,
        perturbation,
        seed: spec.seed,
        rows: &rows,
        ratio_spread: ratio_spread(&rows),
        checks: &checks,
    };
    Ok(Outcome {
        files: vec![("stability.csv".into(), csv_bytes(&rows)?), ("stability_report.json".into(), json_bytes(&report)?)],
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_perturbation_passes_on_heat_linear() {
        for p in [Perturbation::Xi, Perturbation::Lift, Perturbation::Convolution] {
            let cfg = StabilityConfig { perturbation: p, ..StabilityConfig::default() };
            let out = run(&cfg, None).unwrap();
            assert!(!out.checks.is_empty());
            for c in &out.checks {
                assert!(c.pass, "{p:?}: {c:?}");
            }
        }
    }

    #[test]
    fn spread_ignores_the_zero_rung() {
        let row = |eps, ratio| LadderRow { eps, out_distance: eps, rhs_aggregate: 1.0, ratio };
        assert_eq!(ratio_spread(&[row(0.0, 0.0), row(0.1, 1.0), row(0.2, 2.0)]), Some(2.0));
        assert_eq!(ratio_spread(&[row(0.1, 1.0)]), None);
    }
}
