//! `rspde solve`: solve a preset and report its diagnostics.

use rspde_core::solver::{max_trace_ratio, solve_rspde, spatial_regularity_probe, MildSolution, RegularityRow};
use rspde_core::torus::{closed_form_rel_err, gbm_moment_check, Oracle};
use rspde_core::{preset, Archive, RspdeProblem, ScrpNormReport, SpectralField, TorusProblemSpec};
use serde::Serialize;

use crate::config::SolveConfig;
use crate::{csv_bytes, json_bytes, Check, CliError, Outcome};

pub const PICARD_MAX_RATIO: f64 = 0.5;
pub const CLOSED_FORM_TOL: f64 = 1e-3;
pub const MOMENT_MAX_SIGMAS: f64 = 3.0;
pub const HERMITIAN_TOL: f64 = 1e-10;
pub const REGULARITY_SLACK: f64 = 0.1;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormSummary {
    pub y_norm: f64,
    pub y_prime_norm: f64,
    pub cond_remainder_norm: f64,
    pub total: f64,
}

impl From<ScrpNormReport> for NormSummary {
    fn from(r: ScrpNormReport) -> Self {
        Self { y_norm: r.y_norm, y_prime_norm: r.y_prime_norm, cond_remainder_norm: r.cond_remainder_norm, total: r.total }
    }
}

#[derive(Debug, Serialize)]
pub struct RegularityCsvRow {
    pub theta: f64,
    pub time: f64,
    pub norm: f64,
    pub slope: f64,
}

pub fn regularity_csv(rows: &[RegularityRow]) -> Vec<RegularityCsvRow> {
    rows.iter()
        .flat_map(|r| {
            r.times.iter().zip(&r.norms).map(|(t, n)| RegularityCsvRow { theta: r.theta, time: *t, norm: *n, slope: r.slope })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct RegularitySummary {
    pub theta: f64,
    pub slope: f64,
}

#[derive(Debug, Serialize)]
struct MomentSummary {
    mean: f64,
    stderr: f64,
    exact: f64,
}

#[derive(Debug, Serialize)]
struct SolveReport<'a> {
    preset: &'a str,
    seed: u64,
    num_steps: usize,
    num_samples: usize,
    zero_data: bool,
    epsilon: f64,
    windows: &'a [(usize, usize)],
    converged: bool,
    picard_trace: &'a [Vec<f64>],
    picard_max_ratio: f64,
    solution_norm: NormSummary,
    residual: f64,
    regularity: Vec<RegularitySummary>,
    hermitian_defect: f64,
    max_abs_coefficient: f64,
    closed_form_rel_err: Option<f64>,
    moment: Option<MomentSummary>,
    moment_rel_err_sigmas: Option<f64>,
    checks: &'a [Check],
}

/// The preset with every override from `cfg` applied.
pub fn configured_spec(cfg: &SolveConfig, seed: Option<u64>) -> Result<TorusProblemSpec, CliError> {
    let mut spec = preset(&cfg.preset)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(m) = cfg.samples {
        spec.num_samples = m;
    }
    if let Some(n) = cfg.steps {
        spec.num_steps = n;
    }
    if let Some(t) = cfg.tol {
        spec.picard.tol = t;
    }
    if cfg.epsilon.is_some() {
        spec.picard.epsilon = cfg.epsilon;
    }
    spec.picard.theta_probe = cfg.thetas.clone();
    if cfg.zero_data {
        spec.xi = SpectralField::zeros(spec.shape()?, true);
        spec.g_pair = None;
    }
    Ok(spec)
}

/// Largest successive-difference ratio over all windows, ignoring steps
/// already below the Picard tolerance.
pub fn picard_max_ratio(sol: &MildSolution, tol: f64) -> f64 {
    sol.picard_trace.iter().map(|t| max_trace_ratio(t, tol)).fold(0.0, f64::max)
}

pub struct Solved {
    pub spec: TorusProblemSpec,
    pub problem: RspdeProblem,
    pub solution: MildSolution,
}

pub fn solve_spec(spec: TorusProblemSpec) -> Result<Solved, CliError> {
    let problem = spec.problem()?;
    let solution = solve_rspde(&problem, &spec.picard)?;
    Ok(Solved { spec, problem, solution })
}

pub fn run(cfg: &SolveConfig, seed: Option<u64>) -> Result<Outcome, CliError> {
    let Solved { spec, problem, solution } = solve_spec(configured_spec(cfg, seed)?)?;
    let y = solution.u.y();
    let ratio = picard_max_ratio(&solution, spec.picard.tol);
    let rows = spatial_regularity_probe(&solution, &problem, &cfg.thetas)?;
    let hermitian = y.hermitian_defect();
    let max_abs = y.data().iter().map(|c| c.norm()).fold(0.0, f64::max);

    let mut checks = vec![
        Check::at_least("converged", f64::from(u8::from(solution.converged)), 1.0),
        Check::at_most("picard_max_ratio", ratio, PICARD_MAX_RATIO),
        Check::at_most("hermitian_defect", hermitian, HERMITIAN_TOL),
    ];
    if cfg.zero_data {
        checks.push(Check::at_most("zero_data_max_abs", max_abs, 0.0));
    } else {
        for r in &rows {
            checks.push(Check::at_least(format!("regularity_slope[{}]", r.theta), r.slope, -r.theta - REGULARITY_SLACK));
        }
    }
    let mut closed = None;
    let (mut moment, mut sigmas) = (None, None);
    if !cfg.zero_data {
        match spec.oracle {
            Oracle::LinearRough { .. } => {
                let e = closed_form_rel_err(&spec, &problem, &solution)?;
                checks.push(Check::at_most("closed_form_rel_err", e, CLOSED_FORM_TOL));
                closed = Some(e);
            }
            Oracle::GbmMoment { .. } => {
                let mc = gbm_moment_check(&spec, &problem, &solution)?;
                checks.push(Check::at_most("moment_rel_err_sigmas", mc.sigmas, MOMENT_MAX_SIGMAS));
                moment = Some(MomentSummary { mean: mc.mean, stderr: mc.stderr, exact: mc.exact });
                sigmas = Some(mc.sigmas);
            }
            Oracle::None => {}
        }
    }
    let report = SolveReport {
        preset: &cfg.preset,
        seed: spec.seed,
        num_steps: spec.num_steps,
        num_samples: spec.num_samples,
        zero_data: cfg.zero_data,
        epsilon: solution.epsilon,
        windows: &solution.windows,
        converged: solution.converged,
        picard_trace: &solution.picard_trace,
        picard_max_ratio: ratio,
        solution_norm: solution.solution_norm.into(),
        residual: solution.residual,
        regularity: rows.iter().map(|r| RegularitySummary { theta: r.theta, slope: r.slope }).collect(),
        hermitian_defect: hermitian,
        max_abs_coefficient: max_abs,
        closed_form_rel_err: closed,
        moment,
        moment_rel_err_sigmas: sigmas,
        checks: &checks,
    };
    let mut files = Vec::new();
    if cfg.write_archive {
        files.push(("solution.rspd".to_string(), Archive::from_ensemble(y)?.to_bytes()));
    }
    files.push(("regularity.csv".to_string(), csv_bytes(&regularity_csv(&rows))?));
    files.push(("solve_report.json".to_string(), json_bytes(&report)?));
    Ok(Outcome { files, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_linear_passes() {
        let out = run(&SolveConfig::default(), None).unwrap();
        for c in &out.checks {
            assert!(c.pass, "{c:?}");
        }
        let report: serde_json::Value = serde_json::from_slice(out.file("solve_report.json").unwrap()).unwrap();
        assert!(report["closed_form_rel_err"].as_f64().unwrap() <= CLOSED_FORM_TOL);
    }

    #[test]
    fn zero_data_gives_an_archive_of_zeros() {
        let cfg = SolveConfig { zero_data: true, ..SolveConfig::default() };
        let out = run(&cfg, None).unwrap();
        let archive = Archive::from_bytes(out.file("solution.rspd").unwrap()).unwrap();
        assert!(archive.payload.iter().all(|v| *v == 0.0));
        assert!(out.checks.iter().all(|c| c.pass));
    }

    #[test]
    fn unknown_preset_is_rejected() {
        let cfg = SolveConfig { preset: "burgers".into(), ..SolveConfig::default() };
        assert_eq!(run(&cfg, None).unwrap_err().exit_code(), 2);
    }
}
