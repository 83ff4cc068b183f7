//! `rspde lift`: generate a lift ensemble, archive it and validate the
//! decoded archive.

use rayon::prelude::*;
use rspde_core::rough_path::{chen_defect, lift_smooth};
use rspde_core::stats::ks_two_sample;
use rspde_core::{Archive, BrownianMode, LiftEnsemble, TimeGrid};
use serde::Serialize;

use crate::config::{LiftConfig, LiftFamily, ModeName};
use crate::{json_bytes, Check, CliError, Outcome};

pub const DEFAULT_SEED: u64 = 20240501;

pub const CHEN_TOL: f64 = 1e-12;
pub const KS_MIN_P: f64 = 0.01;

#[derive(Debug, Serialize)]
struct HolderSummary {
    alpha: f64,
    path_max: f64,
    area_max: f64,
    total_max: f64,
}

#[derive(Debug, Serialize)]
struct KsSummary {
    samples: usize,
    statistic: f64,
    p_value: f64,
}

#[derive(Debug, Serialize)]
struct LiftReport<'a> {
    kind: &'a str,
    mode: &'a str,
    seed: u64,
    dim_e: usize,
    horizon: f64,
    steps: usize,
    samples: usize,
    archive_checksum: String,
    defect: f64,
    holder: HolderSummary,
    ks: Option<KsSummary>,
    checks: &'a [Check],
}

fn mode(m: ModeName) -> BrownianMode {
    match m {
        ModeName::Ito => BrownianMode::Ito,
        ModeName::Strat => BrownianMode::Strat,
    }
}

pub fn generate(cfg: &LiftConfig, seed: u64) -> Result<LiftEnsemble, CliError> {
    let grid = TimeGrid::uniform(cfg.horizon, cfg.steps)?;
    let e = cfg.dim_e;
    Ok(match cfg.kind {
        LiftFamily::Smooth => {
            let w = cfg.frequency;
            let path = move |t: f64, x: &mut [f64]| {
                for (a, v) in x.iter_mut().enumerate() {
                    *v = (w * (a + 1) as f64 * t).sin();
                }
            };
            LiftEnsemble::shared(lift_smooth(&path, &grid, e, cfg.fine_factor)?)
        }
        LiftFamily::Brownian => LiftEnsemble::brownian(seed, &grid, e, mode(cfg.mode), cfg.fine_factor, cfg.samples)?,
        LiftFamily::Fbm => LiftEnsemble::fbm(seed, &grid, e, cfg.hurst, cfg.refine_level, cfg.samples)?,
    })
}

/// Largest Chen defect over all members after expansion to all pairs.
pub fn ensemble_chen_defect(lifts: &LiftEnsemble) -> Result<f64, CliError> {
    let defects: Vec<f64> = lifts
        .members()
        .par_iter()
        .map(|l| {
            let (x, xx) = l.expand();
            chen_defect(&x, &xx, l.dim_e())
        })
        .collect::<Result<_, _>>()?;
    Ok(defects.into_iter().fold(0.0, f64::max))
}

/// `Sym(𝕏_{0,T})[0][0]` per member.
fn terminal_symmetric_entry(lifts: &LiftEnsemble) -> Vec<f64> {
    lifts
        .members()
        .iter()
        .map(|l| {
            let n = l.grid().num_steps();
            let mut xx = vec![0.0; l.dim_e() * l.dim_e()];
            l.xx(0, n, &mut xx);
            xx[0]
        })
        .collect()
}

/// KS comparison of fBm with `H = 1/2` against the Stratonovich Brownian lift.
fn distribution_check(cfg: &LiftConfig, seed: u64) -> Result<KsSummary, CliError> {
    let grid = TimeGrid::uniform(cfg.horizon, cfg.steps)?;
    let m = cfg.ks_samples;
    let fbm = LiftEnsemble::fbm(seed, &grid, cfg.dim_e, 0.5, cfg.refine_level, m)?;
    let bm = LiftEnsemble::brownian(seed, &grid, cfg.dim_e, BrownianMode::Strat, cfg.fine_factor, m)?;
    let ks = ks_two_sample(&terminal_symmetric_entry(&fbm), &terminal_symmetric_entry(&bm))
        .ok_or_else(|| CliError::Config("KS comparison needs finite, nonempty samples".into()))?;
    Ok(KsSummary { samples: m, statistic: ks.statistic, p_value: ks.p_value })
}

pub fn run(cfg: &LiftConfig, seed: u64) -> Result<Outcome, CliError> {
    let lifts = generate(cfg, seed)?;
    let archive = Archive::from_lifts(&lifts)?;
    let bytes = archive.to_bytes();
    let decoded = Archive::from_bytes(&bytes)?.to_lifts()?;
    let defect = ensemble_chen_defect(&decoded)?;
    let norms: Vec<(f64, f64)> = decoded.members().par_iter().map(|l| l.holder_norms(cfg.alpha)).collect();
    let holder = HolderSummary {
        alpha: cfg.alpha,
        path_max: norms.iter().map(|n| n.0).fold(0.0, f64::max),
        area_max: norms.iter().map(|n| n.1).fold(0.0, f64::max),
        total_max: norms.iter().map(|n| n.0 + n.1).fold(0.0, f64::max),
    };
    let mut checks = vec![Check::at_most("defect", defect, CHEN_TOL)];
    let ks = if cfg.distribution_check { Some(distribution_check(cfg, seed)?) } else { None };
    if let Some(k) = &ks {
        checks.push(Check::greater("ks_p_value", k.p_value, KS_MIN_P));
    }
    let kind = match cfg.kind {
        LiftFamily::Smooth => "smooth",
        LiftFamily::Brownian => "brownian",
        LiftFamily::Fbm => "fbm",
    };
    let report = LiftReport {
        kind,
        mode: match cfg.mode {
            ModeName::Ito => "ito",
            ModeName::Strat => "strat",
        },
        seed,
        dim_e: cfg.dim_e,
        horizon: cfg.horizon,
        steps: cfg.steps,
        samples: decoded.len(),
        archive_checksum: format!("{:016x}", archive.checksum()),
        defect,
        holder,
        ks,
        checks: &checks,
    };
    let report = json_bytes(&report)?;
    Ok(Outcome { files: vec![("lift.rspd".into(), bytes), ("lift_report.json".into(), report)], checks })
}
