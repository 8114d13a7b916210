//! Command orchestration: build the model, family and initial data from a
//! configuration, run the requested pipeline, write artifacts and a
//! manifest, and report pass/fail per check.

use crate::detflow::{
    coupled_product_residual, mass_check, simulate_coupled, simulate_nlfpk, weak_residual_labeled,
};
use crate::error::{Error, Result};
use crate::generator::integrability_report;
use crate::harness::config::ExperimentConfig;
use crate::harness::manifest::{ManifestBuilder, RunManifest};
use crate::lift::{
    ce_residual, rinfty_ode_residual, superposition_assemble, superposition_audit, AuditOptions,
    CylinderFunction, EnsemblePathLaw,
};
use crate::measure::{Chart, MeasurePath};
use crate::residual::residual_csv;
use crate::rng::StreamFactory;
use crate::stochflow::{
    coordinate_sde_residual, covariation_test, default_mgp_battery, lifted_fpk_residual, mgp_test,
    simulate_snlfpk, stochastic_mass_check,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Harness subcommands (the `report` view lives in [`super::report`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SimulateNlfpk,
    Coupled,
    LiftCheck,
    SuperpositionAudit,
    SimulateSnlfpk,
    MgpCheck,
    LiftedCheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SimulateNlfpk => "simulate-nlfpk",
            Command::Coupled => "coupled",
            Command::LiftCheck => "lift-check",
            Command::SuperpositionAudit => "superposition-audit",
            Command::SimulateSnlfpk => "simulate-snlfpk",
            Command::MgpCheck => "mgp-check",
            Command::LiftedCheck => "lifted-check",
        }
    }
}

/// One pass/fail row of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    /// Absent for informational rows.
    pub threshold: Option<f64>,
    pub pass: bool,
}

impl CheckRow {
    fn bounded(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        CheckRow {
            name: name.into(),
            value,
            threshold: Some(threshold),
            pass: value <= threshold,
        }
    }

    fn flag(name: impl Into<String>, pass: bool) -> Self {
        CheckRow {
            name: name.into(),
            value: if pass { 1.0 } else { 0.0 },
            threshold: None,
            pass,
        }
    }

    fn info(name: impl Into<String>, value: f64) -> Self {
        CheckRow {
            name: name.into(),
            value,
            threshold: None,
            pass: true,
        }
    }
}

/// The machine-readable result of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub pass: bool,
    pub rows: Vec<CheckRow>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub pass: bool,
    pub report: RunReport,
    pub manifest: RunManifest,
}

/// Execute `cmd` under `cfg`, writing all artifacts into `out_dir`.
pub fn run(cmd: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.output.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.output.threads)
            .build()
            .map_err(|e| Error::Config {
                field: "output.threads".into(),
                reason: e.to_string(),
            })?;
        pool.install(|| run_inner(cmd, cfg, out_dir))
    } else {
        run_inner(cmd, cfg, out_dir)
    }
}

fn run_inner(cmd: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    let config_toml = cfg.to_toml()?;
    let mut m = ManifestBuilder::new(out_dir, cmd.name(), &config_toml, cfg.solver.seed)?;
    m.write_file("config.toml", &config_toml)?;
    let rows = match cmd {
        Command::SimulateNlfpk => run_simulate_nlfpk(cfg, &mut m)?,
        Command::Coupled => run_coupled(cfg, &mut m)?,
        Command::LiftCheck => run_lift_check(cfg, &mut m)?,
        Command::SuperpositionAudit => run_superposition_audit(cfg, &mut m)?,
        Command::SimulateSnlfpk => run_simulate_snlfpk(cfg, &mut m)?,
        Command::MgpCheck => run_mgp_check(cfg, &mut m)?,
        Command::LiftedCheck => run_lifted_check(cfg, &mut m)?,
    };
    let report = RunReport {
        command: cmd.name().to_string(),
        pass: rows.iter().all(|r| r.pass),
        rows,
    };
    m.write_json("report.json", &report)?;
    let manifest = m.finish()?;
    Ok(RunOutcome {
        pass: report.pass,
        report,
        manifest,
    })
}

fn run_simulate_nlfpk(cfg: &ExperimentConfig, m: &mut ManifestBuilder) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let factory = StreamFactory::new(cfg.solver.seed);
    let mu0 = cfg
        .initial
        .sample(cfg.model.dim, cfg.solver.n_particles, &factory, 0, 0.0)?;
    let solver = cfg.solver.build();
    let path = simulate_nlfpk(&field, &mu0, &solver)?;
    m.write_json("path.json", &path)?;
    m.write_json("family.json", &fam.manifest())?;
    let coords = path.coordinate_path(&fam, Chart::Weighted)?;
    m.write_file("coords.csv", &coords.to_csv())?;

    let mut rows = Vec::new();
    let n_check = cfg.checks.n_check.min(fam.len());
    let phis: Vec<_> = (0..n_check).map(|i| fam.raw(i).clone()).collect();
    let labels: Vec<String> = (1..=n_check).map(|i| format!("g_{i}")).collect();
    let curves = crate::detflow::weak_residuals_batch(&path, &field, &phis, &labels)?;
    for (i, r) in curves.iter().enumerate() {
        rows.push(CheckRow::bounded(
            format!("weak_residual_g{}", i + 1),
            r.max_abs(),
            cfg.checks.tol,
        ));
    }
    m.write_file("residuals.csv", &residual_csv(&curves))?;

    let mass = mass_check(&path, &field, &cfg.checks.cutoff_ls)?;
    rows.push(CheckRow {
        name: "mass_drift".into(),
        value: mass.max_mass_drift,
        threshold: Some(0.0),
        pass: mass.max_mass_drift == 0.0,
    });
    for (l, v) in &mass.cutoff_residuals {
        rows.push(CheckRow::info(format!("cutoff_residual_l{l}"), *v));
    }
    rows.push(CheckRow::flag(
        "cutoff_residuals_decreasing",
        mass.strictly_decreasing(),
    ));
    m.write_json("mass.json", &mass)?;

    let integ = integrability_report(&field, &path, 1e9)?;
    rows.push(CheckRow::flag("integrability_finite", integ.pass));
    m.write_json("integrability.json", &integ)?;
    Ok(rows)
}

fn coupled_battery() -> Vec<CylinderFunction> {
    vec![
        CylinderFunction::coordinate(0),
        CylinderFunction::product(0, 1),
        CylinderFunction::tanh_of(0),
    ]
}

fn run_coupled(cfg: &ExperimentConfig, m: &mut ManifestBuilder) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let factory = StreamFactory::new(cfg.solver.seed);
    let n = cfg.solver.n_particles;
    let mu0 = cfg.initial.sample(cfg.model.dim, n, &factory, 0, 0.0)?;
    let nu0 = cfg
        .initial
        .sample(cfg.model.dim, n, &factory, 1, cfg.ensemble.member_shift)?;
    let solver = cfg.solver.build();
    let (mu_path, nu_path) = simulate_coupled(&field, &mu0, &nu0, &solver)?;
    m.write_json("mu_path.json", &mu_path)?;
    m.write_json("nu_path.json", &nu_path)?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let n_phi = cfg.checks.n_check.min(3).min(fam.len());
    for i in 0..n_phi {
        for cyl in coupled_battery() {
            let r = coupled_product_residual(&mu_path, &nu_path, &field, fam.raw(i), &cyl, &fam)?;
            rows.push(CheckRow::bounded(
                format!("product_residual_g{}_{}", i + 1, cyl.label()),
                r.max_abs(),
                cfg.checks.tol,
            ));
            curves.push(r);
        }
    }
    m.write_file("residuals.csv", &residual_csv(&curves))?;
    Ok(rows)
}

/// Load every `*path.json` under `dir` (recursively, sorted for
/// determinism) as a measure path.
pub fn load_measure_paths(dir: &std::path::Path) -> Result<Vec<MeasurePath>> {
    fn walk(dir: &std::path::Path, out: &mut Vec<MeasurePath>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(&path, out)?;
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("path.json"))
            {
                let text = std::fs::read_to_string(&path)?;
                let parsed: MeasurePath = serde_json::from_str(&text)
                    .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
                parsed.validate()?;
                out.push(parsed);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    if out.is_empty() {
        return Err(Error::config(
            "ensemble.paths_dir",
            format!("no *path.json files under {}", dir.display()),
        ));
    }
    Ok(out)
}

/// Mixture members: loaded from `ensemble.paths_dir` when set, otherwise
/// simulated inline (member `j` uses the particle streams of realization
/// `j` and an initial mean shifted by `j * member_shift`).
fn member_paths(cfg: &ExperimentConfig) -> Result<Vec<MeasurePath>> {
    if !cfg.ensemble.paths_dir.is_empty() {
        return load_measure_paths(std::path::Path::new(&cfg.ensemble.paths_dir));
    }
    let field = cfg.model.build()?;
    let factory = StreamFactory::new(cfg.solver.seed);
    let solver = cfg.solver.build();
    (0..cfg.ensemble.members)
        .map(|j| {
            let mu0 = cfg.initial.sample(
                cfg.model.dim,
                cfg.solver.n_particles,
                &factory,
                j as u64,
                j as f64 * cfg.ensemble.member_shift,
            )?;
            crate::detflow::simulate_member(&field, &mu0, &solver, j as u64)
        })
        .collect()
}

fn run_lift_check(cfg: &ExperimentConfig, m: &mut ManifestBuilder) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let members = member_paths(cfg)?;
    let weights = cfg.ensemble.member_weights(members.len());
    let ens = EnsemblePathLaw::new(weights, members)?;

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for cyl in [
        CylinderFunction::coordinate(0),
        CylinderFunction::product(0, 1),
        CylinderFunction::tanh_of(0),
    ] {
        let r = ce_residual(&ens, &field, &cyl, &fam)?;
        rows.push(CheckRow::bounded(
            format!("ce_residual_{}", cyl.label()),
            r.max_abs(),
            cfg.checks.tol,
        ));
        curves.push(r);
    }
    m.write_file("ce_residuals.csv", &residual_csv(&curves))?;

    // Chart consistency: the sequence-space coordinate residuals coincide
    // with the raw weak residuals.
    let member0 = &ens.members[0];
    let zpath = member0.coordinate_path(&fam, Chart::Raw)?;
    let coord_res = rinfty_ode_residual(&zpath, &field, member0, &fam)?;
    let mut max_gap = 0.0f64;
    for (i, r) in coord_res.iter().enumerate().take(3) {
        let weak = weak_residual_labeled(member0, &field, fam.raw(i), "w")?;
        for (a, b) in r.values.iter().zip(&weak.values) {
            max_gap = max_gap.max((a - b).abs());
        }
    }
    rows.push(CheckRow::bounded("chart_consistency_gap", max_gap, 1e-12));
    Ok(rows)
}

fn run_superposition_audit(
    cfg: &ExperimentConfig,
    m: &mut ManifestBuilder,
) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let mut members = member_paths(cfg)?;
    let mut frozen_weight = 0.0;
    if cfg.ensemble.frozen_control {
        // A constant path is not a solution under a nontrivial model.
        let factory = StreamFactory::new(cfg.solver.seed);
        let cloud = cfg.initial.sample(
            cfg.model.dim,
            cfg.solver.n_particles,
            &factory,
            cfg.ensemble.members as u64,
            0.0,
        )?;
        let times = members[0].times().to_vec();
        let frozen = MeasurePath::new(times.clone(), vec![cloud; times.len()])?;
        members.push(frozen);
    }
    let weights = cfg.ensemble.member_weights(members.len());
    if cfg.ensemble.frozen_control {
        frozen_weight = *weights.last().unwrap();
    }
    let (eta, marginals) = superposition_assemble(members, weights)?;
    let opts = AuditOptions {
        tol: cfg.checks.tol,
        n_check: cfg.checks.n_check,
        battery_k: cfg.checks.battery_k,
    };
    let report = superposition_audit(&eta, &field, &fam, opts)?;
    m.write_json("audit.json", &report)?;

    let expected_fraction = 1.0 - frozen_weight;
    let mut rows = vec![
        CheckRow {
            name: "mass_fraction".into(),
            value: report.mass_fraction,
            threshold: Some(expected_fraction),
            pass: (report.mass_fraction - expected_fraction).abs() <= 1e-12,
        },
        CheckRow::flag("marginal_identity_exact", report.marginal_identity),
    ];
    // The non-control battery rows only make sense without a corrupted
    // member dragging the marginal flow off the equation.
    if !cfg.ensemble.frozen_control {
        rows.push(CheckRow::bounded(
            "ce_battery_max",
            report.battery_max(),
            cfg.checks.tol,
        ));
    }
    for (j, r) in report.member_max_residuals.iter().enumerate() {
        rows.push(CheckRow::info(format!("member_{j}_max_residual"), *r));
    }
    let _ = marginals;
    Ok(rows)
}

fn run_simulate_snlfpk(cfg: &ExperimentConfig, m: &mut ManifestBuilder) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let factory = StreamFactory::new(cfg.solver.seed);
    let mu0 = cfg
        .initial
        .sample(cfg.model.dim, cfg.solver.n_particles, &factory, 0, 0.0)?;
    let solver = cfg.solver.build();
    let ens = simulate_snlfpk(&field, &mu0, &solver, cfg.ensemble.k_paths)?;

    let mut rows = Vec::new();
    let n_save = cfg.ensemble.save_realizations.min(ens.k_paths());
    let mut worst = 0.0f64;
    for (j, real) in ens.realizations.iter().take(n_save).enumerate() {
        m.write_json(&format!("realizations/r{j}/path.json"), &real.path)?;
        m.write_file(&format!("realizations/r{j}/noise.csv"), &real.noise.to_csv())?;
        let mut curves = Vec::new();
        for i in 0..cfg.checks.n_check.min(fam.len()) {
            let r = coordinate_sde_residual(&real.path, &real.noise, &field, &fam, i)?;
            worst = worst.max(r.max_abs());
            curves.push(r);
        }
        m.write_file(
            &format!("realizations/r{j}/residuals.csv"),
            &residual_csv(&curves),
        )?;
    }
    rows.push(CheckRow::bounded(
        "coordinate_residual_max",
        worst,
        cfg.checks.tol,
    ));

    let mass = stochastic_mass_check(&ens, &field, &cfg.checks.cutoff_ls)?;
    rows.push(CheckRow {
        name: "mass_drift".into(),
        value: mass.max_mass_drift,
        threshold: Some(0.0),
        pass: mass.max_mass_drift == 0.0,
    });
    for (l, v) in &mass.cutoff_residuals {
        rows.push(CheckRow::info(format!("cutoff_residual_l{l}"), *v));
    }
    rows.push(CheckRow::flag(
        "cutoff_residuals_decreasing",
        mass.strictly_decreasing(),
    ));
    m.write_json("mass.json", &mass)?;
    Ok(rows)
}

fn run_mgp_check(cfg: &ExperimentConfig, m: &mut ManifestBuilder) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let factory = StreamFactory::new(cfg.solver.seed);
    let mu0 = cfg
        .initial
        .sample(cfg.model.dim, cfg.solver.n_particles, &factory, 0, 0.0)?;
    let solver = cfg.solver.build();
    let ens = simulate_snlfpk(&field, &mu0, &solver, cfg.ensemble.k_paths)?;
    let n_nodes = ens.times().len();
    let window = (n_nodes / 2, n_nodes - 1);
    let battery = default_mgp_battery();
    let standard = mgp_test(&ens, &field, &fam, cfg.checks.mgp_i_max, window, &battery, false)?;
    let control = mgp_test(&ens, &field, &fam, cfg.checks.mgp_i_max, window, &battery, true)?;
    let k_cov = cfg.checks.mgp_i_max.min(3);
    let mut covariations = Vec::new();
    for i in 0..k_cov {
        for j in i..k_cov {
            covariations.push(covariation_test(&ens, &field, &fam, i, j)?);
        }
    }
    m.write_json(
        "mgp.json",
        &serde_json::json!({
            "standard": standard,
            "drift_dropped_control": control,
            "covariations": covariations,
        }),
    )?;
    let mut rows = vec![
        CheckRow::flag("mgp_orthogonality_all_pass", standard.all_pass),
        CheckRow::flag("mgp_negative_control_fails", !control.all_pass),
    ];
    for e in &covariations {
        rows.push(CheckRow {
            name: format!("covariation_{}_{}", e.i, e.j),
            value: e.estimate,
            threshold: Some(crate::stochflow::SE_FACTOR * e.se),
            pass: e.pass,
        });
    }
    Ok(rows)
}

fn run_lifted_check(cfg: &ExperimentConfig, m: &mut ManifestBuilder) -> Result<Vec<CheckRow>> {
    let field = cfg.model.build()?;
    let fam = cfg.family.build(cfg.model.dim)?;
    let factory = StreamFactory::new(cfg.solver.seed);
    let mu0 = cfg
        .initial
        .sample(cfg.model.dim, cfg.solver.n_particles, &factory, 0, 0.0)?;
    let solver = cfg.solver.build();
    let ens = simulate_snlfpk(&field, &mu0, &solver, cfg.ensemble.k_paths)?;
    let battery = vec![
        CylinderFunction::coordinate(0),
        CylinderFunction::product(0, 0),
        CylinderFunction::product(0, 1),
        CylinderFunction::tanh_of(0),
    ];
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for cyl in &battery {
        let e = lifted_fpk_residual(&ens, &field, &fam, cyl)?;
        rows.push(CheckRow {
            name: format!("lifted_residual_{}", e.label),
            value: e.estimate,
            threshold: Some(crate::stochflow::SE_FACTOR * e.se),
            pass: e.pass,
        });
        entries.push(e);
    }
    m.write_json("lifted.json", &entries)?;
    Ok(rows)
}
