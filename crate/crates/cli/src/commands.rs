//! Subcommand implementations.
//!
//! Each handler resolves its configuration, loads data, drives the library,
//! and emits one JSON report to stdout. `simulate` additionally prints an
//! aligned summary table to stderr so piping stdout stays machine-clean.

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::{json, Value};

use scdid::data::{
    load_panel_csv, load_rc_csv, validate, validate_rc, CovariateProfile, PanelDataset,
    RepeatedCrossSection, StaggeredDesign,
};
use scdid::estimator::{
    default_e_bar, estimate_att_panel, estimate_att_rc, estimate_att_staggered, event_study,
    staggered_subproblem, AttEstimate, Design, EstimateConfig, FittedPanel, WeightMode,
};
use scdid::inference::{
    bootstrap_rc, bootstrap_target, influence_diagnostics, influence_pt, pooled_variance, quantile,
    BootstrapResult, MultiplierSpec,
};
use scdid::kernel_regression::Bandwidth;
use scdid::simulation::{
    monte_carlo, recommended_config, CalibrationSource, DgpKind, DgpSpec, MonteCarloReport,
};

use crate::args::{
    BootstrapArgs, DesignArg, EstimateArgs, EventStudyArgs, SimulateArgs, ValidateArgs,
    WeightDistArg,
};
use crate::config::{self, ConfigError, DesignKind, Extras, Resolved};
use crate::report::Report;

pub fn estimate(args: &EstimateArgs) -> Result<()> {
    let t0 = Instant::now();
    let run = config::resolve(
        &args.common,
        Extras {
            staggered: Some(&args.staggered),
            by_discrete: args.by_discrete.as_deref(),
            ..Extras::default()
        },
    )?;
    apply_threads(run.threads)?;
    let cfg = run.estimate_config();
    let mut warnings = Vec::new();

    let results = match run.design_kind {
        DesignKind::Panel => {
            let ds = load_panel(&run)?;
            match &run.by_discrete {
                Some(col) => panel_cells(&ds, col, &mut warnings, |sub, w| {
                    let est = estimate_att_panel(sub, &cfg)?;
                    w.extend(estimate_warnings(&est));
                    Ok(json!({ "estimate": est }))
                })?,
                None => {
                    let est = estimate_att_panel(&ds, &cfg)?;
                    warnings.extend(estimate_warnings(&est));
                    json!({ "estimate": est })
                }
            }
        }
        DesignKind::Rc => {
            let data = load_rc(&run)?;
            match &run.by_discrete {
                Some(col) => rc_cells(&data, col, &mut warnings, |sub, w| {
                    let est = estimate_att_rc(sub, &cfg)?;
                    w.extend(estimate_warnings(&est));
                    Ok(json!({ "estimate": est }))
                })?,
                None => {
                    let est = estimate_att_rc(&data, &cfg)?;
                    warnings.extend(estimate_warnings(&est));
                    json!({ "estimate": est })
                }
            }
        }
        DesignKind::Staggered => {
            let ds = load_panel(&run)?;
            let design = staggered_design(&ds, &run)?;
            let cohort = require_cohort(&run)?;
            let est = estimate_att_staggered(
                &ds,
                &design,
                &cohort,
                run.event_time.unwrap_or(0),
                run.e_bar,
                &cfg,
            )?;
            warnings.extend(estimate_warnings(&est));
            json!({ "estimate": est })
        }
    };

    Report::new("estimate", run.clone(), results, warnings, t0.elapsed()).emit(run.out.as_deref())
}

pub fn bootstrap(args: &BootstrapArgs) -> Result<()> {
    let t0 = Instant::now();
    let run = config::resolve(&args.common, Extras::for_bootstrap(args))?;
    apply_threads(run.threads)?;
    let cfg = run.estimate_config();
    let mut warnings = Vec::new();

    let results = match run.design_kind {
        DesignKind::Panel => {
            let ds = load_panel(&run)?;
            match &run.by_discrete {
                Some(col) => panel_cells(&ds, col, &mut warnings, |sub, w| {
                    bootstrap_panel_json(sub, Design::Panel, &run, &cfg, args.pt_only, w)
                })?,
                None => bootstrap_panel_json(
                    &ds,
                    Design::Panel,
                    &run,
                    &cfg,
                    args.pt_only,
                    &mut warnings,
                )?,
            }
        }
        DesignKind::Rc => {
            let data = load_rc(&run)?;
            match &run.by_discrete {
                Some(col) => rc_cells(&data, col, &mut warnings, |sub, w| {
                    bootstrap_rc_json(sub, &run, &cfg, w)
                })?,
                None => bootstrap_rc_json(&data, &run, &cfg, &mut warnings)?,
            }
        }
        DesignKind::Staggered => {
            let ds = load_panel(&run)?;
            let design = staggered_design(&ds, &run)?;
            let cohort = require_cohort(&run)?;
            let g = ds
                .group_labels
                .iter()
                .position(|l| l == &cohort)
                .map(|p| p + 1)
                .ok_or_else(|| scdid::Error::UnknownGroupLabel(cohort.clone()))?;
            let e = run.event_time.unwrap_or(0);
            let e_bar = match run.e_bar {
                Some(v) => v,
                None => default_e_bar(&ds, &design, &[g], e)?,
            };
            let sub = staggered_subproblem(&ds, &design, g, e, e_bar)?;
            bootstrap_panel_json(
                &sub.panel,
                Design::Staggered {
                    group: cohort,
                    event_time: e,
                },
                &run,
                &cfg,
                args.pt_only,
                &mut warnings,
            )?
        }
    };

    Report::new("bootstrap", run.clone(), results, warnings, t0.elapsed()).emit(run.out.as_deref())
}

pub fn event_study_cmd(args: &EventStudyArgs) -> Result<()> {
    let t0 = Instant::now();
    match args.common.design {
        None | Some(DesignArg::Staggered) => {}
        Some(_) => {
            return Err(ConfigError(
                "event-study works on staggered designs only; drop --design or set it to staggered"
                    .into(),
            )
            .into())
        }
    }
    let mut common = args.common.clone();
    common.design = Some(DesignArg::Staggered);
    let run = config::resolve(
        &common,
        Extras {
            staggered: Some(&args.staggered),
            ..Extras::default()
        },
    )?;
    apply_threads(run.threads)?;
    let cfg = run.estimate_config();

    let ds = load_panel(&run)?;
    let design = staggered_design(&ds, &run)?;
    let es = event_study(&ds, &design, run.event_time.unwrap_or(0), run.e_bar, &cfg)?;
    let results = json!({ "event_study": es });

    Report::new(
        "event-study",
        run.clone(),
        results,
        Vec::new(),
        t0.elapsed(),
    )
    .emit(run.out.as_deref())
}

pub fn validate_cmd(args: &ValidateArgs) -> Result<()> {
    let t0 = Instant::now();
    let run = config::resolve(
        &args.common,
        Extras {
            staggered: Some(&args.staggered),
            treated_optional: true,
            ..Extras::default()
        },
    )?;
    let mut warnings = Vec::new();

    let results = match run.design_kind {
        DesignKind::Panel | DesignKind::Staggered => {
            let ds = load_panel(&run)?;
            let design = match &run.adoption {
                Some(_) => Some(staggered_design(&ds, &run)?),
                None => None,
            };
            let rep = validate(&ds, design.as_ref());
            warnings.extend(rep.warnings.iter().cloned());
            json!({ "validation": rep })
        }
        DesignKind::Rc => {
            let data = load_rc(&run)?;
            let rep = validate_rc(&data);
            warnings.extend(rep.warnings.iter().cloned());
            json!({ "validation": rep })
        }
    };

    Report::new("validate", run.clone(), results, warnings, t0.elapsed()).emit(run.out.as_deref())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let t0 = Instant::now();
    let kind = match args.dgp {
        1 => DgpKind::Dgp1,
        2 => DgpKind::Dgp2,
        3 => DgpKind::Dgp3,
        other => return Err(ConfigError(format!("--dgp must be 1, 2, or 3, got {other}")).into()),
    };
    apply_threads(args.threads)?;

    let n = args.n.unwrap_or(1000);
    let mut spec = DgpSpec::new(kind, n);
    if let Some(p) = args.periods {
        spec.n_periods = p;
    }
    if let Some(k) = args.control_groups {
        spec.n_control_groups = k;
    }
    if let Some(s) = args.effect_scale {
        spec.effect_scale = s;
    }
    if let Some(s) = args.noise_scale {
        spec.noise_scale = s;
    }
    if let Some(path) = &args.calibration {
        spec.calibration = CalibrationSource::File { path: path.clone() };
    }

    let reps = args.reps.unwrap_or(100);
    let b = args.boot.unwrap_or(0);
    let alpha = args.alpha.unwrap_or(0.05);
    let seed = args.seed.unwrap_or(0);
    let dist = args.weight_dist.unwrap_or(WeightDistArg::Exponential);
    let multiplier = match dist {
        WeightDistArg::Exponential => MultiplierSpec::Exponential,
        WeightDistArg::Mammen => MultiplierSpec::Mammen,
        WeightDistArg::Normal => MultiplierSpec::NormalShift,
        WeightDistArg::Unit => MultiplierSpec::Unit,
    };

    let cfg = recommended_config(kind, n);
    let report = monte_carlo(&spec, &cfg, reps, b, alpha, multiplier, seed)?;
    eprint!("{}", mc_table(&report, args.dgp, n));

    let echo = json!({
        "dgp": args.dgp,
        "n": n,
        "reps": reps,
        "boot": b,
        "alpha": alpha,
        "seed": seed,
        "weight_dist": match dist {
            WeightDistArg::Exponential => "exponential",
            WeightDistArg::Mammen => "mammen",
            WeightDistArg::Normal => "normal",
            WeightDistArg::Unit => "unit",
        },
        "periods": spec.n_periods,
        "control_groups": spec.n_control_groups,
        "effect_scale": spec.effect_scale,
        "noise_scale": spec.noise_scale,
        "calibration": args.calibration.as_ref().map(|p| p.display().to_string()),
        "estimator": config_echo(&cfg),
    });

    Report::new("simulate", echo, report, Vec::new(), t0.elapsed()).emit(args.out.as_deref())
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_panel(run: &Resolved) -> Result<PanelDataset> {
    load_panel_csv(Path::new(&run.data), &run.panel_schema())
        .with_context(|| format!("cannot load {}", run.data))
}

fn load_rc(run: &Resolved) -> Result<RepeatedCrossSection> {
    let schema = run.rc_schema()?;
    load_rc_csv(Path::new(&run.data), &schema).with_context(|| format!("cannot load {}", run.data))
}

fn apply_threads(threads: Option<usize>) -> Result<(), ConfigError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("cannot configure {n} worker threads: {e}")))?;
    }
    Ok(())
}

fn require_cohort(run: &Resolved) -> Result<String, ConfigError> {
    run.cohort.clone().ok_or_else(|| {
        ConfigError(
            "--cohort is required for a single staggered estimate (use the event-study command for the share-weighted aggregate)"
                .into(),
        )
    })
}

fn staggered_design(ds: &PanelDataset, run: &Resolved) -> Result<StaggeredDesign> {
    let adoption = run
        .adoption
        .as_ref()
        .ok_or_else(|| ConfigError("--adoption is required for staggered designs".into()))?;
    Ok(StaggeredDesign::from_labels(ds, adoption)?)
}

/// Diagnostics worth surfacing as report warnings.
fn estimate_warnings(est: &AttEstimate) -> Vec<String> {
    let mut w = Vec::new();
    if est.diagnostics.clamped > 0 {
        w.push(format!(
            "{} propensity-ratio evaluations were clamped to the configured maximum",
            est.diagnostics.clamped
        ));
    }
    if est.diagnostics.dropped > 0 {
        w.push(format!(
            "{} observations dropped by failed weight solves",
            est.diagnostics.dropped
        ));
    }
    w
}

fn bootstrap_panel_json(
    ds: &PanelDataset,
    design: Design,
    run: &Resolved,
    cfg: &EstimateConfig,
    pt_only: bool,
    warnings: &mut Vec<String>,
) -> Result<Value> {
    let fitted = FittedPanel::new(ds, cfg)?;
    let eval = fitted.evaluate(&vec![1.0; ds.n()])?;
    let est = fitted.summarize(&eval, design);
    let boot = bootstrap_target(
        &fitted,
        est.theta_hat,
        run.reps.expect("bootstrap command resolves reps"),
        run.alpha.expect("bootstrap command resolves alpha"),
        run.multiplier,
        run.seed,
    )?;
    warnings.extend(estimate_warnings(&est));
    if boot.failures > 0 {
        warnings.push(format!(
            "{} bootstrap replications failed even after a retry and were dropped from the quantiles",
            boot.failures
        ));
    }
    let influence = influence_json(ds, &eval, run, cfg, pt_only, warnings);
    Ok(json!({
        "estimate": est,
        "bootstrap": boot,
        "draws": draws_summary(&boot),
        "influence": influence,
    }))
}

fn bootstrap_rc_json(
    data: &RepeatedCrossSection,
    run: &Resolved,
    cfg: &EstimateConfig,
    warnings: &mut Vec<String>,
) -> Result<Value> {
    let (est, boot) = bootstrap_rc(
        data,
        cfg,
        run.reps.expect("bootstrap command resolves reps"),
        run.alpha.expect("bootstrap command resolves alpha"),
        run.multiplier,
        run.seed,
    )?;
    warnings.extend(estimate_warnings(&est));
    if boot.failures > 0 {
        warnings.push(format!(
            "{} bootstrap replications failed even after a retry and were dropped from the quantiles",
            boot.failures
        ));
    }
    Ok(json!({
        "estimate": est,
        "bootstrap": boot,
        "draws": draws_summary(&boot),
    }))
}

/// Variance diagnostics block. The synthetic-control pieces exist only for
/// solved weights; their failure degrades to a warning, not an error.
fn influence_json(
    ds: &PanelDataset,
    eval: &scdid::estimator::Evaluation,
    run: &Resolved,
    cfg: &EstimateConfig,
    pt_only: bool,
    warnings: &mut Vec<String>,
) -> Value {
    let n = eval.kept.len() as f64;
    if pt_only {
        let pt = influence_pt(ds, eval);
        let v_pool = pooled_variance(ds, eval, cfg.fit.ratio_clamp);
        return json!({
            "v_pt": pt.v_pt,
            "v_pt_decomposed": pt.v_pt_decomposed,
            "v_sc": Value::Null,
            "v_pool": v_pool,
            "se_pt": (pt.v_pt / n).sqrt(),
            "se_sc": Value::Null,
        });
    }
    match influence_diagnostics(ds, eval, run.min_eig_floor, cfg.fit.ratio_clamp) {
        Ok(diag) => {
            let se_sc = diag.v_sc.map(|v| (v / n).sqrt());
            json!({
                "v_pt": diag.v_pt,
                "v_pt_decomposed": diag.v_pt_decomposed,
                "v_sc": diag.v_sc,
                "v_pool": diag.v_pool,
                "se_pt": (diag.v_pt / n).sqrt(),
                "se_sc": se_sc,
            })
        }
        Err(e) => {
            warnings.push(format!("influence diagnostics unavailable: {e}"));
            Value::Null
        }
    }
}

fn draws_summary(boot: &BootstrapResult) -> Value {
    let mut draws = boot.draws.clone();
    draws.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| quantile(&draws, p);
    json!({
        "q05": q(0.05),
        "q25": q(0.25),
        "q50": q(0.50),
        "q75": q(0.75),
        "q95": q(0.95),
    })
}

fn config_echo(cfg: &EstimateConfig) -> Value {
    json!({
        "folds": cfg.folds,
        "order": cfg.fit.order,
        "bandwidth": match cfg.fit.bandwidth {
            Bandwidth::Fixed(h) => json!(h),
            Bandwidth::Auto => Value::Null,
        },
        "weights": match &cfg.weight_mode {
            WeightMode::Solved => "solved",
            WeightMode::Uniform => "uniform",
            WeightMode::User { .. } => "user",
        },
        "nonneg": cfg.weight_opts.nonneg,
        "allow_partial": cfg.allow_partial,
    })
}

fn mc_table(report: &MonteCarloReport, dgp: u8, n: usize) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    format!(
        "{:>4} {:>7} {:>6} {:>5} {:>10} {:>9} {:>9} {:>10} {:>9}\n\
         {:>4} {:>7} {:>6} {:>5} {:>+10.4} {:>9.4} {:>9} {:>10} {:>9}\n",
        "dgp",
        "n",
        "reps",
        "B",
        "bias",
        "sd",
        "coverage",
        "ci_length",
        "failures",
        dgp,
        n,
        report.reps,
        report.b,
        report.bias,
        report.sd,
        opt(report.coverage),
        opt(report.median_ci_length),
        report.failures,
    )
}

// ---------------------------------------------------------------------------
// Per-level cell splits for --by-discrete
// ---------------------------------------------------------------------------

fn panel_cells<F>(
    ds: &PanelDataset,
    col: &str,
    warnings: &mut Vec<String>,
    mut per_cell: F,
) -> Result<Value>
where
    F: FnMut(&PanelDataset, &mut Vec<String>) -> Result<Value>,
{
    let col_idx = discrete_index(&ds.discrete_names, col)?;
    let mut cells = Vec::new();
    for (lvl_idx, lvl) in ds.discrete_levels[col_idx].iter().enumerate() {
        let sub = split_panel_level(ds, col, col_idx, lvl_idx)?;
        let mut cell_warnings = Vec::new();
        let inner = per_cell(&sub, &mut cell_warnings)?;
        warnings.extend(
            cell_warnings
                .into_iter()
                .map(|w| format!("{col}={lvl}: {w}")),
        );
        cells.push(json!({ "level": lvl, "n": sub.n(), "results": inner }));
    }
    Ok(json!({ "column": col, "cells": cells }))
}

fn rc_cells<F>(
    data: &RepeatedCrossSection,
    col: &str,
    warnings: &mut Vec<String>,
    mut per_cell: F,
) -> Result<Value>
where
    F: FnMut(&RepeatedCrossSection, &mut Vec<String>) -> Result<Value>,
{
    let col_idx = discrete_index(&data.discrete_names, col)?;
    let mut cells = Vec::new();
    for (lvl_idx, lvl) in data.discrete_levels[col_idx].iter().enumerate() {
        let sub = split_rc_level(data, col, col_idx, lvl_idx)?;
        let mut cell_warnings = Vec::new();
        let inner = per_cell(&sub, &mut cell_warnings)?;
        warnings.extend(
            cell_warnings
                .into_iter()
                .map(|w| format!("{col}={lvl}: {w}")),
        );
        cells.push(json!({ "level": lvl, "n": sub.y.len(), "results": inner }));
    }
    Ok(json!({ "column": col, "cells": cells }))
}

fn discrete_index(names: &[String], col: &str) -> Result<usize, ConfigError> {
    names
        .iter()
        .position(|n| n == col)
        .ok_or_else(|| ConfigError(format!("'{col}' is not a discrete covariate of the data")))
}

fn drop_at<T: Clone>(items: &[T], idx: usize) -> Vec<T> {
    items
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != idx)
        .map(|(_, v)| v.clone())
        .collect()
}

/// Groups present in a cell keep their original relative order; the split
/// column disappears from the cell's covariates.
fn regroup(keep_groups: &[bool], group_labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut remap = vec![0usize; keep_groups.len()];
    let mut labels = Vec::new();
    for (g, &present) in keep_groups.iter().enumerate() {
        if present {
            labels.push(group_labels[g].clone());
            remap[g] = labels.len();
        }
    }
    (remap, labels)
}

fn cell_profile(profile: &CovariateProfile, col_idx: usize) -> CovariateProfile {
    CovariateProfile {
        continuous: profile.continuous.clone(),
        discrete: drop_at(&profile.discrete, col_idx),
    }
}

fn split_panel_level(
    ds: &PanelDataset,
    col: &str,
    col_idx: usize,
    lvl_idx: usize,
) -> Result<PanelDataset> {
    let keep: Vec<usize> = (0..ds.n())
        .filter(|&i| ds.covariates[i].discrete[col_idx] == lvl_idx)
        .collect();
    let mut present = vec![false; ds.n_groups];
    for &i in &keep {
        present[ds.group[i] - 1] = true;
    }
    if !present.first().copied().unwrap_or(false) {
        return Err(scdid::Error::InvalidData(format!(
            "level '{}' of '{col}' has no treated units",
            ds.discrete_levels[col_idx][lvl_idx]
        ))
        .into());
    }
    let (remap, labels) = regroup(&present, &ds.group_labels);
    let sub = PanelDataset::from_parts(
        keep.iter().map(|&i| ds.unit_ids[i].clone()).collect(),
        keep.iter().map(|&i| remap[ds.group[i] - 1]).collect(),
        keep.iter()
            .map(|&i| cell_profile(&ds.covariates[i], col_idx))
            .collect(),
        keep.iter().map(|&i| ds.outcomes[i].clone()).collect(),
        labels,
        ds.period_values.clone(),
        ds.continuous_names.clone(),
        drop_at(&ds.discrete_names, col_idx),
        drop_at(&ds.discrete_levels, col_idx),
    )?;
    Ok(sub)
}

fn split_rc_level(
    data: &RepeatedCrossSection,
    col: &str,
    col_idx: usize,
    lvl_idx: usize,
) -> Result<RepeatedCrossSection> {
    let keep: Vec<usize> = (0..data.y.len())
        .filter(|&i| data.covariates[i].discrete[col_idx] == lvl_idx)
        .collect();
    let mut present = vec![false; data.n_groups];
    for &i in &keep {
        present[data.group[i] - 1] = true;
    }
    if !present.first().copied().unwrap_or(false) {
        return Err(scdid::Error::InvalidData(format!(
            "level '{}' of '{col}' has no treated observations",
            data.discrete_levels[col_idx][lvl_idx]
        ))
        .into());
    }
    let (remap, labels) = regroup(&present, &data.group_labels);
    let sub = RepeatedCrossSection::from_parts(
        keep.iter().map(|&i| data.y[i]).collect(),
        keep.iter().map(|&i| remap[data.group[i] - 1]).collect(),
        keep.iter().map(|&i| data.time[i]).collect(),
        keep.iter()
            .map(|&i| cell_profile(&data.covariates[i], col_idx))
            .collect(),
        labels,
        data.period_values.clone(),
        data.continuous_names.clone(),
        drop_at(&data.discrete_names, col_idx),
        drop_at(&data.discrete_levels, col_idx),
    )?;
    Ok(sub)
}
