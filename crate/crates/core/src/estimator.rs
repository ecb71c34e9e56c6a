//! ATT estimation: the doubly robust moment function, the cross-fitted
//! estimator for panel and repeated-cross-section data, the no-covariate
//! closed form, and staggered-adoption / event-study aggregation.
//!
//! The moment at observation i is
//!
//! ```text
//! φᵢ = (1/π̂₁) · (𝒢₁ᵢ − Σ_{g≥2} ŵ_g(Xᵢ)·r̂_{1,g}(Xᵢ)·𝒢_gᵢ) · (ΔYᵢ − m̂_Δ(Xᵢ)),
//! ```
//!
//! with every nuisance evaluated cross-fitted (fold ℓ observations use
//! surfaces trained on the other folds) and π̂₁ the global treated share. θ̂
//! is the sample average of φ. A single evaluation path serves both the
//! reported estimate (unit sample weights) and the multiplier bootstrap
//! (random sample weights), so the two are bit-comparable by construction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    assign_folds, assign_folds_rc, FoldAssignment, PanelDataset, RepeatedCrossSection,
    StaggeredDesign,
};
use crate::kernel_regression::LocalPolyConfig;
use crate::nuisance::{BandwidthRecord, FitScope, NuisancePlan, NuisanceSurface};
use crate::weights::{
    global_system_panel, global_system_rc, solve_weights, weight_surface, WeightSolveOptions,
    WeightSurface,
};
use crate::{Error, Result};

/// How the control-group weights entering the moment are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightMode {
    /// Solve the pre-treatment weight system — per covariate point, or once
    /// globally when the data are covariate-free.
    Solved,
    /// Uniform weights over the control groups. Valid under parallel trends
    /// alone, and the only option when the weight system is underidentified
    /// (fewer pre-treatment periods than control groups).
    Uniform,
    /// Caller-supplied weights, one per control group, summing to one.
    User { weights: Vec<f64> },
}

impl WeightMode {
    fn name(&self) -> &'static str {
        match self {
            WeightMode::Solved => "solved",
            WeightMode::Uniform => "uniform",
            WeightMode::User { .. } => "user",
        }
    }
}

/// Estimation settings shared by every design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    /// Number of cross-fitting folds L ≥ 2.
    pub folds: usize,
    /// Seed for the fold shuffle; everything downstream is deterministic.
    pub seed: u64,
    /// Local-polynomial settings shared by all nuisance fits.
    pub fit: LocalPolyConfig,
    /// Weight-solver settings (eigenvalue floor, ridge, simplex projection).
    pub weight_opts: WeightSolveOptions,
    pub weight_mode: WeightMode,
    /// Keep going when the weight solve fails at some covariate points,
    /// dropping those observations from the moment average (the count is
    /// reported in the diagnostics). Off by default: any failing point is an
    /// error.
    pub allow_partial: bool,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            folds: 2,
            seed: 0,
            fit: LocalPolyConfig::default(),
            weight_opts: WeightSolveOptions::default(),
            weight_mode: WeightMode::Solved,
            allow_partial: false,
        }
    }
}

/// Which sampling design produced an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Panel,
    #[serde(rename = "rc")]
    RepeatedCrossSection,
    Staggered {
        group: String,
        event_time: usize,
    },
}

/// Summary of the weight path behind an estimate.
#[derive(Debug, Clone, Serialize)]
pub struct WeightsSummary {
    /// "solved", "uniform", or "user".
    pub mode: String,
    /// The weight vector when a single one applies to every observation.
    pub global: Option<Vec<f64>>,
    /// Number of distinct weight solutions (1 when `global` is set).
    pub distinct_solutions: usize,
    /// [min, median, max] of the smallest Gram eigenvalue across distinct
    /// solves; `None` for fixed (uniform/user) weights.
    pub min_eig: Option<[f64; 3]>,
    /// [min, median, max] of the solver fit residual across distinct solves.
    pub residual: Option<[f64; 3]>,
}

/// Execution diagnostics attached to an estimate.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub folds: usize,
    /// Propensity-ratio evaluations that hit the clamp bound.
    pub clamped: usize,
    /// Observations dropped because their weight solve failed.
    pub dropped: usize,
    pub weights: WeightsSummary,
    /// Bandwidths resolved per (fold, stratum, family).
    pub bandwidths: Vec<BandwidthRecord>,
}

/// A fitted ATT with its per-observation moment values and diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct AttEstimate {
    pub theta_hat: f64,
    /// Global treated share π̂₁ = Σᵢ 𝒢₁ᵢ / n.
    pub pi1_hat: f64,
    /// φ evaluated with each observation's own-fold nuisances, in observation
    /// order, for the observations that entered the average. Its plain mean
    /// is `theta_hat` exactly.
    #[serde(skip_serializing)]
    pub per_obs_moment: Vec<f64>,
    pub design: Design,
    /// Total observations in the dataset; `per_obs_moment` has
    /// `n − diagnostics.dropped` entries.
    pub n: usize,
    pub diagnostics: Diagnostics,
}

/// One cohort's contribution to an event-study average.
#[derive(Debug, Clone, Serialize)]
pub struct EventStudyComponent {
    pub group: String,
    /// The cohort's first treated period (internal index).
    pub adoption_period: usize,
    /// Sample share among the qualifying cohorts.
    pub share: f64,
    pub att: f64,
    /// Units in the cohort.
    pub n: usize,
}

/// Share-weighted average of cohort ATTs at a common event time.
#[derive(Debug, Clone, Serialize)]
pub struct EventStudyEstimate {
    pub e: usize,
    pub es_hat: f64,
    /// Donor-pool horizon used by every component estimate.
    pub e_bar: usize,
    pub components: Vec<EventStudyComponent>,
}

/// Doubly robust moment φ at one observation of a panel.
///
/// `weights[g−2]` and `ratios[g−2]` belong to control group g; exactly one
/// group indicator is active, so only the observation's own entries are read.
pub fn moment_phi(
    group: usize,
    delta_y: f64,
    m_delta: f64,
    weights: &[f64],
    ratios: &[f64],
    pi1: f64,
) -> f64 {
    group_tilt(group, weights, ratios) * (delta_y - m_delta) / pi1
}

/// Repeated-cross-section moment φ at one observation: the same group tilt
/// applied to the λ-adjusted outcome term minus the control contrast.
///
/// `lambda = (λ̂_{𝒯−1}, λ̂_𝒯)` are the period shares of the last two periods
/// and `t_last` is the final period's index; `m_contrast` is
/// μ̂_{G≠1,𝒯}(X)/λ̂_𝒯 − μ̂_{G≠1,𝒯−1}(X)/λ̂_{𝒯−1}.
#[allow(clippy::too_many_arguments)]
pub fn moment_phi_rc(
    group: usize,
    time: usize,
    y: f64,
    m_contrast: f64,
    lambda: (f64, f64),
    t_last: usize,
    weights: &[f64],
    ratios: &[f64],
    pi1: f64,
) -> f64 {
    group_tilt(group, weights, ratios) * (rc_tag_term(time, y, lambda, t_last) - m_contrast) / pi1
}

/// 𝒢₁ − Σ_{g≥2} w_g·r_g·𝒢_g for a single observation: 1 for the treated
/// group, −w_g·r_g for control group g.
fn group_tilt(group: usize, weights: &[f64], ratios: &[f64]) -> f64 {
    if group == 1 {
        1.0
    } else {
        -(weights[group - 2] * ratios[group - 2])
    }
}

/// The outcome term (𝔗_𝒯/λ_𝒯 − 𝔗_{𝒯−1}/λ_{𝒯−1})·Y of the RC moment.
fn rc_tag_term(time: usize, y: f64, lambda: (f64, f64), t_last: usize) -> f64 {
    if time == t_last {
        y / lambda.1
    } else if time + 1 == t_last {
        -(y / lambda.0)
    } else {
        0.0
    }
}

/// Closed-form no-covariate estimator ΔȲ₁ − Σ_g w_g·ΔȲ_g from group means of
/// the last-two-period outcome difference. `w[g−2]` belongs to control
/// group g.
pub fn estimate_att_nocov(ds: &PanelDataset, w: &[f64]) -> f64 {
    let sizes = ds.group_sizes();
    let mut delta_mean = vec![0.0; ds.n_groups];
    for i in 0..ds.n() {
        delta_mean[ds.group[i] - 1] += ds.delta_y(i);
    }
    for (g, m) in delta_mean.iter_mut().enumerate() {
        *m /= sizes[g] as f64;
    }
    let control: f64 = (1..ds.n_groups).map(|g| w[g - 1] * delta_mean[g]).sum();
    delta_mean[0] - control
}

/// Observation-level weights after resolution: a solved surface, or one
/// fixed vector shared by everyone.
pub(crate) enum ResolvedWeights {
    Surface(WeightSurface),
    Fixed(Vec<f64>),
}

impl ResolvedWeights {
    /// Weight vector applying to observation i, `None` when its solve failed.
    pub(crate) fn weights(&self, i: usize) -> Option<&[f64]> {
        match self {
            ResolvedWeights::Surface(s) => s.weights(i),
            ResolvedWeights::Fixed(w) => Some(w),
        }
    }
}

/// One complete evaluation of the moment under given sample weights: the
/// point estimate, the treated share, the per-observation moments, and the
/// fitted nuisances behind them.
pub struct Evaluation {
    pub theta: f64,
    pub pi1: f64,
    /// φᵢ for the kept observations, in observation order.
    pub phi: Vec<f64>,
    /// Indices of the kept observations.
    pub kept: Vec<usize>,
    /// Observations dropped by failed weight solves.
    pub dropped: usize,
    pub(crate) surface: NuisanceSurface,
    pub(crate) weights: ResolvedWeights,
}

impl Evaluation {
    /// The cross-fitted nuisance surfaces behind this evaluation.
    pub fn surface(&self) -> &NuisanceSurface {
        &self.surface
    }

    /// Weight vector applying to observation i, `None` when its solve failed
    /// (control-group entry g − 2 for group g).
    pub fn weight_row(&self, i: usize) -> Option<&[f64]> {
        self.weights.weights(i)
    }
}

/// Anything the multiplier bootstrap can refit under random sample weights.
pub trait BootstrapTarget: Sync {
    /// Number of observation-level weights a replication must supply.
    fn n_units(&self) -> usize;
    /// Refits every weight-dependent quantity under `sample_weights` and
    /// returns the replicated θ̂*.
    fn replicate(&self, sample_weights: &[f64]) -> Result<f64>;
}

/// Rejects user-supplied weight vectors of the wrong arity, with non-finite
/// entries, or not summing to one.
fn validate_weight_mode(mode: &WeightMode, n_groups: usize) -> Result<()> {
    if let WeightMode::User { weights } = mode {
        if weights.len() != n_groups - 1 {
            return Err(Error::InvalidConfig(format!(
                "user weights have {} entries for {} control group(s)",
                weights.len(),
                n_groups - 1
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("user weights must be finite".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidConfig(format!(
                "user weights sum to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Resolves the weight mode into per-observation weights. `global` builds
/// the covariate-free system from full-sample weighted means.
fn resolve_weights(
    n: usize,
    n_groups: usize,
    covariate_free: bool,
    surface: &NuisanceSurface,
    cfg: &EstimateConfig,
    global: impl FnOnce() -> Result<(DMatrix<f64>, DVector<f64>)>,
) -> Result<ResolvedWeights> {
    match &cfg.weight_mode {
        WeightMode::Solved => {
            if covariate_free {
                let (m, m1) = global()?;
                let sol = solve_weights(&m, &m1, &cfg.weight_opts)?;
                Ok(ResolvedWeights::Surface(WeightSurface::from_global(n, sol)))
            } else {
                Ok(ResolvedWeights::Surface(weight_surface(
                    surface,
                    &cfg.weight_opts,
                )?))
            }
        }
        WeightMode::Uniform => {
            let k = n_groups - 1;
            Ok(ResolvedWeights::Fixed(vec![1.0 / k as f64; k]))
        }
        WeightMode::User { weights } => Ok(ResolvedWeights::Fixed(weights.clone())),
    }
}

struct MomentTotals {
    theta: f64,
    pi1: f64,
    phi: Vec<f64>,
    kept: Vec<usize>,
    dropped: usize,
}

/// Shared tail of every evaluation: drop observations whose weight solve
/// failed (allowed only under `allow_partial`), form the weighted treated
/// share π̂₁, and average the per-observation moments. `numerator` returns
/// the moment value before the 1/π̂₁ scaling.
fn finish_evaluation(
    group: &[usize],
    sample_weights: &[f64],
    weights: &ResolvedWeights,
    allow_partial: bool,
    numerator: impl Fn(usize, &[f64]) -> f64,
) -> Result<MomentTotals> {
    let n = group.len();
    let mut kept: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        if weights.weights(i).is_some() {
            kept.push(i);
        }
    }
    let dropped = n - kept.len();
    if dropped > 0 && !allow_partial {
        return Err(Error::PartialWeightFailure {
            failed: dropped,
            total: n,
        });
    }
    let mut wsum = 0.0;
    let mut num1 = 0.0;
    for &i in &kept {
        let wi = sample_weights[i];
        wsum += wi;
        if group[i] == 1 {
            num1 += wi;
        }
    }
    let pi1 = num1 / wsum;
    if !(pi1 > 0.0) {
        return Err(Error::SingularLocalDesign {
            context: "non-positive weighted treated share".into(),
        });
    }
    if !(pi1 < 1.0) {
        return Err(Error::SingularLocalDesign {
            context: "non-positive weighted control share".into(),
        });
    }
    let mut phi = Vec::with_capacity(kept.len());
    let mut acc = 0.0;
    for &i in &kept {
        let w_row = weights.weights(i).expect("kept observations have weights");
        let phi_i = numerator(i, w_row) / pi1;
        acc += sample_weights[i] * phi_i;
        phi.push(phi_i);
    }
    Ok(MomentTotals {
        theta: acc / wsum,
        pi1,
        phi,
        kept,
        dropped,
    })
}

/// [min, median, max] of a non-empty sample, `None` when empty.
fn spread3(mut v: Vec<f64>) -> Option<[f64; 3]> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    };
    Some([v[0], median, v[v.len() - 1]])
}

/// Assembles the reported estimate from an evaluation.
fn summarize(
    eval: &Evaluation,
    design: Design,
    n_total: usize,
    folds: usize,
    mode: &WeightMode,
    bandwidths: &[BandwidthRecord],
) -> AttEstimate {
    let weights = match &eval.weights {
        ResolvedWeights::Surface(s) => WeightsSummary {
            mode: mode.name().to_string(),
            global: s.is_global().then(|| s.solutions[0].w.clone()),
            distinct_solutions: s.solutions.len(),
            min_eig: spread3(s.min_eigs()),
            residual: spread3(s.solutions.iter().map(|sol| sol.residual).collect()),
        },
        ResolvedWeights::Fixed(w) => WeightsSummary {
            mode: mode.name().to_string(),
            global: Some(w.clone()),
            distinct_solutions: 1,
            min_eig: None,
            residual: None,
        },
    };
    AttEstimate {
        theta_hat: eval.theta,
        pi1_hat: eval.pi1,
        per_obs_moment: eval.phi.clone(),
        design,
        n: n_total,
        diagnostics: Diagnostics {
            folds,
            clamped: eval.surface.ratio_clamped,
            dropped: eval.dropped,
            weights,
            bandwidths: bandwidths.to_vec(),
        },
    }
}

/// A reusable fitted pipeline for one panel: folds assigned and the nuisance
/// plan built once; [`FittedPanel::evaluate`] then refits every
/// weight-dependent quantity under fresh sample weights (the bootstrap's hot
/// path) while folds, strata, and bandwidths stay frozen.
pub struct FittedPanel<'a> {
    pub ds: &'a PanelDataset,
    pub cfg: &'a EstimateConfig,
    pub folds: FoldAssignment,
    plan: NuisancePlan,
}

impl<'a> FittedPanel<'a> {
    /// Assigns folds and builds the cross-fitting plan.
    ///
    /// # Errors
    /// `InvalidConfig` for bad settings (including malformed user weights);
    /// fold and plan construction errors from the data and nuisance layers.
    pub fn new(ds: &'a PanelDataset, cfg: &'a EstimateConfig) -> Result<Self> {
        validate_weight_mode(&cfg.weight_mode, ds.n_groups)?;
        let folds = assign_folds(ds, cfg.folds, cfg.seed)?;
        let plan = NuisancePlan::build_panel(ds, &folds, &cfg.fit, FitScope::Both)?;
        Ok(Self {
            ds,
            cfg,
            folds,
            plan,
        })
    }

    /// Fits nuisances and weights under `sample_weights` and evaluates the
    /// moment at every observation.
    ///
    /// # Errors
    /// Nuisance-fit and weight-solve failures; `PartialWeightFailure` when
    /// points fail and partial results are not allowed.
    pub fn evaluate(&self, sample_weights: &[f64]) -> Result<Evaluation> {
        let surface = self.plan.fit(sample_weights)?;
        let weights = resolve_weights(
            self.ds.n(),
            self.ds.n_groups,
            self.ds.is_covariate_free(),
            &surface,
            self.cfg,
            || global_system_panel(self.ds, sample_weights),
        )?;
        let totals = finish_evaluation(
            &self.ds.group,
            sample_weights,
            &weights,
            self.cfg.allow_partial,
            |i, w_row| {
                let resid = self.ds.delta_y(i) - surface.m_delta(i);
                let g = self.ds.group[i];
                if g == 1 {
                    resid
                } else {
                    -(w_row[g - 2] * surface.r(i, g)) * resid
                }
            },
        )?;
        Ok(Evaluation {
            theta: totals.theta,
            pi1: totals.pi1,
            phi: totals.phi,
            kept: totals.kept,
            dropped: totals.dropped,
            surface,
            weights,
        })
    }

    /// The reported unit-weight estimate.
    pub fn estimate(&self) -> Result<AttEstimate> {
        let eval = self.evaluate(&vec![1.0; self.ds.n()])?;
        Ok(self.summarize(&eval, Design::Panel))
    }

    /// Assembles a report from an evaluation of this pipeline.
    pub fn summarize(&self, eval: &Evaluation, design: Design) -> AttEstimate {
        summarize(
            eval,
            design,
            self.ds.n(),
            self.folds.n_folds,
            &self.cfg.weight_mode,
            &self.plan.bandwidths,
        )
    }
}

impl BootstrapTarget for FittedPanel<'_> {
    fn n_units(&self) -> usize {
        self.ds.n()
    }
    fn replicate(&self, sample_weights: &[f64]) -> Result<f64> {
        Ok(self.evaluate(sample_weights)?.theta)
    }
}

/// The repeated-cross-section counterpart of [`FittedPanel`].
pub struct FittedRc<'a> {
    pub rc: &'a RepeatedCrossSection,
    pub cfg: &'a EstimateConfig,
    pub folds: FoldAssignment,
    plan: NuisancePlan,
}

impl<'a> FittedRc<'a> {
    /// Assigns folds and builds the cross-fitting plan.
    ///
    /// # Errors
    /// As for [`FittedPanel::new`], plus `EmptyPeriod` when a (group, period)
    /// cell has no training rows.
    pub fn new(rc: &'a RepeatedCrossSection, cfg: &'a EstimateConfig) -> Result<Self> {
        validate_weight_mode(&cfg.weight_mode, rc.n_groups)?;
        let folds = assign_folds_rc(rc, cfg.folds, cfg.seed)?;
        let plan = NuisancePlan::build_rc(rc, &folds, &cfg.fit, FitScope::Both)?;
        Ok(Self {
            rc,
            cfg,
            folds,
            plan,
        })
    }

    /// Fits nuisances and weights under `sample_weights` and evaluates the
    /// RC moment at every row.
    ///
    /// # Errors
    /// As for [`FittedPanel::evaluate`].
    pub fn evaluate(&self, sample_weights: &[f64]) -> Result<Evaluation> {
        let surface = self.plan.fit(sample_weights)?;
        let weights = resolve_weights(
            self.rc.n(),
            self.rc.n_groups,
            self.rc.is_covariate_free(),
            &surface,
            self.cfg,
            || global_system_rc(self.rc, sample_weights),
        )?;
        let t_last = self.rc.n_periods;
        let lambda = (surface.lambda[t_last - 2], surface.lambda[t_last - 1]);
        let totals = finish_evaluation(
            &self.rc.group,
            sample_weights,
            &weights,
            self.cfg.allow_partial,
            |i, w_row| {
                let tag = rc_tag_term(self.rc.time[i], self.rc.y[i], lambda, t_last);
                let resid = tag - surface.m_delta(i);
                let g = self.rc.group[i];
                if g == 1 {
                    resid
                } else {
                    -(w_row[g - 2] * surface.r(i, g)) * resid
                }
            },
        )?;
        Ok(Evaluation {
            theta: totals.theta,
            pi1: totals.pi1,
            phi: totals.phi,
            kept: totals.kept,
            dropped: totals.dropped,
            surface,
            weights,
        })
    }

    /// The reported unit-weight estimate.
    pub fn estimate(&self) -> Result<AttEstimate> {
        let eval = self.evaluate(&vec![1.0; self.rc.n()])?;
        Ok(self.summarize(&eval, Design::RepeatedCrossSection))
    }

    /// Assembles a report from an evaluation of this pipeline.
    pub fn summarize(&self, eval: &Evaluation, design: Design) -> AttEstimate {
        summarize(
            eval,
            design,
            self.rc.n(),
            self.folds.n_folds,
            &self.cfg.weight_mode,
            &self.plan.bandwidths,
        )
    }
}

impl BootstrapTarget for FittedRc<'_> {
    fn n_units(&self) -> usize {
        self.rc.n()
    }
    fn replicate(&self, sample_weights: &[f64]) -> Result<f64> {
        Ok(self.evaluate(sample_weights)?.theta)
    }
}

/// Cross-fitted doubly robust ATT for a balanced panel.
///
/// # Errors
/// Propagates fold, nuisance, and weight errors; in particular
/// `Underidentified` when solving weights with fewer pre-treatment periods
/// than free control weights (use uniform or user weights then).
pub fn estimate_att_panel(ds: &PanelDataset, cfg: &EstimateConfig) -> Result<AttEstimate> {
    FittedPanel::new(ds, cfg)?.estimate()
}

/// Cross-fitted doubly robust ATT for repeated cross-sections.
///
/// # Errors
/// As for [`estimate_att_panel`].
pub fn estimate_att_rc(rc: &RepeatedCrossSection, cfg: &EstimateConfig) -> Result<AttEstimate> {
    FittedRc::new(rc, cfg)?.estimate()
}

/// A single-adoption subproblem carved out of a staggered panel for one
/// (cohort, event time) pair.
pub struct StaggeredSubproblem {
    /// Relabeled panel: the cohort is group 1, donors follow in ascending
    /// original order; periods are the cohort's pre-periods 1..γ−1 followed
    /// by the outcome period γ+e.
    pub panel: PanelDataset,
    /// The cohort's adoption period γ in the original panel.
    pub gamma: usize,
    /// Original index of the compared period γ+e.
    pub outcome_period: usize,
    /// Donor group labels in the order they appear in `panel`.
    pub donor_labels: Vec<String>,
}

/// Donor pool for internal group g at horizon ē: every other group still
/// untreated at γ(g)+ē.
fn donor_pool(design: &StaggeredDesign, n_groups: usize, g: usize, horizon: usize) -> Vec<usize> {
    (1..=n_groups)
        .filter(|&d| d != g)
        .filter(|&d| match design.adoption[d - 1] {
            None => true,
            Some(gamma_d) => gamma_d > horizon,
        })
        .collect()
}

/// Extracts the relabeled single-adoption panel for cohort `g` (internal
/// index) at event time `e` with donor horizon `e_bar`.
///
/// # Errors
/// `InvalidConfig` when the group never adopts or `e_bar < e`;
/// `EventTimeOutOfRange` when γ+e or γ+ē runs past the last period;
/// `EmptyDonorPool` when no group remains untreated at γ+ē.
pub fn staggered_subproblem(
    ds: &PanelDataset,
    design: &StaggeredDesign,
    g: usize,
    e: usize,
    e_bar: usize,
) -> Result<StaggeredSubproblem> {
    let label = &ds.group_labels[g - 1];
    let gamma = design.gamma(g).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "group '{label}' never adopts treatment; no ATT is defined for it"
        ))
    })?;
    if e_bar < e {
        return Err(Error::InvalidConfig(format!(
            "donor horizon {e_bar} is smaller than event time {e}"
        )));
    }
    let max_e = ds.n_periods - gamma;
    if e > max_e || e_bar > max_e {
        return Err(Error::EventTimeOutOfRange {
            group: label.clone(),
            e: e.max(e_bar),
            max: max_e,
        });
    }
    let donors = donor_pool(design, ds.n_groups, g, gamma + e_bar);
    if donors.is_empty() {
        return Err(Error::EmptyDonorPool {
            group: label.clone(),
            e_bar,
        });
    }
    let outcome_period = gamma + e;

    // Map original groups to the subproblem's: cohort → 1, donors → 2…
    let mut new_group_of = vec![0usize; ds.n_groups + 1];
    new_group_of[g] = 1;
    let mut donor_labels = Vec::with_capacity(donors.len());
    for (k, &d) in donors.iter().enumerate() {
        new_group_of[d] = k + 2;
        donor_labels.push(ds.group_labels[d - 1].clone());
    }
    let mut group_labels = Vec::with_capacity(donors.len() + 1);
    group_labels.push(label.clone());
    group_labels.extend(donor_labels.iter().cloned());

    // Keep pre-periods 1..γ−1 plus the outcome period, in that order, so the
    // subproblem's last-two-period difference is Y_{γ+e} − Y_{γ−1}.
    let mut keep_t: Vec<usize> = (1..gamma).collect();
    keep_t.push(outcome_period);
    let period_values: Vec<i64> = keep_t.iter().map(|&t| ds.period_values[t - 1]).collect();

    let mut unit_ids = Vec::new();
    let mut group = Vec::new();
    let mut covariates = Vec::new();
    let mut outcomes = Vec::new();
    for i in 0..ds.n() {
        let ng = new_group_of[ds.group[i]];
        if ng == 0 {
            continue;
        }
        unit_ids.push(ds.unit_ids[i].clone());
        group.push(ng);
        covariates.push(ds.covariates[i].clone());
        outcomes.push(keep_t.iter().map(|&t| ds.outcomes[i][t - 1]).collect());
    }
    let panel = PanelDataset::from_parts(
        unit_ids,
        group,
        covariates,
        outcomes,
        group_labels,
        period_values,
        ds.continuous_names.clone(),
        ds.discrete_names.clone(),
        ds.discrete_levels.clone(),
    )?;
    Ok(StaggeredSubproblem {
        panel,
        gamma,
        outcome_period,
        donor_labels,
    })
}

/// Largest donor horizon ≤ min_g(𝒯 − γ(g)) keeping the donor pool of every
/// requested group non-empty, never smaller than `e`.
///
/// # Errors
/// `InvalidConfig` when a requested group never adopts;
/// `EventTimeOutOfRange` when some group cannot reach event time `e`;
/// `EmptyDonorPool` when even horizon `e` leaves a group without donors.
pub fn default_e_bar(
    ds: &PanelDataset,
    design: &StaggeredDesign,
    groups: &[usize],
    e: usize,
) -> Result<usize> {
    let mut cap = usize::MAX;
    for &g in groups {
        let label = &ds.group_labels[g - 1];
        let gamma = design.gamma(g).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "group '{label}' never adopts treatment; no ATT is defined for it"
            ))
        })?;
        let max_e = ds.n_periods - gamma;
        if max_e < e {
            return Err(Error::EventTimeOutOfRange {
                group: label.clone(),
                e,
                max: max_e,
            });
        }
        cap = cap.min(max_e);
    }
    for cand in (e..=cap).rev() {
        let ok = groups.iter().all(|&g| {
            let gamma = design.gamma(g).expect("checked above");
            !donor_pool(design, ds.n_groups, g, gamma + cand).is_empty()
        });
        if ok {
            return Ok(cand);
        }
    }
    let g = groups
        .iter()
        .copied()
        .find(|&g| {
            let gamma = design.gamma(g).expect("checked above");
            donor_pool(design, ds.n_groups, g, gamma + e).is_empty()
        })
        .unwrap_or(groups[0]);
    Err(Error::EmptyDonorPool {
        group: ds.group_labels[g - 1].clone(),
        e_bar: e,
    })
}

/// Resolves a group label to its internal index.
fn group_index(ds: &PanelDataset, label: &str) -> Result<usize> {
    ds.group_labels
        .iter()
        .position(|l| l == label)
        .map(|p| p + 1)
        .ok_or_else(|| Error::UnknownGroupLabel(label.to_string()))
}

/// ATT of cohort `group_label` at event time `e` in a staggered design:
/// relabels the cohort and its donor pool into a single-adoption panel and
/// reuses the panel pipeline. `e_bar` defaults to the largest horizon
/// keeping the donor pool non-empty.
///
/// # Errors
/// `UnknownGroupLabel`; the subproblem errors of [`staggered_subproblem`];
/// panel estimation errors on the subproblem.
pub fn estimate_att_staggered(
    ds: &PanelDataset,
    design: &StaggeredDesign,
    group_label: &str,
    e: usize,
    e_bar: Option<usize>,
    cfg: &EstimateConfig,
) -> Result<AttEstimate> {
    let g = group_index(ds, group_label)?;
    let e_bar = match e_bar {
        Some(v) => v,
        None => default_e_bar(ds, design, &[g], e)?,
    };
    estimate_cohort(ds, design, g, e, e_bar, cfg)
}

/// Internal per-cohort estimate with everything resolved.
fn estimate_cohort(
    ds: &PanelDataset,
    design: &StaggeredDesign,
    g: usize,
    e: usize,
    e_bar: usize,
    cfg: &EstimateConfig,
) -> Result<AttEstimate> {
    let sub = staggered_subproblem(ds, design, g, e, e_bar)?;
    let mut est = estimate_att_panel(&sub.panel, cfg)?;
    est.design = Design::Staggered {
        group: ds.group_labels[g - 1].clone(),
        event_time: e,
    };
    Ok(est)
}

/// Event-study aggregate at event time `e`: the share-weighted average of
/// cohort ATTs over all cohorts whose period γ+e is observed, with shares
/// equal to cohort sample frequencies among those qualifying. Cohort
/// estimates run in parallel; components are reported in internal group
/// order.
///
/// # Errors
/// `NoQualifyingGroup` when no cohort reaches event time `e`; otherwise the
/// per-cohort errors of [`estimate_att_staggered`].
pub fn event_study(
    ds: &PanelDataset,
    design: &StaggeredDesign,
    e: usize,
    e_bar: Option<usize>,
    cfg: &EstimateConfig,
) -> Result<EventStudyEstimate> {
    let qualifying: Vec<usize> = (1..=ds.n_groups)
        .filter(|&g| match design.gamma(g) {
            Some(gamma) => gamma + e <= ds.n_periods,
            None => false,
        })
        .collect();
    if qualifying.is_empty() {
        return Err(Error::NoQualifyingGroup(e));
    }
    let e_bar = match e_bar {
        Some(v) => v,
        None => default_e_bar(ds, design, &qualifying, e)?,
    };
    let sizes = ds.group_sizes();
    let total: usize = qualifying.iter().map(|&g| sizes[g - 1]).sum();
    let atts: Vec<AttEstimate> = qualifying
        .par_iter()
        .map(|&g| estimate_cohort(ds, design, g, e, e_bar, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut es_hat = 0.0;
    let mut components = Vec::with_capacity(qualifying.len());
    for (&g, att) in qualifying.iter().zip(&atts) {
        let share = sizes[g - 1] as f64 / total as f64;
        es_hat += share * att.theta_hat;
        components.push(EventStudyComponent {
            group: ds.group_labels[g - 1].clone(),
            adoption_period: design.gamma(g).expect("qualifying groups adopt"),
            share,
            att: att.theta_hat,
            n: sizes[g - 1],
        });
    }
    Ok(EventStudyEstimate {
        e,
        es_hat,
        e_bar,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateProfile;
    use crate::kernel_regression::Bandwidth;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    /// Deterministic panel: `groups` unit counts per group, T periods,
    /// outcomes = group trend + unit effect + x effect + pseudo-noise; one
    /// continuous covariate unless `nocov`.
    fn synth_panel(groups: &[usize], n_periods: usize, nocov: bool, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit_ids = Vec::new();
        let mut group = Vec::new();
        let mut covariates = Vec::new();
        let mut outcomes = Vec::new();
        for (gi, &count) in groups.iter().enumerate() {
            let g = gi + 1;
            for u in 0..count {
                unit_ids.push(format!("g{g}u{u}"));
                group.push(g);
                let x: f64 = rng.gen_range(0.05..0.95);
                covariates.push(if nocov {
                    CovariateProfile::empty()
                } else {
                    CovariateProfile {
                        continuous: vec![x],
                        discrete: vec![],
                    }
                });
                let alpha: f64 = rng.gen_range(-0.5..0.5);
                let row: Vec<f64> = (1..=n_periods)
                    .map(|t| {
                        let trend = (g as f64) * 0.3 * t as f64 + (t as f64).sin();
                        let xeff = if nocov {
                            0.0
                        } else {
                            x * (0.5 + 0.1 * t as f64)
                        };
                        trend + alpha + xeff + rng.gen_range(-0.05..0.05)
                    })
                    .collect();
                outcomes.push(row);
            }
        }
        PanelDataset::from_parts(
            unit_ids,
            group,
            covariates,
            outcomes,
            (1..=groups.len()).map(|g| format!("G{g}")).collect(),
            (1..=n_periods as i64).collect(),
            if nocov { vec![] } else { vec!["x".into()] },
            vec![],
            vec![],
        )
        .expect("valid synthetic panel")
    }

    fn fixed_cfg() -> EstimateConfig {
        EstimateConfig {
            fit: LocalPolyConfig {
                bandwidth: Bandwidth::Fixed(0.35),
                ..LocalPolyConfig::default()
            },
            ..EstimateConfig::default()
        }
    }

    #[test]
    fn moment_phi_matches_hand_arithmetic() {
        // Control unit: −ŵ·r̂·resid/π₁ = −0.5·2·1/0.25 = −4.
        let w = [0.25, 0.5];
        let r = [3.0, 2.0];
        assert_abs_diff_eq!(moment_phi(3, 1.0, 0.0, &w, &r, 0.25), -4.0);
        // Treated unit with a zero residual contributes nothing.
        assert_abs_diff_eq!(moment_phi(1, 2.5, 2.5, &w, &r, 0.3), 0.0);
        // Treated unit: resid/π₁.
        assert_abs_diff_eq!(moment_phi(1, 3.0, 1.0, &w, &r, 0.5), 4.0);
    }

    proptest! {
        /// The compact single-indicator form equals the full sum
        /// (𝒢₁ − Σ_g w_g r_g 𝒢_g)·resid/π₁ on random inputs.
        #[test]
        fn moment_phi_two_forms_agree(
            group in 1usize..=5,
            delta_y in -10.0f64..10.0,
            m_delta in -10.0f64..10.0,
            w in proptest::collection::vec(-2.0f64..2.0, 4),
            r in proptest::collection::vec(0.1f64..10.0, 4),
            pi1 in 0.05f64..0.95,
        ) {
            let compact = moment_phi(group, delta_y, m_delta, &w, &r, pi1);
            let mut tilt = if group == 1 { 1.0 } else { 0.0 };
            for g in 2..=5 {
                let ind = if group == g { 1.0 } else { 0.0 };
                tilt -= w[g - 2] * r[g - 2] * ind;
            }
            let full = tilt * (delta_y - m_delta) / pi1;
            prop_assert!((compact - full).abs() <= 1e-12 * (1.0 + full.abs()));
        }
    }

    #[test]
    fn moment_phi_rc_matches_hand_arithmetic() {
        let w = [0.4];
        let r = [2.0];
        let lambda = (0.25, 0.5);
        let t_last = 4;
        // Row outside the last two periods with a zero contrast: φ = 0.
        assert_abs_diff_eq!(
            moment_phi_rc(1, 2, 7.0, 0.0, lambda, t_last, &w, &r, 0.5),
            0.0
        );
        // Treated row in 𝒯: (y/λ_𝒯 − m)/π = (6/0.5 − 1)/0.5 = 22.
        assert_abs_diff_eq!(
            moment_phi_rc(1, 4, 6.0, 1.0, lambda, t_last, &w, &r, 0.5),
            22.0
        );
        // Control row in 𝒯−1: −w·r·(−y/λ_{𝒯−1} − m)/π = −0.8·(−8−1)/0.5 = 14.4.
        assert_abs_diff_eq!(
            moment_phi_rc(2, 3, 2.0, 1.0, lambda, t_last, &w, &r, 0.5),
            14.4,
            epsilon = 1e-12
        );
        // Halving λ doubles the outcome term but not the contrast term.
        let a = moment_phi_rc(1, 4, 6.0, 0.0, (0.5, 0.5), t_last, &w, &r, 0.5);
        let b = moment_phi_rc(1, 4, 6.0, 0.0, (0.25, 0.25), t_last, &w, &r, 0.5);
        assert_abs_diff_eq!(b, 2.0 * a);
    }

    #[test]
    fn nocov_closed_form_matches_hand_arithmetic() {
        // ΔȲ₁ = 3, ΔȲ₂ = 1, ΔȲ₃ = 2, w = (0.5, 0.5) → 3 − 1.5 = 1.5.
        let mut outcomes = Vec::new();
        let mut group = Vec::new();
        let mut ids = Vec::new();
        for (g, d) in [(1, 3.0), (2, 1.0), (3, 2.0)] {
            for u in 0..2 {
                ids.push(format!("g{g}u{u}"));
                group.push(g);
                let base = u as f64;
                outcomes.push(vec![base, base + d]);
            }
        }
        let ds = PanelDataset::from_parts(
            ids,
            group,
            vec![CovariateProfile::empty(); 6],
            outcomes,
            vec!["T".into(), "C1".into(), "C2".into()],
            vec![1, 2],
            vec![],
            vec![],
            vec![],
        )
        .unwrap();
        assert_abs_diff_eq!(estimate_att_nocov(&ds, &[0.5, 0.5]), 1.5);
        // All group means moving in lockstep → 0.
        let flat = synth_panel(&[4, 4, 4], 2, true, 3);
        let mut lock = flat.clone();
        for row in &mut lock.outcomes {
            row[1] = row[0] + 2.0;
        }
        assert_abs_diff_eq!(estimate_att_nocov(&lock, &[0.3, 0.7]), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nocov_pipeline_matches_closed_form() {
        for seed in [1u64, 2, 3] {
            let ds = synth_panel(&[8, 8, 8, 8], 4, true, seed);
            let cfg = EstimateConfig::default();
            let est = estimate_att_panel(&ds, &cfg).unwrap();
            let w_hat = est
                .diagnostics
                .weights
                .global
                .as_ref()
                .expect("covariate-free weights are global");
            let closed = estimate_att_nocov(&ds, w_hat);
            assert_abs_diff_eq!(est.theta_hat, closed, epsilon = 1e-10);
        }
    }

    #[test]
    fn theta_is_exactly_the_mean_of_per_obs_moments() {
        let ds = synth_panel(&[10, 10, 10], 3, false, 7);
        let est = estimate_att_panel(&ds, &fixed_cfg()).unwrap();
        let mean = est.per_obs_moment.iter().sum::<f64>() / est.per_obs_moment.len() as f64;
        assert_eq!(est.theta_hat.to_bits(), mean.to_bits());
        assert_eq!(est.per_obs_moment.len(), est.n);
    }

    #[test]
    fn pi1_is_exactly_the_treated_share() {
        let ds = synth_panel(&[6, 10, 14], 3, false, 11);
        let est = estimate_att_panel(&ds, &fixed_cfg()).unwrap();
        assert_eq!(est.pi1_hat.to_bits(), (6.0f64 / 30.0).to_bits());
    }

    #[test]
    fn treated_shift_in_final_period_moves_theta_by_tau() {
        let ds = synth_panel(&[8, 8, 8], 3, false, 5);
        let cfg = fixed_cfg();
        let base = estimate_att_panel(&ds, &cfg).unwrap().theta_hat;
        let tau = 0.8;
        let mut shifted = ds.clone();
        for i in 0..shifted.n() {
            if shifted.group[i] == 1 {
                let t_last = shifted.n_periods;
                shifted.outcomes[i][t_last - 1] += tau;
            }
        }
        let after = estimate_att_panel(&shifted, &cfg).unwrap().theta_hat;
        assert_abs_diff_eq!(after - base, tau, epsilon = 1e-9);
    }

    #[test]
    fn location_invariance_and_scale_equivariance() {
        let ds = synth_panel(&[8, 8, 8], 3, false, 13);
        let cfg = fixed_cfg();
        let base = estimate_att_panel(&ds, &cfg).unwrap().theta_hat;

        let mut moved = ds.clone();
        for row in &mut moved.outcomes {
            for y in row.iter_mut() {
                *y += 5.0;
            }
        }
        let theta_moved = estimate_att_panel(&moved, &cfg).unwrap().theta_hat;
        assert_abs_diff_eq!(theta_moved, base, epsilon = 1e-8);

        let c = 3.5;
        let mut scaled = ds.clone();
        for row in &mut scaled.outcomes {
            for y in row.iter_mut() {
                *y *= c;
            }
        }
        let theta_scaled = estimate_att_panel(&scaled, &cfg).unwrap().theta_hat;
        assert_abs_diff_eq!(
            theta_scaled,
            c * base,
            epsilon = 1e-8 * (1.0 + c * base.abs())
        );
    }

    /// Two-stratum fixture whose stratum "a" weight system is singular: the
    /// two control groups have identical outcomes there.
    fn partial_failure_panel() -> PanelDataset {
        let mut ids = Vec::new();
        let mut group = Vec::new();
        let mut covs = Vec::new();
        let mut outcomes = Vec::new();
        for g in 1..=3usize {
            for u in 0..8usize {
                ids.push(format!("g{g}u{u}"));
                group.push(g);
                let stratum = usize::from(u >= 4);
                covs.push(CovariateProfile {
                    continuous: vec![],
                    discrete: vec![stratum],
                });
                let jitter = 0.01 * u as f64;
                let row: Vec<f64> = (1..=3)
                    .map(|t| {
                        let t = t as f64;
                        if stratum == 0 {
                            // Controls (g = 2, 3) coincide exactly, so the
                            // centered system is the zero matrix: singular.
                            if g == 1 {
                                0.5 * t + jitter
                            } else {
                                0.2 * t
                            }
                        } else {
                            (g as f64) * 0.4 * t + 0.1 * t * t + jitter
                        }
                    })
                    .collect();
                outcomes.push(row);
            }
        }
        PanelDataset::from_parts(
            ids,
            group,
            covs,
            outcomes,
            vec!["T".into(), "C1".into(), "C2".into()],
            vec![1, 2, 3],
            vec![],
            vec!["s".into()],
            vec![vec!["a".into(), "b".into()]],
        )
        .unwrap()
    }

    #[test]
    fn failed_weight_points_error_unless_partial_results_are_allowed() {
        let ds = partial_failure_panel();
        let strict = EstimateConfig::default();
        match estimate_att_panel(&ds, &strict) {
            Err(Error::PartialWeightFailure { failed, total }) => {
                assert_eq!((failed, total), (12, 24));
            }
            other => panic!("expected PartialWeightFailure, got {other:?}"),
        }
        let lenient = EstimateConfig {
            allow_partial: true,
            ..EstimateConfig::default()
        };
        let est = estimate_att_panel(&ds, &lenient).unwrap();
        assert_eq!(est.diagnostics.dropped, 12);
        assert_eq!(est.per_obs_moment.len(), 12);
        assert!(est.theta_hat.is_finite());
        let mean = est.per_obs_moment.iter().sum::<f64>() / est.per_obs_moment.len() as f64;
        assert_eq!(est.theta_hat.to_bits(), mean.to_bits());
    }

    #[test]
    fn uniform_mode_equals_explicit_user_weights_and_survives_underidentification() {
        let ds = synth_panel(&[8, 8, 8], 3, false, 17);
        let uniform = EstimateConfig {
            weight_mode: WeightMode::Uniform,
            ..fixed_cfg()
        };
        let user = EstimateConfig {
            weight_mode: WeightMode::User {
                weights: vec![0.5, 0.5],
            },
            ..fixed_cfg()
        };
        let a = estimate_att_panel(&ds, &uniform).unwrap();
        let b = estimate_att_panel(&ds, &user).unwrap();
        assert_eq!(a.theta_hat.to_bits(), b.theta_hat.to_bits());
        assert_eq!(a.diagnostics.weights.mode, "uniform");
        assert_eq!(
            a.diagnostics.weights.global.as_deref(),
            Some(&[0.5, 0.5][..])
        );
        assert!(a.diagnostics.weights.min_eig.is_none());

        // Two periods against three control groups: solving is refused but
        // uniform weights remain valid.
        let wide = synth_panel(&[6, 6, 6, 6], 2, true, 19);
        match estimate_att_panel(&wide, &EstimateConfig::default()) {
            Err(Error::Underidentified {
                n_periods,
                n_controls,
            }) => assert_eq!((n_periods, n_controls), (2, 3)),
            other => panic!("expected Underidentified, got {other:?}"),
        }
        let pt_only = EstimateConfig {
            weight_mode: WeightMode::Uniform,
            ..EstimateConfig::default()
        };
        assert!(estimate_att_panel(&wide, &pt_only).is_ok());
    }

    #[test]
    fn malformed_user_weights_are_rejected() {
        let ds = synth_panel(&[6, 6, 6], 3, true, 23);
        for weights in [vec![1.0], vec![0.4, 0.4], vec![f64::NAN, 1.0]] {
            let cfg = EstimateConfig {
                weight_mode: WeightMode::User { weights },
                ..EstimateConfig::default()
            };
            assert!(matches!(
                estimate_att_panel(&ds, &cfg),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn single_adoption_staggered_reduces_to_the_panel_estimate() {
        let ds = synth_panel(&[8, 8, 8], 4, false, 29);
        let design = StaggeredDesign::new(vec![Some(4), None, None], 4).unwrap();
        let cfg = fixed_cfg();
        let panel = estimate_att_panel(&ds, &cfg).unwrap();
        let stag = estimate_att_staggered(&ds, &design, "G1", 0, Some(0), &cfg).unwrap();
        assert_eq!(stag.theta_hat.to_bits(), panel.theta_hat.to_bits());
        assert_eq!(
            stag.design,
            Design::Staggered {
                group: "G1".into(),
                event_time: 0
            }
        );
    }

    #[test]
    fn staggered_subproblem_has_the_documented_shape() {
        let ds = synth_panel(&[4, 4, 4, 4], 6, true, 31);
        let design = StaggeredDesign::new(vec![Some(4), Some(5), None, None], 6).unwrap();
        let sub = staggered_subproblem(&ds, &design, 1, 1, 1).unwrap();
        // γ = 4, e = 1: pre-periods 1..3 plus outcome period 5.
        assert_eq!(sub.gamma, 4);
        assert_eq!(sub.outcome_period, 5);
        assert_eq!(sub.panel.period_values, vec![1, 2, 3, 5]);
        // Group 2 adopts at 5 = γ+ē, too early to donate.
        assert_eq!(sub.donor_labels, vec!["G3".to_string(), "G4".to_string()]);
        assert_eq!(sub.panel.n_groups, 3);
        assert_eq!(sub.panel.n(), 12);
        // ΔY of the subproblem is Y₅ − Y₃ of the original panel.
        let orig = ds
            .unit_ids
            .iter()
            .position(|u| u == &sub.panel.unit_ids[0])
            .unwrap();
        assert_abs_diff_eq!(
            sub.panel.delta_y(0),
            ds.outcomes[orig][4] - ds.outcomes[orig][2]
        );
    }

    #[test]
    fn staggered_precondition_violations_surface_as_errors() {
        let ds = synth_panel(&[4, 4, 4, 4], 6, true, 37);
        let design = StaggeredDesign::new(vec![Some(4), Some(5), None, None], 6).unwrap();
        assert!(matches!(
            staggered_subproblem(&ds, &design, 1, 3, 3),
            Err(Error::EventTimeOutOfRange { e: 3, max: 2, .. })
        ));
        assert!(matches!(
            staggered_subproblem(&ds, &design, 1, 2, 1),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            staggered_subproblem(&ds, &design, 3, 0, 0),
            Err(Error::InvalidConfig(_))
        ));
        let all_early = StaggeredDesign::new(vec![Some(4); 4], 6).unwrap();
        assert!(matches!(
            staggered_subproblem(&ds, &all_early, 1, 0, 0),
            Err(Error::EmptyDonorPool { e_bar: 0, .. })
        ));
        assert!(matches!(
            estimate_att_staggered(&ds, &design, "nope", 0, None, &EstimateConfig::default()),
            Err(Error::UnknownGroupLabel(_))
        ));
        // γ(g) = 2 against three donors: underidentified without uniform
        // weights.
        let early = StaggeredDesign::new(vec![Some(2), None, None, None], 6).unwrap();
        match estimate_att_staggered(&ds, &early, "G1", 0, Some(0), &EstimateConfig::default()) {
            Err(Error::Underidentified {
                n_periods,
                n_controls,
            }) => assert_eq!((n_periods, n_controls), (2, 3)),
            other => panic!("expected Underidentified, got {other:?}"),
        }
    }

    #[test]
    fn default_donor_horizon_is_the_largest_workable_one() {
        let ds = synth_panel(&[4, 4, 4], 6, true, 41);
        // No never-treated donor: ē must stop where a later cohort remains.
        let design = StaggeredDesign::new(vec![Some(3), Some(5), Some(6)], 6).unwrap();
        assert_eq!(default_e_bar(&ds, &design, &[1], 0).unwrap(), 2);
        // A never-treated donor lets ē reach the period cap.
        let with_never = StaggeredDesign::new(vec![Some(3), Some(5), None], 6).unwrap();
        assert_eq!(default_e_bar(&ds, &with_never, &[1], 0).unwrap(), 3);
        // Event time past the cap.
        assert!(matches!(
            default_e_bar(&ds, &design, &[1], 4),
            Err(Error::EventTimeOutOfRange { .. })
        ));
        // Simultaneous adoption leaves no donors at any horizon.
        let simultaneous = StaggeredDesign::new(vec![Some(3); 3], 6).unwrap();
        assert!(matches!(
            default_e_bar(&ds, &simultaneous, &[1], 0),
            Err(Error::EmptyDonorPool { e_bar: 0, .. })
        ));
    }

    #[test]
    fn event_study_aggregates_cohorts_by_sample_share() {
        let ds = synth_panel(&[6, 6, 6, 6], 6, false, 43);
        let cfg = fixed_cfg();
        // Single qualifying cohort at e = 2: ES equals its ATT.
        let design = StaggeredDesign::new(vec![Some(4), Some(6), None, None], 6).unwrap();
        let es = event_study(&ds, &design, 2, None, &cfg).unwrap();
        let only = estimate_att_staggered(&ds, &design, "G1", 2, Some(es.e_bar), &cfg).unwrap();
        assert_eq!(es.es_hat.to_bits(), only.theta_hat.to_bits());
        assert_eq!(es.components.len(), 1);
        assert_abs_diff_eq!(es.components[0].share, 1.0);

        // Two equal-size qualifying cohorts at e = 0: shares are 1/2 each and
        // ES is the plain average of the two ATTs.
        let es0 = event_study(&ds, &design, 0, None, &cfg).unwrap();
        assert_eq!(es0.components.len(), 2);
        for c in &es0.components {
            assert_abs_diff_eq!(c.share, 0.5);
        }
        let mean = 0.5 * es0.components[0].att + 0.5 * es0.components[1].att;
        assert_abs_diff_eq!(es0.es_hat, mean, epsilon = 1e-12);

        assert!(matches!(
            event_study(&ds, &design, 5, None, &cfg),
            Err(Error::NoQualifyingGroup(5))
        ));
    }

    /// Builds the RC analogue of a small panel by tagging rows with explicit
    /// periods.
    fn synth_rc(seed: u64) -> RepeatedCrossSection {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::new();
        let mut group = Vec::new();
        let mut time = Vec::new();
        let mut covs = Vec::new();
        for g in 1..=3usize {
            for _ in 0..30usize {
                let t = rng.gen_range(1..=3usize);
                let x: f64 = rng.gen_range(0.1..0.9);
                group.push(g);
                time.push(t);
                covs.push(CovariateProfile {
                    continuous: vec![x],
                    discrete: vec![],
                });
                y.push((g as f64) * 0.4 * t as f64 + 0.3 * x + rng.gen_range(-0.05..0.05));
            }
        }
        RepeatedCrossSection::from_parts(
            y,
            group,
            time,
            covs,
            vec!["T".into(), "C1".into(), "C2".into()],
            vec![1, 2, 3],
            vec!["x".into()],
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn rc_estimate_scales_with_the_outcome_and_averages_its_moments() {
        let rc = synth_rc(47);
        let cfg = fixed_cfg();
        let est = estimate_att_rc(&rc, &cfg).unwrap();
        let mean = est.per_obs_moment.iter().sum::<f64>() / est.per_obs_moment.len() as f64;
        assert_eq!(est.theta_hat.to_bits(), mean.to_bits());
        assert_eq!(est.design, Design::RepeatedCrossSection);

        let c = 2.5;
        let mut scaled = rc.clone();
        for v in &mut scaled.y {
            *v *= c;
        }
        let est_c = estimate_att_rc(&scaled, &cfg).unwrap();
        assert_abs_diff_eq!(
            est_c.theta_hat,
            c * est.theta_hat,
            epsilon = 1e-9 * (1.0 + est.theta_hat.abs())
        );
    }

    #[test]
    fn relabeling_control_groups_leaves_theta_unchanged() {
        let ds = synth_panel(&[8, 8, 8, 8], 5, false, 53);
        let cfg = fixed_cfg();
        let base = estimate_att_panel(&ds, &cfg).unwrap();
        // Reorder the control groups as (G4, G2, G3); units keep their
        // labels, covariates, and outcomes.
        let perm = [1usize, 3, 4, 2]; // new internal index of old group g
        let ds2 = PanelDataset::from_parts(
            ds.unit_ids.clone(),
            ds.group.iter().map(|&g| perm[g - 1]).collect(),
            ds.covariates.clone(),
            ds.outcomes.clone(),
            vec!["G1".into(), "G4".into(), "G2".into(), "G3".into()],
            ds.period_values.clone(),
            ds.continuous_names.clone(),
            ds.discrete_names.clone(),
            ds.discrete_levels.clone(),
        )
        .unwrap();
        let permuted = estimate_att_panel(&ds2, &cfg).unwrap();
        assert_abs_diff_eq!(permuted.theta_hat, base.theta_hat, epsilon = 1e-8);
    }
}
