//! Cross-fitted nuisance surfaces: outcome regressions m̂_{g,t}(x) (panel) or
//! μ̂_{g,t}(x) (repeated cross-sections), the control-pool trend m̂_Δ(x), and
//! propensity ratios r̂_{1,g}(x), all fit honestly across folds and separately
//! within every discrete-covariate stratum.
//!
//! Cross-fitting: observations in fold ℓ receive nuisance values fit on the
//! complement of ℓ. Discrete covariates stratify every conditional surface —
//! a fit for stratum s never reads observations outside s. Scalar quantities
//! (treated share π̂₁, period shares λ̂_t) are *not* stratified; they are global
//! sample means.
//!
//! [`NuisancePlan`] separates the weight-independent work (fold/stratum
//! partitions, bandwidth resolution, kernel matrices) from
//! [`NuisancePlan::fit`], which re-evaluates every surface under a fresh
//! sample-weight vector. A multiplier bootstrap calls `fit` hundreds of times
//! against one plan, with bandwidths frozen at their original values.

use std::collections::BTreeMap;

use crate::data::{CovariateProfile, FoldAssignment, PanelDataset, RepeatedCrossSection};
use crate::kernel_regression::{resolve_bandwidths, LocalFitPlan, LocalPolyConfig};
use crate::{Error, Result};

/// A discrete-covariate cell: the level combination and the observations in
/// it. With no discrete covariates there is a single stratum holding
/// everything.
#[derive(Debug, Clone)]
pub struct Stratum {
    /// Level indices, one per discrete covariate.
    pub key: Vec<usize>,
    /// Human-readable cell description, e.g. `sex=f,region=west`.
    pub label: String,
    /// Observation indices belonging to the cell.
    pub members: Vec<usize>,
}

/// Partitions observations into discrete-covariate strata (sorted by key for
/// determinism). One all-inclusive stratum when no discrete covariates exist.
pub fn strata_of(
    covariates: &[CovariateProfile],
    discrete_levels: &[Vec<String>],
    discrete_names: &[String],
) -> Vec<Stratum> {
    if discrete_names.is_empty() {
        return vec![Stratum {
            key: Vec::new(),
            label: "all".into(),
            members: (0..covariates.len()).collect(),
        }];
    }
    let mut cells: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, prof) in covariates.iter().enumerate() {
        cells.entry(prof.discrete.clone()).or_default().push(i);
    }
    cells
        .into_iter()
        .map(|(key, members)| {
            let label = key
                .iter()
                .enumerate()
                .map(|(j, &lev)| format!("{}={}", discrete_names[j], discrete_levels[j][lev]))
                .collect::<Vec<_>>()
                .join(",");
            Stratum {
                key,
                label,
                members,
            }
        })
        .collect()
}

/// Which design the surfaces were fit for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Panel,
    RepeatedCrossSection,
}

/// Which nuisance families a plan covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitScope {
    Outcomes,
    Ratios,
    Both,
}

impl FitScope {
    fn outcomes(self) -> bool {
        matches!(self, FitScope::Outcomes | FitScope::Both)
    }
    fn ratios(self) -> bool {
        matches!(self, FitScope::Ratios | FitScope::Both)
    }
}

/// Cross-fitted nuisance values evaluated at every observation's own
/// covariates. Indexing is 1-based in group g and period t to match the
/// estimator's notation.
#[derive(Debug, Clone)]
pub struct NuisanceSurface {
    pub kind: SurfaceKind,
    pub n: usize,
    pub n_groups: usize,
    pub n_periods: usize,
    /// m̂_{g,t}(Xᵢ) (panel) or μ̂_{g,t}(Xᵢ) (RC); empty when outcomes were not
    /// in scope.
    m_gt: Vec<f64>,
    /// Panel: control-pool trend m̂_Δ(Xᵢ). RC: the λ-adjusted control
    /// contrast μ̂_{G≠1,𝒯}(Xᵢ)/λ̂_𝒯 − μ̂_{G≠1,𝒯−1}(Xᵢ)/λ̂_{𝒯−1}.
    m_delta: Vec<f64>,
    /// RC only: raw control-pool surfaces at 𝒯−1 and 𝒯 (before λ division).
    mu_ctrl_prev: Vec<f64>,
    mu_ctrl_last: Vec<f64>,
    /// RC only: period shares λ̂_t = (1/n)Σᵢ wᵢ·1{Tᵢ = t}.
    pub lambda: Vec<f64>,
    /// r̂_{1,g}(Xᵢ) for g = 2..=n_groups; empty when ratios were not in scope.
    r1g: Vec<f64>,
    /// Number of (observation, group) ratio estimates that hit a clamp bound.
    pub ratio_clamped: usize,
    pub has_outcomes: bool,
    pub has_ratios: bool,
}

impl NuisanceSurface {
    /// m̂_{g,t}(Xᵢ) with g, t 1-based.
    pub fn m(&self, i: usize, g: usize, t: usize) -> f64 {
        debug_assert!(self.has_outcomes);
        self.m_gt[(i * self.n_groups + (g - 1)) * self.n_periods + (t - 1)]
    }

    /// Control-pool trend value at observation i (see field docs for the RC
    /// meaning).
    pub fn m_delta(&self, i: usize) -> f64 {
        debug_assert!(self.has_outcomes);
        self.m_delta[i]
    }

    /// Per-group trend m̂_{g,Δ}(Xᵢ) = m̂_{g,𝒯}(Xᵢ) − m̂_{g,𝒯−1}(Xᵢ).
    pub fn m_delta_group(&self, i: usize, g: usize) -> f64 {
        self.m(i, g, self.n_periods) - self.m(i, g, self.n_periods - 1)
    }

    /// Raw RC control-pool surfaces (μ̂_{G≠1,𝒯−1}, μ̂_{G≠1,𝒯}) at observation i.
    pub fn mu_ctrl(&self, i: usize) -> (f64, f64) {
        (self.mu_ctrl_prev[i], self.mu_ctrl_last[i])
    }

    /// Propensity ratio r̂_{1,g}(Xᵢ), g ∈ 2..=n_groups.
    pub fn r(&self, i: usize, g: usize) -> f64 {
        debug_assert!(self.has_ratios);
        self.r1g[i * (self.n_groups - 1) + (g - 2)]
    }

    /// Implied group probabilities p̂_g(Xᵢ) for g = 1..=n_groups,
    /// reconstructed from the ratios: p̂₁ = (1 + Σ_g 1/r̂_{1,g})⁻¹ and
    /// p̂_g = p̂₁ / r̂_{1,g}. Reciprocals of the (already clamped) ratios are
    /// clamped to the same bound, keeping every probability strictly
    /// positive.
    pub fn implied_probabilities(&self, i: usize, clamp: f64) -> Vec<f64> {
        let g_count = self.n_groups;
        let mut inv = Vec::with_capacity(g_count - 1);
        for g in 2..=g_count {
            let r = self.r(i, g);
            let raw = 1.0 / r;
            inv.push(if raw.is_finite() {
                raw.min(clamp)
            } else {
                clamp
            });
        }
        let p1 = 1.0 / (1.0 + inv.iter().sum::<f64>());
        let mut p = Vec::with_capacity(g_count);
        p.push(p1);
        for v in inv {
            p.push(p1 * v);
        }
        p
    }
}

/// Weight-independent backend for one surface family: a kernel plan for
/// continuous covariates, or plain weighted means when there are none.
enum Backend {
    Kernel(LocalFitPlan),
    Mean,
}

/// One outcome-surface family: the training rows, their responses (one column
/// per fitted quantity), and the shared local-polynomial design.
struct GroupFit {
    rows: Vec<usize>,
    responses: Vec<Vec<f64>>,
    backend: Backend,
    n_eval: usize,
    context: String,
}

impl GroupFit {
    /// Fits every response column under global weights `w`; returns values
    /// indexed `[response][eval point]`.
    fn fit(&self, w: &[f64]) -> Result<Vec<Vec<f64>>> {
        let wslice: Vec<f64> = self.rows.iter().map(|&i| w[i]).collect();
        match &self.backend {
            Backend::Kernel(plan) => {
                let refs: Vec<&[f64]> = self.responses.iter().map(|r| r.as_slice()).collect();
                plan.fit_multi(&refs, &wslice)
                    .map_err(|e| e.with_context(&self.context))
            }
            Backend::Mean => {
                let total: f64 = wslice.iter().sum();
                if !(total > 0.0) || !total.is_finite() {
                    return Err(Error::SingularLocalDesign {
                        context: self.context.clone(),
                    });
                }
                Ok(self
                    .responses
                    .iter()
                    .map(|col| {
                        let s: f64 = col.iter().zip(&wslice).map(|(y, w)| y * w).sum();
                        vec![s / total; self.n_eval]
                    })
                    .collect())
            }
        }
    }
}

/// One propensity-ratio family: all training rows of a (fold, stratum) cell
/// with per-group membership indicators.
struct RatioFit {
    rows: Vec<usize>,
    /// indicators[g-1][row] = 1{row in group g}, g = 1..=n_groups.
    indicators: Vec<Vec<f64>>,
    backend: Backend,
    n_eval: usize,
    context: String,
}

impl RatioFit {
    /// Fits r̂_{1,g} for one denominator group g; returns (values, clamps).
    fn fit(&self, g: usize, w: &[f64], clamp: f64) -> Result<(Vec<f64>, usize)> {
        let wslice: Vec<f64> = self.rows.iter().map(|&i| w[i]).collect();
        let g1 = &self.indicators[0];
        let gg = &self.indicators[g - 1];
        match &self.backend {
            Backend::Kernel(plan) => plan
                .fit_ratio(g1, gg, &wslice, clamp)
                .map_err(|e| e.with_context(&self.context)),
            Backend::Mean => {
                let num: f64 = g1.iter().zip(&wslice).map(|(a, b)| a * b).sum();
                let den: f64 = gg.iter().zip(&wslice).map(|(a, b)| a * b).sum();
                if !(den > 0.0) || !den.is_finite() {
                    return Err(Error::SingularLocalDesign {
                        context: self.context.clone(),
                    });
                }
                let raw = num / den;
                let (value, clamped) = if raw < 0.0 {
                    (0.0, 1)
                } else if raw > clamp {
                    (clamp, 1)
                } else {
                    (raw, 0)
                };
                Ok((vec![value; self.n_eval], clamped * self.n_eval))
            }
        }
    }
}

/// All surface families for one (fold, stratum) cell.
struct SubPlans {
    eval_rows: Vec<usize>,
    /// Outcome families, one per group 1..=n_groups (empty if out of scope).
    group_fits: Vec<GroupFit>,
    /// Control-pool family (panel: ΔY; RC: period-tagged outcomes).
    pool_fit: Option<GroupFit>,
    ratio_fit: Option<RatioFit>,
}

/// Record of a resolved bandwidth, for reporting.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BandwidthRecord {
    pub fold: usize,
    pub stratum: String,
    pub family: String,
    pub values: Vec<f64>,
}

/// Reusable cross-fitting plan; see the module docs.
pub struct NuisancePlan {
    kind: SurfaceKind,
    scope: FitScope,
    n: usize,
    n_groups: usize,
    n_periods: usize,
    clamp: f64,
    cells: Vec<SubPlans>,
    /// RC only: period index of every row, for λ̂.
    time_of: Vec<usize>,
    /// Resolved bandwidths, for diagnostics.
    pub bandwidths: Vec<BandwidthRecord>,
}

/// Flattens the continuous covariates of `rows` into a row-major array.
fn flatten_x(covariates: &[CovariateProfile], rows: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * dim);
    for &i in rows {
        out.extend_from_slice(&covariates[i].continuous);
    }
    out
}

struct BuildCtx<'a> {
    covariates: &'a [CovariateProfile],
    group: &'a [usize],
    group_labels: &'a [String],
    dim: usize,
    cfg: &'a LocalPolyConfig,
}

impl<'a> BuildCtx<'a> {
    /// Builds one outcome family: training rows filtered to `keep`, with the
    /// given response columns, predicting at `eval_x`.
    #[allow(clippy::too_many_arguments)]
    fn group_fit(
        &self,
        rows: Vec<usize>,
        responses: Vec<Vec<f64>>,
        eval_x: &[f64],
        n_eval: usize,
        context: String,
        log: &mut Vec<BandwidthRecord>,
        fold: usize,
        stratum: &str,
        family: &str,
    ) -> Result<GroupFit> {
        let backend = if self.dim == 0 {
            Backend::Mean
        } else {
            let x = flatten_x(self.covariates, &rows, self.dim);
            let h = resolve_bandwidths(&self.cfg.bandwidth, &x, self.dim, rows.len())
                .map_err(|e| e.with_context(&context))?;
            log.push(BandwidthRecord {
                fold,
                stratum: stratum.to_string(),
                family: family.to_string(),
                values: h.clone(),
            });
            Backend::Kernel(
                LocalFitPlan::new(
                    &x,
                    self.dim,
                    eval_x,
                    &h,
                    self.cfg.order,
                    self.cfg.kernel,
                    self.cfg.ridge_eps,
                )
                .map_err(|e| e.with_context(&context))?,
            )
        };
        Ok(GroupFit {
            rows,
            responses,
            backend,
            n_eval,
            context,
        })
    }
}

impl NuisancePlan {
    /// Builds a plan for a balanced panel.
    ///
    /// # Errors
    /// `MissingGroupInStratum` when a group has no training rows in some
    /// (fold, stratum) cell; `DegenerateCovariate` when a training covariate
    /// has zero dispersion; `InvalidConfig` on bad fit settings.
    pub fn build_panel(
        ds: &PanelDataset,
        folds: &FoldAssignment,
        cfg: &LocalPolyConfig,
        scope: FitScope,
    ) -> Result<Self> {
        let strata = strata_of(&ds.covariates, &ds.discrete_levels, &ds.discrete_names);
        let dim = ds.continuous_names.len();
        let ctx = BuildCtx {
            covariates: &ds.covariates,
            group: &ds.group,
            group_labels: &ds.group_labels,
            dim,
            cfg,
        };
        let mut cells = Vec::new();
        let mut bandwidths = Vec::new();
        for fold in 1..=folds.n_folds {
            for stratum in &strata {
                let eval_rows: Vec<usize> = stratum
                    .members
                    .iter()
                    .copied()
                    .filter(|&i| folds.fold_of[i] == fold)
                    .collect();
                if eval_rows.is_empty() {
                    continue;
                }
                let train_rows: Vec<usize> = stratum
                    .members
                    .iter()
                    .copied()
                    .filter(|&i| folds.fold_of[i] != fold)
                    .collect();
                let eval_x = flatten_x(&ds.covariates, &eval_rows, dim);
                let n_eval = eval_rows.len();

                let mut group_fits = Vec::new();
                let mut pool_fit = None;
                if scope.outcomes() {
                    for g in 1..=ds.n_groups {
                        let rows: Vec<usize> = train_rows
                            .iter()
                            .copied()
                            .filter(|&i| ds.group[i] == g)
                            .collect();
                        if rows.is_empty() {
                            return Err(Error::MissingGroupInStratum {
                                group: ds.group_labels[g - 1].clone(),
                                stratum: stratum.label.clone(),
                            });
                        }
                        let responses: Vec<Vec<f64>> = (0..ds.n_periods)
                            .map(|t| rows.iter().map(|&i| ds.outcomes[i][t]).collect())
                            .collect();
                        let context = format!(
                            "outcome surfaces, group '{}', stratum {{{}}}, fold {fold}",
                            ds.group_labels[g - 1],
                            stratum.label
                        );
                        group_fits.push(ctx.group_fit(
                            rows,
                            responses,
                            &eval_x,
                            n_eval,
                            context,
                            &mut bandwidths,
                            fold,
                            &stratum.label,
                            &format!("m[g={}]", ds.group_labels[g - 1]),
                        )?);
                    }
                    let pool_rows: Vec<usize> = train_rows
                        .iter()
                        .copied()
                        .filter(|&i| ds.group[i] != 1)
                        .collect();
                    if pool_rows.is_empty() {
                        return Err(Error::MissingGroupInStratum {
                            group: "(control pool)".into(),
                            stratum: stratum.label.clone(),
                        });
                    }
                    let delta: Vec<f64> = pool_rows.iter().map(|&i| ds.delta_y(i)).collect();
                    let context = format!(
                        "control-pool trend, stratum {{{}}}, fold {fold}",
                        stratum.label
                    );
                    pool_fit = Some(ctx.group_fit(
                        pool_rows,
                        vec![delta],
                        &eval_x,
                        n_eval,
                        context,
                        &mut bandwidths,
                        fold,
                        &stratum.label,
                        "m_delta",
                    )?);
                }

                let ratio_fit = if scope.ratios() {
                    Some(Self::build_ratio(
                        &ctx,
                        &train_rows,
                        ds.n_groups,
                        &eval_x,
                        n_eval,
                        fold,
                        stratum,
                        &mut bandwidths,
                    )?)
                } else {
                    None
                };

                cells.push(SubPlans {
                    eval_rows,
                    group_fits,
                    pool_fit,
                    ratio_fit,
                });
            }
        }
        Ok(Self {
            kind: SurfaceKind::Panel,
            scope,
            n: ds.n(),
            n_groups: ds.n_groups,
            n_periods: ds.n_periods,
            clamp: cfg.ratio_clamp,
            cells,
            time_of: Vec::new(),
            bandwidths,
        })
    }

    /// Builds a plan for repeated cross-sections. Outcome surfaces regress
    /// the period-tagged outcome 1{Tᵢ = t}·Yᵢ on covariates within each
    /// group, so that μ̂_{g,t}(x) estimates E[1{T = t}·Y | G = g, X = x].
    ///
    /// # Errors
    /// As for [`NuisancePlan::build_panel`], plus `EmptyPeriod` when some
    /// (group, period) has no training rows in a (fold, stratum) cell.
    pub fn build_rc(
        rc: &RepeatedCrossSection,
        folds: &FoldAssignment,
        cfg: &LocalPolyConfig,
        scope: FitScope,
    ) -> Result<Self> {
        let strata = strata_of(&rc.covariates, &rc.discrete_levels, &rc.discrete_names);
        let dim = rc.continuous_names.len();
        let ctx = BuildCtx {
            covariates: &rc.covariates,
            group: &rc.group,
            group_labels: &rc.group_labels,
            dim,
            cfg,
        };
        let mut cells = Vec::new();
        let mut bandwidths = Vec::new();
        for fold in 1..=folds.n_folds {
            for stratum in &strata {
                let eval_rows: Vec<usize> = stratum
                    .members
                    .iter()
                    .copied()
                    .filter(|&i| folds.fold_of[i] == fold)
                    .collect();
                if eval_rows.is_empty() {
                    continue;
                }
                let train_rows: Vec<usize> = stratum
                    .members
                    .iter()
                    .copied()
                    .filter(|&i| folds.fold_of[i] != fold)
                    .collect();
                let eval_x = flatten_x(&rc.covariates, &eval_rows, dim);
                let n_eval = eval_rows.len();

                let mut group_fits = Vec::new();
                let mut pool_fit = None;
                if scope.outcomes() {
                    for g in 1..=rc.n_groups {
                        let rows: Vec<usize> = train_rows
                            .iter()
                            .copied()
                            .filter(|&i| rc.group[i] == g)
                            .collect();
                        if rows.is_empty() {
                            return Err(Error::MissingGroupInStratum {
                                group: rc.group_labels[g - 1].clone(),
                                stratum: stratum.label.clone(),
                            });
                        }
                        for t in 1..=rc.n_periods {
                            if !rows.iter().any(|&i| rc.time[i] == t) {
                                return Err(Error::EmptyPeriod {
                                    period: rc.period_values[t - 1],
                                    context: format!(
                                        "group '{}', stratum {{{}}}, training folds for fold {fold}",
                                        rc.group_labels[g - 1],
                                        stratum.label
                                    ),
                                });
                            }
                        }
                        let responses: Vec<Vec<f64>> = (1..=rc.n_periods)
                            .map(|t| {
                                rows.iter()
                                    .map(|&i| if rc.time[i] == t { rc.y[i] } else { 0.0 })
                                    .collect()
                            })
                            .collect();
                        let context = format!(
                            "period-tagged outcome surfaces, group '{}', stratum {{{}}}, fold {fold}",
                            rc.group_labels[g - 1],
                            stratum.label
                        );
                        group_fits.push(ctx.group_fit(
                            rows,
                            responses,
                            &eval_x,
                            n_eval,
                            context,
                            &mut bandwidths,
                            fold,
                            &stratum.label,
                            &format!("mu[g={}]", rc.group_labels[g - 1]),
                        )?);
                    }
                    let pool_rows: Vec<usize> = train_rows
                        .iter()
                        .copied()
                        .filter(|&i| rc.group[i] != 1)
                        .collect();
                    if pool_rows.is_empty() {
                        return Err(Error::MissingGroupInStratum {
                            group: "(control pool)".into(),
                            stratum: stratum.label.clone(),
                        });
                    }
                    let t_last = rc.n_periods;
                    let tagged = |t: usize| -> Vec<f64> {
                        pool_rows
                            .iter()
                            .map(|&i| if rc.time[i] == t { rc.y[i] } else { 0.0 })
                            .collect()
                    };
                    let pool_responses = vec![tagged(t_last - 1), tagged(t_last)];
                    let context = format!(
                        "control-pool period-tagged surfaces, stratum {{{}}}, fold {fold}",
                        stratum.label
                    );
                    pool_fit = Some(ctx.group_fit(
                        pool_rows,
                        pool_responses,
                        &eval_x,
                        n_eval,
                        context,
                        &mut bandwidths,
                        fold,
                        &stratum.label,
                        "mu_pool",
                    )?);
                }

                let ratio_fit = if scope.ratios() {
                    Some(Self::build_ratio(
                        &ctx,
                        &train_rows,
                        rc.n_groups,
                        &eval_x,
                        n_eval,
                        fold,
                        stratum,
                        &mut bandwidths,
                    )?)
                } else {
                    None
                };

                cells.push(SubPlans {
                    eval_rows,
                    group_fits,
                    pool_fit,
                    ratio_fit,
                });
            }
        }
        Ok(Self {
            kind: SurfaceKind::RepeatedCrossSection,
            scope,
            n: rc.n(),
            n_groups: rc.n_groups,
            n_periods: rc.n_periods,
            clamp: cfg.ratio_clamp,
            cells,
            time_of: rc.time.clone(),
            bandwidths,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_ratio(
        ctx: &BuildCtx,
        train_rows: &[usize],
        n_groups: usize,
        eval_x: &[f64],
        n_eval: usize,
        fold: usize,
        stratum: &Stratum,
        log: &mut Vec<BandwidthRecord>,
    ) -> Result<RatioFit> {
        for g in 1..=n_groups {
            if !train_rows.iter().any(|&i| ctx.group[i] == g) {
                return Err(Error::MissingGroupInStratum {
                    group: ctx.group_labels[g - 1].clone(),
                    stratum: stratum.label.clone(),
                });
            }
        }
        let rows = train_rows.to_vec();
        let indicators: Vec<Vec<f64>> = (1..=n_groups)
            .map(|g| {
                rows.iter()
                    .map(|&i| if ctx.group[i] == g { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let context = format!(
            "propensity ratios, stratum {{{}}}, fold {fold}",
            stratum.label
        );
        let backend = if ctx.dim == 0 {
            Backend::Mean
        } else {
            let x = flatten_x(ctx.covariates, &rows, ctx.dim);
            let h = resolve_bandwidths(&ctx.cfg.bandwidth, &x, ctx.dim, rows.len())
                .map_err(|e| e.with_context(&context))?;
            log.push(BandwidthRecord {
                fold,
                stratum: stratum.label.clone(),
                family: "r".into(),
                values: h.clone(),
            });
            Backend::Kernel(
                LocalFitPlan::new(
                    &x,
                    ctx.dim,
                    eval_x,
                    &h,
                    ctx.cfg.order,
                    ctx.cfg.kernel,
                    ctx.cfg.ridge_eps,
                )
                .map_err(|e| e.with_context(&context))?,
            )
        };
        Ok(RatioFit {
            rows,
            indicators,
            backend,
            n_eval,
            context,
        })
    }

    /// Number of observations the plan covers.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Evaluates every in-scope surface under sample weights `w` (length n).
    /// Passing all-ones weights reproduces the unweighted fit; a multiplier
    /// bootstrap passes its random weights. Bandwidths, folds, and strata
    /// stay frozen.
    ///
    /// # Errors
    /// `SingularLocalDesign` when a weighted window loses its kernel mass or
    /// definiteness (possible under negative multiplier weights).
    pub fn fit(&self, w: &[f64]) -> Result<NuisanceSurface> {
        if w.len() != self.n {
            return Err(Error::InvalidConfig(format!(
                "weight vector length {} does not match {} observations",
                w.len(),
                self.n
            )));
        }
        let g_count = self.n_groups;
        let t_count = self.n_periods;
        let rc = self.kind == SurfaceKind::RepeatedCrossSection;
        let mut m_gt = if self.scope.outcomes() {
            vec![f64::NAN; self.n * g_count * t_count]
        } else {
            Vec::new()
        };
        let mut m_delta = if self.scope.outcomes() {
            vec![f64::NAN; self.n]
        } else {
            Vec::new()
        };
        let (mut mu_prev, mut mu_last) = if rc && self.scope.outcomes() {
            (vec![f64::NAN; self.n], vec![f64::NAN; self.n])
        } else {
            (Vec::new(), Vec::new())
        };
        let mut r1g = if self.scope.ratios() {
            vec![f64::NAN; self.n * (g_count - 1)]
        } else {
            Vec::new()
        };
        let mut ratio_clamped = 0usize;

        for sub in &self.cells {
            if self.scope.outcomes() {
                for (gi, gf) in sub.group_fits.iter().enumerate() {
                    let values = gf.fit(w)?;
                    for (t, col) in values.iter().enumerate() {
                        for (e, &row) in sub.eval_rows.iter().enumerate() {
                            m_gt[(row * g_count + gi) * t_count + t] = col[e];
                        }
                    }
                }
                let pool = sub.pool_fit.as_ref().expect("outcome scope has pool fit");
                let values = pool.fit(w)?;
                if rc {
                    for (e, &row) in sub.eval_rows.iter().enumerate() {
                        mu_prev[row] = values[0][e];
                        mu_last[row] = values[1][e];
                    }
                } else {
                    for (e, &row) in sub.eval_rows.iter().enumerate() {
                        m_delta[row] = values[0][e];
                    }
                }
            }
            if self.scope.ratios() {
                let rf = sub.ratio_fit.as_ref().expect("ratio scope has ratio fit");
                for g in 2..=g_count {
                    let (values, clamped) = rf.fit(g, w, self.clamp)?;
                    ratio_clamped += clamped;
                    for (e, &row) in sub.eval_rows.iter().enumerate() {
                        r1g[row * (g_count - 1) + (g - 2)] = values[e];
                    }
                }
            }
        }

        let mut lambda = Vec::new();
        if rc {
            lambda = vec![0.0; t_count];
            for i in 0..self.n {
                lambda[self.time_of[i] - 1] += w[i];
            }
            for l in &mut lambda {
                *l /= self.n as f64;
            }
            if self.scope.outcomes() {
                let l_prev = lambda[t_count - 2];
                let l_last = lambda[t_count - 1];
                if !(l_prev > 0.0) || !(l_last > 0.0) {
                    return Err(Error::SingularLocalDesign {
                        context: "non-positive weighted period share".into(),
                    });
                }
                for i in 0..self.n {
                    m_delta[i] = mu_last[i] / l_last - mu_prev[i] / l_prev;
                }
            }
        }

        Ok(NuisanceSurface {
            kind: self.kind,
            n: self.n,
            n_groups: g_count,
            n_periods: t_count,
            m_gt,
            m_delta,
            mu_ctrl_prev: mu_prev,
            mu_ctrl_last: mu_last,
            lambda,
            r1g,
            ratio_clamped,
            has_outcomes: self.scope.outcomes(),
            has_ratios: self.scope.ratios(),
        })
    }
}

/// Cross-fitted panel outcome surfaces (m̂_{g,t} and the control-pool trend
/// m̂_Δ) under unit weights.
///
/// # Errors
/// See [`NuisancePlan::build_panel`] and [`NuisancePlan::fit`].
pub fn fit_outcome_surfaces(
    ds: &PanelDataset,
    folds: &FoldAssignment,
    cfg: &LocalPolyConfig,
) -> Result<NuisanceSurface> {
    NuisancePlan::build_panel(ds, folds, cfg, FitScope::Outcomes)?.fit(&vec![1.0; ds.n()])
}

/// Cross-fitted panel propensity ratios r̂_{1,g} under unit weights.
///
/// # Errors
/// See [`NuisancePlan::build_panel`] and [`NuisancePlan::fit`].
pub fn fit_ratio_surfaces(
    ds: &PanelDataset,
    folds: &FoldAssignment,
    cfg: &LocalPolyConfig,
) -> Result<NuisanceSurface> {
    NuisancePlan::build_panel(ds, folds, cfg, FitScope::Ratios)?.fit(&vec![1.0; ds.n()])
}

/// Cross-fitted repeated-cross-section surfaces (μ̂_{g,t}, the λ-adjusted
/// control contrast, and period shares λ̂) under unit weights.
///
/// # Errors
/// See [`NuisancePlan::build_rc`] and [`NuisancePlan::fit`].
pub fn fit_rc_surfaces(
    rc: &RepeatedCrossSection,
    folds: &FoldAssignment,
    cfg: &LocalPolyConfig,
) -> Result<NuisanceSurface> {
    NuisancePlan::build_rc(rc, folds, cfg, FitScope::Outcomes)?.fit(&vec![1.0; rc.n()])
}

/// Cross-fitted repeated-cross-section propensity ratios under unit weights.
///
/// # Errors
/// See [`NuisancePlan::build_rc`] and [`NuisancePlan::fit`].
pub fn fit_ratio_surfaces_rc(
    rc: &RepeatedCrossSection,
    folds: &FoldAssignment,
    cfg: &LocalPolyConfig,
) -> Result<NuisanceSurface> {
    NuisancePlan::build_rc(rc, folds, cfg, FitScope::Ratios)?.fit(&vec![1.0; rc.n()])
}
