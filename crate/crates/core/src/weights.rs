//! Synthetic-control weight solving.
//!
//! For each covariate value the control groups g = 2..=N_G+1 receive weights
//! w_g(x) that reproduce the treated group's pre-treatment outcome path from
//! the control paths. With m̂_{g,t}(x) the fitted group/period surfaces, the
//! system stacks the pre-treatment periods t = 1..𝒯−1:
//!
//! * `M` — (𝒯−1)×(N_G−1), column g−2 holds m̂_{g,t}(x) − m̂_{N_G+1,t}(x),
//! * `m₁` — (𝒯−1) vector with entries m̂_{1,t}(x) − m̂_{N_G+1,t}(x),
//!
//! and solves min‖Mw₀ − m₁‖₂, recovering the last weight as 1 − 𝟏′w₀ so the
//! full vector sums to one exactly. The same construction applies to
//! repeated cross-sections with the period-tagged surfaces μ̂ in place of m̂
//! (the period-share factors cancel on both sides).
//!
//! Solves are per covariate point; identical systems (same fitted values to
//! the bit) are solved once and shared. Nonnegativity is optional — the
//! unconstrained solution is projected onto the probability simplex when
//! requested.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::{PanelDataset, RepeatedCrossSection};
use crate::error::Error;
use crate::nuisance::NuisanceSurface;
use crate::Result;

/// Options for [`solve_weights`] and [`weight_surface`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightSolveOptions {
    /// Relative eigenvalue floor c: the system is declared singular when the
    /// smallest eigenvalue of M′M falls below c·σ_max(M)².
    pub min_eig_floor_rel: f64,
    /// Optional Tikhonov ridge λ: solve (M′M + λI)w₀ = M′m₁ instead of the
    /// plain least squares, bypassing the singularity refusal.
    pub ridge: Option<f64>,
    /// Project the solution onto the probability simplex (all weights ≥ 0,
    /// summing to one).
    pub nonneg: bool,
}

impl Default for WeightSolveOptions {
    fn default() -> Self {
        Self {
            min_eig_floor_rel: 1e-8,
            ridge: None,
            nonneg: false,
        }
    }
}

/// Synthetic-control weights at one covariate value, with solver diagnostics.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct WeightSolution {
    /// Full weight vector, entry g−2 belonging to control group g for
    /// g = 2..=N_G+1. The last entry is the complement 1 − 𝟏′w₀ and the
    /// plain sum is pinned to exactly one (bit-for-bit whenever the entries
    /// stay in a reasonable range; weights far outside [0, 1] may leave a
    /// few ulps that no representable entry can absorb).
    pub w: Vec<f64>,
    /// The freely solved part: the first N_G−1 entries of `w`.
    pub w0: Vec<f64>,
    /// Smallest eigenvalue of M′M (σ_min(M)²); +∞ for the single-control
    /// system, whose solution is forced.
    pub min_eig: f64,
    /// Fit discrepancy ‖Mw₀ − m₁‖₂ of the returned solution.
    pub residual: f64,
}

/// Per-observation synthetic-control weights with shared solutions and
/// per-point failure records.
#[derive(Debug, Clone)]
pub struct WeightSurface {
    n: usize,
    n_controls: usize,
    /// Flat n × N_G weight values; NaN rows mark failed points.
    w: Vec<f64>,
    /// Index into `solutions` per observation; `None` marks a failed point.
    sol_of: Vec<Option<u32>>,
    /// Distinct solutions actually computed (points with bit-identical
    /// systems share one entry).
    pub solutions: Vec<WeightSolution>,
    /// Observations whose solve failed, ascending.
    pub failed: Vec<usize>,
    global: bool,
}

impl WeightSurface {
    /// Broadcasts a single solution (e.g. from a covariate-free global
    /// system) to all `n` observations.
    pub fn from_global(n: usize, solution: WeightSolution) -> Self {
        let n_controls = solution.w.len();
        let mut w = Vec::with_capacity(n * n_controls);
        for _ in 0..n {
            w.extend_from_slice(&solution.w);
        }
        Self {
            n,
            n_controls,
            w,
            sol_of: vec![Some(0); n],
            solutions: vec![solution],
            failed: Vec::new(),
            global: true,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of control groups N_G (the length of each weight vector).
    pub fn n_controls(&self) -> usize {
        self.n_controls
    }

    /// Weight vector for observation i (entry g−2 for control group g), or
    /// `None` when the solve failed at that point.
    pub fn weights(&self, i: usize) -> Option<&[f64]> {
        self.sol_of[i]?;
        Some(&self.w[i * self.n_controls..(i + 1) * self.n_controls])
    }

    /// Full solution (with diagnostics) backing observation i.
    pub fn solution(&self, i: usize) -> Option<&WeightSolution> {
        self.sol_of[i].map(|k| &self.solutions[k as usize])
    }

    /// Whether one weight vector is shared by construction by all
    /// observations.
    pub fn is_global(&self) -> bool {
        self.global
    }

    /// Smallest-eigenvalue diagnostics across the distinct solves.
    pub fn min_eigs(&self) -> Vec<f64> {
        self.solutions.iter().map(|s| s.min_eig).collect()
    }
}

/// Adjusts `w[k]` so the plain left-to-right sum of `w` equals one to the
/// bit. A Newton correction handles the bulk; because the ulp spacing is
/// uneven across 1.0 the correction can cycle, so the entry's immediate
/// neighbors are then scanned for an exact landing. Entries of magnitude
/// ≲ 1 always admit one; far larger entries may not (their ulp exceeds the
/// rounding window of 1.0), in which case the closest value is kept.
fn force_sum_to_one(w: &mut [f64], k: usize) {
    for _ in 0..4 {
        let total: f64 = w.iter().sum();
        let err = total - 1.0;
        if err == 0.0 || !err.is_finite() {
            return;
        }
        w[k] -= err;
    }
    let base = w[k];
    let mut up = base;
    let mut down = base;
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        for cand in [up, down] {
            w[k] = cand;
            if w.iter().sum::<f64>() == 1.0 {
                return;
            }
        }
    }
    w[k] = base;
}

/// Euclidean projection onto the probability simplex {v ≥ 0, Σv = 1}
/// (threshold form: v_i ← max(v_i − τ, 0) with τ from the sorted partial
/// sums). The exact sum is then pinned by shrinking the largest leading
/// entry until the prefix sum is at most one and setting the last entry to
/// the complement — exact in floating point for prefix sums in [0, 1], and
/// every entry stays nonnegative.
fn project_to_simplex(w: &mut [f64]) {
    if w.is_empty() {
        return;
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    for v in w.iter_mut() {
        *v = (*v - tau).max(0.0);
    }
    let last = w.len() - 1;
    for _ in 0..4 {
        let s: f64 = w[..last].iter().sum();
        if s <= 1.0 {
            w[last] = 1.0 - s;
            return;
        }
        let k = w[..last]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        w[k] -= s - 1.0;
    }
}

/// Least-squares synthetic-control solve: w₀ = argmin‖Mu − m₁‖₂ via SVD
/// (or ridge normal equations when `opts.ridge` is set), with the last
/// weight the complement 1 − 𝟏′w₀.
///
/// # Errors
/// `Underidentified` when M has fewer rows than columns (fewer pre-treatment
/// periods than free weights); `SingularSystem` when the smallest eigenvalue
/// of M′M falls below `min_eig_floor_rel`·σ_max² and no ridge was requested;
/// `InvalidData` on non-finite entries; `InvalidConfig` on shape mismatches
/// or a non-positive ridge.
pub fn solve_weights(
    m: &DMatrix<f64>,
    m1: &DVector<f64>,
    opts: &WeightSolveOptions,
) -> Result<WeightSolution> {
    let rows = m.nrows();
    let cols = m.ncols();
    if m1.len() != rows {
        return Err(Error::InvalidConfig(format!(
            "weight system shape mismatch: M has {rows} row(s) but m1 has {} entr(ies)",
            m1.len()
        )));
    }
    if rows < cols {
        return Err(Error::Underidentified {
            n_periods: rows + 1,
            n_controls: cols + 1,
        });
    }
    if m.iter().any(|v| !v.is_finite()) || m1.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(
            "weight system contains non-finite entries".into(),
        ));
    }
    if let Some(ridge) = opts.ridge {
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "weight ridge must be positive and finite, got {ridge}"
            )));
        }
    }
    if cols == 0 {
        // A single control group: its weight is one by the sum constraint.
        return Ok(WeightSolution {
            w: vec![1.0],
            w0: Vec::new(),
            min_eig: f64::INFINITY,
            residual: m1.norm(),
        });
    }

    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let sigma_min = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &s| a.min(s));
    let min_eig = sigma_min * sigma_min;
    let floor = opts.min_eig_floor_rel * sigma_max * sigma_max;
    let singular = !(sigma_max > 0.0) || min_eig < floor;
    if singular && opts.ridge.is_none() {
        return Err(Error::SingularSystem {
            min_eig,
            floor,
            context: String::new(),
        });
    }

    let w0 = if let Some(ridge) = opts.ridge {
        let mut gram = m.transpose() * m;
        for d in 0..cols {
            gram[(d, d)] += ridge;
        }
        let chol = gram.cholesky().ok_or(Error::SingularSystem {
            min_eig,
            floor,
            context: "ridge-regularized normal equations".into(),
        })?;
        chol.solve(&(m.transpose() * m1))
    } else {
        svd.solve(m1, 0.0).map_err(|_| Error::SingularSystem {
            min_eig,
            floor,
            context: String::new(),
        })?
    };

    let mut w: Vec<f64> = w0.iter().copied().collect();
    let partial: f64 = w.iter().sum();
    w.push(1.0 - partial);
    if opts.nonneg {
        project_to_simplex(&mut w);
    } else {
        force_sum_to_one(&mut w, cols);
    }
    let w0_final: Vec<f64> = w[..cols].to_vec();
    let residual = (m * DVector::from_column_slice(&w0_final) - m1).norm();
    Ok(WeightSolution {
        w,
        w0: w0_final,
        min_eig,
        residual,
    })
}

/// Assembles the synthetic-control system at observation i from fitted
/// surfaces: M's column g−2 holds m̂_{g,t}(Xᵢ) − m̂_{N_G+1,t}(Xᵢ) and m₁
/// holds m̂_{1,t}(Xᵢ) − m̂_{N_G+1,t}(Xᵢ), over pre-treatment rows
/// t = 1..𝒯−1. Repeated-cross-section surfaces supply the period-tagged μ̂
/// through the same accessor, so the construction is design-agnostic.
pub fn build_system(surface: &NuisanceSurface, i: usize) -> (DMatrix<f64>, DVector<f64>) {
    let g_total = surface.n_groups;
    let t_pre = surface.n_periods - 1;
    let cols = g_total - 2;
    let m = DMatrix::from_fn(t_pre, cols, |r, c| {
        surface.m(i, c + 2, r + 1) - surface.m(i, g_total, r + 1)
    });
    let m1 = DVector::from_fn(t_pre, |r, _| {
        surface.m(i, 1, r + 1) - surface.m(i, g_total, r + 1)
    });
    (m, m1)
}

/// Covariate-free panel system from full-sample weighted group/period means
/// (one global system rather than per-fold complements, so the closed-form
/// group-mean estimator is reproduced exactly).
///
/// # Errors
/// `SingularLocalDesign` when a group's total sample weight is not positive.
pub fn global_system_panel(
    ds: &PanelDataset,
    sample_weights: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if sample_weights.len() != ds.n() {
        return Err(Error::InvalidConfig(
            "sample weight length does not match dataset size".into(),
        ));
    }
    let g_total = ds.n_groups;
    let t_total = ds.n_periods;
    let mut sums = vec![0.0; g_total * t_total];
    let mut totals = vec![0.0; g_total];
    for ((&wi, &gi), row) in sample_weights.iter().zip(&ds.group).zip(&ds.outcomes) {
        let g = gi - 1;
        totals[g] += wi;
        for t in 0..t_total {
            sums[g * t_total + t] += wi * row[t];
        }
    }
    finish_global_system(&sums, &totals, &ds.group_labels, g_total, t_total)
}

/// Covariate-free repeated-cross-section system from full-sample weighted
/// period-tagged group means μ̂_{g,t} = Σᵢ wᵢ·1{Tᵢ=t}·Yᵢ / Σᵢ wᵢ over group-g
/// rows. See [`global_system_panel`].
///
/// # Errors
/// `SingularLocalDesign` when a group's total sample weight is not positive.
pub fn global_system_rc(
    rc: &RepeatedCrossSection,
    sample_weights: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if sample_weights.len() != rc.n() {
        return Err(Error::InvalidConfig(
            "sample weight length does not match dataset size".into(),
        ));
    }
    let g_total = rc.n_groups;
    let t_total = rc.n_periods;
    let mut sums = vec![0.0; g_total * t_total];
    let mut totals = vec![0.0; g_total];
    for i in 0..rc.n() {
        let wi = sample_weights[i];
        let g = rc.group[i] - 1;
        totals[g] += wi;
        sums[g * t_total + (rc.time[i] - 1)] += wi * rc.y[i];
    }
    finish_global_system(&sums, &totals, &rc.group_labels, g_total, t_total)
}

fn finish_global_system(
    sums: &[f64],
    totals: &[f64],
    labels: &[String],
    g_total: usize,
    t_total: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    for (g, &tw) in totals.iter().enumerate() {
        if !(tw > 0.0) || !tw.is_finite() {
            return Err(Error::SingularLocalDesign {
                context: format!("group '{}' has non-positive total weight", labels[g]),
            });
        }
    }
    let mean = |g: usize, t: usize| sums[(g - 1) * t_total + (t - 1)] / totals[g - 1];
    let t_pre = t_total - 1;
    let cols = g_total - 2;
    let m = DMatrix::from_fn(t_pre, cols, |r, c| {
        mean(c + 2, r + 1) - mean(g_total, r + 1)
    });
    let m1 = DVector::from_fn(t_pre, |r, _| mean(1, r + 1) - mean(g_total, r + 1));
    Ok((m, m1))
}

/// Solves the synthetic-control system at every observation's covariates,
/// sharing solutions across bit-identical systems and recording per-point
/// failures.
///
/// # Errors
/// Structural problems (`Underidentified`, shape mismatches) propagate
/// immediately. Point-level singularities are recorded in `failed`; when
/// more than half of all points fail, the first failure is returned with the
/// aggregate count in its context.
pub fn weight_surface(
    surface: &NuisanceSurface,
    opts: &WeightSolveOptions,
) -> Result<WeightSurface> {
    let n = surface.n;
    let n_controls = surface.n_groups - 1;
    let mut cache: HashMap<Vec<u64>, std::result::Result<u32, ()>> = HashMap::new();
    let mut solutions: Vec<WeightSolution> = Vec::new();
    let mut sol_of: Vec<Option<u32>> = vec![None; n];
    let mut failed: Vec<usize> = Vec::new();
    let mut first_failure: Option<Error> = None;
    for (i, slot) in sol_of.iter_mut().enumerate() {
        let (m, m1) = build_system(surface, i);
        let key: Vec<u64> = m.iter().chain(m1.iter()).map(|v| v.to_bits()).collect();
        let tag = match cache.entry(key) {
            Entry::Occupied(e) => *e.get(),
            Entry::Vacant(e) => *e.insert(match solve_weights(&m, &m1, opts) {
                Ok(sol) => {
                    solutions.push(sol);
                    Ok((solutions.len() - 1) as u32)
                }
                Err(err @ (Error::Underidentified { .. } | Error::InvalidConfig(_))) => {
                    return Err(err)
                }
                Err(err) => {
                    if first_failure.is_none() {
                        first_failure = Some(err);
                    }
                    Err(())
                }
            }),
        };
        match tag {
            Ok(idx) => *slot = Some(idx),
            Err(()) => failed.push(i),
        }
    }
    if failed.len() * 2 > n {
        let err = first_failure.unwrap_or(Error::SingularSystem {
            min_eig: 0.0,
            floor: 0.0,
            context: String::new(),
        });
        return Err(err.with_context(&format!(
            "weight solve failed at {} of {} covariate points",
            failed.len(),
            n
        )));
    }
    let mut w = vec![f64::NAN; n * n_controls];
    for i in 0..n {
        if let Some(idx) = sol_of[i] {
            let sol = &solutions[idx as usize];
            w[i * n_controls..(i + 1) * n_controls].copy_from_slice(&sol.w);
        }
    }
    Ok(WeightSurface {
        n,
        n_controls,
        w,
        sol_of,
        solutions,
        failed,
        global: false,
    })
}
