//! Inference for the ATT estimate: a multiplier bootstrap with
//! percentile-of-differences confidence intervals, and plug-in
//! influence-function variance diagnostics.
//!
//! The bootstrap perturbs every empirical average — nuisance regressions,
//! weight systems, the treated share, and the moment average — by iid
//! mean-1/variance-1 multipliers, holding folds and bandwidths fixed. Each
//! replication's multipliers come from an RNG stream derived from
//! (seed, replication index), so results are independent of execution order
//! and thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PanelDataset;
use crate::estimator::{
    AttEstimate, BootstrapTarget, Design, EstimateConfig, Evaluation, FittedPanel, FittedRc,
    ResolvedWeights,
};
use crate::weights::build_system;
use crate::{Error, Result};

/// Multiplier law for the bootstrap weights; every built-in has mean 1 and
/// variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierSpec {
    /// Exponential(1).
    Exponential,
    /// 1 + the two-point Mammen law: support {(3−√5)/2, (3+√5)/2}.
    Mammen,
    /// 1 + a standard normal (weights can be negative).
    NormalShift,
    /// Degenerate W ≡ 1: every replication reproduces the point estimate
    /// bit-for-bit. A reproducibility probe, not an inference method.
    Unit,
}

/// Draws `n` iid multipliers of the given law from `rng`.
pub fn draw_multipliers(n: usize, spec: MultiplierSpec, rng: &mut impl Rng) -> Vec<f64> {
    match spec {
        MultiplierSpec::Exponential => (0..n).map(|_| Exp1.sample(rng)).collect(),
        MultiplierSpec::Mammen => {
            let root5 = 5.0f64.sqrt();
            let lo = (3.0 - root5) / 2.0;
            let hi = (3.0 + root5) / 2.0;
            let p_lo = (root5 + 1.0) / (2.0 * root5);
            (0..n)
                .map(|_| if rng.gen::<f64>() < p_lo { lo } else { hi })
                .collect()
        }
        MultiplierSpec::NormalShift => (0..n)
            .map(|_| 1.0 + Distribution::<f64>::sample(&StandardNormal, rng))
            .collect(),
        MultiplierSpec::Unit => vec![1.0; n],
    }
}

/// Bootstrap distribution of θ̂* − θ̂ with a percentile-of-differences
/// confidence interval.
#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    /// Successful draws θ̂*_r − θ̂ in replication order (failed replications,
    /// counted in `failures`, leave no entry).
    #[serde(skip_serializing)]
    pub draws: Vec<f64>,
    /// Requested replication count B.
    pub b: usize,
    pub alpha: f64,
    /// [θ̂ − q_{1−α/2}(draws), θ̂ − q_{α/2}(draws)].
    pub ci: (f64, f64),
    pub seed: u64,
    /// Replications that failed even after one retry.
    pub failures: usize,
}

/// Empirical quantile with linear interpolation between order statistics
/// (h = (m−1)p). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let h = (m - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= m {
        return sorted[m - 1];
    }
    sorted[lo] + (h - h.floor()) * (sorted[lo + 1] - sorted[lo])
}

/// Runs the multiplier bootstrap over any refittable target.
///
/// Each replication r draws multipliers from stream r+1 of a ChaCha RNG
/// seeded by `seed` and refits the target under them; a failed replication
/// is retried once on stream B+1+r with fresh multipliers, then counted.
/// Callers should use B ≥ 50 for meaningful quantiles.
///
/// # Errors
/// `InvalidConfig` for B = 0 or α ∉ (0,1); `BootstrapFailures` when more
/// than 5% of replications fail even after retries.
pub fn bootstrap_target<T: BootstrapTarget + ?Sized>(
    target: &T,
    theta_hat: f64,
    b: usize,
    alpha: f64,
    spec: MultiplierSpec,
    seed: u64,
) -> Result<BootstrapResult> {
    if b == 0 {
        return Err(Error::InvalidConfig(
            "bootstrap needs at least one replication".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level alpha must lie in (0,1), got {alpha}"
        )));
    }
    let n = target.n_units();
    let replicate_on_stream = |stream: u64| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let w = draw_multipliers(n, spec, &mut rng);
        target.replicate(&w)
    };
    let outcomes: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            replicate_on_stream(r as u64 + 1)
                .or_else(|_| replicate_on_stream((b + 1 + r) as u64))
                .ok()
                .map(|theta_star| theta_star - theta_hat)
        })
        .collect();
    let failures = outcomes.iter().filter(|d| d.is_none()).count();
    if failures * 20 > b {
        return Err(Error::BootstrapFailures { failures, total: b });
    }
    let draws: Vec<f64> = outcomes.into_iter().flatten().collect();
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    let ci = (
        theta_hat - quantile(&sorted, 1.0 - alpha / 2.0),
        theta_hat - quantile(&sorted, alpha / 2.0),
    );
    Ok(BootstrapResult {
        draws,
        b,
        alpha,
        ci,
        seed,
        failures,
    })
}

/// Point estimate plus bootstrap confidence interval for a panel.
///
/// # Errors
/// Estimation errors from the panel pipeline and the bootstrap errors of
/// [`bootstrap_target`].
pub fn bootstrap_att(
    ds: &PanelDataset,
    cfg: &EstimateConfig,
    b: usize,
    alpha: f64,
    spec: MultiplierSpec,
    seed: u64,
) -> Result<(AttEstimate, BootstrapResult)> {
    let fitted = FittedPanel::new(ds, cfg)?;
    let eval = fitted.evaluate(&vec![1.0; ds.n()])?;
    let est = fitted.summarize(&eval, Design::Panel);
    let boot = bootstrap_target(&fitted, est.theta_hat, b, alpha, spec, seed)?;
    Ok((est, boot))
}

/// Point estimate plus bootstrap confidence interval for repeated
/// cross-sections.
///
/// # Errors
/// As for [`bootstrap_att`].
pub fn bootstrap_rc(
    rc: &crate::data::RepeatedCrossSection,
    cfg: &EstimateConfig,
    b: usize,
    alpha: f64,
    spec: MultiplierSpec,
    seed: u64,
) -> Result<(AttEstimate, BootstrapResult)> {
    let fitted = FittedRc::new(rc, cfg)?;
    let eval = fitted.evaluate(&vec![1.0; rc.n()])?;
    let est = fitted.summarize(&eval, Design::RepeatedCrossSection);
    let boot = bootstrap_target(&fitted, est.theta_hat, b, alpha, spec, seed)?;
    Ok((est, boot))
}

/// Per-observation influence values ψ̂_PT with the plug-in variance, both as
/// the direct second moment and as the orthogonal decomposition that
/// separates treated-outcome noise, treated trend deviation, and control
/// noise.
#[derive(Debug, Clone)]
pub struct InfluencePt {
    /// ψ̂ᵢ = φᵢ − θ̂·𝒢₁ᵢ/π̂₁, aligned with the evaluation's kept
    /// observations. Its mean is zero by construction.
    pub psi: Vec<f64>,
    /// mean(ψ̂²).
    pub v_pt: f64,
    /// The decomposed form: (1/π̂₁²)·mean[𝒢₁(ΔY−m̂₁,Δ)² +
    /// 𝒢₁(m̂₁,Δ−m̂_Δ−θ̂)² + Σ_g ŵ_g²𝒢_g r̂₁g²(ΔY−m̂_Δ)²].
    pub v_pt_decomposed: f64,
}

/// Influence diagnostics valid under parallel trends.
pub fn influence_pt(ds: &PanelDataset, eval: &Evaluation) -> InfluencePt {
    let theta = eval.theta;
    let pi1 = eval.pi1;
    let mut psi = Vec::with_capacity(eval.kept.len());
    let mut v_direct = 0.0;
    let mut v_decomp = 0.0;
    for (k, &i) in eval.kept.iter().enumerate() {
        let g1 = if ds.group[i] == 1 { 1.0 } else { 0.0 };
        let value = eval.phi[k] - theta * g1 / pi1;
        v_direct += value * value;
        psi.push(value);

        let resid = ds.delta_y(i) - eval.surface.m_delta(i);
        let g = ds.group[i];
        v_decomp += if g == 1 {
            let own = ds.delta_y(i) - eval.surface.m_delta_group(i, 1);
            let trend = eval.surface.m_delta_group(i, 1) - eval.surface.m_delta(i) - theta;
            own * own + trend * trend
        } else {
            let w = eval.weights.weights(i).expect("kept observation")[g - 2];
            let r = eval.surface.r(i, g);
            w * w * r * r * resid * resid
        };
    }
    let m = psi.len() as f64;
    InfluencePt {
        psi,
        v_pt: v_direct / m,
        v_pt_decomposed: v_decomp / (m * pi1 * pi1),
    }
}

/// Influence adjustments for solved synthetic-control weights, and the total
/// influence ψ̂_SC = ψ̂_PT + ψ̂₁ + ψ̂₂.
#[derive(Debug, Clone)]
pub struct InfluenceSc {
    /// Adjustment for the estimated propensity ratios, per kept observation.
    pub psi1: Vec<f64>,
    /// Adjustment for the estimated weight functions, per kept observation.
    pub psi2: Vec<f64>,
    /// ψ̂_PT + ψ̂₁ + ψ̂₂.
    pub psi_sc: Vec<f64>,
    /// mean(ψ̂_SC²).
    pub v_sc: f64,
}

/// Influence diagnostics valid under the synthetic-control assumption:
/// ψ̂₁ adjusts for ratio estimation, ψ̂₂ for weight estimation via the
/// linearization of the least-squares solve. Requires solved weights.
///
/// `psi_pt` must come from [`influence_pt`] on the same evaluation;
/// `min_eig_floor_rel` is the relative eigenvalue floor below which a
/// per-observation Gram matrix is refused; `ratio_clamp` bounds the
/// reciprocal ratios when reconstructing group probabilities.
///
/// # Errors
/// `InvalidConfig` when the evaluation used fixed (uniform/user) weights;
/// `SingularSystem` when some observation's weight system falls below the
/// eigenvalue floor.
pub fn influence_sc(
    ds: &PanelDataset,
    eval: &Evaluation,
    psi_pt: &[f64],
    min_eig_floor_rel: f64,
    ratio_clamp: f64,
) -> Result<InfluenceSc> {
    let surface = &eval.surface;
    match &eval.weights {
        ResolvedWeights::Surface(_) => {}
        ResolvedWeights::Fixed(_) => {
            return Err(Error::InvalidConfig(
                "influence adjustments for estimated weights require solved weights; \
                 uniform or user weights have no estimation error to adjust for"
                    .into(),
            ))
        }
    }
    let pi1 = eval.pi1;
    let g_total = ds.n_groups;
    let t_pre = ds.n_periods - 1;
    let cols = g_total - 2;
    let mut psi1 = Vec::with_capacity(eval.kept.len());
    let mut psi2 = Vec::with_capacity(eval.kept.len());
    let mut psi_sc = Vec::with_capacity(eval.kept.len());
    let mut v_sc = 0.0;
    for (k, &i) in eval.kept.iter().enumerate() {
        let w_row = eval.weights.weights(i).expect("kept observation");
        let g0 = ds.group[i];
        let p = surface.implied_probabilities(i, ratio_clamp);
        let m_delta = surface.m_delta(i);

        // u(X) stacks p̂₁·(m̂_{g,Δ} − m̂_Δ) over control groups g = 2..=G.
        let u: Vec<f64> = (2..=g_total)
            .map(|g| p[0] * (surface.m_delta_group(i, g) - m_delta))
            .collect();

        // ψ₁: the ratio-estimation adjustment. Only the observation's own
        // group indicator is active inside (𝒢₁ − r̂·𝒢_g).
        let value1 = if g0 == 1 {
            let s: f64 = (2..=g_total)
                .map(|g| w_row[g - 2] * (surface.m_delta_group(i, g) - m_delta))
                .sum();
            -s / pi1
        } else {
            w_row[g0 - 2] * surface.r(i, g0) * (surface.m_delta_group(i, g0) - m_delta) / pi1
        };

        // ψ₂: the weight-estimation adjustment from linearizing
        // ŵ₀ = (M′M)⁻¹M′m̂₁ at this observation's system.
        let (m, m1) = build_system(surface, i);
        let value2 = if cols == 0 {
            // A single control group has a forced weight: no estimation
            // error to adjust for.
            0.0
        } else {
            let svd = nalgebra::SVD::new(m.clone(), true, true);
            let (mut sigma_max, mut sigma_min) = (0.0f64, f64::INFINITY);
            for &s in svd.singular_values.iter() {
                sigma_max = sigma_max.max(s);
                sigma_min = sigma_min.min(s);
            }
            let min_eig = sigma_min * sigma_min;
            let floor = min_eig_floor_rel * sigma_max * sigma_max;
            if !(sigma_max > 0.0) || min_eig < floor {
                return Err(Error::SingularSystem {
                    min_eig,
                    floor,
                    context: format!("influence adjustment at observation {i}"),
                });
            }

            // Per-observation residual matrices: A has the observation's own
            // column (g₀ ∈ 2..G−1), or every column when it sits in the
            // reference group; a₁ is active for the treated and reference
            // groups.
            let mut a = DMatrix::<f64>::zeros(t_pre, cols);
            let mut a1 = DVector::<f64>::zeros(t_pre);
            if g0 == 1 {
                for t in 1..=t_pre {
                    a1[t - 1] = (ds.outcomes[i][t - 1] - surface.m(i, 1, t)) / p[0];
                }
            } else if g0 == g_total {
                for t in 1..=t_pre {
                    let dev = -(ds.outcomes[i][t - 1] - surface.m(i, g_total, t)) / p[g_total - 1];
                    a1[t - 1] = dev;
                    for c in 0..cols {
                        a[(t - 1, c)] = dev;
                    }
                }
            } else {
                for t in 1..=t_pre {
                    a[(t - 1, g0 - 2)] = (ds.outcomes[i][t - 1] - surface.m(i, g0, t)) / p[g0 - 1];
                }
            }

            // P₁ = (M′M)⁻¹M′a₁ and w₀ = (M′M)⁻¹M′m₁ are least-squares
            // solves; P₂, P₃ need (M′M)⁻¹ = VΣ⁻²V′ directly.
            let p1 = svd.solve(&a1, 0.0).expect("svd computed with u and v");
            let w0 = svd.solve(&m1, 0.0).expect("svd computed with u and v");
            let v_t = svd.v_t.as_ref().expect("svd computed with v");
            let gram_inv = |y: &DVector<f64>| -> DVector<f64> {
                let mut z = v_t * y;
                for (j, s) in svd.singular_values.iter().enumerate() {
                    z[j] /= s * s;
                }
                v_t.transpose() * z
            };
            let p2 = gram_inv(&(a.transpose() * &m1));
            let p3 = -gram_inv(&((a.transpose() * &m + m.transpose() * &a) * &w0));
            let p_total = p1 + p2 + p3;
            // u′[P; −1′P]: the last weight moves opposite the free ones.
            let head: f64 = (0..cols).map(|c| u[c] * p_total[c]).sum();
            let tail = u[cols] * -p_total.iter().sum::<f64>();
            -(head + tail) / pi1
        };

        let total = psi_pt[k] + value1 + value2;
        v_sc += total * total;
        psi1.push(value1);
        psi2.push(value2);
        psi_sc.push(total);
    }
    let m = psi_sc.len() as f64;
    Ok(InfluenceSc {
        psi1,
        psi2,
        psi_sc,
        v_sc: v_sc / m,
    })
}

/// Plug-in variance of the estimator that pools all control groups into one,
/// sharing the first two terms with the decomposed parallel-trends variance
/// but weighting control residuals by conditional group shares p̂_g/p̂_{−1}
/// instead of the solved weights. Reported for comparison only.
pub fn pooled_variance(ds: &PanelDataset, eval: &Evaluation, ratio_clamp: f64) -> f64 {
    let theta = eval.theta;
    let pi1 = eval.pi1;
    let mut acc = 0.0;
    for &i in &eval.kept {
        let g = ds.group[i];
        acc += if g == 1 {
            let own = ds.delta_y(i) - eval.surface.m_delta_group(i, 1);
            let trend = eval.surface.m_delta_group(i, 1) - eval.surface.m_delta(i) - theta;
            own * own + trend * trend
        } else {
            let p = eval.surface.implied_probabilities(i, ratio_clamp);
            let p_ctrl: f64 = p[1..].iter().sum();
            let share = p[g - 1] / p_ctrl;
            let r = eval.surface.r(i, g);
            let resid = ds.delta_y(i) - eval.surface.m_delta(i);
            share * share * r * r * resid * resid
        };
    }
    acc / (eval.kept.len() as f64 * pi1 * pi1)
}

/// All influence-based variance diagnostics for one panel evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceDiagnostics {
    #[serde(skip_serializing)]
    pub psi_pt: Vec<f64>,
    #[serde(skip_serializing)]
    pub psi1: Option<Vec<f64>>,
    #[serde(skip_serializing)]
    pub psi2: Option<Vec<f64>>,
    pub v_pt: f64,
    pub v_pt_decomposed: f64,
    /// Present only for solved weights.
    pub v_sc: Option<f64>,
    pub v_pool: f64,
}

/// Computes ψ̂_PT, the synthetic-control adjustments when weights were
/// solved, and the pooled-control variance, in one pass.
///
/// # Errors
/// The singular-system errors of [`influence_sc`] (fixed-weight evaluations
/// simply omit the SC block).
pub fn influence_diagnostics(
    ds: &PanelDataset,
    eval: &Evaluation,
    min_eig_floor_rel: f64,
    ratio_clamp: f64,
) -> Result<InfluenceDiagnostics> {
    let pt = influence_pt(ds, eval);
    let sc = match &eval.weights {
        ResolvedWeights::Surface(_) => Some(influence_sc(
            ds,
            eval,
            &pt.psi,
            min_eig_floor_rel,
            ratio_clamp,
        )?),
        ResolvedWeights::Fixed(_) => None,
    };
    let v_pool = pooled_variance(ds, eval, ratio_clamp);
    Ok(InfluenceDiagnostics {
        psi_pt: pt.psi,
        psi1: sc.as_ref().map(|s| s.psi1.clone()),
        psi2: sc.as_ref().map(|s| s.psi2.clone()),
        v_pt: pt.v_pt,
        v_pt_decomposed: pt.v_pt_decomposed,
        v_sc: sc.map(|s| s.v_sc),
        v_pool,
    })
}
