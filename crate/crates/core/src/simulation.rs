//! Synthetic data-generating processes with known truth, and a Monte Carlo
//! harness reporting bias, SD, coverage, and CI length.
//!
//! Three designs share one calibration:
//! * **DGP1** — factor model `Y_t(0) = λ(G,X)'F_t + α_G + δ_t + ε_t` with
//!   group-specific loadings; the treated group's loading and intercept are
//!   the planted weighted averages of the controls', so a synthetic-control
//!   representation holds by construction while trends differ across groups.
//! * **DGP2** — the treated group follows its own per-period curves while
//!   all groups share one final-period trend shift `h(x)`: parallel trends
//!   holds, but no control combination can reproduce the treated pre-period
//!   curves (their group means are flat in t, so the weight system is
//!   singular).
//! * **DGP3** — as DGP1 but with one loading function shared by every
//!   group, so both assumptions hold.
//!
//! The treatment effect is `1 + scale·sin(2πX)` at the final period, with
//! `scale` matching the population SD of the untreated final-period trend —
//! heterogeneous, and averaging to 1 only under a uniform treated covariate
//! distribution.

use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateProfile, PanelDataset, RepeatedCrossSection};
use crate::estimator::{estimate_att_panel, EstimateConfig, WeightMode};
use crate::inference::{bootstrap_att, quantile, MultiplierSpec};
use crate::kernel_regression::{Bandwidth, LocalPolyConfig};
use crate::{mix_seed, Error, Result};

/// Number of points in the discrete-uniform covariate grid on [0,1].
pub const GRID_POINTS: usize = 101;

/// The covariate grid: k/(GRID_POINTS−1) for k = 0..GRID_POINTS.
pub fn covariate_grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|k| k as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

/// A quadratic a₀ + a₁x + a₂x², the functional form used for every
/// calibrated curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Quadratic {
    pub fn eval(&self, x: f64) -> f64 {
        self.c0 + x * (self.c1 + x * self.c2)
    }

    fn is_finite(&self) -> bool {
        self.c0.is_finite() && self.c1.is_finite() && self.c2.is_finite()
    }
}

/// Which structural design generates the untreated potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    Dgp1,
    Dgp2,
    Dgp3,
}

/// All constants a data-generating process needs: factor paths, loading
/// curves, group/time effects, noise SDs, the group-assignment logit, and
/// the DGP2 trend curves.
///
/// Group indices are 1-based with group 1 treated; control-group arrays are
/// indexed by g−2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Number of control groups N_G (total groups = N_G + 1).
    pub n_control_groups: usize,
    pub n_periods: usize,
    /// factors[t−1][k]: factor k's value at period t.
    pub factors: Vec<Vec<f64>>,
    /// loadings[g−2][k]: control group g's loading curve on factor k.
    pub loadings: Vec<Vec<Quadratic>>,
    /// Loading curves shared by every group under DGP3.
    pub loadings_common: Vec<Quadratic>,
    /// alphas[g−1]: group fixed effects (the treated entry is ignored by
    /// DGP1/DGP3, which construct it from the planted weights).
    pub alphas: Vec<f64>,
    /// deltas[t−1]: time fixed effects.
    pub deltas: Vec<f64>,
    /// sigmas[t−1]: per-period noise SDs.
    pub sigmas: Vec<f64>,
    /// Multinomial-logit intercepts for G|X (group 1 normalized to zero).
    pub logit_intercepts: Vec<f64>,
    /// Multinomial-logit slopes in x (group 1 normalized to zero).
    pub logit_slopes: Vec<f64>,
    /// mu_treated[t−1]: the treated group's pre-period curves under DGP2.
    pub mu_treated: Vec<Quadratic>,
    /// The final-period trend shift h(x) shared by all groups under DGP2.
    pub trend: Quadratic,
}

impl Calibration {
    pub fn n_groups(&self) -> usize {
        self.n_control_groups + 1
    }

    pub fn k_factors(&self) -> usize {
        self.loadings_common.len()
    }

    /// Checks dimensions, finiteness, and that the logit keeps every group
    /// probability at least 2% everywhere on the grid.
    ///
    /// # Errors
    /// `InvalidConfig` describing the first violated requirement.
    pub fn validate(&self) -> Result<()> {
        let g_total = self.n_groups();
        let t_total = self.n_periods;
        let k = self.k_factors();
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_control_groups < 1 || t_total < 2 {
            return fail("calibration needs at least one control group and two periods".into());
        }
        if self.factors.len() != t_total || self.factors.iter().any(|f| f.len() != k) {
            return fail(format!("factors must be {t_total} periods of {k} values"));
        }
        if self.loadings.len() != self.n_control_groups
            || self.loadings.iter().any(|l| l.len() != k)
        {
            return fail(format!(
                "loadings must cover {} control groups with {k} curves each",
                self.n_control_groups
            ));
        }
        if self.alphas.len() != g_total
            || self.logit_intercepts.len() != g_total
            || self.logit_slopes.len() != g_total
        {
            return fail(format!("per-group arrays must have {g_total} entries"));
        }
        if self.deltas.len() != t_total || self.sigmas.len() != t_total {
            return fail(format!("per-period arrays must have {t_total} entries"));
        }
        if self.mu_treated.len() != t_total - 1 {
            return fail(format!(
                "treated pre-period curves must have {} entries",
                t_total - 1
            ));
        }
        let curves_finite = self
            .loadings
            .iter()
            .flatten()
            .chain(&self.loadings_common)
            .chain(&self.mu_treated)
            .chain(std::iter::once(&self.trend))
            .all(Quadratic::is_finite);
        let scalars_finite = self
            .factors
            .iter()
            .flatten()
            .chain(&self.alphas)
            .chain(&self.deltas)
            .chain(&self.sigmas)
            .chain(&self.logit_intercepts)
            .chain(&self.logit_slopes)
            .all(|v| v.is_finite());
        if !curves_finite || !scalars_finite {
            return fail("calibration contains a non-finite value".into());
        }
        if self.sigmas.iter().any(|&s| s < 0.0) {
            return fail("noise SDs must be nonnegative".into());
        }
        for x in covariate_grid() {
            if let Some(p) = self
                .group_probabilities(x)
                .into_iter()
                .find(|&p| !(p >= 0.02))
            {
                return fail(format!(
                    "group probability {p:.4} at x={x} is below the 0.02 floor"
                ));
            }
        }
        Ok(())
    }

    /// P(G = g | X = x) for g = 1..=n_groups from the multinomial logit.
    pub fn group_probabilities(&self, x: f64) -> Vec<f64> {
        let scores: Vec<f64> = self
            .logit_intercepts
            .iter()
            .zip(&self.logit_slopes)
            .map(|(a, b)| (a + b * x).exp())
            .collect();
        let total: f64 = scores.iter().sum();
        scores.into_iter().map(|s| s / total).collect()
    }

    /// The planted control weights at x, for g = 2..=n_groups: a softmax
    /// tilt plus a floor, normalized to sum to one so the estimator's
    /// constrained solve can recover them exactly. Each weight is at least
    /// 0.2/(0.2·N_G + 0.8).
    pub fn planted_weights(&self, x: f64) -> Vec<f64> {
        let n_g = self.n_control_groups as f64;
        let scores: Vec<f64> = (2..=self.n_groups())
            .map(|g| ((g as f64 - n_g - 1.0) * x).exp())
            .collect();
        let total: f64 = scores.iter().sum();
        let norm = 0.2 * n_g + 0.8;
        scores
            .into_iter()
            .map(|s| (0.2 + 0.8 * s / total) / norm)
            .collect()
    }

    /// Control group g's loading vector at x (group-specific under DGP1,
    /// shared under DGP3).
    fn loading(&self, kind: DgpKind, g: usize, x: f64) -> Vec<f64> {
        let curves = match kind {
            DgpKind::Dgp1 => &self.loadings[g - 2],
            DgpKind::Dgp3 => &self.loadings_common,
            DgpKind::Dgp2 => unreachable!("DGP2 has no factor loadings"),
        };
        curves.iter().map(|q| q.eval(x)).collect()
    }

    /// E[Y_t(0) | G = g, X = x]: the untreated conditional mean.
    pub fn mean(&self, kind: DgpKind, g: usize, t: usize, x: f64) -> f64 {
        let delta = self.deltas[t - 1];
        match kind {
            DgpKind::Dgp1 | DgpKind::Dgp3 => {
                let factor_part = |g: usize| -> f64 {
                    self.loading(kind, g, x)
                        .iter()
                        .zip(&self.factors[t - 1])
                        .map(|(l, f)| l * f)
                        .sum::<f64>()
                        + self.alphas[g - 1]
                };
                if g == 1 {
                    // The treated mean is the planted weighted average of
                    // the control means, making the synthetic-control
                    // representation an identity.
                    self.planted_weights(x)
                        .iter()
                        .zip(2..=self.n_groups())
                        .map(|(w, cg)| w * factor_part(cg))
                        .sum::<f64>()
                        + delta
                } else {
                    factor_part(g) + delta
                }
            }
            DgpKind::Dgp2 => {
                let pre = |t: usize| -> f64 {
                    if g == 1 {
                        self.mu_treated[t - 1].eval(x)
                    } else {
                        0.0
                    }
                };
                let mu = if t < self.n_periods {
                    pre(t)
                } else {
                    pre(t - 1) + self.trend.eval(x)
                };
                mu + self.alphas[g - 1] + delta
            }
        }
    }
}

/// Shifted Legendre polynomial values P₁(2u−1)..P_max(2u−1) by the
/// three-term recurrence.
fn legendre_values(u: f64, max_degree: usize) -> Vec<f64> {
    let z = 2.0 * u - 1.0;
    let mut values = Vec::with_capacity(max_degree + 1);
    values.push(1.0);
    if max_degree >= 1 {
        values.push(z);
    }
    for n in 1..max_degree {
        let next = ((2 * n + 1) as f64 * z * values[n] - n as f64 * values[n - 1]) / (n + 1) as f64;
        values.push(next);
    }
    values
}

/// Builds a deterministic synthetic calibration: polynomial factor paths
/// with per-control boosted loadings (keeping the planted weight system
/// well-conditioned at every grid point), spread-out group effects, bounded
/// logit coefficients (so every group probability stays above 2%), and
/// moderate per-period noise.
pub fn surrogate_calibration(seed: u64) -> Calibration {
    surrogate_calibration_sized(seed, 6, 6)
}

/// [`surrogate_calibration`] for arbitrary dimensions. The factor count is
/// n_control_groups − 2 (at least 1), which together with the group
/// intercepts makes the planted weight system exactly identified when the
/// number of periods equals the number of control groups.
pub fn surrogate_calibration_sized(
    seed: u64,
    n_control_groups: usize,
    n_periods: usize,
) -> Calibration {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xCA11_B8A7, 0));
    let g_total = n_control_groups + 1;
    let k = n_control_groups.saturating_sub(2).max(1);

    // Over the pre-treatment span, factor k follows a shifted Legendre
    // polynomial of degree k+1: mutually near-orthogonal paths of distinct
    // degree, so the pre-period factor matrix (with intercept) stays far
    // from singular. The final-period step is redrawn at a moderate size —
    // every factor still moves, so group trends into the treatment period
    // genuinely diverge, but the dispersion of the untreated final-period
    // change (which calibrates the planted effect amplitude) stays tame.
    let mut factors: Vec<Vec<f64>> = (1..=n_periods)
        .map(|t| {
            let u = (t - 1) as f64 / (n_periods - 1) as f64;
            let mut p = legendre_values(u, k);
            p.drain(..1);
            p.iter_mut()
                .enumerate()
                .for_each(|(j, v)| *v *= 3.0 / (1.0 + 0.25 * j as f64));
            p
        })
        .collect();
    if n_periods >= 2 {
        let prev = factors[n_periods - 2].clone();
        let last = factors.last_mut().expect("n_periods >= 2");
        for (j, v) in last.iter_mut().enumerate() {
            let mag = rng.gen_range(0.04..0.12);
            *v = prev[j] + if j % 2 == 0 { mag } else { -mag };
        }
    }

    // The weight system's columns are pre-period level curves of each free
    // control minus the reference, so each column is a factor combination
    // plus a constant (its group-effect gap). The factor paths exclude the
    // constant; giving the first k free controls a large boost on their own
    // factor and identifying the last one by a large group-effect offset
    // hands every column its own near-orthogonal direction (k factor paths
    // plus the constant). The reference group (whose loading is subtracted
    // from every column) has exactly zero loadings. The boosts dominate the
    // jitter and slope ranges below, so the system keeps a wide margin from
    // singularity over the whole covariate range; curvatures are kept an
    // order smaller than slopes so local-linear nuisance fits carry little
    // smoothing bias into the solved weights.
    let quad = |c0: f64, slope: f64, curve: f64, rng: &mut ChaCha8Rng| Quadratic {
        c0: c0 + rng.gen_range(-0.2..0.2),
        c1: rng.gen_range(-slope..slope),
        c2: rng.gen_range(-curve..curve),
    };
    let zero = Quadratic {
        c0: 0.0,
        c1: 0.0,
        c2: 0.0,
    };
    const BOOST: f64 = 5.0;
    let loadings: Vec<Vec<Quadratic>> = (2..=g_total)
        .map(|g| {
            (0..k)
                .map(|j| {
                    if g == g_total {
                        zero
                    } else {
                        let boost = if g + 1 < g_total && (g - 2) % k == j {
                            BOOST
                        } else {
                            0.0
                        };
                        quad(boost, 0.3, 0.04, &mut rng)
                    }
                })
                .collect()
        })
        .collect();
    let loadings_common: Vec<Quadratic> = (0..k).map(|_| quad(1.0, 0.5, 0.1, &mut rng)).collect();

    // Group effects spread mildly, except the large offset that tags the
    // free control group without a factor boost (the constant column
    // direction).
    let alphas: Vec<f64> = (1..=g_total)
        .map(|g| {
            let tag = if g_total > 2 && g == g_total - 1 {
                4.0
            } else {
                0.0
            };
            1.0 + 0.15 * (g - 1) as f64 + tag + rng.gen_range(-0.1..0.1)
        })
        .collect();
    let deltas: Vec<f64> = (0..n_periods).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sigmas: Vec<f64> = (0..n_periods).map(|_| rng.gen_range(0.3..0.45)).collect();

    // |a| ≤ 0.2 and |b| ≤ 0.25 bound every logit score gap by 0.9, keeping
    // each group's probability within roughly [0.6, 1.6]× uniform — far
    // above the 2% floor, and dense enough everywhere for stable local
    // fits of every group's surface.
    let mut logit_intercepts = vec![0.0];
    let mut logit_slopes = vec![0.0];
    for _ in 2..=g_total {
        logit_intercepts.push(rng.gen_range(-0.2..0.2));
        logit_slopes.push(rng.gen_range(-0.25..0.25));
    }

    let mu_treated: Vec<Quadratic> = (1..n_periods)
        .map(|_| quad(0.0, 1.0, 0.5, &mut rng))
        .collect();
    let trend = quad(0.0, 1.0, 0.5, &mut rng);

    Calibration {
        n_control_groups,
        n_periods,
        factors,
        loadings,
        loadings_common,
        alphas,
        deltas,
        sigmas,
        logit_intercepts,
        logit_slopes,
        mu_treated,
        trend,
    }
}

/// Where a simulation gets its calibration constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CalibrationSource {
    /// Deterministic synthetic constants from [`surrogate_calibration`].
    Surrogate { seed: u64 },
    /// A JSON file holding a [`Calibration`].
    File { path: PathBuf },
    /// An in-memory calibration.
    Inline { calibration: Box<Calibration> },
}

impl CalibrationSource {
    /// Produces and validates the calibration (sized to the spec's
    /// dimensions for the surrogate).
    ///
    /// # Errors
    /// IO/parse errors for files, and validation failures.
    pub fn resolve(&self, n_control_groups: usize, n_periods: usize) -> Result<Calibration> {
        let cal = match self {
            CalibrationSource::Surrogate { seed } => {
                surrogate_calibration_sized(*seed, n_control_groups, n_periods)
            }
            CalibrationSource::File { path } => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::InvalidData(format!("calibration file {}: {e}", path.display()))
                })?
            }
            CalibrationSource::Inline { calibration } => (**calibration).clone(),
        };
        cal.validate()?;
        if cal.n_control_groups != n_control_groups || cal.n_periods != n_periods {
            return Err(Error::InvalidConfig(format!(
                "calibration is sized for {} control groups x {} periods, \
                 but the spec asks for {} x {}",
                cal.n_control_groups, cal.n_periods, n_control_groups, n_periods
            )));
        }
        Ok(cal)
    }
}

/// Full description of a simulated dataset draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub kind: DgpKind,
    /// Units per draw.
    pub n: usize,
    pub n_periods: usize,
    pub n_control_groups: usize,
    pub calibration: CalibrationSource,
    /// Scales the whole treatment effect (0 ⇒ no effect at all).
    pub effect_scale: f64,
    /// Scales every noise SD (0 ⇒ outcomes equal their conditional means).
    pub noise_scale: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            kind: DgpKind::Dgp3,
            n: 1000,
            n_periods: 6,
            n_control_groups: 6,
            calibration: CalibrationSource::Surrogate { seed: 0 },
            effect_scale: 1.0,
            noise_scale: 1.0,
        }
    }
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize) -> Self {
        DgpSpec {
            kind,
            n,
            ..DgpSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("need at least one unit".into()));
        }
        if self.kind != DgpKind::Dgp2 && self.n_periods < self.n_control_groups {
            return Err(Error::InvalidConfig(format!(
                "factor designs need at least as many periods as control groups \
                 for weight identifiability ({} < {})",
                self.n_periods, self.n_control_groups
            )));
        }
        if !(self.effect_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig(
                "effect scale must be finite and noise scale nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything true about a generated dataset: the population effect target,
/// its sample counterpart, and the analytic surfaces on the covariate grid.
#[derive(Debug, Clone, Serialize)]
pub struct DgpTruth {
    /// E[effect | G = 1] over the population covariate distribution: the
    /// target coverage is evaluated against.
    pub att_population: f64,
    /// Mean effect over this draw's realized treated units (NaN if none).
    pub att_sample: f64,
    /// The calibrated ratio sd(ΔY_T(0)) / sd(sin(2πX)).
    pub sd_ratio: f64,
    pub grid: Vec<f64>,
    /// group_probabilities[k][g−1] = P(G = g | X = grid[k]).
    pub group_probabilities: Vec<Vec<f64>>,
    /// planted_weights[k][g−2]: the control weights at grid[k].
    pub planted_weights: Vec<Vec<f64>>,
    /// means[k][g−1][t−1] = E[Y_t(0) | g, grid[k]].
    pub means: Vec<Vec<Vec<f64>>>,
}

/// sd(ΔY_T(0)) / sd(sin(2πX)) under the population distribution: trend
/// dispersion across (G,X) cells plus the two final-period noise variances,
/// over the sinusoid's dispersion on the uniform grid.
pub fn effect_sd_ratio(cal: &Calibration, kind: DgpKind, noise_scale: f64) -> f64 {
    let t_total = cal.n_periods;
    let grid = covariate_grid();
    let (mut mass, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for &x in &grid {
        let probs = cal.group_probabilities(x);
        for g in 1..=cal.n_groups() {
            let d = cal.mean(kind, g, t_total, x) - cal.mean(kind, g, t_total - 1, x);
            let p = probs[g - 1] / grid.len() as f64;
            mass += p;
            m1 += p * d;
            m2 += p * d * d;
        }
    }
    let mean = m1 / mass;
    let noise = noise_scale
        * noise_scale
        * (cal.sigmas[t_total - 1] * cal.sigmas[t_total - 1]
            + cal.sigmas[t_total - 2] * cal.sigmas[t_total - 2]);
    let var_delta = (m2 / mass - mean * mean).max(0.0) + 2.0 * noise / 2.0;

    let sines: Vec<f64> = grid
        .iter()
        .map(|&x| (2.0 * std::f64::consts::PI * x).sin())
        .collect();
    let s_mean = sines.iter().sum::<f64>() / sines.len() as f64;
    let s_var = sines
        .iter()
        .map(|s| (s - s_mean) * (s - s_mean))
        .sum::<f64>()
        / sines.len() as f64;
    (var_delta / s_var).sqrt()
}

/// The heterogeneous treatment effect at covariate value x.
fn effect_at(x: f64, effect_scale: f64, sd_ratio: f64) -> f64 {
    effect_scale * (1.0 + sd_ratio * (2.0 * std::f64::consts::PI * x).sin())
}

/// The population ATT: the effect averaged over the treated group's
/// covariate distribution (uniform grid reweighted by P(G=1|X)).
pub fn population_att(
    cal: &Calibration,
    kind: DgpKind,
    effect_scale: f64,
    noise_scale: f64,
) -> f64 {
    let ratio = effect_sd_ratio(cal, kind, noise_scale);
    let (mut mass, mut total) = (0.0, 0.0);
    for x in covariate_grid() {
        let p1 = cal.group_probabilities(x)[0];
        mass += p1;
        total += p1 * effect_at(x, effect_scale, ratio);
    }
    total / mass
}

/// Draws one dataset from the spec: X uniform on the grid, G|X multinomial
/// logit, untreated outcomes from the structural equation plus independent
/// per-period normal noise, and the treated effect added at the final
/// period. Returns the panel plus the analytic truth.
///
/// # Errors
/// Spec/calibration validation failures, or dataset assembly errors (for
/// tiny n a group can come up empty).
pub fn generate_dgp(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<(PanelDataset, DgpTruth)> {
    spec.validate()?;
    let cal = spec
        .calibration
        .resolve(spec.n_control_groups, spec.n_periods)?;
    generate_with(&cal, spec, rng)
}

/// [`generate_dgp`] with an already-resolved calibration.
pub fn generate_with(
    cal: &Calibration,
    spec: &DgpSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(PanelDataset, DgpTruth)> {
    let grid = covariate_grid();
    let g_total = cal.n_groups();
    let t_total = cal.n_periods;
    let sd_ratio = effect_sd_ratio(cal, spec.kind, spec.noise_scale);

    let mut unit_ids = Vec::with_capacity(spec.n);
    let mut group = Vec::with_capacity(spec.n);
    let mut covariates = Vec::with_capacity(spec.n);
    let mut outcomes = Vec::with_capacity(spec.n);
    let mut effect_sum = 0.0;
    let mut treated_count = 0usize;
    for i in 0..spec.n {
        let x = grid[rng.gen_range(0..grid.len())];
        let probs = cal.group_probabilities(x);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut g = g_total;
        for (gi, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                g = gi + 1;
                break;
            }
        }
        let mut y: Vec<f64> = (1..=t_total)
            .map(|t| {
                let noise: f64 = Distribution::<f64>::sample(&StandardNormal, rng)
                    * cal.sigmas[t - 1]
                    * spec.noise_scale;
                cal.mean(spec.kind, g, t, x) + noise
            })
            .collect();
        if g == 1 {
            let tau = effect_at(x, spec.effect_scale, sd_ratio);
            y[t_total - 1] += tau;
            effect_sum += tau;
            treated_count += 1;
        }
        unit_ids.push(format!("u{i}"));
        group.push(g);
        covariates.push(CovariateProfile {
            continuous: vec![x],
            discrete: vec![],
        });
        outcomes.push(y);
    }

    let ds = PanelDataset::from_parts(
        unit_ids,
        group,
        covariates,
        outcomes,
        (1..=g_total).map(|g| format!("G{g}")).collect(),
        (1..=t_total as i64).collect(),
        vec!["x".into()],
        vec![],
        vec![],
    )?;
    let truth = DgpTruth {
        att_population: population_att(cal, spec.kind, spec.effect_scale, spec.noise_scale),
        att_sample: if treated_count > 0 {
            effect_sum / treated_count as f64
        } else {
            f64::NAN
        },
        sd_ratio,
        group_probabilities: grid.iter().map(|&x| cal.group_probabilities(x)).collect(),
        planted_weights: grid.iter().map(|&x| cal.planted_weights(x)).collect(),
        means: grid
            .iter()
            .map(|&x| {
                (1..=g_total)
                    .map(|g| {
                        (1..=t_total)
                            .map(|t| cal.mean(spec.kind, g, t, x))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        grid,
    };
    Ok((ds, truth))
}

/// Generates a repeated cross-section by period-tagging: each row draws
/// (X, G) as in the panel design, a period T uniform over 1..=𝒯
/// independently of everything else, and a single outcome Y_T from the same
/// structural equation (treated rows tagged at the final period receive the
/// effect). Uniform independent tagging makes the period shares λ_t = 1/𝒯
/// free of (X, G), so the time-invariance identification holds by
/// construction and the RC estimand equals the panel ATT.
///
/// # Errors
/// `InvalidConfig` on an invalid spec or calibration mismatch.
pub fn generate_dgp_rc(
    spec: &DgpSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(RepeatedCrossSection, DgpTruth)> {
    spec.validate()?;
    let cal = spec
        .calibration
        .resolve(spec.n_control_groups, spec.n_periods)?;
    let grid = covariate_grid();
    let g_total = cal.n_groups();
    let t_total = cal.n_periods;
    let sd_ratio = effect_sd_ratio(&cal, spec.kind, spec.noise_scale);

    let mut y = Vec::with_capacity(spec.n);
    let mut group = Vec::with_capacity(spec.n);
    let mut time = Vec::with_capacity(spec.n);
    let mut covariates = Vec::with_capacity(spec.n);
    let mut effect_sum = 0.0;
    let mut treated_count = 0usize;
    for _ in 0..spec.n {
        let x = grid[rng.gen_range(0..grid.len())];
        let probs = cal.group_probabilities(x);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut g = g_total;
        for (gi, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                g = gi + 1;
                break;
            }
        }
        let t = rng.gen_range(1..=t_total);
        let noise: f64 = Distribution::<f64>::sample(&StandardNormal, rng)
            * cal.sigmas[t - 1]
            * spec.noise_scale;
        let mut value = cal.mean(spec.kind, g, t, x) + noise;
        if g == 1 {
            let tau = effect_at(x, spec.effect_scale, sd_ratio);
            if t == t_total {
                value += tau;
            }
            effect_sum += tau;
            treated_count += 1;
        }
        y.push(value);
        group.push(g);
        time.push(t);
        covariates.push(CovariateProfile {
            continuous: vec![x],
            discrete: vec![],
        });
    }

    let rc = RepeatedCrossSection::from_parts(
        y,
        group,
        time,
        covariates,
        (1..=g_total).map(|g| format!("G{g}")).collect(),
        (1..=t_total as i64).collect(),
        vec!["x".into()],
        vec![],
        vec![],
    )?;
    let truth = DgpTruth {
        att_population: population_att(&cal, spec.kind, spec.effect_scale, spec.noise_scale),
        att_sample: if treated_count > 0 {
            effect_sum / treated_count as f64
        } else {
            f64::NAN
        },
        sd_ratio,
        group_probabilities: grid.iter().map(|&x| cal.group_probabilities(x)).collect(),
        planted_weights: grid.iter().map(|&x| cal.planted_weights(x)).collect(),
        means: grid
            .iter()
            .map(|&x| {
                (1..=g_total)
                    .map(|g| {
                        (1..=t_total)
                            .map(|t| cal.mean(spec.kind, g, t, x))
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        grid,
    };
    Ok((rc, truth))
}

/// The estimation settings a Monte Carlo study should use for each design:
/// solved weights where only the synthetic-control assumption holds (DGP1),
/// uniform weights where parallel trends holds (DGP2/DGP3 — their flat or
/// shared group trends make the weight system singular by construction),
/// and the n^(−1/3.5) bandwidth.
///
/// Solved weights are projected onto the simplex: the planted weights are
/// interior to it, so the projection cannot bias recovery, but it bounds
/// the solution at covariate points where the estimated system happens to
/// be poorly conditioned. The rare point where it is outright singular is
/// dropped rather than failing the replication.
pub fn recommended_config(kind: DgpKind, n: usize) -> EstimateConfig {
    let solved = matches!(kind, DgpKind::Dgp1);
    EstimateConfig {
        fit: LocalPolyConfig {
            bandwidth: Bandwidth::Fixed((n as f64).powf(-1.0 / 3.5)),
            ..LocalPolyConfig::default()
        },
        weight_mode: if solved {
            WeightMode::Solved
        } else {
            WeightMode::Uniform
        },
        weight_opts: crate::weights::WeightSolveOptions {
            nonneg: solved,
            ..crate::weights::WeightSolveOptions::default()
        },
        allow_partial: solved,
        ..EstimateConfig::default()
    }
}

/// Aggregate Monte Carlo results.
#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub true_att: f64,
    /// mean(θ̂) − true ATT.
    pub bias: f64,
    /// Sample SD of θ̂ across replications.
    pub sd: f64,
    /// Share of replications whose CI covers the true ATT (absent when
    /// b = 0 skips the bootstrap).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_ci_length: Option<f64>,
    pub reps: usize,
    pub b: usize,
    pub failures: usize,
}

/// One replication's yield: the point estimate and, when the bootstrap ran,
/// its confidence interval. `None` marks a failed replication.
type RepOutcome = Option<(f64, Option<(f64, f64)>)>;

/// Runs `reps` independent draw→estimate(→bootstrap) replications on
/// pre-assigned RNG streams and aggregates bias, SD, coverage, and median
/// CI length. `b = 0` skips the bootstrap (no coverage columns); coverage
/// claims need reps ≥ 100 to be meaningful. Failed replications are counted
/// and tolerated up to 5% of `reps`.
///
/// # Errors
/// `InvalidConfig` for zero reps or a bad alpha; `BootstrapFailures` when
/// more than 5% of replications fail; calibration errors.
pub fn monte_carlo(
    spec: &DgpSpec,
    cfg: &EstimateConfig,
    reps: usize,
    b: usize,
    alpha: f64,
    multiplier: MultiplierSpec,
    seed: u64,
) -> Result<MonteCarloReport> {
    if reps == 0 {
        return Err(Error::InvalidConfig("need at least one replication".into()));
    }
    if b > 0 && !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level alpha must lie in (0,1), got {alpha}"
        )));
    }
    spec.validate()?;
    let cal = spec
        .calibration
        .resolve(spec.n_control_groups, spec.n_periods)?;
    let true_att = population_att(&cal, spec.kind, spec.effect_scale, spec.noise_scale);

    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, rep as u64, 0xD6E0_DA7A));
            let (ds, _) = generate_with(&cal, spec, &mut rng).ok()?;
            if b == 0 {
                let est = estimate_att_panel(&ds, cfg).ok()?;
                Some((est.theta_hat, None))
            } else {
                let boot_seed = mix_seed(seed, rep as u64, 0xB007_57A9);
                let (est, boot) = bootstrap_att(&ds, cfg, b, alpha, multiplier, boot_seed).ok()?;
                Some((est.theta_hat, Some(boot.ci)))
            }
        })
        .collect();

    let failures = outcomes.iter().filter(|o| o.is_none()).count();
    if failures * 20 > reps {
        return Err(Error::BootstrapFailures {
            failures,
            total: reps,
        });
    }
    let thetas: Vec<f64> = outcomes.iter().flatten().map(|(theta, _)| *theta).collect();
    let m = thetas.len() as f64;
    let mean = thetas.iter().sum::<f64>() / m;
    let sd = if thetas.len() > 1 {
        (thetas.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let (coverage, median_ci_length) = if b > 0 {
        let cis: Vec<(f64, f64)> = outcomes
            .iter()
            .flatten()
            .filter_map(|(_, ci)| *ci)
            .collect();
        let covered = cis
            .iter()
            .filter(|(lo, hi)| *lo <= true_att && true_att <= *hi)
            .count();
        let mut lengths: Vec<f64> = cis.iter().map(|(lo, hi)| hi - lo).collect();
        lengths.sort_by(f64::total_cmp);
        (
            Some(covered as f64 / cis.len() as f64),
            Some(quantile(&lengths, 0.5)),
        )
    } else {
        (None, None)
    };
    Ok(MonteCarloReport {
        true_att,
        bias: mean - true_att,
        sd,
        coverage,
        median_ci_length,
        reps,
        b,
        failures,
    })
}
