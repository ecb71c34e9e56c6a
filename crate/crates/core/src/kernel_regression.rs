//! Kernel functions, weighted local-polynomial least squares, and the
//! undersmoothed rule-of-thumb bandwidth.
//!
//! A local-polynomial fit at an evaluation point x₀ solves the weighted
//! least-squares problem
//!
//! ```text
//! β̂(x₀) = argmin_β Σᵢ wᵢ · K_h(Xᵢ − x₀) · (Yᵢ − b(Xᵢ − x₀)′β)²,
//! ```
//!
//! where `b(·)` stacks monomials of total degree ≤ s̄ in the (bandwidth-
//! scaled) coordinate differences and `wᵢ` are caller-supplied sample
//! weights. The fitted conditional mean is the intercept β̂₀. Multivariate
//! covariates use a product kernel with per-coordinate bandwidths.
//!
//! Ratio fits estimate r(x) = p₁(x)/p_g(x) directly: the criterion
//! Σᵢ wᵢ K_h(Xᵢ − x₀)(𝒢_{g,i}·(b′β)² − 2·𝒢_{1,i}·b′β) has first-order
//! condition `[Σ wᵢKᵢ𝒢_{g,i} bᵢbᵢ′] β = Σ wᵢKᵢ𝒢_{1,i} bᵢ`, a linear solve in
//! which the group-g observations form the Gram matrix and the group-1
//! observations form the response side.
//!
//! [`LocalFitPlan`] precomputes everything that does not depend on the
//! sample weights — unique covariate cells, the kernel matrix between
//! evaluation and training cells, and the monomial basis — so a multiplier
//! bootstrap can refit thousands of times at the cost of one weighted
//! aggregation pass per refit.

use std::collections::HashMap;

use crate::{Error, Result};

/// Kernel families. `Gaussian` is the default; `Epanechnikov` has compact
/// support, so windows with no in-support mass produce a singular design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelSpec {
    Gaussian,
    Epanechnikov,
}

impl KernelSpec {
    /// K(u) on the unscaled argument.
    pub fn eval(self, u: f64) -> f64 {
        match self {
            KernelSpec::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            KernelSpec::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// Scaled kernel K_h(u) = K(u/h)/h.
    pub fn scaled(self, u: f64, h: f64) -> f64 {
        self.eval(u / h) / h
    }

    /// Product kernel Π_j K(d_j / h_j) over coordinate differences, without
    /// the 1/h factors (they cancel inside weighted least squares).
    pub fn product(self, diffs: &[f64], bandwidths: &[f64]) -> f64 {
        diffs
            .iter()
            .zip(bandwidths)
            .map(|(&d, &h)| self.eval(d / h))
            .product()
    }

    /// K(0), the kernel's maximum; normalizes effective sample sizes.
    pub fn at_zero(self) -> f64 {
        self.eval(0.0)
    }
}

/// Bandwidth choice: a fixed value shared by all coordinates, or the
/// data-driven rule (resolved by the caller before fitting).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Fixed(f64),
    Auto,
}

/// Configuration for local-polynomial fits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalPolyConfig {
    /// Polynomial order s̄ (total degree); at most 3.
    pub order: usize,
    pub bandwidth: Bandwidth,
    pub kernel: KernelSpec,
    /// Relative ridge (scaled by the Gram trace) added to the local Gram
    /// diagonal only when the plain factorization fails, rescuing isolated
    /// singular windows without biasing well-conditioned ones. Zero disables
    /// the rescue, turning those windows into hard errors.
    pub ridge_eps: f64,
    /// Propensity-ratio estimates are clamped into [0, ratio_clamp].
    pub ratio_clamp: f64,
}

impl Default for LocalPolyConfig {
    fn default() -> Self {
        Self {
            order: 1,
            bandwidth: Bandwidth::Auto,
            kernel: KernelSpec::Gaussian,
            ridge_eps: 1e-10,
            ratio_clamp: 50.0,
        }
    }
}

/// Highest supported polynomial order. Orders above this produce local
/// designs too fragile to be useful at realistic bandwidths.
pub const MAX_ORDER: usize = 3;

/// Default constant in the bandwidth rule h = c · σ̂ · n^(−2/7).
pub const BANDWIDTH_CONSTANT: f64 = 1.06;

/// Result of a one-shot local-polynomial fit.
#[derive(Debug, Clone)]
pub struct FitSurface {
    /// Covariate dimension of the evaluation points.
    pub dim: usize,
    /// Fitted values, one per evaluation point.
    pub estimates: Vec<f64>,
    /// Kernel-weighted effective sample size at each evaluation point,
    /// Σᵢ wᵢ·Kᵢ / K(0)^dim.
    pub effective_n: Vec<f64>,
    /// Number of evaluation points whose ratio estimate hit a clamp bound
    /// (always 0 for plain regression fits).
    pub clamped: usize,
}

/// Rule-of-thumb bandwidth h = c·σ̂·n^(−2/7) with the default constant,
/// where σ̂ is the sample standard deviation of `x_obs` and `n` the training
/// sample size the rate is taken against. The exponent undersmooths relative
/// to the pointwise-optimal n^(−1/5) so that nuisance bias is negligible at
/// the parametric rate of the outer estimator.
///
/// # Errors
/// `DegenerateCovariate` when `x_obs` has fewer than two values or zero
/// dispersion.
pub fn auto_bandwidth(x_obs: &[f64], n: usize) -> Result<f64> {
    auto_bandwidth_with(x_obs, n, BANDWIDTH_CONSTANT)
}

/// [`auto_bandwidth`] with an explicit constant c.
pub fn auto_bandwidth_with(x_obs: &[f64], n: usize, c: f64) -> Result<f64> {
    if x_obs.len() < 2 {
        return Err(Error::DegenerateCovariate {
            context: format!("{} observation(s)", x_obs.len()),
        });
    }
    let (min, max) = x_obs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(max > min) {
        return Err(Error::DegenerateCovariate {
            context: String::new(),
        });
    }
    let mean = x_obs.iter().sum::<f64>() / x_obs.len() as f64;
    let ss: f64 = x_obs.iter().map(|&x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (x_obs.len() - 1) as f64).sqrt();
    Ok(c * sd * (n as f64).powf(-2.0 / 7.0))
}

/// Resolves a [`Bandwidth`] into per-coordinate values for row-major
/// covariates `x_obs` of dimension `dim`, using training size `n` for the
/// rate.
///
/// # Errors
/// `InvalidConfig` for non-positive fixed bandwidths; `DegenerateCovariate`
/// from the rule.
pub fn resolve_bandwidths(
    bandwidth: &Bandwidth,
    x_obs: &[f64],
    dim: usize,
    n: usize,
) -> Result<Vec<f64>> {
    match *bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "bandwidth must be positive, got {h}"
                )));
            }
            Ok(vec![h; dim])
        }
        Bandwidth::Auto => (0..dim)
            .map(|j| {
                let column: Vec<f64> = x_obs.iter().skip(j).step_by(dim).copied().collect();
                auto_bandwidth(&column, n)
            })
            .collect(),
    }
}

/// Monomial exponent tuples of total degree ≤ `order` over `dim` coordinates,
/// degree-ascending with the intercept first.
fn monomial_exponents(dim: usize, order: usize) -> Vec<Vec<u32>> {
    if dim == 0 {
        return vec![Vec::new()];
    }
    fn compositions(dim: usize, total: u32) -> Vec<Vec<u32>> {
        if dim == 1 {
            return vec![vec![total]];
        }
        let mut out = Vec::new();
        for first in 0..=total {
            for mut rest in compositions(dim - 1, total - first) {
                let mut v = Vec::with_capacity(dim);
                v.push(first);
                v.append(&mut rest);
                out.push(v);
            }
        }
        out
    }
    let mut out = Vec::new();
    for total in 0..=order as u32 {
        out.extend(compositions(dim, total));
    }
    out
}

/// In-place Cholesky factorization of a symmetric matrix stored row-major in
/// its lower triangle; returns false on a non-positive pivot.
fn cholesky_in_place(a: &mut [f64], q: usize) -> bool {
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in (j + 1)..q {
            let mut s = a[i * q + j];
            for k in 0..j {
                s -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = s / d;
        }
    }
    true
}

/// Solves L L′ x = b in place given the Cholesky factor from
/// [`cholesky_in_place`].
fn cholesky_solve(l: &[f64], q: usize, b: &mut [f64]) {
    for i in 0..q {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * q + k] * b[k];
        }
        b[i] = s / l[i * q + i];
    }
    for i in (0..q).rev() {
        let mut s = b[i];
        for k in (i + 1)..q {
            s -= l[k * q + i] * b[k];
        }
        b[i] = s / l[i * q + i];
    }
}

/// Kernel matrix storage: dense when the cell product is small enough,
/// recomputed on the fly otherwise (continuous covariates with many unique
/// values).
enum KernelWeights {
    Dense(Vec<f64>),
    OnTheFly,
}

/// Maximum dense kernel-matrix entries (eval cells × training cells).
const DENSE_KERNEL_LIMIT: usize = 4_000_000;

/// A reusable local-polynomial design: training and evaluation covariates
/// collapsed to unique cells, kernel weights between them, and the monomial
/// basis — everything except the per-refit sample weights.
pub struct LocalFitPlan {
    dim: usize,
    kernel: KernelSpec,
    ridge_eps: f64,
    bandwidths: Vec<f64>,
    n_train: usize,
    /// Unique training covariate rows.
    train_cells: Vec<Vec<f64>>,
    /// Cell index of each training observation.
    cell_of_train: Vec<usize>,
    /// Unique evaluation covariate rows.
    eval_cells: Vec<Vec<f64>>,
    /// Cell index of each evaluation point.
    cell_of_eval: Vec<usize>,
    kernel_weights: KernelWeights,
    /// Monomial exponents; basis size q = exponents.len().
    exponents: Vec<Vec<u32>>,
}

/// Collapses row-major covariate rows into unique cells keyed by exact bit
/// patterns.
fn unique_cells(x: &[f64], dim: usize, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut cells: Vec<Vec<f64>> = Vec::new();
    let mut cell_of: Vec<usize> = Vec::with_capacity(n);
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for i in 0..n {
        let row = &x[i * dim..(i + 1) * dim];
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let idx = *index.entry(key).or_insert_with(|| {
            cells.push(row.to_vec());
            cells.len() - 1
        });
        cell_of.push(idx);
    }
    (cells, cell_of)
}

impl LocalFitPlan {
    /// Builds a plan for fitting on `x_train` and predicting at
    /// `eval_points`, both row-major with `dim` coordinates per row.
    ///
    /// # Errors
    /// `InvalidConfig` for bad dimensions, orders above [`MAX_ORDER`], or
    /// non-positive bandwidths.
    pub fn new(
        x_train: &[f64],
        dim: usize,
        eval_points: &[f64],
        bandwidths: &[f64],
        order: usize,
        kernel: KernelSpec,
        ridge_eps: f64,
    ) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::InvalidConfig(format!(
                "polynomial order {order} exceeds the maximum of {MAX_ORDER}"
            )));
        }
        if bandwidths.len() != dim {
            return Err(Error::InvalidConfig(format!(
                "{} bandwidth(s) for dimension {dim}",
                bandwidths.len()
            )));
        }
        if bandwidths.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidConfig("bandwidths must be positive".into()));
        }
        let n_train = if dim == 0 {
            // With no covariates the "design" is a single intercept cell;
            // the caller provides the training length through x_train's
            // conventional empty layout, so it must be sized separately.
            return Err(Error::InvalidConfig(
                "LocalFitPlan requires dim ≥ 1; use plain weighted means for covariate-free data"
                    .into(),
            ));
        } else {
            if !x_train.len().is_multiple_of(dim) || !eval_points.len().is_multiple_of(dim) {
                return Err(Error::InvalidConfig(
                    "covariate arrays are not a multiple of the dimension".into(),
                ));
            }
            x_train.len() / dim
        };
        if n_train == 0 {
            return Err(Error::InvalidConfig("no training observations".into()));
        }
        let (train_cells, cell_of_train) = unique_cells(x_train, dim, n_train);
        let (eval_cells, cell_of_eval) = unique_cells(eval_points, dim, eval_points.len() / dim);
        let kernel_weights =
            if eval_cells.len().saturating_mul(train_cells.len()) <= DENSE_KERNEL_LIMIT {
                let mut kw = Vec::with_capacity(eval_cells.len() * train_cells.len());
                let mut diffs = vec![0.0; dim];
                for e in &eval_cells {
                    for c in &train_cells {
                        for j in 0..dim {
                            diffs[j] = c[j] - e[j];
                        }
                        kw.push(kernel.product(&diffs, bandwidths));
                    }
                }
                KernelWeights::Dense(kw)
            } else {
                KernelWeights::OnTheFly
            };
        Ok(Self {
            dim,
            kernel,
            ridge_eps,
            bandwidths: bandwidths.to_vec(),
            n_train,
            train_cells,
            cell_of_train,
            eval_cells,
            cell_of_eval,
            kernel_weights,
            exponents: monomial_exponents(dim, order),
        })
    }

    /// Basis dimension q.
    pub fn basis_size(&self) -> usize {
        self.exponents.len()
    }

    /// Number of training observations.
    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Number of evaluation points.
    pub fn n_eval(&self) -> usize {
        self.cell_of_eval.len()
    }

    /// Frozen per-coordinate bandwidths.
    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    fn kernel_row(&self, e: usize, buffer: &mut Vec<f64>) {
        match &self.kernel_weights {
            KernelWeights::Dense(kw) => {
                let row = &kw[e * self.train_cells.len()..(e + 1) * self.train_cells.len()];
                buffer.clear();
                buffer.extend_from_slice(row);
            }
            KernelWeights::OnTheFly => {
                buffer.clear();
                let ecell = &self.eval_cells[e];
                let mut diffs = vec![0.0; self.dim];
                for c in &self.train_cells {
                    for j in 0..self.dim {
                        diffs[j] = c[j] - ecell[j];
                    }
                    buffer.push(self.kernel.product(&diffs, &self.bandwidths));
                }
            }
        }
    }

    /// Fills `basis` with b((c − e)/h) for training cell `c` and eval cell `e`.
    fn basis_at(&self, c: usize, e: usize, basis: &mut [f64]) {
        let cc = &self.train_cells[c];
        let ec = &self.eval_cells[e];
        for (m, expo) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for j in 0..self.dim {
                let u = (cc[j] - ec[j]) / self.bandwidths[j];
                v *= u.powi(expo[j] as i32);
            }
            basis[m] = v;
        }
    }

    /// Core solver: per-cell aggregated weights `sw` (one per training cell)
    /// and responses `sy` (cells × n_resp, row-major); returns intercepts
    /// per (eval cell, response) or full coefficient vectors when `coefs` is
    /// set.
    fn solve_cells(
        &self,
        sw: &[f64],
        sy: &[f64],
        n_resp: usize,
        coefs: bool,
    ) -> Result<Vec<Vec<f64>>> {
        let q = self.basis_size();
        let n_cells = self.train_cells.len();
        let mut gram = vec![0.0; q * q];
        let mut factor = vec![0.0; q * q];
        let mut rhs = vec![0.0; q * n_resp];
        let mut basis = vec![0.0; q];
        let mut krow: Vec<f64> = Vec::with_capacity(n_cells);
        let width = if coefs { q } else { 1 };
        let mut out = vec![vec![0.0; self.n_eval() * width]; n_resp];
        let mut cell_solutions = vec![0.0; q * n_resp];
        for (e_cell, _) in self.eval_cells.iter().enumerate() {
            gram.iter_mut().for_each(|v| *v = 0.0);
            rhs.iter_mut().for_each(|v| *v = 0.0);
            self.kernel_row(e_cell, &mut krow);
            for c in 0..n_cells {
                let k = krow[c];
                if k == 0.0 {
                    continue;
                }
                self.basis_at(c, e_cell, &mut basis);
                let kw = k * sw[c];
                for a in 0..q {
                    let ba = basis[a];
                    for b in a..q {
                        gram[a * q + b] += kw * ba * basis[b];
                    }
                    for r in 0..n_resp {
                        rhs[a * n_resp + r] += k * sy[c * n_resp + r] * basis[a];
                    }
                }
            }
            let mut trace = 0.0;
            for a in 0..q {
                trace += gram[a * q + a];
                for b in (a + 1)..q {
                    gram[b * q + a] = gram[a * q + b];
                }
            }
            if !(trace > 0.0) || !trace.is_finite() {
                return Err(Error::SingularLocalDesign {
                    context: String::new(),
                });
            }
            // Factor the plain Gram first; only on failure retry once with a
            // trace-scaled ridge, so well-conditioned windows are solved
            // without any regularization bias.
            factor.copy_from_slice(&gram);
            if !cholesky_in_place(&mut factor, q) {
                factor.copy_from_slice(&gram);
                let ridge = self.ridge_eps * trace;
                for a in 0..q {
                    factor[a * q + a] += ridge;
                }
                if !(ridge > 0.0) || !cholesky_in_place(&mut factor, q) {
                    return Err(Error::SingularLocalDesign {
                        context: String::new(),
                    });
                }
            }
            for r in 0..n_resp {
                let col = &mut cell_solutions[r * q..(r + 1) * q];
                for a in 0..q {
                    col[a] = rhs[a * n_resp + r];
                }
                cholesky_solve(&factor, q, col);
            }
            for (point, &pc) in self.cell_of_eval.iter().enumerate() {
                if pc == e_cell {
                    for r in 0..n_resp {
                        if coefs {
                            out[r][point * q..(point + 1) * q]
                                .copy_from_slice(&cell_solutions[r * q..(r + 1) * q]);
                        } else {
                            out[r][point] = cell_solutions[r * q];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Aggregates Σᵢ wᵢ·scaleᵢ per training cell.
    fn aggregate(&self, values: &[f64], w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n_train {
            out[self.cell_of_train[i]] += values[i] * w[i];
        }
    }

    /// Fits several responses that share one sample-weight vector; the Gram
    /// factorization is reused across responses. Returns fitted values
    /// indexed `[response][eval point]`.
    ///
    /// # Errors
    /// `SingularLocalDesign` when a local window has no kernel mass or an
    /// indefinite weighted design; `InvalidConfig` on length mismatches.
    pub fn fit_multi(&self, responses: &[&[f64]], w: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_lengths(w)?;
        for y in responses {
            if y.len() != self.n_train {
                return Err(Error::InvalidConfig(
                    "response length does not match training size".into(),
                ));
            }
        }
        let n_cells = self.train_cells.len();
        let n_resp = responses.len();
        let mut sw = vec![0.0; n_cells];
        self.aggregate_ones(w, &mut sw);
        let mut sy = vec![0.0; n_cells * n_resp];
        for i in 0..self.n_train {
            let c = self.cell_of_train[i];
            for (r, y) in responses.iter().enumerate() {
                sy[c * n_resp + r] += y[i] * w[i];
            }
        }
        self.solve_cells(&sw, &sy, n_resp, false)
    }

    fn aggregate_ones(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n_train {
            out[self.cell_of_train[i]] += w[i];
        }
    }

    fn check_lengths(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.n_train {
            return Err(Error::InvalidConfig(
                "sample-weight length does not match training size".into(),
            ));
        }
        Ok(())
    }

    /// Single-response convenience over [`LocalFitPlan::fit_multi`].
    pub fn fit(&self, y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fit_multi(&[y], w)?.pop().unwrap())
    }

    /// Full coefficient vectors (length q per eval point) for one response.
    pub fn fit_coefs(&self, y: &[f64], w: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_lengths(w)?;
        if y.len() != self.n_train {
            return Err(Error::InvalidConfig(
                "response length does not match training size".into(),
            ));
        }
        let n_cells = self.train_cells.len();
        let mut sw = vec![0.0; n_cells];
        self.aggregate_ones(w, &mut sw);
        let mut sy = vec![0.0; n_cells];
        self.aggregate(y, w, &mut sy);
        let flat = self.solve_cells(&sw, &sy, 1, true)?.pop().unwrap();
        let q = self.basis_size();
        Ok(flat.chunks(q).map(|c| c.to_vec()).collect())
    }

    /// Direct propensity-ratio fit r̂(x) with estimates clamped to
    /// [0, clamp]. `g1` and `gg` are 0/1 indicators of the numerator and
    /// denominator groups. Returns per-point estimates and the clamp count.
    ///
    /// # Errors
    /// `SingularLocalDesign` when the denominator group has no kernel mass
    /// in a window.
    pub fn fit_ratio(
        &self,
        g1: &[f64],
        gg: &[f64],
        w: &[f64],
        clamp: f64,
    ) -> Result<(Vec<f64>, usize)> {
        let coefs = self.fit_ratio_coefs(g1, gg, w)?;
        let mut clamped = 0usize;
        let estimates = coefs
            .iter()
            .map(|c| {
                let raw = c[0];
                if raw < 0.0 {
                    clamped += 1;
                    0.0
                } else if raw > clamp {
                    clamped += 1;
                    clamp
                } else {
                    raw
                }
            })
            .collect();
        Ok((estimates, clamped))
    }

    /// Unclamped ratio-fit coefficient vectors, exposing the raw solution of
    /// the first-order condition at each evaluation point.
    pub fn fit_ratio_coefs(&self, g1: &[f64], gg: &[f64], w: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_lengths(w)?;
        if g1.len() != self.n_train || gg.len() != self.n_train {
            return Err(Error::InvalidConfig(
                "indicator length does not match training size".into(),
            ));
        }
        let n_cells = self.train_cells.len();
        let mut s_gg = vec![0.0; n_cells];
        self.aggregate(gg, w, &mut s_gg);
        let mut s_g1 = vec![0.0; n_cells];
        self.aggregate(g1, w, &mut s_g1);
        let flat = self.solve_cells(&s_gg, &s_g1, 1, true)?.pop().unwrap();
        let q = self.basis_size();
        Ok(flat.chunks(q).map(|c| c.to_vec()).collect())
    }

    /// Kernel-weighted effective sample size Σᵢ wᵢKᵢ / K(0)^dim at each
    /// evaluation point.
    pub fn effective_n(&self, w: &[f64]) -> Vec<f64> {
        let n_cells = self.train_cells.len();
        let mut sw = vec![0.0; n_cells];
        self.aggregate_ones(w, &mut sw);
        let k0 = self.kernel.at_zero().powi(self.dim as i32);
        let mut krow: Vec<f64> = Vec::with_capacity(n_cells);
        let mut per_cell = vec![0.0; self.eval_cells.len()];
        for (e, cell) in per_cell.iter_mut().enumerate() {
            self.kernel_row(e, &mut krow);
            *cell = krow.iter().zip(&sw).map(|(&k, &s)| k * s).sum::<f64>() / k0;
        }
        self.cell_of_eval.iter().map(|&c| per_cell[c]).collect()
    }
}

/// One-shot weighted local-polynomial regression of `y_obs` on `x_obs`
/// (row-major, `dim` coordinates per observation), evaluated at
/// `eval_points`. The bandwidth must be fixed: resolve `Bandwidth::Auto`
/// through [`auto_bandwidth`] (or [`resolve_bandwidths`]) first.
///
/// # Errors
/// `BandwidthRequired` when the config still says `Auto`;
/// `SingularLocalDesign` on windows without usable kernel mass;
/// `InvalidConfig` on dimension mismatches.
pub fn local_poly_fit(
    x_obs: &[f64],
    dim: usize,
    y_obs: &[f64],
    sample_weights: &[f64],
    eval_points: &[f64],
    cfg: &LocalPolyConfig,
) -> Result<FitSurface> {
    let plan = plan_from_config(x_obs, dim, eval_points, cfg)?;
    let estimates = plan.fit(y_obs, sample_weights)?;
    let effective_n = plan.effective_n(sample_weights);
    Ok(FitSurface {
        dim,
        estimates,
        effective_n,
        clamped: 0,
    })
}

/// One-shot direct propensity-ratio fit; see [`LocalFitPlan::fit_ratio`].
///
/// # Errors
/// As for [`local_poly_fit`].
pub fn local_poly_ratio_fit(
    x_obs: &[f64],
    dim: usize,
    g1_indicator: &[f64],
    gg_indicator: &[f64],
    sample_weights: &[f64],
    eval_points: &[f64],
    cfg: &LocalPolyConfig,
) -> Result<FitSurface> {
    let plan = plan_from_config(x_obs, dim, eval_points, cfg)?;
    let (estimates, clamped) =
        plan.fit_ratio(g1_indicator, gg_indicator, sample_weights, cfg.ratio_clamp)?;
    let effective_n = plan.effective_n(sample_weights);
    Ok(FitSurface {
        dim,
        estimates,
        effective_n,
        clamped,
    })
}

fn plan_from_config(
    x_obs: &[f64],
    dim: usize,
    eval_points: &[f64],
    cfg: &LocalPolyConfig,
) -> Result<LocalFitPlan> {
    let h = match cfg.bandwidth {
        Bandwidth::Fixed(h) => vec![h; dim],
        Bandwidth::Auto => return Err(Error::BandwidthRequired),
    };
    LocalFitPlan::new(
        x_obs,
        dim,
        eval_points,
        &h,
        cfg.order,
        cfg.kernel,
        cfg.ridge_eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixed_cfg(order: usize, h: f64) -> LocalPolyConfig {
        LocalPolyConfig {
            order,
            bandwidth: Bandwidth::Fixed(h),
            ..LocalPolyConfig::default()
        }
    }

    #[test]
    fn kernel_values_match_closed_forms() {
        assert_abs_diff_eq!(
            KernelSpec::Gaussian.eval(0.0),
            0.3989422804014327,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            KernelSpec::Gaussian.eval(1.0),
            0.24197072451914337,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(KernelSpec::Epanechnikov.eval(0.0), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(KernelSpec::Epanechnikov.eval(0.5), 0.5625, epsilon = 1e-15);
        assert_eq!(KernelSpec::Epanechnikov.eval(1.1), 0.0);
        // K_h(u) = K(u/h)/h.
        assert_abs_diff_eq!(
            KernelSpec::Gaussian.scaled(0.5, 0.5),
            KernelSpec::Gaussian.eval(1.0) / 0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn straight_line_is_reproduced_exactly_by_order_one() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 1.0).collect();
        let w = vec![1.0; 20];
        let eval = [0.05, 0.31, 0.77];
        // The ridge only engages on factorization failure, so the default
        // config reproduces the line to solver precision.
        let fit = local_poly_fit(&x, 1, &y, &w, &eval, &fixed_cfg(1, 0.2)).expect("fit");
        for (i, &x0) in eval.iter().enumerate() {
            assert_abs_diff_eq!(fit.estimates[i], 2.0 * x0 + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn order_zero_matches_hand_computed_kernel_average() {
        // Three observations, evaluation at x₀ = 0: the local constant fit
        // is Σ wᵢK(xᵢ/h)yᵢ / Σ wᵢK(xᵢ/h).
        let x = [0.0, 0.5, 1.0];
        let y = [1.0, 2.0, 4.0];
        let w = [1.0, 2.0, 1.0];
        let h = 0.8;
        let k: Vec<f64> = x
            .iter()
            .map(|&v| KernelSpec::Gaussian.eval(v / h))
            .collect();
        let expected = (w[0] * k[0] * y[0] + w[1] * k[1] * y[1] + w[2] * k[2] * y[2])
            / (w[0] * k[0] + w[1] * k[1] + w[2] * k[2]);
        let fit = local_poly_fit(&x, 1, &y, &w, &[0.0], &fixed_cfg(0, h)).expect("fit");
        assert_abs_diff_eq!(fit.estimates[0], expected, epsilon = 1e-12);
    }

    /// Independent dense WLS solve at one evaluation point, via nalgebra's
    /// SVD on the per-observation (not per-cell) design.
    #[allow(clippy::too_many_arguments)]
    fn brute_force_fit(
        x: &[f64],
        dim: usize,
        y: &[f64],
        w: &[f64],
        x0: &[f64],
        h: &[f64],
        order: usize,
        kernel: KernelSpec,
    ) -> f64 {
        let expo = monomial_exponents(dim, order);
        let n = y.len();
        let q = expo.len();
        let mut design = DMatrix::zeros(n, q);
        let mut wk = DVector::zeros(n);
        for i in 0..n {
            let row = &x[i * dim..(i + 1) * dim];
            let diffs: Vec<f64> = (0..dim).map(|j| row[j] - x0[j]).collect();
            wk[i] = w[i] * kernel.product(&diffs, h);
            for (m, e) in expo.iter().enumerate() {
                let mut v = 1.0;
                for j in 0..dim {
                    v *= ((row[j] - x0[j]) / h[j]).powi(e[j] as i32);
                }
                design[(i, m)] = v;
            }
        }
        let mut gram = DMatrix::zeros(q, q);
        let mut rhs = DVector::zeros(q);
        for i in 0..n {
            let b = design.row(i).transpose();
            gram += wk[i] * &b * b.transpose();
            rhs += wk[i] * y[i] * b;
        }
        let svd = gram.svd(true, true);
        let sol = svd.solve(&rhs, 1e-14).expect("oracle solve");
        sol[0]
    }

    #[test]
    fn plan_agrees_with_dense_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &dim in &[1usize, 2] {
            let n = 60;
            let x: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
            let h = vec![0.5; dim];
            let eval: Vec<f64> = x[..4 * dim].to_vec();
            let plan =
                LocalFitPlan::new(&x, dim, &eval, &h, 2, KernelSpec::Gaussian, 0.0).expect("plan");
            let fitted = plan.fit(&y, &w).expect("fit");
            for (p, est) in fitted.iter().enumerate() {
                let x0 = &eval[p * dim..(p + 1) * dim];
                let oracle = brute_force_fit(&x, dim, &y, &w, x0, &h, 2, KernelSpec::Gaussian);
                assert_abs_diff_eq!(*est, oracle, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_observations_equal_summed_weights() {
        // Cell aggregation must make {x repeated, weight 1 each} identical
        // to {x once, weight 2}.
        let x_dup = [0.1, 0.1, 0.4, 0.9];
        let y_dup = [1.0, 1.0, 2.0, 3.0];
        let w_dup = [1.0, 1.0, 1.5, 0.5];
        let x_agg = [0.1, 0.4, 0.9];
        let y_agg = [1.0, 2.0, 3.0];
        let w_agg = [2.0, 1.5, 0.5];
        let eval = [0.3];
        let cfg = fixed_cfg(1, 0.4);
        let a = local_poly_fit(&x_dup, 1, &y_dup, &w_dup, &eval, &cfg).expect("fit dup");
        let b = local_poly_fit(&x_agg, 1, &y_agg, &w_agg, &eval, &cfg).expect("fit agg");
        assert_abs_diff_eq!(a.estimates[0], b.estimates[0], epsilon = 1e-13);
    }

    #[test]
    fn ratio_fit_matches_local_count_ratio_at_order_zero() {
        // At order 0 the first-order condition gives
        // r̂(x₀) = Σ wᵢKᵢ𝒢₁ᵢ / Σ wᵢKᵢ𝒢_gᵢ.
        let x = [0.0, 0.1, 0.2, 0.8, 0.9, 1.0];
        let g1 = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let gg = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let w = [1.0, 1.0, 2.0, 1.0, 1.0, 1.0];
        let h = 0.3;
        let fit =
            local_poly_ratio_fit(&x, 1, &g1, &gg, &w, &[0.1], &fixed_cfg(0, h)).expect("ratio fit");
        let k: Vec<f64> = x
            .iter()
            .map(|&v| KernelSpec::Gaussian.eval((v - 0.1) / h))
            .collect();
        let num: f64 = (0..6).map(|i| w[i] * k[i] * g1[i]).sum();
        let den: f64 = (0..6).map(|i| w[i] * k[i] * gg[i]).sum();
        assert_abs_diff_eq!(fit.estimates[0], num / den, epsilon = 1e-12);
    }

    #[test]
    fn ratio_first_order_condition_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g1: Vec<f64> = x
            .iter()
            .map(|&v| f64::from(rng.gen_bool(0.3 + 0.3 * v)))
            .collect();
        let gg: Vec<f64> = g1.iter().map(|&v| 1.0 - v).collect();
        let w = vec![1.0; n];
        let h = [0.25];
        let eval = [0.2, 0.5, 0.8];
        let plan = LocalFitPlan::new(&x, 1, &eval, &h, 1, KernelSpec::Gaussian, 0.0).expect("plan");
        let coefs = plan.fit_ratio_coefs(&g1, &gg, &w).expect("coefs");
        for (p, beta) in coefs.iter().enumerate() {
            // Residual of Σᵢ wᵢKᵢ(𝒢_gᵢ·bᵢbᵢ′β − 𝒢₁ᵢ·bᵢ) computed directly
            // from the observations.
            let mut resid = [0.0; 2];
            for i in 0..n {
                let u = (x[i] - eval[p]) / h[0];
                let k = KernelSpec::Gaussian.eval(u);
                let b = [1.0, u];
                let fit = b[0] * beta[0] + b[1] * beta[1];
                for a in 0..2 {
                    resid[a] += w[i] * k * (gg[i] * fit - g1[i]) * b[a];
                }
            }
            let norm = (resid[0] * resid[0] + resid[1] * resid[1]).sqrt();
            assert!(
                norm <= 1e-8,
                "FOC residual {norm:.3e} at eval point {p} exceeds 1e-8"
            );
        }
    }

    #[test]
    fn ratio_clamp_binds_and_is_counted() {
        // All numerator mass, no denominator mass nearby except a sliver:
        // the raw ratio explodes past the clamp.
        let x = [0.0, 0.01, 0.02, 0.03, 2.0];
        let g1 = [1.0, 1.0, 1.0, 1.0, 0.0];
        let gg = [0.0, 0.0, 0.0, 0.0, 1.0];
        let w = [1.0; 5];
        let mut cfg = fixed_cfg(0, 0.1);
        cfg.ratio_clamp = 50.0;
        let fit = local_poly_ratio_fit(&x, 1, &g1, &gg, &w, &[0.0], &cfg).expect("fit");
        assert_eq!(fit.clamped, 1);
        assert_eq!(fit.estimates[0], 50.0);
    }

    #[test]
    fn auto_bandwidth_matches_frozen_oracle() {
        // Deterministic stand-in for n = 1000 uniform draws on [0,1]:
        // σ̂ ≈ 0.2887, so h = 1.06·σ̂·1000^(−2/7) ≈ 0.0424.
        let x: Vec<f64> = (0..1000).map(|k| (k as f64 + 0.5) / 1000.0).collect();
        let h = auto_bandwidth(&x, 1000).expect("bandwidth");
        assert_abs_diff_eq!(h, 0.0424, epsilon = 5e-4);
        // Quadrupling n scales h by exactly 4^(−2/7).
        let h4 = auto_bandwidth(&x, 4000).expect("bandwidth");
        assert_abs_diff_eq!(h4 / h, 4.0_f64.powf(-2.0 / 7.0), epsilon = 1e-12);
    }

    #[test]
    fn degenerate_covariate_is_rejected() {
        let x = vec![0.7; 50];
        assert!(matches!(
            auto_bandwidth(&x, 50),
            Err(Error::DegenerateCovariate { .. })
        ));
    }

    #[test]
    fn one_shot_fit_requires_resolved_bandwidth() {
        let x = [0.0, 0.5, 1.0];
        let y = [1.0, 2.0, 3.0];
        let w = [1.0; 3];
        let cfg = LocalPolyConfig::default(); // Bandwidth::Auto
        assert!(matches!(
            local_poly_fit(&x, 1, &y, &w, &[0.5], &cfg),
            Err(Error::BandwidthRequired)
        ));
    }

    #[test]
    fn compact_kernel_with_empty_window_is_singular() {
        let x = [0.0, 0.1, 0.2];
        let y = [1.0, 2.0, 3.0];
        let w = [1.0; 3];
        let mut cfg = fixed_cfg(0, 0.05);
        cfg.kernel = KernelSpec::Epanechnikov;
        match local_poly_fit(&x, 1, &y, &w, &[5.0], &cfg) {
            Err(Error::SingularLocalDesign { .. }) => {}
            other => panic!("expected SingularLocalDesign, got {other:?}"),
        }
    }

    #[test]
    fn order_cap_is_enforced() {
        let x = [0.0, 0.5, 1.0];
        let y = [1.0, 2.0, 3.0];
        let w = [1.0; 3];
        assert!(matches!(
            local_poly_fit(&x, 1, &y, &w, &[0.5], &fixed_cfg(4, 0.3)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn multivariate_plane_is_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 50;
        let x: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 1.5 - 2.0 * x[2 * i] + 0.5 * x[2 * i + 1])
            .collect();
        let w = vec![1.0; n];
        let eval = [0.0, 0.0, 0.3, -0.4];
        let fit = local_poly_fit(&x, 2, &y, &w, &eval, &fixed_cfg(1, 0.6)).expect("fit");
        assert_abs_diff_eq!(fit.estimates[0], 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(
            fit.estimates[1],
            1.5 - 2.0 * 0.3 + 0.5 * (-0.4),
            epsilon = 1e-9
        );
    }

    #[test]
    fn basis_sizes_match_binomial_counts() {
        assert_eq!(monomial_exponents(1, 3).len(), 4);
        assert_eq!(monomial_exponents(2, 1).len(), 3);
        assert_eq!(monomial_exponents(2, 2).len(), 6);
        assert_eq!(monomial_exponents(3, 2).len(), 10);
        assert_eq!(monomial_exponents(1, 0).len(), 1);
    }

    proptest! {
        /// A polynomial of degree ≤ s̄ is reproduced exactly (up to fp noise)
        /// by an order-s̄ local fit, for any bandwidth and weighting.
        #[test]
        fn polynomial_exactness(
            order in 0usize..=3,
            coef in proptest::collection::vec(-2.0..2.0f64, 4),
            h in 0.05f64..0.8,
            wseed in any::<u64>(),
        ) {
            let n = 24;
            let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let poly = |v: f64| {
                coef.iter().take(order + 1).enumerate().fold(0.0, |acc, (d, c)| acc + c * v.powi(d as i32))
            };
            let y: Vec<f64> = x.iter().map(|&v| poly(v)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(wseed);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
            let eval = [0.1, 0.5, 0.9];
            let fit = local_poly_fit(&x, 1, &y, &w, &eval, &fixed_cfg(order, h)).unwrap();
            for (i, &x0) in eval.iter().enumerate() {
                let scale = 1.0 + poly(x0).abs();
                prop_assert!(
                    (fit.estimates[i] - poly(x0)).abs() <= 1e-8 * scale,
                    "order {} at {}: {} vs {}", order, x0, fit.estimates[i], poly(x0)
                );
            }
        }

        /// Rescaling all sample weights by a common factor leaves the fit
        /// unchanged.
        #[test]
        fn weight_scale_invariance(scale in 0.1f64..10.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
            let ws: Vec<f64> = w.iter().map(|&v| v * scale).collect();
            let eval = [0.25, 0.75];
            let cfg = fixed_cfg(1, 0.3);
            let a = local_poly_fit(&x, 1, &y, &w, &eval, &cfg).unwrap();
            let b = local_poly_fit(&x, 1, &y, &ws, &eval, &cfg).unwrap();
            for i in 0..eval.len() {
                prop_assert!((a.estimates[i] - b.estimates[i]).abs() <= 1e-10 * (1.0 + a.estimates[i].abs()));
            }
        }

        /// Fitting is linear in the response: fit(a·y + b·z) = a·fit(y) + b·fit(z).
        #[test]
        fn linearity_in_response(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let comb: Vec<f64> = (0..n).map(|i| a * y[i] + b * z[i]).collect();
            let w = vec![1.0; n];
            let eval = [0.3, 0.6];
            let h = [0.25];
            let plan = LocalFitPlan::new(&x, 1, &eval, &h, 1, KernelSpec::Gaussian, 0.0).unwrap();
            let fy = plan.fit(&y, &w).unwrap();
            let fz = plan.fit(&z, &w).unwrap();
            let fc = plan.fit(&comb, &w).unwrap();
            for i in 0..eval.len() {
                let expect = a * fy[i] + b * fz[i];
                prop_assert!((fc[i] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
        }
    }
}
