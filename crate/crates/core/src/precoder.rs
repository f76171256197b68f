//! Robust MSE precoding for a cluster of cooperating satellites.
//!
//! The network controller minimises the received-symbol MSE averaged over the
//! delay error `G̃ = Ĝ − G`, subject to one power budget per satellite. With
//! `Q = ĜĜᴴ + E{G̃G̃ᴴ} − E{G̃}Ĝᴴ − ĜE{G̃}ᴴ` (the estimate of `E{GGᴴ}`) and
//! `B = Ĝ − E{G̃}` (the estimate of `E{G}`),
//!
//! ```text
//! MSE(V) = tr(Vᴴ Q V) − 2 Re tr(Vᴴ B) + K(σ² + 1)
//! ```
//!
//! Block `V_l` (rows `lM .. (l+1)M`) is updated in closed form with the other
//! blocks fixed, `V_l = (Q_ll + λ_l I)⁻¹ (B_l − Σ_{i≠l} Q_li V_i)`, and the
//! multipliers `λ_l` follow a two-branch dual rule until the sum rate settles.

use nalgebra::{Cholesky, DMatrix, DMatrixView, Dyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::UncertaintyStats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrecoderError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("power budget of satellite {index} must be positive, got {value}")]
    InvalidBudget { index: usize, value: f64 },

    #[error("dual variable must be positive, got {0}")]
    InvalidMultiplier(f64),

    #[error("block {0} system is not positive definite")]
    Singular(usize),

    #[error("invalid solver option: {0}")]
    InvalidOption(String),
}

pub type Result<T> = std::result::Result<T, PrecoderError>;

const ONE: Complex64 = Complex64::new(1.0, 0.0);

// ============================================================================
// Types
// ============================================================================

/// Per-satellite transmit power limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerBudget(Vec<f64>);

impl PowerBudget {
    pub fn new(limits: Vec<f64>) -> Result<Self> {
        for (index, &value) in limits.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(PrecoderError::InvalidBudget { index, value });
            }
        }
        Ok(Self(limits))
    }

    pub fn uniform(satellites: usize, limit: f64) -> Result<Self> {
        Self::new(vec![limit; satellites])
    }

    pub fn limits(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ML × K` precoder made of `L` stacked `M × K` satellite blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingMatrix {
    v: DMatrix<Complex64>,
    block_rows: usize,
}

impl PrecodingMatrix {
    pub fn new(v: DMatrix<Complex64>, block_rows: usize) -> Result<Self> {
        if block_rows == 0 || !v.nrows().is_multiple_of(block_rows) {
            return Err(PrecoderError::Dimension(format!(
                "{} rows do not split into blocks of {block_rows}",
                v.nrows()
            )));
        }
        Ok(Self { v, block_rows })
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.v
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.v
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn num_blocks(&self) -> usize {
        self.v.nrows() / self.block_rows
    }

    pub fn block(&self, l: usize) -> DMatrixView<'_, Complex64> {
        self.v.rows(l * self.block_rows, self.block_rows)
    }

    /// `tr(V_l V_lᴴ)`.
    pub fn block_power(&self, l: usize) -> f64 {
        self.block(l).norm_squared()
    }

    pub fn block_powers(&self) -> Vec<f64> {
        (0..self.num_blocks()).map(|l| self.block_power(l)).collect()
    }
}

/// Lagrange multipliers and the dual step/decay factor.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambdas: Vec<f64>,
    pub alpha: f64,
}

/// Outcome of one run of the alternating solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Stopping-rule sum rate after each iteration.
    pub rates: Vec<f64>,
    pub converged: bool,
    pub block_powers: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub initial_lambda: f64,
    pub alpha: f64,
    /// Relative sum-rate change below which the iteration stops.
    pub rate_tolerance: f64,
    /// Relative power overshoot tolerated when stopping.
    pub power_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            initial_lambda: 1.0,
            alpha: 0.9,
            rate_tolerance: 0.01,
            power_tolerance: 0.01,
            max_iterations: 100,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lambda > 0.0 && self.initial_lambda.is_finite()) {
            return Err(PrecoderError::InvalidOption(format!(
                "initial_lambda = {}",
                self.initial_lambda
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(PrecoderError::InvalidOption(format!(
                "alpha = {} not in (0, 1)",
                self.alpha
            )));
        }
        if !(self.rate_tolerance > 0.0) || !(self.power_tolerance >= 0.0) {
            return Err(PrecoderError::InvalidOption("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(PrecoderError::InvalidOption("max_iterations = 0".into()));
        }
        Ok(())
    }
}

// ============================================================================
// Objective
// ============================================================================

fn check_stats(g_hat: &DMatrix<Complex64>, stats: &UncertaintyStats) -> Result<()> {
    let (rows, k) = g_hat.shape();
    if stats.mean.shape() != (rows, k) || stats.second_moment.shape() != (rows, rows) {
        return Err(PrecoderError::Dimension(format!(
            "moments {:?}/{:?} do not match estimate {:?}",
            stats.mean.shape(),
            stats.second_moment.shape(),
            g_hat.shape()
        )));
    }
    Ok(())
}

fn check_precoder(g_hat: &DMatrix<Complex64>, v: &DMatrix<Complex64>) -> Result<()> {
    if v.shape() != g_hat.shape() {
        return Err(PrecoderError::Dimension(format!(
            "precoder {:?} does not match channel {:?}",
            v.shape(),
            g_hat.shape()
        )));
    }
    Ok(())
}

/// Expected MSE `E‖y − s‖²` of precoder `v` given the outdated estimate and
/// the moments of its error.
///
/// Expands `E{GGᴴ}` and `E{G}` through `G = Ĝ − G̃`:
/// `tr(VᴴĜĜᴴV) + tr(VᴴE{G̃G̃ᴴ}V) − 2Re tr(VᴴE{G̃}ĜᴴV) − 2Re tr(VᴴĜ) + 2Re tr(VᴴE{G̃}) + K(σ²+1)`.
pub fn mse_objective(
    v: &DMatrix<Complex64>,
    g_hat: &DMatrix<Complex64>,
    stats: &UncertaintyStats,
    noise_power: f64,
) -> Result<f64> {
    check_stats(g_hat, stats)?;
    check_precoder(g_hat, v)?;
    let k = g_hat.ncols() as f64;
    let vh = v.adjoint();
    let gh_v = g_hat.adjoint() * v;
    let signal = gh_v.norm_squared();
    let spread = (&vh * &stats.second_moment * v).trace().re;
    let cross = (&vh * &stats.mean * &gh_v).trace().re;
    let direct = (&vh * g_hat).trace().re;
    let bias = (&vh * &stats.mean).trace().re;
    Ok(signal + spread - 2.0 * cross - 2.0 * direct + 2.0 * bias + k * (noise_power + 1.0))
}

fn rows(m: &DMatrix<Complex64>, l: usize, block: usize) -> DMatrixView<'_, Complex64> {
    m.rows(l * block, block)
}

fn block_count(total_rows: usize, block: usize) -> Result<usize> {
    if block == 0 || !total_rows.is_multiple_of(block) {
        return Err(PrecoderError::Dimension(format!(
            "{total_rows} rows, block size {block}"
        )));
    }
    Ok(total_rows / block)
}

/// `A_l = Σ_i (Ĝ_lĜ_iᴴ + E{G̃_lG̃_iᴴ} − E{G̃_l}Ĝ_iᴴ − Ĝ_lE{G̃_i}ᴴ) V_i`, summed
/// over every satellite including `l`.
pub fn build_a_l(
    l: usize,
    block: usize,
    g_hat: &DMatrix<Complex64>,
    stats: &UncertaintyStats,
    v: &DMatrix<Complex64>,
) -> Result<DMatrix<Complex64>> {
    check_stats(g_hat, stats)?;
    check_precoder(g_hat, v)?;
    let sats = block_count(g_hat.nrows(), block)?;
    if l >= sats {
        return Err(PrecoderError::Dimension(format!("block {l} of {sats}")));
    }
    let g_l = rows(g_hat, l, block);
    let mu_l = rows(&stats.mean, l, block);
    let mut a = DMatrix::zeros(block, g_hat.ncols());
    for i in 0..sats {
        let g_i = rows(g_hat, i, block);
        let mu_i = rows(&stats.mean, i, block);
        let v_i = rows(v, i, block);
        let coupling = g_l * g_i.adjoint() + stats.block(l, i, block) - mu_l * g_i.adjoint() - g_l * mu_i.adjoint();
        a += coupling * v_i;
    }
    Ok(a)
}

/// Matrix inverted by the block update:
/// `Ĝ_lĜ_lᴴ + E{G̃_lG̃_lᴴ} − E{G̃_l}Ĝ_lᴴ − Ĝ_lE{G̃_l}ᴴ + λ_l I`.
pub fn system_matrix(
    l: usize,
    block: usize,
    g_hat: &DMatrix<Complex64>,
    stats: &UncertaintyStats,
    lambda: f64,
) -> Result<DMatrix<Complex64>> {
    check_stats(g_hat, stats)?;
    let sats = block_count(g_hat.nrows(), block)?;
    if l >= sats {
        return Err(PrecoderError::Dimension(format!("block {l} of {sats}")));
    }
    let g_l = rows(g_hat, l, block);
    let mu_l = rows(&stats.mean, l, block);
    let mut system = g_l * g_l.adjoint() + stats.block(l, l, block) - mu_l * g_l.adjoint() - g_l * mu_l.adjoint();
    for d in 0..block {
        system[(d, d)] += lambda;
    }
    Ok(system)
}

/// Closed-form minimiser over block `l` of `MSE(V) + λ_l tr(V_lV_lᴴ)` with the
/// other blocks of `v` held fixed.
pub fn update_v_l(
    l: usize,
    block: usize,
    g_hat: &DMatrix<Complex64>,
    stats: &UncertaintyStats,
    v: &DMatrix<Complex64>,
    lambda: f64,
) -> Result<DMatrix<Complex64>> {
    check_stats(g_hat, stats)?;
    check_precoder(g_hat, v)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(PrecoderError::InvalidMultiplier(lambda));
    }
    let sats = block_count(g_hat.nrows(), block)?;
    if l >= sats {
        return Err(PrecoderError::Dimension(format!("block {l} of {sats}")));
    }
    let system = system_matrix(l, block, g_hat, stats, lambda)?;
    let g_l = rows(g_hat, l, block);
    let mu_l = rows(&stats.mean, l, block);
    let mut rhs = g_l - mu_l;
    for i in (0..sats).filter(|&i| i != l) {
        let g_i = rows(g_hat, i, block);
        let mu_i = rows(&stats.mean, i, block);
        let v_i = rows(v, i, block);
        rhs -= (g_l * g_i.adjoint() + stats.block(l, i, block)) * v_i;
        rhs += (mu_l * g_i.adjoint() + g_l * mu_i.adjoint()) * v_i;
    }
    hermitian_solve(system, rhs, l)
}

fn hermitian_solve(mut system: DMatrix<Complex64>, rhs: DMatrix<Complex64>, l: usize) -> Result<DMatrix<Complex64>> {
    // Round-off can leave a tiny anti-Hermitian part; the factorisation only
    // reads the lower triangle, so symmetrise explicitly.
    let n = system.nrows();
    for r in 0..n {
        system[(r, r)].im = 0.0;
        for c in 0..r {
            let avg = (system[(r, c)] + system[(c, r)].conj()) * 0.5;
            system[(r, c)] = avg;
            system[(c, r)] = avg.conj();
        }
    }
    let chol: Cholesky<Complex64, Dyn> = Cholesky::new(system).ok_or(PrecoderError::Singular(l))?;
    Ok(chol.solve(&rhs))
}

/// Dual rule: gradient step when block `l` exceeds its budget, geometric decay
/// otherwise.
pub fn update_lambda(lambda: f64, block_power: f64, budget: f64, alpha: f64) -> f64 {
    if block_power > budget {
        lambda + alpha * (block_power - budget)
    } else {
        alpha * lambda
    }
}

/// `Σ_k log2(1 + |g_kᴴv_k|² / (Σ_{i≠k} |g_kᴴv_i|² + σ²))`.
pub fn sum_rate(g: &DMatrix<Complex64>, v: &DMatrix<Complex64>, noise_power: f64) -> f64 {
    assert_eq!(g.shape(), v.shape(), "channel and precoder shapes differ");
    let gains = g.adjoint() * v;
    let k = gains.nrows();
    (0..k)
        .map(|u| {
            let signal = gains[(u, u)].norm_sqr();
            if signal == 0.0 {
                return 0.0;
            }
            let interference: f64 = (0..k).filter(|&i| i != u).map(|i| gains[(u, i)].norm_sqr()).sum();
            (1.0 + signal / (interference + noise_power)).log2()
        })
        .sum()
}

/// Per-iteration operation count `L(13M²K + 4M² + 3(L−1)MK)`.
pub fn complexity_probe(l: u64, m: u64, k: u64) -> u64 {
    l * (13 * m * m * k + 4 * m * m + 3 * l.saturating_sub(1) * m * k)
}

// ============================================================================
// Alternating solver
// ============================================================================

/// `Q = ĜĜᴴ + E{G̃G̃ᴴ} − E{G̃}Ĝᴴ − ĜE{G̃}ᴴ` and `B = Ĝ − E{G̃}`, shared by all
/// block updates of a solve.
struct Curvature {
    q: DMatrix<Complex64>,
    b: DMatrix<Complex64>,
}

impl Curvature {
    fn new(g_hat: &DMatrix<Complex64>, stats: &UncertaintyStats) -> Self {
        let mu_gh = &stats.mean * g_hat.adjoint();
        let q = g_hat * g_hat.adjoint() + &stats.second_moment - &mu_gh - mu_gh.adjoint();
        Self {
            q,
            b: g_hat - &stats.mean,
        }
    }

    fn update_block(&self, l: usize, block: usize, v: &DMatrix<Complex64>, lambda: f64) -> Result<DMatrix<Complex64>> {
        let q_rows = self.q.rows(l * block, block);
        let q_ll = q_rows.columns(l * block, block);
        let mut system = q_ll.into_owned();
        for d in 0..block {
            system[(d, d)] += lambda;
        }
        let v_l = rows(v, l, block);
        let mut rhs = rows(&self.b, l, block).into_owned();
        rhs.gemm(-ONE, &q_rows, v, ONE);
        rhs.gemm(ONE, &q_ll, &v_l, ONE);
        hermitian_solve(system, rhs, l)
    }
}

/// Matched-filter start scaled so that every block meets its budget with
/// equality.
pub fn initial_precoder(g_hat: &DMatrix<Complex64>, budgets: &PowerBudget) -> Result<DMatrix<Complex64>> {
    let sats = budgets.len();
    let block = block_count(g_hat.nrows(), sats.max(1))?;
    if sats == 0 {
        return Err(PrecoderError::Dimension("no satellites".into()));
    }
    let mut v = g_hat.clone();
    for (l, &p) in budgets.limits().iter().enumerate() {
        let mut b = v.rows_mut(l * block, block);
        let power = b.norm_squared();
        if power > 0.0 {
            b.scale_mut((p / power).sqrt());
        }
    }
    Ok(v)
}

/// Alternating block updates with dual multipliers until the relative change
/// of `rate(V)` drops below the tolerance with every block within budget.
///
/// `rate` evaluates the stopping-rule sum rate; the controller only knows the
/// estimate, so callers normally pass `|v| sum_rate(Ĝ, v, σ²)`. When the
/// iteration cap is hit, blocks above budget are scaled back onto it.
pub fn robust_precode<F>(
    g_hat: &DMatrix<Complex64>,
    stats: &UncertaintyStats,
    budgets: &PowerBudget,
    rate: F,
    options: &SolverOptions,
) -> Result<(PrecodingMatrix, SolveReport)>
where
    F: Fn(&DMatrix<Complex64>) -> f64,
{
    options.validate()?;
    check_stats(g_hat, stats)?;
    let sats = budgets.len();
    if sats == 0 {
        return Err(PrecoderError::Dimension("no satellites".into()));
    }
    let block = block_count(g_hat.nrows(), sats)?;
    let curvature = Curvature::new(g_hat, stats);

    let mut v = initial_precoder(g_hat, budgets)?;
    let mut dual = DualState {
        lambdas: vec![options.initial_lambda; sats],
        alpha: options.alpha,
    };
    let mut rates = Vec::new();
    let mut converged = false;

    while rates.len() < options.max_iterations {
        for l in 0..sats {
            let v_l = curvature.update_block(l, block, &v, dual.lambdas[l])?;
            let power = v_l.norm_squared();
            v.rows_mut(l * block, block).copy_from(&v_l);
            dual.lambdas[l] = update_lambda(dual.lambdas[l], power, budgets.limits()[l], dual.alpha);
        }
        let current = rate(&v);
        let settled = rates
            .last()
            .is_some_and(|&prev: &f64| (current - prev).abs() < options.rate_tolerance * current);
        rates.push(current);
        let feasible = budgets
            .limits()
            .iter()
            .enumerate()
            .all(|(l, &p)| rows(&v, l, block).norm_squared() <= p * (1.0 + options.power_tolerance));
        if settled && feasible {
            converged = true;
            break;
        }
    }

    if !converged {
        // The dual rule gives no feasibility guarantee at the cap; scale
        // over-budget blocks back onto their budget.
        for (l, &p) in budgets.limits().iter().enumerate() {
            let power = rows(&v, l, block).norm_squared();
            if power > p * (1.0 + options.power_tolerance) {
                v.rows_mut(l * block, block).scale_mut((p / power).sqrt());
            }
        }
    }

    let precoder = PrecodingMatrix::new(v, block)?;
    let report = SolveReport {
        iterations: rates.len(),
        rates,
        converged,
        block_powers: precoder.block_powers(),
        lambdas: dual.lambdas,
    };
    Ok((precoder, report))
}

/// The same solver with the delay error assumed to be zero.
pub fn nonrobust_precode<F>(
    g_hat: &DMatrix<Complex64>,
    budgets: &PowerBudget,
    rate: F,
    options: &SolverOptions,
) -> Result<(PrecodingMatrix, SolveReport)>
where
    F: Fn(&DMatrix<Complex64>) -> f64,
{
    let zeros = UncertaintyStats::zeros(g_hat.nrows(), g_hat.ncols());
    robust_precode(g_hat, &zeros, budgets, rate, options)
}

/// Receive gain `c` under which the budget-limited MSE optimum is the
/// regularised precoder `Ĝ(ĜᴴĜ + ρI)⁻¹` with `ρ = Kσ²/ΣP_l`.
///
/// With unit symbols the MSE target ignores noise, so its minimiser depends on
/// the scale of `Ĝ`. Solving with `cĜ`, `c·G̃` moments and `c²σ²` leaves every
/// sum rate unchanged; choosing `c² = ‖Ĝ(ĜᴴĜ + ρI)⁻¹‖²_F / ΣP_l` makes the full
/// budget coincide with the noise-aware regularisation. Falls back to 1 for a
/// zero channel or non-positive noise.
pub fn receive_gain(g_hat: &DMatrix<Complex64>, budgets: &PowerBudget, noise: f64) -> f64 {
    let total: f64 = budgets.limits().iter().sum();
    let users = g_hat.ncols();
    if users == 0 || noise <= 0.0 || g_hat.norm_squared() == 0.0 {
        return 1.0;
    }
    let rho = users as f64 * noise / total;
    let gram = g_hat.adjoint() * g_hat + DMatrix::identity(users, users).scale(rho);
    let Ok(inverse_t) = hermitian_solve(gram, g_hat.adjoint(), 0) else {
        return 1.0;
    };
    let c = (inverse_t.norm_squared() / total).sqrt();
    if c.is_finite() && c > 0.0 {
        c
    } else {
        1.0
    }
}
