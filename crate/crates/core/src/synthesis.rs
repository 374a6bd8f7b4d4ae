//! Policy design: the constant-law fixed point and stability region,
//! additive and exponential families, and event-threshold extraction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::chain::{solve_network_fixed_point, CrmConfig, NetworkModel, SolverOptions};
use crate::density::{evolve, DensityEvolution, DensityOptions, TriggerSpec};
use crate::error::{Error, Result};
use crate::model::{PlantModel, TriggerPolicy};
use crate::stability::constant_law_condition;

pub(crate) fn check_additive(p_gamma_1: f64, eta: f64) -> Result<()> {
    if !(p_gamma_1 > 0.0 && p_gamma_1 < 1.0) {
        return Err(Error::Parameter(format!("p_gamma_1 must lie in (0, 1), got {p_gamma_1}")));
    }
    if !(libm::fabs(eta) < 1.0) {
        return Err(Error::Parameter(format!("additive law needs |eta| < 1, got {eta}")));
    }
    let limit = p_gamma_1 + eta / (1.0 - eta);
    if !(limit > 0.0 && limit < 1.0) {
        return Err(Error::Parameter(format!("additive law limit p_gamma_1 + eta / (1 - eta) = {limit} outside (0, 1)")));
    }
    // a negative eta makes the partial sums alternate; the second term is the smallest
    if p_gamma_1 + eta <= 0.0 {
        return Err(Error::Parameter(format!("additive law reaches p_gamma_2 = {} <= 0", p_gamma_1 + eta)));
    }
    Ok(())
}

pub(crate) fn check_exponential(p_gamma_1: f64, mu: f64) -> Result<()> {
    if !(p_gamma_1 > 0.0 && p_gamma_1 < 1.0) {
        return Err(Error::Parameter(format!("p_gamma_1 must lie in (0, 1), got {p_gamma_1}")));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Parameter(format!("exponential law needs 0 < mu < 1, got {mu}")));
    }
    Ok(())
}

/// `p_gamma,1 + eta (1 - eta^(d-1)) / (1 - eta)`.
pub(crate) fn additive_term(p_gamma_1: f64, eta: f64, d: usize) -> f64 {
    p_gamma_1 + eta * (1.0 - libm::pow(eta, (d - 1) as f64)) / (1.0 - eta)
}

/// `p_gamma,d = p_gamma,1 + eta + ... + eta^(d-1)` for `d = 1..=depth`.
pub fn additive_law(p_gamma_1: f64, eta: f64, depth: usize) -> Result<Vec<f64>> {
    check_additive(p_gamma_1, eta)?;
    let mut out = Vec::with_capacity(depth);
    let (mut p, mut power) = (p_gamma_1, 1.0);
    for _ in 0..depth {
        out.push(p);
        power *= eta;
        p += power;
    }
    Ok(out)
}

/// `p_gamma,d = p_gamma,1 mu^(d-1)` for `d = 1..=depth`.
pub fn exponential_law(p_gamma_1: f64, mu: f64, depth: usize) -> Result<Vec<f64>> {
    check_exponential(p_gamma_1, mu)?;
    let mut out = Vec::with_capacity(depth);
    let mut p = p_gamma_1;
    for _ in 0..depth {
        out.push(p);
        p *= mu;
    }
    Ok(out)
}

/// Solved constant-law design point.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPoint {
    pub p_gamma: f64,
    pub p_alpha: f64,
    /// `p_gamma (1 - prod_r (1 - p_alpha q_r))`.
    pub reliability: f64,
    pub p_loss: f64,
    pub stable: bool,
    /// Slack of the constant-law condition, positive when it holds.
    pub margin: f64,
    /// Busy probability of each attempt.
    pub p_r: Vec<f64>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

impl DesignPoint {
    /// Aggregate busy probability at this point.
    pub fn p_agg(&self) -> f64 {
        1.0 - (self.reliability / self.p_gamma) / self.p_alpha
    }
}

/// Right-hand side of the symmetric constant-law fixed point:
/// `p_r = 1 - (1 - p_gamma p_alpha prod_{s<r} (1 - p_alpha q_s))^(M-1)`.
fn constant_law_map(p_gamma: f64, p_alpha: f64, m: usize, p_r: &[f64], out: &mut [f64]) {
    let mut pending = 1.0;
    for (r, p) in p_r.iter().enumerate() {
        let t = p_gamma * p_alpha * pending;
        out[r] = 1.0 - libm::pow(1.0 - t, (m - 1) as f64);
        pending *= 1.0 - p_alpha * (1.0 - p);
    }
}

/// Symmetric constant-law network of `m` loops: damped fixed point on the
/// per-attempt busy probabilities, then reliability and the constant-law
/// stability test at spectral radius `rho`. Non-convergence is flagged on the
/// returned point, not raised.
pub fn constant_law_fixed_point(
    p_gamma: f64,
    p_alpha: f64,
    m: usize,
    r_max: usize,
    rho: f64,
    opts: &SolverOptions,
) -> Result<DesignPoint> {
    if !(p_gamma > 0.0 && p_gamma <= 1.0) {
        return Err(Error::Parameter(format!("p_gamma must lie in (0, 1], got {p_gamma}")));
    }
    let crm = CrmConfig::new(p_alpha, r_max)?;
    if m == 0 {
        return Err(Error::Parameter("a network needs at least one loop".into()));
    }
    let mut p_r = vec![0.0; r_max];
    let mut next = vec![0.0; r_max];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        constant_law_map(p_gamma, p_alpha, m, &p_r, &mut next);
        residual = p_r.iter().zip(&next).map(|(a, b)| libm::fabs(b - a)).fold(0.0, f64::max);
        if residual < opts.tol {
            converged = true;
            break;
        }
        for (p, n) in p_r.iter_mut().zip(&next) {
            *p += opts.damping * (n - *p);
        }
    }
    let q: Vec<f64> = p_r.iter().map(|p| 1.0 - p).collect();
    let check = constant_law_condition(p_gamma, &crm, &q, rho);
    let reliability = p_gamma * crm.delivery_probability(&q);
    Ok(DesignPoint {
        p_gamma,
        p_alpha,
        reliability,
        p_loss: 1.0 - reliability,
        stable: converged && check.holds,
        margin: check.margin(),
        p_r,
        converged,
        residual,
        iterations,
    })
}

/// `k / n` for `k = 1..=n`; with `n = 50` this is the grid `0.02, 0.04, ..., 1`.
pub fn default_axis(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / n as f64).collect()
}

/// Design points over a `p_gamma` by `p_alpha` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub gamma_axis: Vec<f64>,
    pub alpha_axis: Vec<f64>,
    /// Row-major, `points[i * alpha_axis.len() + j]` at `(gamma_axis[i], alpha_axis[j])`.
    pub points: Vec<DesignPoint>,
}

fn check_axis(name: &str, axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Parameter(format!("{name} axis is empty")));
    }
    if axis.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
        return Err(Error::Parameter(format!("{name} axis must lie in (0, 1]")));
    }
    if axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Parameter(format!("{name} axis must be strictly increasing")));
    }
    Ok(())
}

impl RegionMap {
    /// Assembles a map from points solved elsewhere (for example in parallel).
    pub fn from_points(gamma_axis: Vec<f64>, alpha_axis: Vec<f64>, points: Vec<DesignPoint>) -> Result<Self> {
        check_axis("p_gamma", &gamma_axis)?;
        check_axis("p_alpha", &alpha_axis)?;
        if points.len() != gamma_axis.len() * alpha_axis.len() {
            return Err(Error::Dimension(format!(
                "{} points for a {}x{} grid",
                points.len(),
                gamma_axis.len(),
                alpha_axis.len()
            )));
        }
        Ok(Self { gamma_axis, alpha_axis, points })
    }

    pub fn point(&self, i: usize, j: usize) -> &DesignPoint {
        &self.points[i * self.alpha_axis.len() + j]
    }

    /// Point nearest to `(p_gamma, p_alpha)`.
    pub fn nearest(&self, p_gamma: f64, p_alpha: f64) -> &DesignPoint {
        let closest = |axis: &[f64], v: f64| {
            (0..axis.len()).min_by(|&a, &b| libm::fabs(axis[a] - v).total_cmp(&libm::fabs(axis[b] - v))).unwrap()
        };
        self.point(closest(&self.gamma_axis, p_gamma), closest(&self.alpha_axis, p_alpha))
    }

    pub fn stable_count(&self) -> usize {
        self.points.iter().filter(|p| p.stable).count()
    }

    pub fn non_converged(&self) -> usize {
        self.points.iter().filter(|p| !p.converged).count()
    }
}

/// Solves every grid point sequentially.
pub fn scan_region(
    gamma_axis: &[f64],
    alpha_axis: &[f64],
    m: usize,
    r_max: usize,
    rho: f64,
    opts: &SolverOptions,
) -> Result<RegionMap> {
    check_axis("p_gamma", gamma_axis)?;
    check_axis("p_alpha", alpha_axis)?;
    let mut points = Vec::with_capacity(gamma_axis.len() * alpha_axis.len());
    for &g in gamma_axis {
        for &a in alpha_axis {
            points.push(constant_law_fixed_point(g, a, m, r_max, rho, opts)?);
        }
    }
    RegionMap::from_points(gamma_axis.to_vec(), alpha_axis.to_vec(), points)
}

/// Thresholds realizing a target event-probability sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdDesign {
    /// `Delta_1..=Delta_D`; later delays hold `Delta_D`.
    pub thresholds: Vec<f64>,
    /// Aggregate busy probability the densities were evolved under.
    pub p_agg: f64,
    pub reliability: f64,
    pub evolution: DensityEvolution,
}

/// Solves the symmetric network for its busy probability, then evolves the
/// idle densities and picks at every delay the threshold whose tail mass is
/// the target `p_gamma,d`.
#[allow(clippy::too_many_arguments)]
pub fn extract_thresholds(
    model: &PlantModel,
    p_gamma: &[f64],
    p_alpha: f64,
    m: usize,
    r_max: usize,
    depth: usize,
    solver: &SolverOptions,
    density: &DensityOptions,
) -> Result<ThresholdDesign> {
    if depth == 0 {
        return Err(Error::Parameter("threshold depth must be at least 1".into()));
    }
    let policy = TriggerPolicy::table(p_gamma.to_vec())?;
    let crm = CrmConfig::new(p_alpha, r_max)?;
    let net = NetworkModel::symmetric(m, model.clone(), policy, crm, crate::chain::DEFAULT_D_MAX)?;
    let sol = solve_network_fixed_point(&net, solver)?;
    let p_agg = sol.p_agg[0];
    let evolution = evolve(model, &TriggerSpec::Probabilities(p_gamma.to_vec()), p_alpha, p_agg, depth, density)?;
    if let Some(d) = evolution.thresholds.iter().position(|t| *t <= 0.0) {
        return Err(Error::Degenerate(format!("event probability one at delay {} gives no positive threshold", d + 1)));
    }
    Ok(ThresholdDesign { thresholds: evolution.thresholds.clone(), p_agg, reliability: sol.reliability[0], evolution })
}
