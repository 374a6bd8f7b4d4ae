//! Mean-square stability tests over a solved chain.
//!
//! All tests here are sufficient conditions. A loop that fails them is
//! reported as [`Verdict::NotGuaranteed`], never as unstable.

use alloc::vec::Vec;

use crate::chain::{ChainSolution, CrmConfig};
use crate::model::PlantModel;

/// Idle probabilities below this are treated as numerically zero when
/// estimating tail ratios.
pub const MASS_FLOOR: f64 = 1e-14;

/// Fraction of the usable delays, counted from the end, that forms the default tail window.
pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;

const MIN_TAIL_RATIOS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    GuaranteedStable,
    NotGuaranteed,
    /// Too little tail mass to estimate the limsup.
    Indeterminate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::GuaranteedStable => "GuaranteedStable",
            Verdict::NotGuaranteed => "NotGuaranteed",
            Verdict::Indeterminate => "Indeterminate",
        }
    }
}

/// Outcome of the tail-ratio test for one loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailRatio {
    pub limsup: f64,
    /// `1 / (1 + rho^2)`.
    pub bound: f64,
    /// `bound - limsup`; positive when the condition holds.
    pub margin: f64,
    pub verdict: Verdict,
    /// Delays `d` whose ratio `pi_(I,d+1) / pi_(I,d)` entered the estimate.
    pub window: (usize, usize),
}

/// Ratios `x[d+1] / x[d]` over the tail of a decaying sequence, and the
/// delay range they cover. `None` when too few usable entries exist.
/// `Some(0.0)` when the sequence hits exact zero.
fn tail_limsup(x: &[f64], tail_window: Option<usize>) -> Option<(f64, (usize, usize))> {
    let mut ratios = Vec::new();
    for d in 0..x.len().saturating_sub(1) {
        if x[d] <= MASS_FLOOR {
            break;
        }
        if x[d + 1] == 0.0 {
            return Some((0.0, (d, d)));
        }
        if x[d + 1] <= MASS_FLOOR {
            break;
        }
        ratios.push(x[d + 1] / x[d]);
    }
    if ratios.len() < MIN_TAIL_RATIOS {
        return None;
    }
    let n = ratios.len();
    let w = match tail_window {
        Some(w) => w.clamp(1, n),
        None => (libm::ceil(n as f64 * DEFAULT_TAIL_FRACTION) as usize).max(1),
    };
    let start = n - w;
    let limsup = ratios[start..].iter().copied().fold(0.0, f64::max);
    Some((limsup, (start, n - 1)))
}

/// Tail-ratio condition `limsup pi_(I,d+1) / pi_(I,d) < 1 / (1 + rho^2)` for loop `j`.
///
/// The limsup is the largest ratio over the last `tail_window` usable delays
/// (default: the last quarter of the delays whose idle mass exceeds [`MASS_FLOOR`]).
pub fn tail_ratio_condition(sol: &ChainSolution, j: usize, model: &PlantModel, tail_window: Option<usize>) -> TailRatio {
    let rho = model.rho();
    let bound = 1.0 / (1.0 + rho * rho);
    match tail_limsup(&sol.pi_i[j], tail_window) {
        Some((limsup, window)) => TailRatio {
            limsup,
            bound,
            margin: bound - limsup,
            verdict: if limsup < bound { Verdict::GuaranteedStable } else { Verdict::NotGuaranteed },
            window,
        },
        None => TailRatio { limsup: f64::NAN, bound, margin: f64::NAN, verdict: Verdict::Indeterminate, window: (0, 0) },
    }
}

/// Smallest reliability `pi_(I,0)` compatible with the tail-ratio condition: `rho^2 / (1 + rho^2)`.
pub fn reliability_lower_bound(rho: f64) -> f64 {
    let r2 = rho * rho;
    r2 / (1.0 + r2)
}

/// `(1 / p_alpha) rho^2 / (1 + rho^2)`.
pub fn kappa_alpha(rho: f64, p_alpha: f64) -> f64 {
    reliability_lower_bound(rho) / p_alpha
}

/// Constant-law stability test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantLawCheck {
    pub holds: bool,
    /// `p_gamma (1 - prod_r (1 - p_alpha q_r)) / p_alpha`.
    pub lhs: f64,
    /// `(1 / p_alpha) (1 - 1 / rho^2)`.
    pub rhs: f64,
    pub p_loss: f64,
}

impl ConstantLawCheck {
    pub fn margin(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// Constant-law condition, evaluated as `p_l rho^2 < 1` with
/// `p_l = 1 - p_gamma (1 - prod_r (1 - p_alpha,r q_r))`.
pub fn constant_law_condition(p_gamma: f64, crm: &CrmConfig, q_r: &[f64], rho: f64) -> ConstantLawCheck {
    let s = crm.delivery_probability(q_r);
    let p_loss = 1.0 - p_gamma * s;
    let lhs = p_gamma * s / crm.p_alpha();
    let rhs = if rho == 0.0 { f64::NEG_INFINITY } else { (1.0 - 1.0 / (rho * rho)) / crm.p_alpha() };
    ConstantLawCheck { holds: p_loss * rho * rho < 1.0, lhs, rhs, p_loss }
}

/// `tr P_d` of the worst-case error recursion `P_d = rho^2 P_{d-1} + tr Sigma_w`, `d = 0..=d_max`.
pub fn worst_case_traces(rho: f64, noise_trace: f64, d_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d_max + 1);
    let mut p = noise_trace;
    out.push(p);
    for _ in 0..d_max {
        p = rho * rho * p + noise_trace;
        out.push(p);
    }
    out
}

/// Upper bound `sum_d pi_(I,d) tr P_d` on the expected estimation-error
/// variance of loop `j`, or infinity when the terms do not decay
/// geometrically on the tail.
pub fn lossy_variance_bound(sol: &ChainSolution, j: usize, model: &PlantModel, d_max: usize) -> f64 {
    let pi = &sol.pi_i[j];
    let d_max = d_max.min(pi.len() - 1);
    let traces = worst_case_traces(model.rho(), model.noise_trace(), d_max);
    let terms: Vec<f64> = (0..=d_max).map(|d| pi[d] * traces[d]).collect();
    let head: f64 = terms.iter().sum();
    match tail_limsup(&pi[..=d_max], None) {
        None => head,
        Some((ratio_pi, (_, last))) => {
            // the weights grow at most by rho^2 per delay on the tail
            let growth = traces[last + 1] / traces[last];
            let r = ratio_pi * growth;
            if r >= 1.0 {
                f64::INFINITY
            } else {
                head + terms[d_max] * r / (1.0 - r)
            }
        }
    }
}

/// Full per-loop report.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub tail: TailRatio,
    /// Constant-law test, for loops running a constant policy.
    pub constant_law: Option<ConstantLawCheck>,
    pub reliability: f64,
    pub reliability_floor: f64,
    pub variance_bound: f64,
    pub kappa_alpha: f64,
}

/// Runs every applicable test on loop `j`. A constant-law loop is
/// guaranteed stable when either the tail test or the constant-law test holds.
pub fn analyze_loop(
    sol: &ChainSolution,
    j: usize,
    model: &PlantModel,
    crm: &CrmConfig,
    constant_p_gamma: Option<f64>,
    tail_window: Option<usize>,
) -> StabilityReport {
    let tail = tail_ratio_condition(sol, j, model, tail_window);
    let constant_law = constant_p_gamma.map(|pg| {
        let q: Vec<f64> = sol.p_r[j].iter().map(|p| 1.0 - p).collect();
        constant_law_condition(pg, crm, &q, model.rho())
    });
    let verdict = match (tail.verdict, constant_law) {
        (Verdict::GuaranteedStable, _) => Verdict::GuaranteedStable,
        (_, Some(c)) if c.holds => Verdict::GuaranteedStable,
        (_, Some(_)) => Verdict::NotGuaranteed,
        (v, None) => v,
    };
    StabilityReport {
        verdict,
        tail,
        constant_law,
        reliability: sol.reliability[j],
        reliability_floor: reliability_lower_bound(model.rho()),
        variance_bound: lossy_variance_bound(sol, j, model, sol.d_max()),
        kappa_alpha: kappa_alpha(model.rho(), crm.p_alpha()),
    }
}
