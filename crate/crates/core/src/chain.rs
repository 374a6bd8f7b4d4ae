//! Delay-indexed Markov chain of one loop's trigger/contention process and
//! the Bianchi fixed point that couples the loops of a network.
//!
//! Each loop sees the rest of the network only through the per-attempt busy
//! probabilities `p_r`. Given those, its idle-state distribution follows the
//! recursion
//!
//! ```text
//! pi_(I,d) = (1 - p_{gamma,d} s) pi_(I,d-1),     s = 1 - prod_r (1 - p_{alpha,r} q_r)
//! ```
//!
//! where `s` is the probability that an event is delivered within the
//! sampling period. The probability that a loop occupies the channel in
//! attempt `r` is `p_{alpha,r} prod_{s<r} (1 - p_{alpha,s} q_s)` times its
//! event mass, and the busy probability of attempt `r` seen by loop `j` is
//! `1 - prod_{i != j} (1 - T_{i,r})`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{PlantModel, TriggerPolicy};

/// p-persistent CSMA parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrmConfig {
    p_alpha: f64,
    r_max: usize,
    per_attempt_alpha: Option<Vec<f64>>,
}

impl CrmConfig {
    pub fn new(p_alpha: f64, r_max: usize) -> Result<Self> {
        if !(p_alpha > 0.0 && p_alpha <= 1.0) {
            return Err(Error::Parameter(format!("p_alpha must lie in (0, 1], got {p_alpha}")));
        }
        if r_max == 0 {
            return Err(Error::Parameter("r_max must be at least 1".into()));
        }
        Ok(Self { p_alpha, r_max, per_attempt_alpha: None })
    }

    /// Overrides the persistence probability of each attempt.
    pub fn with_per_attempt(mut self, alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() != self.r_max {
            return Err(Error::Parameter(format!(
                "per-attempt persistence table has {} entries, r_max is {}",
                alphas.len(),
                self.r_max
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Parameter(format!("per-attempt persistence must lie in (0, 1], got {a}")));
        }
        self.per_attempt_alpha = Some(alphas);
        Ok(self)
    }

    pub fn p_alpha(&self) -> f64 {
        self.p_alpha
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    /// Persistence probability of attempt `r` (0-based).
    pub fn alpha(&self, r: usize) -> f64 {
        match &self.per_attempt_alpha {
            Some(a) => a[r],
            None => self.p_alpha,
        }
    }

    /// Probability that a pending packet is delivered within the period,
    /// `1 - prod_r (1 - p_{alpha,r} q_r)`.
    pub fn delivery_probability(&self, q: &[f64]) -> f64 {
        debug_assert_eq!(q.len(), self.r_max);
        let mut fail = 1.0;
        for (r, &qr) in q.iter().enumerate() {
            fail *= 1.0 - self.alpha(r) * qr;
        }
        1.0 - fail
    }

    /// Probability of transmitting in each attempt for a loop that had an
    /// event: `p_{alpha,r} prod_{s<r} (1 - p_{alpha,s} q_s)`.
    pub fn attempt_weights(&self, q: &[f64]) -> Vec<f64> {
        debug_assert_eq!(q.len(), self.r_max);
        let mut pending = 1.0;
        let mut out = Vec::with_capacity(self.r_max);
        for (r, &qr) in q.iter().enumerate() {
            let a = self.alpha(r);
            out.push(a * pending);
            pending *= 1.0 - a * qr;
        }
        out
    }

    /// Aggregate busy probability `p = 1 - (1 - prod_r (1 - p_alpha q_r)) / p_alpha`.
    /// Negative when retransmissions deliver more often than one clean attempt would.
    pub fn aggregate_busy(&self, q: &[f64]) -> f64 {
        1.0 - self.delivery_probability(q) / self.p_alpha
    }
}

/// One control loop of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSpec {
    pub plant: PlantModel,
    pub policy: TriggerPolicy,
}

/// `M` loops sharing one CSMA channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    loops: Vec<LoopSpec>,
    crm: CrmConfig,
    d_max: usize,
    mass_tol: f64,
}

pub const DEFAULT_D_MAX: usize = 200;
pub const DEFAULT_MASS_TOL: f64 = 1e-6;

impl NetworkModel {
    pub fn new(loops: Vec<LoopSpec>, crm: CrmConfig, d_max: usize) -> Result<Self> {
        if loops.is_empty() {
            return Err(Error::Parameter("a network needs at least one loop".into()));
        }
        if d_max == 0 {
            return Err(Error::Parameter("D_max must be at least 1".into()));
        }
        Ok(Self { loops, crm, d_max, mass_tol: DEFAULT_MASS_TOL })
    }

    /// `m` identical loops.
    pub fn symmetric(m: usize, plant: PlantModel, policy: TriggerPolicy, crm: CrmConfig, d_max: usize) -> Result<Self> {
        let spec = LoopSpec { plant, policy };
        Self::new(vec![spec; m], crm, d_max)
    }

    /// Largest idle mass allowed beyond `D_max`.
    pub fn with_mass_tol(mut self, tol: f64) -> Self {
        self.mass_tol = tol;
        self
    }

    pub fn loops(&self) -> &[LoopSpec] {
        &self.loops
    }

    pub fn loops_mut(&mut self) -> &mut [LoopSpec] {
        &mut self.loops
    }

    pub fn crm(&self) -> &CrmConfig {
        &self.crm
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn mass_tol(&self) -> f64 {
        self.mass_tol
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }
}

/// Damped fixed-point iteration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the new iterate in each update.
    pub damping: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 10_000, damping: 0.5 }
    }
}

/// Steady state of every loop's chain at the converged busy probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSolution {
    /// `pi_(I,d)`, `d = 0..=D_max`, per loop.
    pub pi_i: Vec<Vec<f64>>,
    /// `pi_(T,d) = p_{gamma,d} p_alpha pi_(I,d-1)`, `d = 0..=D_max` (entry 0 is zero), per loop.
    pub pi_t: Vec<Vec<f64>>,
    /// Per-attempt busy probabilities `p_r`, per loop.
    pub p_r: Vec<Vec<f64>>,
    /// Aggregate busy probability, per loop.
    pub p_agg: Vec<f64>,
    /// Probability of delivering an event within a period, per loop.
    pub delivery: Vec<f64>,
    /// `pi_(I,0)`, per loop.
    pub reliability: Vec<f64>,
    /// `p_{l,d} = 1 - p_{gamma,d} p_alpha q`, `d = 1..=D_max`, per loop.
    pub p_loss: Vec<Vec<f64>>,
    /// Estimated idle mass beyond `D_max` before renormalization, per loop.
    pub mass_deficit: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl ChainSolution {
    pub fn len(&self) -> usize {
        self.pi_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi_i.is_empty()
    }

    pub fn d_max(&self) -> usize {
        self.pi_i.first().map_or(0, |v| v.len() - 1)
    }

    /// `1 - p_agg`, the effective complementary busy probability.
    pub fn q_eff(&self, j: usize) -> f64 {
        1.0 - self.p_agg[j]
    }
}

struct IdleChain {
    pi_i: Vec<f64>,
    pi_t: Vec<f64>,
    deficit: f64,
}

fn idle_chain(policy: &TriggerPolicy, p_alpha: f64, q: f64, d_max: usize) -> IdleChain {
    let mut pi_i = Vec::with_capacity(d_max + 1);
    pi_i.push(1.0);
    for d in 1..=d_max {
        let s = (policy.event_probability(d) * p_alpha * q).clamp(0.0, 1.0);
        let prev = pi_i[d - 1];
        pi_i.push((1.0 - s) * prev);
    }
    let total: f64 = pi_i.iter().sum();
    for v in pi_i.iter_mut() {
        *v /= total;
    }
    let last = pi_i[d_max];
    let deficit = if last == 0.0 {
        0.0
    } else {
        let s_next = (policy.event_probability(d_max + 1) * p_alpha * q).clamp(0.0, 1.0);
        let ratio = 1.0 - s_next;
        if ratio >= 1.0 {
            f64::INFINITY
        } else {
            last * ratio / (1.0 - ratio)
        }
    };
    let mut pi_t = Vec::with_capacity(d_max + 1);
    pi_t.push(0.0);
    for d in 1..=d_max {
        pi_t.push(policy.event_probability(d) * p_alpha * pi_i[d - 1]);
    }
    IdleChain { pi_i, pi_t, deficit }
}

/// `sum_{d=0}^{D_max} p_{gamma,d+1} pi_(I,d)`, the probability of an event in
/// an instant, without storing the chain.
fn idle_event_mass(policy: &TriggerPolicy, p_alpha: f64, q: f64, d_max: usize) -> f64 {
    let (mut pi, mut total, mut mass) = (1.0, 0.0, 0.0);
    for d in 0..=d_max {
        let p_gamma = policy.event_probability(d + 1);
        total += pi;
        mass += p_gamma * pi;
        pi *= 1.0 - (p_gamma * p_alpha * q).clamp(0.0, 1.0);
        if pi < f64::MIN_POSITIVE {
            break;
        }
    }
    mass / total
}

/// Normalized idle and transmission-state probabilities of one loop for a
/// fixed complementary busy probability `q`.
///
/// The per-delay delivery probability is `min(1, p_{gamma,d} p_alpha q)`, so
/// `q > 1` (an aggregate over retransmissions) is accepted.
pub fn idle_recursion(
    policy: &TriggerPolicy,
    p_alpha: f64,
    q: f64,
    d_max: usize,
    mass_tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let chain = idle_chain(policy, p_alpha, q, d_max);
    if chain.deficit > mass_tol {
        return Err(Error::Truncation { d_max, deficit: chain.deficit });
    }
    Ok((chain.pi_i, chain.pi_t))
}

/// Single-attempt busy probability of each loop:
/// `p_j = 1 - prod_{i != j} (1 - sum_d pi^i_(T,d))`.
pub fn busy_channel_no_retx(pi_t_sums: &[f64]) -> Vec<f64> {
    (0..pi_t_sums.len())
        .map(|j| {
            let mut free = 1.0;
            for (i, &t) in pi_t_sums.iter().enumerate() {
                if i != j {
                    free *= 1.0 - t;
                }
            }
            1.0 - free
        })
        .collect()
}

/// Per-attempt busy probabilities from per-loop, per-attempt transmission
/// probabilities, and the aggregate busy probability of each loop.
pub fn busy_channel_retx(per_attempt_t: &[Vec<f64>], crm: &CrmConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let m = per_attempt_t.len();
    let mut p_r = vec![vec![0.0; crm.r_max()]; m];
    for r in 0..crm.r_max() {
        let column: Vec<f64> = per_attempt_t.iter().map(|t| t[r]).collect();
        for (j, p) in busy_channel_no_retx(&column).into_iter().enumerate() {
            p_r[j][r] = p;
        }
    }
    let p_agg = p_r
        .iter()
        .map(|p| {
            let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
            crm.aggregate_busy(&q)
        })
        .collect();
    (p_r, p_agg)
}

/// Solves the coupled Bianchi fixed point of the network by damped iteration
/// on the per-attempt busy probabilities.
pub fn solve_network_fixed_point(net: &NetworkModel, opts: &SolverOptions) -> Result<ChainSolution> {
    for (j, l) in net.loops().iter().enumerate() {
        if !l.policy.has_probabilities() {
            return Err(Error::Configuration(format!(
                "loop {j} only has event thresholds; resolve its event probabilities first"
            )));
        }
    }
    let crm = net.crm();
    let m = net.len();
    let r_max = crm.r_max();
    let p_alpha = crm.p_alpha();
    let mut p_r = vec![vec![0.0; r_max]; m];
    let mut residual = f64::INFINITY;

    for iteration in 1..=opts.max_iter {
        let mut per_attempt_t: Vec<Vec<f64>> = Vec::with_capacity(m);
        for (j, l) in net.loops().iter().enumerate() {
            // symmetric networks stay symmetric, so most loops repeat an earlier one
            if let Some(i) = (0..j).find(|&i| p_r[i] == p_r[j] && net.loops()[i].policy == l.policy) {
                let row = per_attempt_t[i].clone();
                per_attempt_t.push(row);
                continue;
            }
            let q: Vec<f64> = p_r[j].iter().map(|p| 1.0 - p).collect();
            let q_eff = crm.delivery_probability(&q) / p_alpha;
            let event_mass = idle_event_mass(&l.policy, p_alpha, q_eff, net.d_max());
            let weights = crm.attempt_weights(&q);
            per_attempt_t.push(weights.iter().map(|w| w * event_mass).collect());
        }
        let (new_p_r, _) = busy_channel_retx(&per_attempt_t, crm);
        residual = 0.0;
        for j in 0..m {
            for r in 0..r_max {
                let step = new_p_r[j][r] - p_r[j][r];
                residual = f64::max(residual, libm::fabs(step));
                p_r[j][r] += opts.damping * step;
            }
        }
        if residual < opts.tol {
            return finish(net, p_r, residual, iteration);
        }
    }
    Err(Error::Convergence { iterations: opts.max_iter, residual })
}

fn finish(net: &NetworkModel, p_r: Vec<Vec<f64>>, residual: f64, iterations: usize) -> Result<ChainSolution> {
    let crm = net.crm();
    let p_alpha = crm.p_alpha();
    let d_max = net.d_max();
    let m = net.len();
    let mut sol = ChainSolution {
        pi_i: Vec::with_capacity(m),
        pi_t: Vec::with_capacity(m),
        p_r: Vec::with_capacity(m),
        p_agg: Vec::with_capacity(m),
        delivery: Vec::with_capacity(m),
        reliability: Vec::with_capacity(m),
        p_loss: Vec::with_capacity(m),
        mass_deficit: Vec::with_capacity(m),
        residual,
        iterations,
    };
    for (l, p) in net.loops().iter().zip(p_r) {
        let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let delivery = crm.delivery_probability(&q);
        let q_eff = delivery / p_alpha;
        let chain = idle_chain(&l.policy, p_alpha, q_eff, d_max);
        if chain.deficit > net.mass_tol() {
            return Err(Error::Truncation { d_max, deficit: chain.deficit });
        }
        let p_loss = (1..=d_max).map(|d| 1.0 - (l.policy.event_probability(d) * delivery).min(1.0)).collect();
        sol.reliability.push(chain.pi_i[0]);
        sol.pi_i.push(chain.pi_i);
        sol.pi_t.push(chain.pi_t);
        sol.p_agg.push(crm.aggregate_busy(&q));
        sol.p_r.push(p);
        sol.delivery.push(delivery);
        sol.p_loss.push(p_loss);
        sol.mass_deficit.push(chain.deficit);
    }
    Ok(sol)
}

/// Network steady state per loop: events get through with positive probability.
pub fn is_network_steady(sol: &ChainSolution) -> Vec<bool> {
    sol.delivery.iter().map(|&s| s > 0.0).collect()
}
