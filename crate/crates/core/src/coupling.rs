//! Network solve for loops that trigger on fixed thresholds.
//!
//! With thresholds the event probability of each delay depends on the error
//! density, which in turn depends on how often events are delivered, so the
//! chain fixed point and the density evolution are iterated together: evolve
//! the densities under the current busy probability, solve the chain with the
//! realized event probabilities, update the busy probability, repeat.

use alloc::vec::Vec;

use crate::chain::{solve_network_fixed_point, ChainSolution, NetworkModel, SolverOptions};
use crate::density::{event_probabilities, DensityOptions};
use crate::error::{Error, Result};
use crate::model::TriggerPolicy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingOptions {
    pub solver: SolverOptions,
    pub density: DensityOptions,
    /// Delays whose event probability comes from the densities; deeper delays hold the last value.
    pub density_depth: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            density: DensityOptions { n_cells: 2048, cells_per_sigma: 16.0, ..DensityOptions::default() },
            density_depth: 120,
            tol: 1e-9,
            max_iter: 500,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub chain: ChainSolution,
    /// Realized `p_gamma,d`, `d = 1..=density_depth`, per loop.
    pub p_gamma: Vec<Vec<f64>>,
    /// Network with every policy's event probabilities filled in.
    pub resolved: NetworkModel,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves a network in which some loops only carry event thresholds.
/// Loops with event probabilities keep them.
pub fn solve_threshold_network(net: &NetworkModel, opts: &CouplingOptions) -> Result<CoupledSolution> {
    let m = net.len();
    let p_alpha = net.crm().p_alpha();
    let driven: Vec<bool> = net.loops().iter().map(|l| !l.policy.has_probabilities()).collect();
    let mut p_agg: Vec<f64> = alloc::vec![0.0; m];
    let mut residual = f64::INFINITY;
    let mut resolved = net.clone();
    let mut p_gamma: Vec<Vec<f64>> = alloc::vec![Vec::new(); m];

    for iteration in 1..=opts.max_iter {
        // identical loops under identical busy probabilities share one evolution
        let mut cache: Vec<(usize, Vec<f64>)> = Vec::new();
        for j in 0..m {
            let l = &net.loops()[j];
            if !driven[j] {
                p_gamma[j] = (1..=opts.density_depth).map(|d| l.policy.event_probability(d)).collect();
                continue;
            }
            let hit = cache.iter().find(|(i, _)| {
                let o = &net.loops()[*i];
                o.plant == l.plant && o.policy == l.policy && p_agg[*i] == p_agg[j]
            });
            let probs = match hit {
                Some((_, v)) => v.clone(),
                None => {
                    let thresholds = l.policy.thresholds().expect("threshold-driven loop has thresholds");
                    let v = event_probabilities(&l.plant, thresholds, p_alpha, p_agg[j], opts.density_depth, &opts.density)?;
                    cache.push((j, v.clone()));
                    v
                }
            };
            let policy = TriggerPolicy::table(probs.iter().map(|p| p.max(f64::MIN_POSITIVE)).collect())?
                .with_thresholds(l.policy.thresholds().unwrap().to_vec())?;
            resolved.loops_mut()[j].policy = policy;
            p_gamma[j] = probs;
        }
        let chain = solve_network_fixed_point(&resolved, &opts.solver)?;
        residual = 0.0;
        for j in 0..m {
            let step = chain.p_agg[j] - p_agg[j];
            residual = f64::max(residual, libm::fabs(step));
            p_agg[j] += opts.damping * step;
        }
        log::debug!("coupled iteration {iteration}: residual {residual:e}");
        if residual < opts.tol || !driven.iter().any(|d| *d) {
            return Ok(CoupledSolution { chain, p_gamma, resolved, iterations: iteration, residual });
        }
    }
    log::warn!("threshold network did not converge, residual {residual:e}");
    Err(Error::Convergence { iterations: opts.max_iter, residual })
}
