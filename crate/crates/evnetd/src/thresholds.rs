//! `thresholds`: event thresholds from density evolution, plus the densities.

use anyhow::{bail, ensure, Context, Result};
use evnet_core::density::{evolve, DensityEvolution, DensityGrid, TriggerSpec};
use evnet_core::model::PolicyFamily;
use evnet_core::synthesis::extract_thresholds;

use crate::analyze;
use crate::config::ExperimentConfig;
use crate::output::{num, Output};

pub fn run(cfg: &ExperimentConfig, out: &Output) -> Result<Vec<f64>> {
    let t = cfg.thresholds.clone().unwrap_or_default();
    let net = cfg.network()?;
    let plant = cfg.first_plant()?;
    ensure!(plant.is_scalar(), "thresholds need a scalar plant (density propagation is one-dimensional)");
    ensure!(
        net.loops().iter().all(|l| l.plant == plant && l.policy == net.loops()[0].policy),
        "thresholds need identical loops"
    );
    let policy = &net.loops()[0].policy;
    let p_alpha = cfg.crm.p_alpha;
    let density = cfg.numerics.density();

    // Either replay fixed thresholds, or design thresholds for target probabilities.
    let (evolution, busy): (DensityEvolution, f64) = match (policy.thresholds(), t.p_gamma, policy.family()) {
        (Some(th), None, _) if !policy.has_probabilities() => {
            let busy = match t.busy {
                Some(p) => p,
                None => analyze::solve(cfg, &net)?.0.p_agg[0],
            };
            (evolve(&plant, &TriggerSpec::Thresholds(th.to_vec()), p_alpha, busy, t.depth, &density)?, busy)
        }
        (_, target, family) => {
            let p_gamma: Vec<f64> = match (target, family) {
                (Some(p), _) => vec![p],
                (None, PolicyFamily::Constant { p_gamma }) => vec![p_gamma],
                (None, _) if policy.has_probabilities() => (1..=t.depth).map(|d| policy.event_probability(d)).collect(),
                _ => bail!("no design event probability: set thresholds.p_gamma"),
            };
            match t.busy {
                Some(busy) => (evolve(&plant, &TriggerSpec::Probabilities(p_gamma), p_alpha, busy, t.depth, &density)?, busy),
                None => {
                    ensure!(cfg.plant.is_some(), "designing thresholds from the network needs a shared [plant]");
                    let d = extract_thresholds(&plant, &p_gamma, p_alpha, cfg.m(), cfg.crm.r_max, t.depth, &cfg.numerics.solver(), &density)
                        .context("threshold extraction failed")?;
                    (d.evolution, d.p_agg)
                }
            }
        }
    };

    let mut w = out.csv("thresholds.csv")?;
    w.write_record(["d", "threshold", "p_gamma", "variance_prev", "aux_variance_prev"])?;
    for d in 1..=evolution.thresholds.len() {
        w.write_record([
            d.to_string(),
            num(evolution.thresholds[d - 1]),
            num(evolution.p_gamma_realized[d - 1]),
            num(evolution.variances[d - 1]),
            num(evolution.aux_variances[d - 1]),
        ])?;
    }
    w.flush()?;

    if t.densities {
        let mut w = out.csv("densities.csv")?;
        w.write_record(["d", "kind", "x", "density", "cdf"])?;
        for d in 0..evolution.idle.len() {
            write_density(&mut w, d, "idle", &evolution.idle[d])?;
            write_density(&mut w, d, "auxiliary", &evolution.auxiliary[d])?;
        }
        w.flush()?;
    }

    out.say(format!("aggregate busy-channel probability {busy:.6}"));
    for (d, th) in evolution.thresholds.iter().enumerate() {
        out.say(format!("d = {:>3}  threshold {th:.6}  p_gamma {:.6}", d + 1, evolution.p_gamma_realized[d]));
    }
    Ok(evolution.thresholds)
}

/// Rows at most this many per density; adjacent cells are merged beyond that.
const MAX_ROWS: usize = 2000;

/// Cell-averaged density over the bulk of the mass (far tails skipped), CDF at the same points.
fn write_density(w: &mut csv::Writer<std::fs::File>, d: usize, kind: &str, phi: &DensityGrid) -> Result<()> {
    let mass = phi.mass();
    let edges: Vec<f64> = phi.cdf_at_edges().iter().map(|c| c / mass).collect();
    let n = phi.n_cells();
    let first = edges.iter().position(|c| *c >= 1e-10).unwrap_or(1).saturating_sub(1);
    let last = edges.iter().rposition(|c| *c <= 1.0 - 1e-10).unwrap_or(n - 1).min(n - 1);
    let group = (last + 1 - first).div_ceil(MAX_ROWS).max(1);
    let h = phi.cell_width();
    let mut i = first;
    while i <= last {
        let j = (i + group).min(last + 1).min(n);
        let x = 0.5 * (phi.edge(i) + phi.edge(j));
        let density = (edges[j] - edges[i]) / ((j - i) as f64 * h);
        let cdf = 0.5 * (edges[i] + edges[j]);
        w.write_record([d.to_string(), kind.to_string(), num(x), num(density), num(cdf)])?;
        i = j;
    }
    Ok(())
}
