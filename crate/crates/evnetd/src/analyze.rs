//! `analyze`: chain fixed point and stability verdicts.

use anyhow::Result;
use evnet_core::chain::{solve_network_fixed_point, ChainSolution, NetworkModel};
use evnet_core::coupling::solve_threshold_network;
use evnet_core::stability::{analyze_loop, StabilityReport, Verdict};

use crate::config::ExperimentConfig;
use crate::output::{num, opt, Output};

/// Solves the chain, resolving threshold-only loops through the density engine.
pub fn solve(cfg: &ExperimentConfig, net: &NetworkModel) -> Result<(ChainSolution, NetworkModel)> {
    if net.loops().iter().all(|l| l.policy.has_probabilities()) {
        Ok((solve_network_fixed_point(net, &cfg.numerics.solver())?, net.clone()))
    } else {
        let s = solve_threshold_network(net, &cfg.numerics.coupling())?;
        Ok((s.chain, s.resolved))
    }
}

/// True when every loop is guaranteed stable.
pub fn run(cfg: &ExperimentConfig, out: &Output) -> Result<bool> {
    let net = cfg.network()?;
    let (sol, resolved) = solve(cfg, &net)?;
    let reports: Vec<StabilityReport> = (0..net.len())
        .map(|j| {
            let plant = &resolved.loops()[j].plant;
            analyze_loop(&sol, j, plant, net.crm(), cfg.constant_p_gamma(&net, j), cfg.numerics.tail_window)
        })
        .collect();

    let mut w = out.csv("chain.csv")?;
    w.write_record(["loop", "d", "pi_idle", "pi_transmit", "p_loss"])?;
    for j in 0..sol.len() {
        for d in 0..=sol.d_max() {
            let p_loss = if d == 0 { String::new() } else { num(sol.p_loss[j][d - 1]) };
            w.write_record([j.to_string(), d.to_string(), num(sol.pi_i[j][d]), num(sol.pi_t[j][d]), p_loss])?;
        }
    }
    w.flush()?;

    let mut w = out.csv("busy.csv")?;
    w.write_record(["loop", "attempt", "p_busy"])?;
    for (j, row) in sol.p_r.iter().enumerate() {
        for (r, p) in row.iter().enumerate() {
            w.write_record([j.to_string(), (r + 1).to_string(), num(*p)])?;
        }
    }
    w.flush()?;

    let mut w = out.csv("report.csv")?;
    w.write_record([
        "loop",
        "verdict",
        "reliability",
        "reliability_floor",
        "p_agg",
        "delivery",
        "mass_deficit",
        "tail_limsup",
        "tail_bound",
        "tail_margin",
        "tail_verdict",
        "constant_law_holds",
        "constant_law_lhs",
        "constant_law_rhs",
        "variance_bound",
        "kappa_alpha",
    ])?;
    for (j, r) in reports.iter().enumerate() {
        let c = r.constant_law.as_ref();
        w.write_record([
            j.to_string(),
            r.verdict.as_str().to_string(),
            num(r.reliability),
            num(r.reliability_floor),
            num(sol.p_agg[j]),
            num(sol.delivery[j]),
            num(sol.mass_deficit[j]),
            num(r.tail.limsup),
            num(r.tail.bound),
            num(r.tail.margin),
            r.tail.verdict.as_str().to_string(),
            c.map(|c| c.holds.to_string()).unwrap_or_default(),
            opt(c.map(|c| c.lhs)),
            opt(c.map(|c| c.rhs)),
            num(r.variance_bound),
            num(r.kappa_alpha),
        ])?;
    }
    w.flush()?;

    out.say(format!("fixed point: {} iterations, residual {:.2e}", sol.iterations, sol.residual));
    for (j, r) in reports.iter().enumerate() {
        out.say(format!(
            "loop {j}: {:<16} reliability {:.4}  tail ratio {:.4} (bound {:.4})",
            r.verdict.as_str(),
            r.reliability,
            r.tail.limsup,
            r.tail.bound
        ));
    }
    Ok(reports.iter().all(|r| r.verdict == Verdict::GuaranteedStable))
}
