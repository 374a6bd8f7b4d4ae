//! `simulate`: Monte Carlo runs, optionally over several network sizes.

use anyhow::{Context, Result};
use evnet_core::simulate::{empirical_stats, run_network, LoopStats, SimConfig, SimTrace};
use rayon::prelude::*;

use crate::analyze;
use crate::config::ExperimentConfig;
use crate::output::{num, opt, Output};

pub struct SizeRun {
    pub m: usize,
    pub trace: SimTrace,
    pub stats: Vec<LoopStats>,
    /// Analytic reliability per loop, when the chain could be solved.
    pub analytic: Option<Vec<f64>>,
}

pub fn run(cfg: &ExperimentConfig, seed_override: Option<u64>, out: &Output) -> Result<Vec<SizeRun>> {
    let sim = cfg.simulate.as_ref().context("missing [simulate] section")?;
    let seed = seed_override.unwrap_or(sim.seed);
    let sizes = sim.sweep.clone().unwrap_or_else(|| vec![cfg.m()]);

    let runs: Vec<SizeRun> = sizes
        .par_iter()
        .map(|&m| -> Result<SizeRun> {
            let net = cfg.network_of_size(m)?;
            let analytic = match analyze::solve(cfg, &net) {
                Ok((sol, _)) => Some(sol.reliability),
                Err(e) => {
                    log::warn!("M = {m}: no analytic reliability ({e:#})");
                    None
                }
            };
            let trace = run_network(&SimConfig { net, horizon: sim.horizon, seed, record_states: sim.record_states })?;
            let stats = empirical_stats(&trace, sim.d_bins);
            Ok(SizeRun { m, trace, stats, analytic })
        })
        .collect::<Result<_>>()?;

    let mut w = out.csv("summary.csv")?;
    w.write_record([
        "m",
        "loop",
        "instants",
        "events",
        "delivered",
        "collided",
        "suppressed",
        "dropped",
        "reliability",
        "reliability_analytic",
        "reliability_sigma",
        "mean_sq_state",
        "diverged_at",
        "collisions",
    ])?;
    for r in &runs {
        for (j, s) in r.stats.iter().enumerate() {
            let analytic = r.analytic.as_ref().map(|a| a[j]);
            w.write_record([
                r.m.to_string(),
                j.to_string(),
                s.instants.to_string(),
                s.events.to_string(),
                s.delivered.to_string(),
                s.collided.to_string(),
                s.suppressed.to_string(),
                s.dropped.to_string(),
                num(s.reliability()),
                opt(analytic),
                opt(analytic.map(|p| s.reliability_sigma(p))),
                num(s.mean_sq_state),
                r.trace.diverged_at.map(|k| k.to_string()).unwrap_or_default(),
                r.trace.collisions.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = out.csv("p_gamma.csv")?;
    w.write_record(["m", "loop", "d", "visits", "events", "p_gamma", "low_confidence"])?;
    for r in &runs {
        for (j, s) in r.stats.iter().enumerate() {
            for b in &s.p_gamma {
                let p = if b.visits == 0 { String::new() } else { num(b.p_gamma()) };
                w.write_record([r.m.to_string(), j.to_string(), b.d.to_string(), b.visits.to_string(), b.events.to_string(), p, b.low_confidence.to_string()])?;
            }
        }
    }
    w.flush()?;

    let mut w = out.csv("running_mean.csv")?;
    w.write_record(["m", "loop", "instant", "mean_sq_state"])?;
    for r in &runs {
        for (j, l) in r.trace.loops.iter().enumerate() {
            for (k, v) in &l.running_mean {
                w.write_record([r.m.to_string(), j.to_string(), k.to_string(), num(*v)])?;
            }
        }
    }
    w.flush()?;

    if sim.record_states {
        let mut w = out.csv("states.csv")?;
        w.write_record(["m", "instant", "loop", "component", "x", "xhat", "gamma", "delta", "d"])?;
        for r in &runs {
            for k in 0..r.trace.instants {
                for (j, l) in r.trace.loops.iter().enumerate() {
                    let n = r.trace.state_dims[j];
                    for c in 0..n {
                        w.write_record([
                            r.m.to_string(),
                            k.to_string(),
                            j.to_string(),
                            c.to_string(),
                            num(l.x[k * n + c]),
                            num(l.xhat[k * n + c]),
                            u8::from(l.gamma(k)).to_string(),
                            u8::from(l.delta(k)).to_string(),
                            l.d[k].to_string(),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
    }

    for r in &runs {
        let diverged = match r.trace.diverged_at {
            Some(k) => format!("  diverged at instant {k}"),
            None => String::new(),
        };
        out.say(format!("M = {}: {} instants{diverged}", r.m, r.trace.instants));
        for (j, s) in r.stats.iter().enumerate() {
            let analytic = match &r.analytic {
                Some(a) => format!("{:.4} (3 sigma {:.4})", a[j], 3.0 * s.reliability_sigma(a[j])),
                None => "n/a".into(),
            };
            out.say(format!("  loop {j}: reliability {:.4}, analytic {analytic}, mean x'x {:.4e}", s.reliability(), s.mean_sq_state));
        }
    }
    Ok(runs)
}
