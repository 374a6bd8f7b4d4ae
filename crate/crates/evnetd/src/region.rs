//! `design-region`: constant-law stability regions over a `(p_gamma, p_alpha)` grid.

use anyhow::{ensure, Result};
use evnet_core::synthesis::{constant_law_fixed_point, default_axis, DesignPoint};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::output::{num, Output};

pub fn run(cfg: &ExperimentConfig, out: &Output) -> Result<Vec<(f64, usize)>> {
    ensure!(cfg.crm.per_attempt.is_none(), "design-region assumes one persistence probability for every attempt");
    let region = cfg.region.clone().unwrap_or_default();
    let rhos = match &region.rho {
        Some(r) => r.clone(),
        None => vec![cfg.first_plant()?.rho()],
    };
    let gamma = default_axis(region.gamma_points);
    let alpha = default_axis(region.alpha_points);
    let (m, r_max) = (cfg.m(), cfg.crm.r_max);
    let solver = cfg.numerics.solver();

    let mut w = out.csv("region.csv")?;
    w.write_record([
        "rho", "p_gamma", "p_alpha", "stable", "margin", "reliability", "p_loss", "p_agg", "converged", "residual", "iterations",
        "error",
    ])?;
    let mut counts = Vec::with_capacity(rhos.len());
    for &rho in &rhos {
        let cells: Vec<(f64, f64)> = gamma.iter().flat_map(|g| alpha.iter().map(move |a| (*g, *a))).collect();
        let points: Vec<std::result::Result<DesignPoint, String>> = cells
            .par_iter()
            .map(|&(g, a)| constant_law_fixed_point(g, a, m, r_max, rho, &solver).map_err(|e| e.to_string()))
            .collect();
        let mut stable = 0;
        for (&(g, a), p) in cells.iter().zip(&points) {
            let row = match p {
                Ok(p) => {
                    stable += usize::from(p.stable);
                    [
                        num(rho),
                        num(g),
                        num(a),
                        p.stable.to_string(),
                        num(p.margin),
                        num(p.reliability),
                        num(p.p_loss),
                        num(p.p_agg()),
                        p.converged.to_string(),
                        num(p.residual),
                        p.iterations.to_string(),
                        String::new(),
                    ]
                }
                Err(e) => {
                    let mut row: [String; 12] = Default::default();
                    row[0] = num(rho);
                    row[1] = num(g);
                    row[2] = num(a);
                    row[3] = "false".into();
                    row[11] = e.clone();
                    row
                }
            };
            w.write_record(&row)?;
        }
        out.say(format!("rho {rho}: {stable} of {} cells stable", cells.len()));
        counts.push((rho, stable));
    }
    w.flush()?;
    Ok(counts)
}
