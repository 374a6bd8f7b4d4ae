//! Experiment configuration files (TOML).
//!
//! Unknown keys are rejected everywhere so a misspelt probability name fails
//! loudly instead of silently falling back to a default.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use evnet_core::chain::{CrmConfig, LoopSpec, NetworkModel, SolverOptions};
use evnet_core::coupling::CouplingOptions;
use evnet_core::density::DensityOptions;
use evnet_core::model::{default_gain, PlantModel, PolicyFamily, TriggerPolicy};
use nalgebra::DMatrix;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSection,
    /// Plant shared by all loops; alternative to `[[loop]]`.
    pub plant: Option<PlantSection>,
    #[serde(default, rename = "loop")]
    pub loops: Vec<LoopSection>,
    pub crm: CrmSection,
    pub policy: Option<PolicySection>,
    #[serde(default)]
    pub numerics: NumericsSection,
    pub region: Option<RegionSection>,
    pub thresholds: Option<ThresholdsSection>,
    pub simulate: Option<SimulateSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Number of loops `M`. Required with `[plant]`, optional with `[[loop]]`.
    pub loops: Option<usize>,
}

/// A scalar or a matrix given as a list of rows.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Matrix {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl Matrix {
    fn to_dmatrix(&self, what: &str) -> Result<DMatrix<f64>> {
        match self {
            Matrix::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            Matrix::Rows(rows) => {
                ensure!(!rows.is_empty() && !rows[0].is_empty(), "{what} must not be empty");
                let cols = rows[0].len();
                ensure!(rows.iter().all(|r| r.len() == cols), "{what}: rows have different lengths");
                Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    /// Only `"deadbeat"` is accepted.
    Named(String),
    Matrix(Matrix),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub a: Matrix,
    pub b: Matrix,
    /// Process noise covariance.
    pub sigma_w: Matrix,
    /// Initial state covariance; defaults to `sigma_w`.
    pub r0: Option<Matrix>,
    pub gain: Option<Gain>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub a: Matrix,
    pub b: Matrix,
    pub sigma_w: Matrix,
    pub r0: Option<Matrix>,
    pub gain: Option<Gain>,
    /// Overrides the top-level `[policy]` for this loop.
    pub policy: Option<PolicySection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrmSection {
    pub p_alpha: f64,
    pub r_max: usize,
    /// Persistence probability per attempt, overriding `p_alpha` attempt by attempt.
    pub per_attempt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySection {
    Constant { p_gamma: f64 },
    Additive { p_gamma_1: f64, eta: f64 },
    Exponential { p_gamma_1: f64, mu: f64 },
    Table { p_gamma: Vec<f64> },
    Thresholds { thresholds: Vec<f64> },
}

impl PolicySection {
    pub fn build(&self) -> Result<TriggerPolicy> {
        let p = match self {
            PolicySection::Constant { p_gamma } => TriggerPolicy::constant(*p_gamma),
            PolicySection::Additive { p_gamma_1, eta } => TriggerPolicy::additive(*p_gamma_1, *eta),
            PolicySection::Exponential { p_gamma_1, mu } => TriggerPolicy::exponential(*p_gamma_1, *mu),
            PolicySection::Table { p_gamma } => TriggerPolicy::table(p_gamma.clone()),
            PolicySection::Thresholds { thresholds } => TriggerPolicy::from_thresholds(thresholds.clone()),
        };
        p.context("invalid [policy]")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSection {
    pub d_max: usize,
    pub mass_tol: f64,
    pub solver_tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    /// Delays in the tail-ratio window; default is the last quarter with mass.
    pub tail_window: Option<usize>,
    pub grid_cells: usize,
    pub cells_per_sigma: f64,
    pub max_cells: usize,
    pub drop_tol: f64,
    pub support_tol: f64,
    /// Delays whose event probability comes from density evolution when
    /// loops only carry thresholds.
    pub density_depth: usize,
    pub coupling_tol: f64,
    pub coupling_max_iter: usize,
}

impl Default for NumericsSection {
    fn default() -> Self {
        let solver = SolverOptions::default();
        let density = DensityOptions::default();
        let coupling = CouplingOptions::default();
        Self {
            d_max: evnet_core::chain::DEFAULT_D_MAX,
            mass_tol: 1e-6,
            solver_tol: solver.tol,
            max_iter: solver.max_iter,
            damping: solver.damping,
            tail_window: None,
            grid_cells: density.n_cells,
            cells_per_sigma: density.cells_per_sigma,
            max_cells: density.max_cells,
            drop_tol: density.drop_tol,
            support_tol: density.support_tol,
            density_depth: coupling.density_depth,
            coupling_tol: coupling.tol,
            coupling_max_iter: coupling.max_iter,
        }
    }
}

impl NumericsSection {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions { tol: self.solver_tol, max_iter: self.max_iter, damping: self.damping }
    }

    pub fn density(&self) -> DensityOptions {
        DensityOptions {
            n_cells: self.grid_cells,
            cells_per_sigma: self.cells_per_sigma,
            max_cells: self.max_cells,
            drop_tol: self.drop_tol,
            support_tol: self.support_tol,
        }
    }

    pub fn coupling(&self) -> CouplingOptions {
        CouplingOptions {
            solver: self.solver(),
            density: self.density(),
            density_depth: self.density_depth,
            tol: self.coupling_tol,
            max_iter: self.coupling_max_iter,
            damping: self.damping,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.d_max >= 1, "numerics.d_max must be at least 1");
        ensure!(self.mass_tol > 0.0, "numerics.mass_tol must be positive");
        ensure!(self.solver_tol > 0.0 && self.coupling_tol > 0.0, "solver tolerances must be positive");
        ensure!(self.damping > 0.0 && self.damping <= 1.0, "numerics.damping must lie in (0, 1]");
        ensure!(self.max_iter >= 1 && self.coupling_max_iter >= 1, "iteration limits must be at least 1");
        ensure!(self.grid_cells >= 2 && self.max_cells >= self.grid_cells, "need 2 <= grid_cells <= max_cells");
        ensure!(self.cells_per_sigma > 0.0, "numerics.cells_per_sigma must be positive");
        ensure!(self.density_depth >= 1, "numerics.density_depth must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSection {
    pub gamma_points: usize,
    pub alpha_points: usize,
    /// Spectral radii to sweep; defaults to the plant's.
    pub rho: Option<Vec<f64>>,
}

impl Default for RegionSection {
    fn default() -> Self {
        Self { gamma_points: 50, alpha_points: 50, rho: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdsSection {
    /// Number of thresholds `D`.
    pub depth: usize,
    /// Design event probability; defaults to the constant policy's.
    pub p_gamma: Option<f64>,
    /// Busy-channel probability override; otherwise solved from the network.
    pub busy: Option<f64>,
    /// Also write the per-delay density and CDF tables.
    pub densities: bool,
}

impl Default for ThresholdsSection {
    fn default() -> Self {
        Self { depth: 12, p_gamma: None, busy: None, densities: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_states: bool,
    /// Network sizes to run, each with identical loops; defaults to `network.loops`.
    pub sweep: Option<Vec<usize>>,
    #[serde(default = "default_d_bins")]
    pub d_bins: usize,
}

fn default_d_bins() -> usize {
    12
}

fn plant_model(a: &Matrix, b: &Matrix, sigma_w: &Matrix, r0: Option<&Matrix>, gain: Option<&Gain>) -> Result<PlantModel> {
    let a = a.to_dmatrix("a")?;
    let b = b.to_dmatrix("b")?;
    let rw = sigma_w.to_dmatrix("sigma_w")?;
    let r0 = match r0 {
        Some(m) => m.to_dmatrix("r0")?,
        None => rw.clone(),
    };
    let l = match gain {
        None => default_gain(&a, &b)?,
        Some(Gain::Named(n)) if n == "deadbeat" => default_gain(&a, &b)?,
        Some(Gain::Named(n)) => bail!("unknown gain {n:?}; use \"deadbeat\" or a matrix"),
        Some(Gain::Matrix(m)) => m.to_dmatrix("gain")?,
    };
    Ok(PlantModel::new(a, b, r0, rw, l)?)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        match (&self.plant, self.loops.is_empty()) {
            (Some(_), false) => bail!("give either [plant] or [[loop]] entries, not both"),
            (None, true) => bail!("missing [plant] or [[loop]] entries"),
            (Some(_), true) => ensure!(self.network.loops.is_some(), "network.loops is required with [plant]"),
            (None, false) => {
                if let Some(m) = self.network.loops {
                    ensure!(m == self.loops.len(), "network.loops = {m} but {} [[loop]] entries", self.loops.len());
                }
            }
        }
        ensure!(self.network.loops != Some(0), "network.loops must be at least 1");
        self.crm()?;
        self.numerics.validate()?;
        if let Some(p) = &self.policy {
            p.build()?;
        }
        for (j, l) in self.loops.iter().enumerate() {
            ensure!(l.policy.is_some() || self.policy.is_some(), "loop {j} has no policy and there is no [policy]");
            if let Some(p) = &l.policy {
                p.build().with_context(|| format!("loop {j}"))?;
            }
        }
        if let Some(r) = &self.region {
            ensure!(r.gamma_points >= 1 && r.alpha_points >= 1, "region grid needs at least one point per axis");
            if let Some(rho) = &r.rho {
                ensure!(!rho.is_empty() && rho.iter().all(|v| *v >= 0.0 && v.is_finite()), "region.rho must be non-negative");
            }
        }
        if let Some(t) = &self.thresholds {
            ensure!(t.depth >= 1, "thresholds.depth must be at least 1");
            if let Some(p) = t.p_gamma {
                ensure!(p > 0.0 && p <= 1.0, "thresholds.p_gamma must lie in (0, 1], got {p}");
            }
            if let Some(p) = t.busy {
                ensure!(p.is_finite() && p <= 1.0, "thresholds.busy must be at most 1, got {p}");
            }
        }
        if let Some(s) = &self.simulate {
            ensure!(s.horizon >= 1, "simulate.horizon must be at least 1");
            ensure!(s.d_bins >= 1, "simulate.d_bins must be at least 1");
            if let Some(sweep) = &s.sweep {
                ensure!(self.plant.is_some(), "simulate.sweep needs a shared [plant]");
                ensure!(!sweep.is_empty() && sweep.iter().all(|m| *m >= 1), "simulate.sweep entries must be at least 1");
            }
        }
        Ok(())
    }

    pub fn crm(&self) -> Result<CrmConfig> {
        let crm = CrmConfig::new(self.crm.p_alpha, self.crm.r_max).context("invalid [crm]")?;
        match &self.crm.per_attempt {
            Some(a) => Ok(crm.with_per_attempt(a.clone()).context("invalid crm.per_attempt")?),
            None => Ok(crm),
        }
    }

    /// Number of loops.
    pub fn m(&self) -> usize {
        self.network.loops.unwrap_or(self.loops.len())
    }

    /// Plant of loop 0, or the shared plant.
    pub fn first_plant(&self) -> Result<PlantModel> {
        Ok(self.loop_specs(1)?.remove(0).plant)
    }

    fn loop_specs(&self, m: usize) -> Result<Vec<LoopSpec>> {
        if let Some(p) = &self.plant {
            let plant = plant_model(&p.a, &p.b, &p.sigma_w, p.r0.as_ref(), p.gain.as_ref()).context("invalid [plant]")?;
            let policy = self.policy.as_ref().context("missing [policy]")?.build()?;
            return Ok(vec![LoopSpec { plant, policy }; m]);
        }
        self.loops
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let plant = plant_model(&l.a, &l.b, &l.sigma_w, l.r0.as_ref(), l.gain.as_ref()).with_context(|| format!("invalid loop {j}"))?;
                let policy = l.policy.as_ref().or(self.policy.as_ref()).expect("validated").build()?;
                Ok(LoopSpec { plant, policy })
            })
            .collect()
    }

    pub fn network(&self) -> Result<NetworkModel> {
        self.network_of_size(self.m())
    }

    /// The network with `m` identical loops (shared plant) or as listed.
    pub fn network_of_size(&self, m: usize) -> Result<NetworkModel> {
        let net = NetworkModel::new(self.loop_specs(m)?, self.crm()?, self.numerics.d_max)?;
        Ok(net.with_mass_tol(self.numerics.mass_tol))
    }

    /// Constant event probability, when every loop uses the constant law.
    pub fn constant_p_gamma(&self, net: &NetworkModel, j: usize) -> Option<f64> {
        match net.loops()[j].policy.family() {
            PolicyFamily::Constant { p_gamma } => Some(p_gamma),
            _ => None,
        }
    }
}
