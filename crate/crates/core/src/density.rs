//! Grid-based propagation of scalar estimation-error densities.
//!
//! Densities are piecewise constant on a uniform mesh symmetric about zero:
//! `values[i]` is the average of the density over cell `i`. Every operation
//! below is exact for that representation (truncation splits partial cells,
//! rescaling goes through the piecewise-linear CDF, the noise kernel is the
//! exact cell-to-cell transfer of a Gaussian), so the only discretization
//! error is the one made when the initial Gaussian is cell-averaged and when
//! a rescaled density is re-binned onto a new mesh.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::model::PlantModel;

/// Uniform mesh on `[-half_width, half_width]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_width: f64,
    pub n_cells: usize,
}

impl GridSpec {
    pub fn new(half_width: f64, n_cells: usize) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) || n_cells == 0 {
            return Err(Error::Parameter(format!("invalid grid: half-width {half_width}, {n_cells} cells")));
        }
        Ok(Self { half_width, n_cells })
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.half_width / self.n_cells as f64
    }
}

/// Mesh sizing used when a step chooses its own output grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityOptions {
    /// Minimum number of cells.
    pub n_cells: usize,
    /// Cells per noise standard deviation; raises the cell count on wide grids.
    pub cells_per_sigma: f64,
    pub max_cells: usize,
    /// Mass allowed to fall off a grid chosen automatically.
    pub drop_tol: f64,
    /// Mass allowed to fall off any grid before a support error is raised.
    pub support_tol: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        Self { n_cells: 8192, cells_per_sigma: 32.0, max_cells: 1 << 16, drop_tol: 1e-12, support_tol: 1e-6 }
    }
}

/// Piecewise-constant density on a symmetric uniform mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    x_max: f64,
    values: Vec<f64>,
    mass: f64,
}

fn std_normal_upper(z: f64) -> f64 {
    0.5 * libm::erfc(z * FRAC_1_SQRT_2)
}

/// Mass of `N(0, sigma^2)` on `[lo, hi]`, computed on the side of zero that avoids cancellation.
fn gaussian_interval(lo: f64, hi: f64, sigma: f64) -> f64 {
    if lo >= 0.0 {
        std_normal_upper(lo / sigma) - std_normal_upper(hi / sigma)
    } else if hi <= 0.0 {
        std_normal_upper(-hi / sigma) - std_normal_upper(-lo / sigma)
    } else {
        1.0 - std_normal_upper(-lo / sigma) - std_normal_upper(hi / sigma)
    }
}

impl DensityGrid {
    /// Density from cell averages on `[-x_max, x_max]`.
    pub fn from_values(x_max: f64, values: Vec<f64>) -> Result<Self> {
        if !(x_max > 0.0 && x_max.is_finite()) || values.is_empty() {
            return Err(Error::Parameter("density grid needs a positive half-width and at least one cell".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Parameter(format!("density values must be finite and nonnegative, got {v}")));
        }
        let h = 2.0 * x_max / values.len() as f64;
        let mass = values.iter().sum::<f64>() * h;
        Ok(Self { x_max, values, mass })
    }

    fn from_masses(x_max: f64, masses: Vec<f64>) -> Self {
        let h = 2.0 * x_max / masses.len() as f64;
        let mass = masses.iter().sum();
        let values = masses.into_iter().map(|m| m / h).collect();
        Self { x_max, values, mass }
    }

    /// Uniform density on `[-b, b]`, with `b` the half-width of `spec`.
    pub fn uniform(spec: &GridSpec) -> Self {
        let v = 1.0 / (2.0 * spec.half_width);
        Self { x_max: spec.half_width, values: vec![v; spec.n_cells], mass: 1.0 }
    }

    pub fn x_min(&self) -> f64 {
        -self.x_max
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn cell_width(&self) -> f64 {
        2.0 * self.x_max / self.values.len() as f64
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec { half_width: self.x_max, n_cells: self.values.len() }
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        -self.x_max + (i as f64 + 0.5) * self.cell_width()
    }

    pub fn edge(&self, i: usize) -> f64 {
        -self.x_max + i as f64 * self.cell_width()
    }

    /// Same shape with unit mass.
    pub fn normalized(&self) -> Result<Self> {
        if !(self.mass > 0.0) {
            return Err(Error::Degenerate("cannot normalize a density without mass".into()));
        }
        let s = 1.0 / self.mass;
        Ok(Self { x_max: self.x_max, values: self.values.iter().map(|v| v * s).collect(), mass: 1.0 })
    }

    /// Cumulative mass at the cell edges, `n_cells + 1` entries.
    pub fn cdf_at_edges(&self) -> Vec<f64> {
        let h = self.cell_width();
        let mut out = Vec::with_capacity(self.values.len() + 1);
        let mut c = 0.0;
        out.push(0.0);
        for v in &self.values {
            c += v * h;
            out.push(c);
        }
        out
    }

    fn cdf_with(&self, edges_cdf: &[f64], x: f64) -> f64 {
        if x <= -self.x_max {
            return 0.0;
        }
        if x >= self.x_max {
            return edges_cdf[self.values.len()];
        }
        let h = self.cell_width();
        let i = (((x + self.x_max) / h) as usize).min(self.values.len() - 1);
        edges_cdf[i] + self.values[i] * (x - self.edge(i))
    }

    /// Mass on `(-inf, x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.cdf_with(&self.cdf_at_edges(), x)
    }

    /// Mass on `[-t, t]`.
    pub fn centered_mass(&self, t: f64) -> f64 {
        let c = self.cdf_at_edges();
        self.cdf_with(&c, t) - self.cdf_with(&c, -t)
    }

    /// Fraction of each cell that lies inside `[-delta, delta]`.
    fn inside_fraction(&self, i: usize, delta: f64) -> f64 {
        let h = self.cell_width();
        let lo = self.edge(i).max(-delta);
        let hi = (self.edge(i) + h).min(delta);
        ((hi - lo) / h).clamp(0.0, 1.0)
    }

    /// Smallest `t` (to cell resolution) with at most `eps` of the mass outside `[-t, t]`.
    pub fn support_radius(&self, eps: f64) -> f64 {
        let h = self.cell_width();
        let n = self.values.len();
        let (mut lo, mut hi) = (0usize, n);
        let mut outside = 0.0;
        while lo < hi {
            let next = self.values[lo] * h + self.values[hi - 1] * h;
            if outside + next > eps {
                break;
            }
            outside += next;
            lo += 1;
            hi -= 1;
        }
        (self.x_max - lo as f64 * h).max(h)
    }

    /// Second moment about zero of the piecewise-constant density, per unit mass.
    pub fn second_moment(&self) -> f64 {
        let h = self.cell_width();
        let mut acc = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            let x = self.cell_center(i);
            acc += v * h * (x * x + h * h / 12.0);
        }
        acc / self.mass
    }

    pub fn mean(&self) -> f64 {
        let h = self.cell_width();
        let mut acc = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            acc += v * h * self.cell_center(i);
        }
        acc / self.mass
    }

    /// Cumulative mass of the symmetric decreasing rearrangement as a function
    /// of ball length (diameter): breakpoints `(length, mass)` starting at `(0, 0)`.
    pub fn rearranged_profile(&self) -> Vec<(f64, f64)> {
        let h = self.cell_width();
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut out = Vec::with_capacity(sorted.len() + 1);
        out.push((0.0, 0.0));
        let mut c = 0.0;
        for (k, v) in sorted.iter().enumerate() {
            c += v * h;
            out.push(((k + 1) as f64 * h, c));
        }
        out
    }
}

/// Cell-averaged `N(0, variance)` on `spec`.
pub fn gaussian_grid(variance: f64, spec: &GridSpec) -> Result<DensityGrid> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Parameter(format!("variance must be positive, got {variance}")));
    }
    let sigma = libm::sqrt(variance);
    let outside = 2.0 * std_normal_upper(spec.half_width / sigma);
    if outside > 1e-9 {
        return Err(Error::Support { boundary_mass: outside });
    }
    let n = spec.n_cells;
    let h = spec.cell_width();
    let mut masses = vec![0.0; n];
    for (i, m) in masses.iter_mut().enumerate() {
        let lo = -spec.half_width + i as f64 * h;
        *m = gaussian_interval(lo, lo + h, sigma);
    }
    // exact mirror image
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let avg = 0.5 * (masses[i] + masses[j]);
        masses[i] = avg;
        masses[j] = avg;
    }
    Ok(DensityGrid::from_masses(spec.half_width, masses))
}

/// Result of splitting a density at `|x| = delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Density of the no-event region, renormalized by `q_gamma`.
    pub non_event: DensityGrid,
    /// Density of the event region, renormalized by `p_gamma`.
    pub event: DensityGrid,
    pub q_gamma: f64,
    pub p_gamma: f64,
}

const DEGENERATE_SPLIT: f64 = 1e-12;

/// Inside mass `q_gamma = P(|x| <= delta)` and outside mass `p_gamma = 1 - q_gamma`, per unit mass.
pub fn split_masses(phi: &DensityGrid, delta: f64) -> (f64, f64) {
    let q = (phi.centered_mass(delta) / phi.mass).clamp(0.0, 1.0);
    (q, 1.0 - q)
}

/// Splits `phi` into its renormalized no-event (`|x| <= delta`) and event parts.
pub fn truncate_split(phi: &DensityGrid, delta: f64) -> Result<Split> {
    if !(delta > 0.0) {
        return Err(Error::Parameter(format!("threshold must be positive, got {delta}")));
    }
    let (q_gamma, p_gamma) = split_masses(phi, delta);
    if q_gamma < DEGENERATE_SPLIT || p_gamma < DEGENERATE_SPLIT {
        return Err(Error::Degenerate(format!(
            "threshold {delta} leaves q_gamma = {q_gamma:e}, p_gamma = {p_gamma:e}"
        )));
    }
    let n = phi.n_cells();
    let mut inside = Vec::with_capacity(n);
    let mut outside = Vec::with_capacity(n);
    let (si, so) = (1.0 / (q_gamma * phi.mass), 1.0 / (p_gamma * phi.mass));
    for (i, v) in phi.values.iter().enumerate() {
        let f = phi.inside_fraction(i, delta);
        inside.push(v * f * si);
        outside.push(v * (1.0 - f) * so);
    }
    Ok(Split {
        non_event: DensityGrid::from_values(phi.x_max, inside)?,
        event: DensityGrid::from_values(phi.x_max, outside)?,
        q_gamma,
        p_gamma,
    })
}

/// Idle density after one instant without delivery.
///
/// Mass inside `[-delta, delta]` (no event) is kept with weight `1 / Z`, mass
/// outside (an event that was not delivered) with weight `f / Z`, where
/// `f = 1 - p_alpha (1 - p)` and `Z = q_gamma + p_gamma f`. `p` is the
/// aggregate busy probability and may be negative.
pub fn mix_untransmitted(phi: &DensityGrid, delta: f64, p_alpha: f64, p: f64) -> Result<DensityGrid> {
    let f = 1.0 - p_alpha * (1.0 - p);
    if !(-1e-12..=1.0 + 1e-12).contains(&f) {
        return Err(Error::Parameter(format!("failure probability 1 - p_alpha (1 - p) = {f} outside [0, 1]")));
    }
    let f = f.clamp(0.0, 1.0);
    if f == 1.0 {
        return Ok(phi.clone());
    }
    let (q_gamma, p_gamma) = if delta > 0.0 { split_masses(phi, delta) } else { (0.0, 1.0) };
    let z = q_gamma + p_gamma * f;
    if z < DEGENERATE_SPLIT {
        return Err(Error::Degenerate(format!("mixing weights undefined: q_gamma + p_gamma f = {z:e}")));
    }
    let scale = 1.0 / (z * phi.mass);
    let values = phi
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let inside = if delta > 0.0 { phi.inside_fraction(i, delta) } else { 0.0 };
            v * (inside + (1.0 - inside) * f) * scale
        })
        .collect::<Vec<_>>();
    let out = DensityGrid::from_values(phi.x_max, values)?;
    log::trace!("mix drift {:e}", out.mass - 1.0);
    out.normalized()
}

/// `sigma phi(x / sigma) - x Phi(-x / sigma)`: integral of the Gaussian upper tail beyond `x`.
fn upper_tail_integral(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    sigma * libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * PI) - x * std_normal_upper(z)
}

/// Probability that a point uniform on a cell lands `j` cells away after
/// adding `N(0, sigma^2)` noise, for `j = 0..=taps`. Renormalized to unit total.
pub fn noise_kernel(sigma: f64, h: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let taps = (libm::ceil(8.0 * sigma / h) as usize).max(1);
    let mut k = Vec::with_capacity(taps + 1);
    let psi = |j: usize| upper_tail_integral(j as f64 * h, sigma);
    k.push(1.0 - 2.0 / h * (psi(0) - psi(1)));
    for j in 1..=taps {
        k.push(((psi(j + 1) - psi(j)) - (psi(j) - psi(j - 1))) / h);
    }
    for v in k.iter_mut() {
        *v = v.max(0.0);
    }
    let total = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    for v in k.iter_mut() {
        *v /= total;
    }
    k
}

/// Grid on which `x -> a x + noise` of `phi` fits, per `opts`.
pub fn output_grid(phi: &DensityGrid, a: f64, noise_variance: f64, opts: &DensityOptions) -> GridSpec {
    let sigma = libm::sqrt(noise_variance.max(0.0));
    let half_width = libm::fabs(a) * phi.support_radius(opts.drop_tol) + 8.5 * sigma;
    let mut n = opts.n_cells;
    if sigma > 0.0 {
        let wanted = libm::ceil(2.0 * half_width * opts.cells_per_sigma / sigma) as usize;
        n = n.max(wanted);
    }
    GridSpec { half_width, n_cells: n.min(opts.max_cells) }
}

/// Change of variables `y = a x`, re-binned onto `spec` through the CDF of `phi`.
fn rescale_masses(phi: &DensityGrid, a: f64, spec: &GridSpec) -> Vec<f64> {
    let c = phi.cdf_at_edges();
    let h = spec.cell_width();
    let n = spec.n_cells;
    let mut f_prev = phi.cdf_with(&c, -spec.half_width / a);
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        let e = -spec.half_width + k as f64 * h;
        let f = phi.cdf_with(&c, e / a);
        out.push(if a > 0.0 { f - f_prev } else { f_prev - f }.max(0.0));
        f_prev = f;
    }
    out
}

fn convolve_symmetric(masses: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = masses.len();
    let mut out = vec![0.0; n];
    for (o, m) in out.iter_mut().zip(masses) {
        *o = kernel[0] * m;
    }
    for (j, &kj) in kernel.iter().enumerate().skip(1) {
        if j >= n {
            break;
        }
        // shift right by j and left by j
        for (o, m) in out[j..].iter_mut().zip(&masses[..n - j]) {
            *o += kj * m;
        }
        for (o, m) in out[..n - j].iter_mut().zip(&masses[j..]) {
            *o += kj * m;
        }
    }
    out
}

/// `x -> a x + w`, `w ~ N(0, noise_variance)`, onto an explicit output grid.
/// Fails with a support error when more than `support_tol` of the mass leaves the grid.
pub fn propagate_onto(
    phi: &DensityGrid,
    a: f64,
    noise_variance: f64,
    spec: &GridSpec,
    support_tol: f64,
) -> Result<DensityGrid> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::Parameter(format!("scaling must be finite and nonzero, got {a}")));
    }
    if !(noise_variance >= 0.0) {
        return Err(Error::Parameter(format!("noise variance must be nonnegative, got {noise_variance}")));
    }
    let masses = rescale_masses(phi, a, spec);
    let kernel = noise_kernel(libm::sqrt(noise_variance), spec.cell_width());
    let out = convolve_symmetric(&masses, &kernel);
    let grid = DensityGrid::from_masses(spec.half_width, out);
    let lost = phi.mass - grid.mass;
    if lost > support_tol {
        return Err(Error::Support { boundary_mass: lost });
    }
    Ok(grid)
}

/// `x -> a x + w` on a grid sized for the result, renormalized to unit mass.
pub fn propagate_with(phi: &DensityGrid, a: f64, noise_variance: f64, opts: &DensityOptions) -> Result<DensityGrid> {
    let spec = output_grid(phi, a, noise_variance, opts);
    let out = propagate_onto(phi, a, noise_variance, &spec, opts.support_tol)?;
    log::trace!("propagate drift {:e}", out.mass - phi.mass);
    out.normalized()
}

/// `x -> a x + w` with default mesh sizing.
pub fn propagate(phi: &DensityGrid, a: f64, noise_variance: f64) -> Result<DensityGrid> {
    propagate_with(phi, a, noise_variance, &DensityOptions::default())
}

/// One step of the worst-case recursion (no event is ever delivered).
pub fn auxiliary_step(phi_hat: &DensityGrid, a: f64, noise_variance: f64) -> Result<DensityGrid> {
    propagate(phi_hat, a, noise_variance)
}

/// Convolution of two densities with equal cell widths; the result lives on
/// `n_a + n_b` cells of the same width.
pub fn convolve(a: &DensityGrid, b: &DensityGrid) -> Result<DensityGrid> {
    let (ha, hb) = (a.cell_width(), b.cell_width());
    if libm::fabs(ha - hb) > 1e-12 * ha.max(hb) {
        return Err(Error::Dimension(format!("convolution needs equal cell widths, got {ha} and {hb}")));
    }
    let (ma, mb): (Vec<f64>, Vec<f64>) = (a.values.iter().map(|v| v * ha).collect(), b.values.iter().map(|v| v * hb).collect());
    // the convolution of two cells is a triangle split evenly over two output cells
    let mut out = vec![0.0; ma.len() + mb.len()];
    for (i, x) in ma.iter().enumerate() {
        for (j, y) in mb.iter().enumerate() {
            let w = 0.5 * x * y;
            out[i + j] += w;
            out[i + j + 1] += w;
        }
    }
    Ok(DensityGrid::from_masses(a.x_max + b.x_max, out))
}

fn profile_at(profile: &[(f64, f64)], len: f64) -> f64 {
    let last = profile[profile.len() - 1];
    if len >= last.0 {
        return last.1;
    }
    let i = profile.partition_point(|p| p.0 <= len);
    let (l0, c0) = profile[i - 1];
    let (l1, c1) = profile[i];
    c0 + (c1 - c0) * (len - l0) / (l1 - l0)
}

/// Slack for grid error in [`majorizes`].
pub const MAJORIZATION_SLACK: f64 = 1e-9;

/// True when every centered ball holds at least as much mass under the
/// symmetric decreasing rearrangement of `phi_a` as under that of `phi_b`.
/// The grids need not match.
pub fn majorizes(phi_a: &DensityGrid, phi_b: &DensityGrid) -> bool {
    let pa = phi_a.rearranged_profile();
    let pb = phi_b.rearranged_profile();
    // both profiles are piecewise linear, so their breakpoints suffice
    let ok_at = |len: f64| profile_at(&pa, len) / phi_a.mass + MAJORIZATION_SLACK >= profile_at(&pb, len) / phi_b.mass;
    pa.iter().chain(pb.iter()).all(|&(len, _)| ok_at(len))
}

/// Second moment about zero (the pipeline's densities are zero-mean).
pub fn variance(phi: &DensityGrid) -> f64 {
    phi.second_moment()
}

/// Threshold `t` whose tail mass `P(|x| > t)` equals `p_gamma_target`, by bisection to 1e-10.
pub fn threshold_for_probability(phi: &DensityGrid, p_gamma_target: f64) -> Result<f64> {
    if !(p_gamma_target > 0.0 && p_gamma_target < 1.0) {
        return Err(Error::Parameter(format!("target event probability must lie in (0, 1), got {p_gamma_target}")));
    }
    let c = phi.cdf_at_edges();
    let tail = |t: f64| 1.0 - (phi.cdf_with(&c, t) - phi.cdf_with(&c, -t)) / phi.mass;
    if tail(phi.x_max) > p_gamma_target {
        return Err(Error::Support { boundary_mass: tail(phi.x_max) });
    }
    let (mut lo, mut hi) = (0.0, phi.x_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let t = tail(mid);
        if libm::fabs(t - p_gamma_target) < 1e-10 {
            return Ok(mid);
        }
        if t > p_gamma_target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// What drives the event trigger during an evolution.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerSpec {
    /// Fixed thresholds `Delta_1, Delta_2, ...`; the last one is held.
    Thresholds(Vec<f64>),
    /// Target event probabilities `p_gamma,1, p_gamma,2, ...`, last one held;
    /// the threshold of each delay is solved against the current density.
    Probabilities(Vec<f64>),
}

impl TriggerSpec {
    fn at(v: &[f64], d: usize) -> f64 {
        v[(d - 1).min(v.len() - 1)]
    }

    fn validate(&self) -> Result<()> {
        let (v, what) = match self {
            TriggerSpec::Thresholds(v) => (v, "threshold"),
            TriggerSpec::Probabilities(v) => (v, "event probability"),
        };
        if v.is_empty() {
            return Err(Error::Parameter(format!("{what} table is empty")));
        }
        let bad = match self {
            TriggerSpec::Thresholds(v) => v.iter().find(|t| !(**t > 0.0 && t.is_finite())),
            TriggerSpec::Probabilities(v) => v.iter().find(|p| !(**p > 0.0 && **p <= 1.0)),
        };
        if let Some(b) = bad {
            return Err(Error::Parameter(format!("invalid {what} {b}")));
        }
        Ok(())
    }
}

/// Idle and worst-case densities for `d = 0..=D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEvolution {
    pub idle: Vec<DensityGrid>,
    pub auxiliary: Vec<DensityGrid>,
    /// `Delta_d`, `d = 1..=D` (zero when the target event probability is one).
    pub thresholds: Vec<f64>,
    /// `P(|x| > Delta_d)` under the idle density of delay `d - 1`, `d = 1..=D`.
    pub p_gamma_realized: Vec<f64>,
    pub variances: Vec<f64>,
    pub aux_variances: Vec<f64>,
}

fn scalar_params(model: &PlantModel) -> Result<(f64, f64)> {
    if !model.is_scalar() {
        return Err(Error::Configuration("density propagation needs a scalar plant".into()));
    }
    let a = model.a()[(0, 0)];
    if a == 0.0 {
        return Err(Error::Configuration("density propagation needs an invertible A".into()));
    }
    Ok((a, model.rw()[(0, 0)]))
}

fn initial_density(noise_variance: f64, opts: &DensityOptions) -> Result<DensityGrid> {
    let sigma = libm::sqrt(noise_variance);
    let half_width = 8.5 * sigma;
    let n = opts.n_cells.max(libm::ceil(2.0 * 8.5 * opts.cells_per_sigma) as usize).min(opts.max_cells);
    gaussian_grid(noise_variance, &GridSpec::new(half_width, n)?)
}

struct StepOutcome {
    threshold: f64,
    p_gamma: f64,
    next: DensityGrid,
}

fn step(
    phi: &DensityGrid,
    trigger: &TriggerSpec,
    d: usize,
    a: f64,
    w: f64,
    p_alpha: f64,
    p: f64,
    opts: &DensityOptions,
) -> Result<StepOutcome> {
    let threshold = match trigger {
        TriggerSpec::Thresholds(t) => TriggerSpec::at(t, d),
        TriggerSpec::Probabilities(p) => {
            let target = TriggerSpec::at(p, d);
            if target >= 1.0 {
                0.0
            } else {
                threshold_for_probability(phi, target)?
            }
        }
    };
    let p_gamma = if threshold > 0.0 { split_masses(phi, threshold).1 } else { 1.0 };
    let mixed = mix_untransmitted(phi, threshold, p_alpha, p)?;
    let next = propagate_with(&mixed, a, w, opts)?;
    Ok(StepOutcome { threshold, p_gamma, next })
}

/// Runs the idle-density recursion and the worst-case recursion for `d = 0..=depth`.
///
/// `p` is the aggregate busy probability seen by the loop, held fixed.
pub fn evolve(
    model: &PlantModel,
    trigger: &TriggerSpec,
    p_alpha: f64,
    p: f64,
    depth: usize,
    opts: &DensityOptions,
) -> Result<DensityEvolution> {
    trigger.validate()?;
    let (a, w) = scalar_params(model)?;
    let phi0 = initial_density(w, opts)?;
    let mut evo = DensityEvolution {
        variances: vec![variance(&phi0)],
        aux_variances: vec![variance(&phi0)],
        idle: vec![phi0.clone()],
        auxiliary: vec![phi0],
        thresholds: Vec::with_capacity(depth),
        p_gamma_realized: Vec::with_capacity(depth),
    };
    for d in 1..=depth {
        let s = step(&evo.idle[d - 1], trigger, d, a, w, p_alpha, p, opts)?;
        let aux = propagate_with(&evo.auxiliary[d - 1], a, w, opts)?;
        evo.thresholds.push(s.threshold);
        evo.p_gamma_realized.push(s.p_gamma);
        evo.variances.push(variance(&s.next));
        evo.aux_variances.push(variance(&aux));
        evo.idle.push(s.next);
        evo.auxiliary.push(aux);
    }
    Ok(evo)
}

/// Event probabilities `p_gamma,1..=depth` realized by fixed thresholds,
/// without keeping the densities.
pub fn event_probabilities(
    model: &PlantModel,
    thresholds: &[f64],
    p_alpha: f64,
    p: f64,
    depth: usize,
    opts: &DensityOptions,
) -> Result<Vec<f64>> {
    let trigger = TriggerSpec::Thresholds(thresholds.to_vec());
    trigger.validate()?;
    let (a, w) = scalar_params(model)?;
    let mut phi = initial_density(w, opts)?;
    let mut out = Vec::with_capacity(depth);
    for d in 1..=depth {
        let s = step(&phi, &trigger, d, a, w, p_alpha, p, opts)?;
        out.push(s.p_gamma);
        phi = s.next;
    }
    Ok(out)
}
