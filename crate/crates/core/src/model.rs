//! Per-loop closed-loop dynamics: the linear plant, the innovation-based
//! event trigger, the model-based observer and the certainty-equivalence
//! control law.
//!
//! Every loop runs the same pipeline at each sampling instant `k`:
//!
//! ```text
//! x_{k+1}   = A x_k + B u_k + w_k
//! x^s_k     = A x^c_{k-1} + B u_{k-1}             (scheduler replica of the observer)
//! gamma_k   = 1  iff  |x_k - x^s_k| > Delta_d      (strict)
//! x^c_k     = x_k if delivered, x^s_k otherwise
//! u_k       = -L x^c_k
//! ```

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

const PSD_EPS: f64 = 1e-10;

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    match a.nrows() {
        0 => Ok(0.0),
        1 => Ok(libm::fabs(a[(0, 0)])),
        _ => {
            let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000).ok_or_else(|| {
                Error::Parameter("Schur decomposition did not converge".into())
            })?;
            Ok(schur
                .complex_eigenvalues()
                .iter()
                .map(|z| libm::hypot(z.re, z.im))
                .fold(0.0, f64::max))
        }
    }
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!(
            "{name} must be {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > PSD_EPS * scale {
        return Err(Error::Parameter(format!("{name} is not symmetric")));
    }
    let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min_eig < -PSD_EPS * scale {
        return Err(Error::Parameter(format!(
            "{name} is not positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// Linear plant with its noise statistics and controller gain.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    r0: DMatrix<f64>,
    rw: DMatrix<f64>,
    l: DMatrix<f64>,
    rho: f64,
    rw_sqrt: DMatrix<f64>,
    r0_sqrt: DMatrix<f64>,
}

impl PlantModel {
    /// Validates dimensions, noise covariances and closed-loop stability of
    /// `A - B L`, and caches the spectral radius of `A`.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        r0: DMatrix<f64>,
        rw: DMatrix<f64>,
        l: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xm, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let m = b.ncols();
        if l.nrows() != m || l.ncols() != n {
            return Err(Error::Dimension(format!(
                "L must be {m}x{n}, got {}x{}",
                l.nrows(),
                l.ncols()
            )));
        }
        check_symmetric_psd("R0", &r0, n)?;
        check_symmetric_psd("Rw", &rw, n)?;
        let closed = &a - &b * &l;
        let rho_closed = spectral_radius(&closed)?;
        if rho_closed >= 1.0 {
            return Err(Error::Configuration(format!(
                "closed loop A - BL is not stable (spectral radius {rho_closed})"
            )));
        }
        let rho = spectral_radius(&a)?;
        let rw_sqrt = psd_sqrt(&rw);
        let r0_sqrt = psd_sqrt(&r0);
        Ok(Self { a, b, r0, rw, l, rho, rw_sqrt, r0_sqrt })
    }

    /// First-order plant `x+ = a x + b u + w`, `w ~ N(0, sigma_w)`, with the
    /// deadbeat gain and `R0 = sigma_w`.
    pub fn scalar(a: f64, b: f64, sigma_w: f64) -> Result<Self> {
        let am = DMatrix::from_element(1, 1, a);
        let bm = DMatrix::from_element(1, 1, b);
        let l = default_gain(&am, &bm)?;
        let rw = DMatrix::from_element(1, 1, sigma_w);
        Self::new(am, bm, rw.clone(), rw, l)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn r0(&self) -> &DMatrix<f64> {
        &self.r0
    }

    pub fn rw(&self) -> &DMatrix<f64> {
        &self.rw
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Spectral radius of `A`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_scalar(&self) -> bool {
        self.state_dim() == 1 && self.input_dim() == 1
    }

    /// Trace of the process-noise covariance.
    pub fn noise_trace(&self) -> f64 {
        self.rw.trace()
    }

    /// A factor `S` with `S S^T = Rw`, used to colour standard normal draws.
    pub fn noise_factor(&self) -> &DMatrix<f64> {
        &self.rw_sqrt
    }

    /// A factor `S` with `S S^T = R0`.
    pub fn initial_factor(&self) -> &DMatrix<f64> {
        &self.r0_sqrt
    }

    fn check_state(&self, what: &str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "{what} has length {}, plant state has dimension {}",
                v.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    fn check_input(&self, what: &str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "{what} has length {}, plant input has dimension {}",
                v.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// One-step model prediction `A estimate + B input`.
    pub fn predict(&self, estimate: &DVector<f64>, input: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state("estimate", estimate)?;
        self.check_input("input", input)?;
        Ok(&self.a * estimate + &self.b * input)
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// Plant state, observer estimate, last applied input and delay since the
/// last delivered packet.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub x: DVector<f64>,
    pub xhat: DVector<f64>,
    pub u: DVector<f64>,
    pub d: u32,
}

impl LoopState {
    pub fn zeros(model: &PlantModel) -> Self {
        Self {
            x: DVector::zeros(model.state_dim()),
            xhat: DVector::zeros(model.state_dim()),
            u: DVector::zeros(model.input_dim()),
            d: 0,
        }
    }
}

/// `A x + B u + noise`.
pub fn step_plant(model: &PlantModel, state: &LoopState, noise: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_state("state", &state.x)?;
    model.check_input("input", &state.u)?;
    model.check_state("noise", noise)?;
    Ok(&model.a * &state.x + &model.b * &state.u + noise)
}

/// Event indicator: true iff the innovation norm strictly exceeds the threshold.
pub fn trigger_decision(x: &DVector<f64>, sched_estimate: &DVector<f64>, threshold: f64) -> Result<bool> {
    if x.len() != sched_estimate.len() {
        return Err(Error::Dimension(format!(
            "state has length {}, scheduler estimate has length {}",
            x.len(),
            sched_estimate.len()
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("event threshold must be positive, got {threshold}")));
    }
    Ok((x - sched_estimate).norm() > threshold)
}

/// Controller-side estimate after the instant's contention outcome.
pub fn observer_update(
    model: &PlantModel,
    prev_estimate: &DVector<f64>,
    prev_input: &DVector<f64>,
    delivered: bool,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_state("measurement", x)?;
    let prediction = model.predict(prev_estimate, prev_input)?;
    Ok(if delivered { x.clone() } else { prediction })
}

/// `u = -L estimate`.
pub fn control_law(model: &PlantModel, estimate: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_state("estimate", estimate)?;
    Ok(-(&model.l * estimate))
}

/// Scalar deadbeat gain `L = A / B`, placing the closed-loop pole at zero.
pub fn default_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != (1, 1) || b.shape() != (1, 1) {
        return Err(Error::Configuration(
            "the deadbeat default gain only exists for scalar plants; supply a gain".into(),
        ));
    }
    let b0 = b[(0, 0)];
    if b0 == 0.0 {
        return Err(Error::Configuration("deadbeat gain needs B != 0".into()));
    }
    Ok(DMatrix::from_element(1, 1, a[(0, 0)] / b0))
}

/// How the event probabilities of a policy vary with the delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyFamily {
    /// `p_{gamma,d} = p_gamma` for every delay.
    Constant { p_gamma: f64 },
    /// `p_{gamma,d} = p_{gamma,1} + eta + ... + eta^{d-1}`.
    Additive { p_gamma_1: f64, eta: f64 },
    /// `p_{gamma,d} = p_{gamma,1} mu^{d-1}`, `mu < 1`.
    Exponential { p_gamma_1: f64, mu: f64 },
    /// Explicit per-delay table (probabilities, thresholds, or both).
    ExplicitTable,
}

/// Delay-indexed event-triggering policy.
///
/// Delays are 1-based: entry `d` applies at an instant whose previous delay
/// was `d - 1`. Tables are held at their last entry beyond their length.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPolicy {
    family: PolicyFamily,
    p_gamma: Vec<f64>,
    thresholds: Option<Vec<f64>>,
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("{what} must lie in (0, 1], got {p}")));
    }
    Ok(())
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Parameter("threshold table is empty".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(Error::Parameter(format!("event thresholds must be positive, got {t}")));
    }
    Ok(())
}

impl TriggerPolicy {
    pub fn constant(p_gamma: f64) -> Result<Self> {
        check_probability("p_gamma", p_gamma)?;
        Ok(Self { family: PolicyFamily::Constant { p_gamma }, p_gamma: Vec::new(), thresholds: None })
    }

    pub fn additive(p_gamma_1: f64, eta: f64) -> Result<Self> {
        crate::synthesis::check_additive(p_gamma_1, eta)?;
        Ok(Self {
            family: PolicyFamily::Additive { p_gamma_1, eta },
            p_gamma: Vec::new(),
            thresholds: None,
        })
    }

    pub fn exponential(p_gamma_1: f64, mu: f64) -> Result<Self> {
        crate::synthesis::check_exponential(p_gamma_1, mu)?;
        Ok(Self {
            family: PolicyFamily::Exponential { p_gamma_1, mu },
            p_gamma: Vec::new(),
            thresholds: None,
        })
    }

    pub fn table(p_gamma: Vec<f64>) -> Result<Self> {
        if p_gamma.is_empty() {
            return Err(Error::Parameter("event probability table is empty".into()));
        }
        for &p in &p_gamma {
            check_probability("p_gamma", p)?;
        }
        Ok(Self { family: PolicyFamily::ExplicitTable, p_gamma, thresholds: None })
    }

    /// Threshold-only policy; its event probabilities have to be resolved
    /// through the density engine before the chain can be solved.
    pub fn from_thresholds(thresholds: Vec<f64>) -> Result<Self> {
        check_thresholds(&thresholds)?;
        Ok(Self { family: PolicyFamily::ExplicitTable, p_gamma: Vec::new(), thresholds: Some(thresholds) })
    }

    /// Attaches event thresholds realizing this policy's probabilities.
    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Result<Self> {
        check_thresholds(&thresholds)?;
        self.thresholds = Some(thresholds);
        Ok(self)
    }

    pub fn family(&self) -> PolicyFamily {
        self.family
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        self.thresholds.as_deref()
    }

    pub fn table_values(&self) -> &[f64] {
        &self.p_gamma
    }

    /// True when event probabilities are available without density evolution.
    pub fn has_probabilities(&self) -> bool {
        !matches!(self.family, PolicyFamily::ExplicitTable) || !self.p_gamma.is_empty()
    }

    /// `p_{gamma,d}` for `d >= 1`.
    ///
    /// # Panics
    /// On `d == 0`, or on a threshold-only policy whose probabilities were
    /// never resolved.
    pub fn event_probability(&self, d: usize) -> f64 {
        assert!(d >= 1, "event probabilities are indexed from d = 1");
        match self.family {
            PolicyFamily::Constant { p_gamma } => p_gamma,
            PolicyFamily::Additive { p_gamma_1, eta } => crate::synthesis::additive_term(p_gamma_1, eta, d),
            PolicyFamily::Exponential { p_gamma_1, mu } => p_gamma_1 * libm::pow(mu, (d - 1) as f64),
            PolicyFamily::ExplicitTable => {
                assert!(!self.p_gamma.is_empty(), "threshold-only policy has no event probabilities yet");
                self.p_gamma[(d - 1).min(self.p_gamma.len() - 1)]
            }
        }
    }

    /// `Delta_d` for `d >= 1`, if the policy carries thresholds.
    pub fn threshold(&self, d: usize) -> Option<f64> {
        assert!(d >= 1, "thresholds are indexed from d = 1");
        self.thresholds.as_ref().map(|t| t[(d - 1).min(t.len() - 1)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn spectral_radius_scalars() {
        assert_eq!(spectral_radius(&m(1, 1, &[1.0])).unwrap(), 1.0);
        assert_eq!(spectral_radius(&m(1, 1, &[1.5])).unwrap(), 1.5);
        assert_eq!(spectral_radius(&m(1, 1, &[-2.0])).unwrap(), 2.0);
    }

    #[test]
    fn spectral_radius_matches_quadratic_formula() {
        // [[0,1],[-0.5,1]]: lambda^2 - lambda + 0.5 = 0, complex pair 0.5 +- 0.5i.
        let (tr, det) = (1.0_f64, 0.5_f64);
        let disc = tr * tr - 4.0 * det;
        let oracle = if disc >= 0.0 {
            ((tr.abs() + disc.sqrt()) / 2.0).abs()
        } else {
            det.sqrt()
        };
        let rho = spectral_radius(&m(2, 2, &[0.0, 1.0, -0.5, 1.0])).unwrap();
        assert_abs_diff_eq!(rho, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(rho, 0.5_f64.sqrt(), epsilon = 1e-12);

        // real pair 3 and -1
        let rho = spectral_radius(&m(2, 2, &[1.0, 2.0, 2.0, 1.0])).unwrap();
        assert_abs_diff_eq!(rho, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_radius_rejects_non_square() {
        assert!(matches!(spectral_radius(&m(1, 2, &[1.0, 2.0])), Err(Error::Dimension(_))));
    }

    #[test]
    fn step_plant_examples() {
        let p = PlantModel::scalar(1.0, 1.0, 1.0).unwrap();
        let s = LoopState::zeros(&p);
        let x = step_plant(&p, &s, &DVector::from_element(1, 0.3)).unwrap();
        assert_eq!(x[0], 0.3);

        let p = PlantModel::scalar(1.5, 1.0, 1.0).unwrap();
        let s = LoopState {
            x: DVector::from_element(1, 2.0),
            xhat: DVector::zeros(1),
            u: DVector::from_element(1, -3.0),
            d: 0,
        };
        assert_eq!(step_plant(&p, &s, &DVector::zeros(1)).unwrap()[0], 0.0);
    }

    #[test]
    fn step_plant_matches_manual_product() {
        let a = m(3, 3, &[0.9, 0.1, 0.0, -0.2, 0.5, 0.3, 0.0, 0.4, 0.1]);
        let b = m(3, 1, &[1.0, 0.5, -1.0]);
        let l = m(1, 3, &[0.1, 0.2, 0.0]);
        let id = DMatrix::identity(3, 3);
        let p = PlantModel::new(a.clone(), b.clone(), id.clone(), id, l).unwrap();
        let s = LoopState {
            x: DVector::from_vec(alloc::vec![1.0, -2.0, 0.5]),
            xhat: DVector::zeros(3),
            u: DVector::from_element(1, 0.7),
            d: 3,
        };
        let w = DVector::from_vec(alloc::vec![0.01, 0.02, -0.03]);
        let got = step_plant(&p, &s, &w).unwrap();
        for i in 0..3 {
            let mut want = w[i] + b[(i, 0)] * 0.7;
            for j in 0..3 {
                want += a[(i, j)] * s.x[j];
            }
            assert_abs_diff_eq!(got[i], want, epsilon = 1e-14);
        }
    }

    #[test]
    fn trigger_is_strict() {
        let x = DVector::from_element(1, 0.3);
        assert!(!trigger_decision(&x, &x, 0.1).unwrap());
        assert!(trigger_decision(&x, &DVector::zeros(1), 0.25).unwrap());
        let x = DVector::from_element(1, 0.25);
        assert!(!trigger_decision(&x, &DVector::zeros(1), 0.25).unwrap());
        assert!(trigger_decision(&x, &DVector::zeros(1), 0.0).is_err());
        assert!(trigger_decision(&x, &DVector::zeros(2), 1.0).is_err());
    }

    #[test]
    fn observer_examples() {
        let p = PlantModel::scalar(1.5, 1.0, 1.0).unwrap();
        let e = DVector::from_element(1, 2.0);
        let u = DVector::from_element(1, -1.0);
        let x = DVector::from_element(1, 7.0);
        assert_eq!(observer_update(&p, &e, &u, true, &x).unwrap()[0], 7.0);
        assert_eq!(observer_update(&p, &e, &u, false, &x).unwrap()[0], 2.0);
        let z = DVector::zeros(1);
        assert_eq!(observer_update(&p, &z, &z, false, &x).unwrap()[0], 0.0);
    }

    #[test]
    fn control_law_examples() {
        let p = PlantModel::scalar(1.5, 1.0, 1.0).unwrap();
        assert_eq!(control_law(&p, &DVector::zeros(1)).unwrap()[0], 0.0);
        assert_eq!(control_law(&p, &DVector::from_element(1, 2.0)).unwrap()[0], -3.0);
    }

    #[test]
    fn control_law_matches_manual_product() {
        let a = DMatrix::from_diagonal_element(4, 4, 0.5);
        let b = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64 * 0.1);
        let l = DMatrix::from_fn(2, 4, |i, j| 0.05 * (i as f64) - 0.02 * (j as f64));
        let id = DMatrix::identity(4, 4);
        let p = PlantModel::new(a, b, id.clone(), id, l.clone()).unwrap();
        let est = DVector::from_vec(alloc::vec![1.0, -1.0, 2.0, 0.5]);
        let u = control_law(&p, &est).unwrap();
        for i in 0..2 {
            let want: f64 = -(0..4).map(|j| l[(i, j)] * est[j]).sum::<f64>();
            assert_abs_diff_eq!(u[i], want, epsilon = 1e-15);
        }
    }

    #[test]
    fn deadbeat_gain() {
        let g = |a: f64, b: f64| default_gain(&m(1, 1, &[a]), &m(1, 1, &[b])).unwrap()[(0, 0)];
        assert_eq!(g(1.5, 1.0), 1.5);
        assert_eq!(g(1.0, 2.0), 0.5);
        assert_eq!(g(2.0, 1.0), 2.0);
        let p = PlantModel::scalar(2.0, 1.0, 1.0).unwrap();
        let closed = p.a() - p.b() * p.gain();
        assert_eq!(spectral_radius(&closed).unwrap(), 0.0);
        assert!(default_gain(&DMatrix::identity(2, 2), &m(2, 1, &[1.0, 1.0])).is_err());
        assert!(default_gain(&m(1, 1, &[1.0]), &m(1, 1, &[0.0])).is_err());
    }

    #[test]
    fn plant_validation() {
        let one = m(1, 1, &[1.0]);
        // unstable closed loop
        assert!(PlantModel::new(m(1, 1, &[2.0]), one.clone(), one.clone(), one.clone(), m(1, 1, &[0.5])).is_err());
        // negative covariance
        assert!(PlantModel::new(one.clone(), one.clone(), one.clone(), m(1, 1, &[-1.0]), one.clone()).is_err());
        // wrong gain shape
        assert!(PlantModel::new(one.clone(), one.clone(), one.clone(), one.clone(), m(1, 2, &[1.0, 1.0])).is_err());
        let p = PlantModel::scalar(1.5, 1.0, 2.0).unwrap();
        assert_eq!(p.rho(), 1.5);
        assert_abs_diff_eq!((p.noise_factor() * p.noise_factor().transpose())[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn policy_families() {
        let c = TriggerPolicy::constant(0.8).unwrap();
        assert_eq!(c.event_probability(1), 0.8);
        assert_eq!(c.event_probability(40), 0.8);
        let t = TriggerPolicy::table(alloc::vec![0.2, 0.4]).unwrap();
        assert_eq!(t.event_probability(1), 0.2);
        assert_eq!(t.event_probability(9), 0.4);
        let e = TriggerPolicy::exponential(0.8, 0.5).unwrap();
        assert_abs_diff_eq!(e.event_probability(4), 0.1, epsilon = 1e-15);
        assert!(TriggerPolicy::constant(0.0).is_err());
        assert!(TriggerPolicy::constant(1.2).is_err());
        assert!(TriggerPolicy::exponential(0.5, 1.0).is_err());
        assert!(TriggerPolicy::from_thresholds(alloc::vec![0.25, -1.0]).is_err());
        let th = TriggerPolicy::from_thresholds(alloc::vec![0.25]).unwrap();
        assert!(!th.has_probabilities());
        assert_eq!(th.threshold(17), Some(0.25));
    }

    #[test]
    fn trigger_scale_consistency() {
        let x = DVector::from_vec(alloc::vec![0.3, -0.4]);
        let e = DVector::zeros(2);
        for &delta in &[0.1, 0.49, 0.5, 0.51, 2.0] {
            let once = trigger_decision(&x, &e, delta).unwrap();
            let twice = trigger_decision(&(&x * 2.0), &e, 2.0 * delta).unwrap();
            assert_eq!(once, twice);
        }
    }
}
