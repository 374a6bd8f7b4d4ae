//! Sub-slot Monte Carlo simulation of `M` loops on one p-persistent CSMA channel.
//!
//! Each sampling instant every loop steps its plant, decides whether its
//! innovation is an event, and loops with events then contend over `r_max`
//! synchronous sub-slots: every still-pending loop transmits with the
//! attempt's persistence probability, and a sub-slot with exactly one
//! transmitter delivers that loop's packet (and ACKs it). Packets still
//! pending after the last sub-slot are dropped.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chain::NetworkModel;
use crate::error::{Error, Result};

/// State magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Delay bins with fewer visits are flagged as unreliable.
pub const MIN_BIN_VISITS: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub net: NetworkModel,
    /// Sampling instants.
    pub horizon: usize,
    pub seed: u64,
    /// Keep the full state and estimate trajectories.
    pub record_states: bool,
}

/// What happened to one loop at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    NoEvent,
    Delivered,
    /// Transmitted in the last sub-slot and collided there.
    Collided,
    /// Event, but the channel access rule never let it transmit.
    Suppressed,
    /// Collided earlier and was still waiting when the period ended.
    Dropped,
}

impl Outcome {
    pub fn is_event(self) -> bool {
        self != Outcome::NoEvent
    }
}

/// Per-loop record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoopTrace {
    pub outcome: Vec<Outcome>,
    /// Delay after the instant's outcome.
    pub d: Vec<u32>,
    /// Sub-slots in which the loop transmitted.
    pub attempts: Vec<u8>,
    /// Sub-slot (1-based) of the delivery, zero when nothing was delivered.
    pub delivery_slot: Vec<u8>,
    /// Flattened states, `n` values per instant, when recorded.
    pub x: Vec<f64>,
    pub xhat: Vec<f64>,
    /// Mean of `x^T x` over the instants simulated.
    pub mean_sq_state: f64,
    /// `(instant, running mean of x^T x)` at up to about a thousand instants.
    pub running_mean: Vec<(usize, f64)>,
}

impl LoopTrace {
    pub fn gamma(&self, k: usize) -> bool {
        self.outcome[k].is_event()
    }

    pub fn delta(&self, k: usize) -> bool {
        self.outcome[k] == Outcome::Delivered
    }

    pub fn count(&self, o: Outcome) -> u64 {
        self.outcome.iter().filter(|x| **x == o).count() as u64
    }

    pub fn events(&self) -> u64 {
        self.outcome.iter().filter(|x| x.is_event()).count() as u64
    }

    /// Delivered packets per instant.
    pub fn reliability(&self) -> f64 {
        self.count(Outcome::Delivered) as f64 / self.outcome.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub loops: Vec<LoopTrace>,
    /// Instants actually simulated; shorter than the horizon after divergence.
    pub instants: usize,
    /// Instant at which some state exceeded [`DIVERGENCE_LIMIT`].
    pub diverged_at: Option<usize>,
    /// Sub-slots with two or more transmitters.
    pub collisions: u64,
    pub state_dims: Vec<usize>,
}

impl SimTrace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

struct LoopSim {
    rng: ChaCha8Rng,
    x: DVector<f64>,
    xhat: DVector<f64>,
    u: DVector<f64>,
    pred: DVector<f64>,
    scratch: DVector<f64>,
    z: DVector<f64>,
    d: u32,
    sum_sq: f64,
}

fn standard_normal(rng: &mut ChaCha8Rng, out: &mut DVector<f64>) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Runs the network for `cfg.horizon` instants. Deterministic in `cfg.seed`;
/// loop `j` draws from its own ChaCha stream `j + 1`, channel access from stream 0.
pub fn run_network(cfg: &SimConfig) -> Result<SimTrace> {
    if cfg.horizon == 0 {
        return Err(Error::Parameter("simulation horizon must be at least 1".into()));
    }
    let net = &cfg.net;
    let crm = net.crm();
    let m = net.len();
    let mut channel = ChaCha8Rng::seed_from_u64(cfg.seed);
    channel.set_stream(0);

    let mut sims: Vec<LoopSim> = net
        .loops()
        .iter()
        .enumerate()
        .map(|(j, l)| {
            let n = l.plant.state_dim();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(j as u64 + 1);
            let mut z = DVector::zeros(n);
            standard_normal(&mut rng, &mut z);
            let x = l.plant.initial_factor() * &z;
            LoopSim {
                rng,
                x,
                xhat: DVector::zeros(n),
                u: DVector::zeros(l.plant.input_dim()),
                pred: DVector::zeros(n),
                scratch: DVector::zeros(n),
                z,
                d: 0,
                sum_sq: 0.0,
            }
        })
        .collect();

    let reserve = cfg.horizon;
    let mut trace = SimTrace {
        loops: (0..m)
            .map(|j| {
                let n = net.loops()[j].plant.state_dim();
                LoopTrace {
                    outcome: Vec::with_capacity(reserve),
                    d: Vec::with_capacity(reserve),
                    attempts: Vec::with_capacity(reserve),
                    delivery_slot: Vec::with_capacity(reserve),
                    x: if cfg.record_states { Vec::with_capacity(reserve * n) } else { Vec::new() },
                    xhat: if cfg.record_states { Vec::with_capacity(reserve * n) } else { Vec::new() },
                    ..LoopTrace::default()
                }
            })
            .collect(),
        instants: 0,
        diverged_at: None,
        collisions: 0,
        state_dims: net.loops().iter().map(|l| l.plant.state_dim()).collect(),
    };
    let stride = (cfg.horizon / 1000).max(1);

    let mut pending = vec![false; m];
    let mut attempts = vec![0u8; m];
    let mut last_tx = vec![usize::MAX; m];
    let mut slot = vec![0u8; m];
    let mut transmitters: Vec<usize> = Vec::with_capacity(m);

    for k in 0..cfg.horizon {
        // plant step and trigger
        for (j, (s, l)) in sims.iter_mut().zip(net.loops()).enumerate() {
            let p = &l.plant;
            if k > 0 {
                // x = A x + B u + S z
                standard_normal(&mut s.rng, &mut s.z);
                s.scratch.gemv(1.0, p.a(), &s.x, 0.0);
                s.scratch.gemv(1.0, p.b(), &s.u, 1.0);
                s.scratch.gemv(1.0, p.noise_factor(), &s.z, 1.0);
                core::mem::swap(&mut s.x, &mut s.scratch);
            }
            s.pred.gemv(1.0, p.a(), &s.xhat, 0.0);
            s.pred.gemv(1.0, p.b(), &s.u, 1.0);
            let index = s.d as usize + 1;
            pending[j] = match l.policy.threshold(index) {
                Some(delta) => (&s.x - &s.pred).norm() > delta,
                None => s.rng.random::<f64>() < l.policy.event_probability(index),
            };
            attempts[j] = 0;
            last_tx[j] = usize::MAX;
            slot[j] = 0;
        }

        // contention
        for r in 0..crm.r_max() {
            let alpha = crm.alpha(r);
            transmitters.clear();
            for j in 0..m {
                if pending[j] && channel.random::<f64>() < alpha {
                    transmitters.push(j);
                    attempts[j] += 1;
                    last_tx[j] = r;
                }
            }
            match transmitters.len() {
                0 => {}
                1 => {
                    let j = transmitters[0];
                    pending[j] = false;
                    slot[j] = r as u8 + 1;
                }
                _ => trace.collisions += 1,
            }
        }

        // observer, controller, bookkeeping
        let mut diverged = false;
        for (j, (s, l)) in sims.iter_mut().zip(net.loops()).enumerate() {
            let event = pending[j] || slot[j] > 0;
            let outcome = if slot[j] > 0 {
                Outcome::Delivered
            } else if !event {
                Outcome::NoEvent
            } else if attempts[j] == 0 {
                Outcome::Suppressed
            } else if last_tx[j] == crm.r_max() - 1 {
                Outcome::Collided
            } else {
                Outcome::Dropped
            };
            if outcome == Outcome::Delivered {
                s.xhat.copy_from(&s.x);
                s.d = 0;
            } else {
                s.xhat.copy_from(&s.pred);
                s.d += 1;
            }
            s.u.gemv(-1.0, l.plant.gain(), &s.xhat, 0.0);
            let sq = s.x.norm_squared();
            s.sum_sq += sq;
            if !sq.is_finite() || s.x.iter().any(|v| libm::fabs(*v) > DIVERGENCE_LIMIT) {
                diverged = true;
            }
            let t = &mut trace.loops[j];
            t.outcome.push(outcome);
            t.d.push(s.d);
            t.attempts.push(attempts[j]);
            t.delivery_slot.push(slot[j]);
            if cfg.record_states {
                t.x.extend(s.x.iter());
                t.xhat.extend(s.xhat.iter());
            }
            if (k + 1) % stride == 0 {
                t.running_mean.push((k + 1, s.sum_sq / (k + 1) as f64));
            }
        }
        trace.instants = k + 1;
        if diverged {
            trace.diverged_at = Some(k);
            break;
        }
    }
    for (t, s) in trace.loops.iter_mut().zip(&sims) {
        t.mean_sq_state = s.sum_sq / trace.instants as f64;
        if t.running_mean.last().map(|r| r.0) != Some(trace.instants) {
            t.running_mean.push((trace.instants, t.mean_sq_state));
        }
    }
    Ok(trace)
}

/// Event statistics of instants whose previous delay was `d - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayBin {
    /// 1-based delay index, as used by the trigger policy.
    pub d: usize,
    pub visits: u64,
    pub events: u64,
    pub low_confidence: bool,
}

impl DelayBin {
    pub fn p_gamma(&self) -> f64 {
        if self.visits == 0 {
            f64::NAN
        } else {
            self.events as f64 / self.visits as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopStats {
    pub instants: u64,
    pub events: u64,
    pub delivered: u64,
    pub collided: u64,
    pub suppressed: u64,
    pub dropped: u64,
    /// `p_gamma,d`, `d = 1..=d_bins`.
    pub p_gamma: Vec<DelayBin>,
    /// Instants spent at each delay `0..d_bins`; the last entry collects `d >= d_bins`.
    pub delay_histogram: Vec<u64>,
    /// Delay reached just before each delivery, same binning. These are
    /// independent draws when deliveries are independent across instants.
    pub renewal_histogram: Vec<u64>,
    pub mean_sq_state: f64,
}

impl LoopStats {
    pub fn reliability(&self) -> f64 {
        self.delivered as f64 / self.instants.max(1) as f64
    }

    /// Binomial standard error of [`Self::reliability`] at probability `p`.
    pub fn reliability_sigma(&self, p: f64) -> f64 {
        libm::sqrt(p * (1.0 - p) / self.instants.max(1) as f64)
    }
}

/// Pearson statistic of a delay histogram against `P(d) = pi0 p_l^d`
/// (last bin: `P(d >= K) = p_l^K`). Bins with expected count below five are
/// pooled into their neighbour. Returns the statistic and its degrees of freedom.
pub fn geometric_chi_square(histogram: &[u64], pi0: f64, p_loss: f64) -> (f64, usize) {
    let total: u64 = histogram.iter().sum();
    let n = total as f64;
    let k = histogram.len();
    let mut expected: Vec<f64> = (0..k).map(|d| n * pi0 * libm::pow(p_loss, d as f64)).collect();
    expected[k - 1] = n * libm::pow(p_loss, (k - 1) as f64);
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (o, e) in histogram.iter().zip(&expected) {
        o_acc += *o as f64;
        e_acc += e;
        if e_acc >= 5.0 {
            bins.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => bins.push((o_acc, e_acc)),
        }
    }
    let stat = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    (stat, bins.len().saturating_sub(1))
}

/// Per-loop empirical statistics with delay bins `1..=d_bins`.
pub fn empirical_stats(trace: &SimTrace, d_bins: usize) -> Vec<LoopStats> {
    let d_bins = d_bins.max(1);
    trace
        .loops
        .iter()
        .map(|t| {
            let mut bins: Vec<DelayBin> =
                (1..=d_bins).map(|d| DelayBin { d, visits: 0, events: 0, low_confidence: true }).collect();
            let mut delay_histogram = vec![0u64; d_bins];
            let mut renewal_histogram = vec![0u64; d_bins];
            let mut prev = 0u32;
            for (o, &d) in t.outcome.iter().zip(&t.d) {
                let idx = prev as usize;
                if idx < d_bins {
                    bins[idx].visits += 1;
                    if o.is_event() {
                        bins[idx].events += 1;
                    }
                }
                if *o == Outcome::Delivered {
                    renewal_histogram[idx.min(d_bins - 1)] += 1;
                }
                delay_histogram[(d as usize).min(d_bins - 1)] += 1;
                prev = d;
            }
            for b in bins.iter_mut() {
                b.low_confidence = b.visits < MIN_BIN_VISITS;
            }
            LoopStats {
                instants: t.outcome.len() as u64,
                events: t.events(),
                delivered: t.count(Outcome::Delivered),
                collided: t.count(Outcome::Collided),
                suppressed: t.count(Outcome::Suppressed),
                dropped: t.count(Outcome::Dropped),
                p_gamma: bins,
                delay_histogram,
                renewal_histogram,
                mean_sq_state: t.mean_sq_state,
            }
        })
        .collect()
}
