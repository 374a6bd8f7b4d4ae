//! Analysis and design of event-triggered control loops that share a
//! p-persistent CSMA channel.
//!
//! * [`model`]: plant, trigger, observer and control law of one loop.
//! * [`chain`]: delay-indexed Markov chain per loop and the fixed point
//!   coupling the loops through their busy-channel probabilities.
//! * [`stability`]: sufficient mean-square stability tests and bounds.
//! * [`density`]: grid propagation of scalar estimation-error densities.
//! * [`coupling`]: network solve for loops driven by fixed event thresholds.
//! * [`synthesis`]: policy families, stability regions, threshold extraction.
//! * [`simulate`]: sub-slot Monte Carlo simulation of the whole network.

#![no_std]

extern crate alloc;

pub mod chain;
pub mod coupling;
pub mod density;
pub mod error;
pub mod model;
pub mod simulate;
pub mod stability;
pub mod synthesis;

pub use error::{Error, Result};
