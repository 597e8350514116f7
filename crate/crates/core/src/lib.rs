//! Online core/uncore frequency self-tuning for program regions.
//!
//! Regions are identified by their calling context in a dynamic call tree.
//! Each long-running region gets its own state-action table over the
//! frequency grid and is tuned from energy measurements, here provided by a
//! simulated meter.

pub mod calltree;
pub mod energymodel;
pub mod freqspace;
pub mod learner;
pub mod rng;
pub mod persistence;
pub mod simulator;
pub mod report;
pub mod cli;
