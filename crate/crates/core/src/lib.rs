//! Markov-model based sharing of provisioned bandwidth among network
//! slices, with per-slice anomaly tests and a deficit-weighted knapsack
//! scheduler.

pub mod anomaly;
pub mod detector;
pub mod harness;
pub mod markov;
pub mod scheduler;
pub mod trace;
pub mod trial;
