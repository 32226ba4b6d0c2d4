//! Analytic and Monte Carlo tools for the expected file-download time of
//! layered erasure-coding schemes over memoryless erasure channels.
//!
//! A file of `k_p` packets, each carrying `k_s` data symbols, is delivered to
//! one or more users. The inner code protects symbols within a packet, the
//! outer code protects packets within the file, and three redundancy layouts
//! are analyzed:
//!
//! * `iir`: infinite incremental redundancy. Rateless inner code; each packet
//!   is repaired with exactly as many extra symbol slots as the channel
//!   demands.
//! * `fr`: fixed redundancy. Each packet is a fixed `n_s`-symbol block that
//!   decodes iff at most `n_s - k_s` symbols erase; failed blocks are
//!   retransmitted whole (equivalently, a rateless outer code supplies
//!   replacement packets).
//! * `fir`: finite incremental redundancy. Incremental repair up to a cap of
//!   `n_s` slots per attempt, after which the packet is retried from scratch.
//!
//! [`dist`] holds the distribution machinery, [`schemes`] the closed-form and
//! exact-sum delay formulas, [`montecarlo`] a seeded trial-level simulator,
//! [`optimize`] the block-length optimizer and multicast crossover search,
//! and [`experiment`] the sweep runner, figure reproductions, and CSV output.

pub mod dist;
pub mod experiment;
pub mod montecarlo;
pub mod optimize;
pub mod schemes;

pub use dist::ErasureProb;
pub use schemes::{CodeConfig, Scenario, Scheme};
