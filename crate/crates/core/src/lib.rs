//! Meta-learning with PAC-Bayes certificates for stochastic neural networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndcore`]: tensors and a reverse-mode autodiff tape
//! - [`stochnet`]: factorized-Gaussian networks, reparameterized sampling, KLs
//! - [`bounds`]: single-task and meta-level PAC-Bayes bounds
//! - [`envs`]: task environments and the IDX loader
//! - [`metatrain`]: meta-training with a random or data-dependent prior
//! - [`evalreport`]: test-phase adaptation, confidence intervals and CSV reports
//! - [`config`] / [`commands`]: run configuration and the command implementations

pub mod bounds;
pub mod commands;
pub mod config;
pub mod envs;
pub mod evalreport;
pub mod metatrain;
pub mod ndcore;
pub mod rng;
pub mod stochnet;
