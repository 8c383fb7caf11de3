//! Model-based multi-agent ranking for short-video recommendation sessions.
//!
//! The crate is organized bottom-up:
//!
//! - [`rng`] — deterministic, splittable random streams.
//! - [`nn`] — tensors, a reverse-mode autodiff tape, layers, Adam, checkpoints.
//! - [`env`] — a synthetic session simulator with seven feedback aspects.
//! - [`agents`] — collaborating per-aspect actors/critics with shared attention.
//! - [`worldmodel`] — a siamese recurrent feedback model that prices
//!   never-impressed slates with an uncertainty-scaled reward.
//! - [`training`] — replay buffers, temporal-difference updates, the train loop.
//! - [`evalkit`] — offline estimators (capped importance sampling, grouped AUC),
//!   online rollouts, and a behavior-cloning baseline.
//! - [`config`] / [`cli`] — TOML configuration and the `mmrf` command-line tool.
//!
//! Everything is seeded: the same configuration and seed produce byte-identical
//! reports regardless of thread count.

pub mod agents;
pub mod cli;
pub mod config;
pub mod env;
pub mod evalkit;
pub mod nn;
pub mod ranking;
pub mod rng;
pub mod training;
pub mod worldmodel;
