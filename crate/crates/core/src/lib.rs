//! Role-aware L2 regularization planning and variance diagnostics for the
//! scale parameters of normalization layers in residual and transformer
//! stacks.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`archspec`] — block-structured architecture descriptions, their JSON
//!   file format, and canonical topologies;
//! * [`classify`] — assigns each scale parameter one of four roles and emits
//!   per-parameter decay plans under selectable policies;
//! * [`varprop`] — closed-form feature-map variance profiles;
//! * [`simkernel`] — a seeded Monte Carlo forward-pass kernel that measures
//!   empirical profiles to validate the closed forms;
//! * [`efflr`] — scale invariance, gradient scaling, and the first-update
//!   norm experiment for the effective learning rate;
//! * [`verify`] — the acceptance checks, also exposed as the `verify` CLI
//!   subcommand;
//! * [`cli`] — the command-line front end.

pub mod archspec;
pub mod classify;
pub mod cli;
pub mod efflr;
pub mod simkernel;
pub mod varprop;
pub mod verify;

mod jsonfmt;

#[cfg(test)]
pub(crate) mod teststrat;
