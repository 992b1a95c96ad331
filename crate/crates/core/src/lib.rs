//! Toolkit for running software appliances as ordinary batch jobs.
//!
//! * [`snapshot`]: base manifests, changes archives and merging.
//! * [`bootparam`]: the host to guest channel on the kernel command line.
//! * [`guest`]: the in-guest init sequence and its execution environments.
//! * [`host`]: job specs, hypervisor invocation, launching and batch wrappers.
//! * [`preflight`]: host limit checks run before submitting a job.

pub mod bootparam;
pub mod guest;
pub mod host;
mod pct;
pub mod preflight;
pub mod snapshot;
