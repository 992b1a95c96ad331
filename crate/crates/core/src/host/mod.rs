//! The host side: turning a [`JobSpec`] into a running appliance.
//!
//! The boot command line is the only channel into the guest. Both backends
//! receive the same one; the mock backend feeds it to [`init_main`] in
//! process, the UML backend appends it to the kernel's argv. The guest
//! console is a single stream that ends up on the caller's sink.
//!
//! [`init_main`]: crate::guest::init_main

mod console;
mod launch;
mod spec;
mod wrapper;

use std::io;
use std::path::Path;

use thiserror::Error;

pub use console::{pump_console, PumpResult, Tee};
pub use launch::{
    build_uml_invocation, launch, scratch_dir, uml_argv, BackendInvocation, RunOutcome,
    STATUS_GUEST_CRASH, TMPDIR_VAR,
};
pub use spec::{
    build_boot_cmdline, build_boot_cmdline_for, workdir_owner, Backend, JobSpec,
    DEFAULT_MEMORY_MIB, MIN_MEMORY_MIB,
};
pub use wrapper::{emit_batch_wrapper, shell_quote, Flavor, GRID_STDOUT, WRAPPER_NAME};

use crate::bootparam::BootParamError;

#[derive(Debug, Error)]
pub enum HostError {
    #[error("invalid job: {0}")]
    InvalidSpec(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error(transparent)]
    BootParams(#[from] BootParamError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("cannot start backend: {0}")]
    Spawn(io::Error),
}

impl HostError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        HostError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
