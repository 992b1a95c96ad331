//! Host checks run before submitting an appliance job.
//!
//! A UML guest maps its memory one page at a time into a file on the
//! scratch filesystem, so the host's map-count limit and the free space
//! there both cap the usable guest memory. Batch systems that add up
//! resident memory per process also count those shared pages once per
//! process, and the guest kernel runs on a single CPU.

use std::collections::BTreeMap;
use std::ffi::CString;
use std::fmt;
use std::fs;
use std::os::unix::ffi::OsStrExt;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

const MIB: u64 = 1 << 20;
pub const VALID_PAGE_SIZES: [u64; 3] = [4096, 16384, 65536];
pub const MIN_MEMORY_MIB: u64 = 16;
pub const MAX_MAP_COUNT_FILE: &str = "/proc/sys/vm/max_map_count";
/// Per-node memory limit a SLURM job advertises, in MiB.
pub const SLURM_MEM_VAR: &str = "SLURM_MEM_PER_NODE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostProbe {
    /// `None` when the host does not expose the limit.
    pub max_map_count: Option<u64>,
    pub page_size: u64,
    /// Bytes free on the filesystem backing guest memory.
    pub scratch_free: Option<u64>,
    /// Bytes per job, if the batch system enforces a limit.
    pub batch_mem_limit: Option<u64>,
    pub cpus_requested: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Code {
    MapLimit,
    ShmSpace,
    BatchAccounting,
    NoSmp,
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Code::MapLimit => "MAP_LIMIT",
            Code::ShmSpace => "SHM_SPACE",
            Code::BatchAccounting => "BATCH_ACCOUNTING",
            Code::NoSmp => "NO_SMP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Pass,
    Warn,
    Fail,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Pass => "pass",
            Severity::Warn => "warn",
            Severity::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub code: Code,
    pub severity: Severity,
    pub message: String,
    pub numbers: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PreflightError {
    #[error("requested memory {0} MiB is below the minimum of {MIN_MEMORY_MIB} MiB")]
    MemoryTooSmall(u64),
    #[error("unsupported page size {0}")]
    PageSize(u64),
}

fn diag(
    code: Code,
    severity: Severity,
    message: String,
    numbers: &[(&'static str, u64)],
) -> Diagnostic {
    Diagnostic {
        code,
        severity,
        message,
        numbers: numbers.iter().copied().collect(),
    }
}

/// Guest pages, assuming one mapping per page.
pub fn needed_maps(requested_mem_mib: u64, page_size: u64) -> u64 {
    requested_mem_mib.saturating_mul(MIB).div_ceil(page_size)
}

/// One diagnostic per [`Code`], in declaration order.
pub fn check_host(
    probe: &HostProbe,
    requested_mem_mib: u64,
) -> Result<Vec<Diagnostic>, PreflightError> {
    if requested_mem_mib < MIN_MEMORY_MIB {
        return Err(PreflightError::MemoryTooSmall(requested_mem_mib));
    }
    if !VALID_PAGE_SIZES.contains(&probe.page_size) {
        return Err(PreflightError::PageSize(probe.page_size));
    }
    let bytes = requested_mem_mib.saturating_mul(MIB);
    let maps = needed_maps(requested_mem_mib, probe.page_size);

    let map_limit = match probe.max_map_count {
        None => diag(
            Code::MapLimit,
            Severity::Warn,
            format!("map count limit unknown; the guest needs up to {maps} mappings"),
            &[("needed_maps", maps), ("page_size", probe.page_size)],
        ),
        Some(max) => {
            let nums = [
                ("needed_maps", maps),
                ("max_map_count", max),
                ("page_size", probe.page_size),
            ];
            let ceiling = max.saturating_mul(probe.page_size) / MIB;
            if maps > max {
                diag(
                    Code::MapLimit,
                    Severity::Fail,
                    format!(
                        "{requested_mem_mib} MiB needs {maps} mappings but max_map_count is {max} \
                         (at most {ceiling} MiB with {} byte pages)",
                        probe.page_size
                    ),
                    &nums,
                )
            } else {
                diag(
                    Code::MapLimit,
                    Severity::Pass,
                    format!("{maps} mappings needed, limit {max}"),
                    &nums,
                )
            }
        }
    };

    let shm = match probe.scratch_free {
        None => diag(
            Code::ShmSpace,
            Severity::Warn,
            format!("free scratch space unknown; the guest needs {bytes} bytes"),
            &[("needed_bytes", bytes)],
        ),
        Some(free) => {
            let nums = [("needed_bytes", bytes), ("scratch_free", free)];
            if bytes > free {
                diag(
                    Code::ShmSpace,
                    Severity::Fail,
                    format!("guest memory needs {bytes} bytes of scratch space, only {free} free"),
                    &nums,
                )
            } else {
                diag(
                    Code::ShmSpace,
                    Severity::Pass,
                    format!("{bytes} bytes needed, {free} free"),
                    &nums,
                )
            }
        }
    };

    let accounting = match probe.batch_mem_limit {
        Some(limit) => diag(
            Code::BatchAccounting,
            Severity::Warn,
            format!(
                "batch memory limit of {limit} bytes is enforced by summing per-process memory; \
                 shared guest pages count once per UML process and may get the job killed"
            ),
            &[("batch_mem_limit", limit), ("needed_bytes", bytes)],
        ),
        None => diag(
            Code::BatchAccounting,
            Severity::Pass,
            "no batch memory limit advertised".to_owned(),
            &[],
        ),
    };

    let cpus = probe.cpus_requested;
    let smp = if cpus > 1 {
        diag(
            Code::NoSmp,
            Severity::Warn,
            format!("{cpus} CPUs requested but the guest uses only one"),
            &[("cpus_requested", cpus)],
        )
    } else {
        diag(
            Code::NoSmp,
            Severity::Pass,
            format!("{cpus} CPU requested"),
            &[("cpus_requested", cpus)],
        )
    };

    Ok(vec![map_limit, shm, accounting, smp])
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if n > 0 {
        n as u64
    } else {
        4096
    }
}

/// Bytes available to unprivileged users on the filesystem holding `path`.
pub fn free_space(path: &Path) -> Option<u64> {
    let c = CString::new(path.as_os_str().as_bytes()).ok()?;
    let mut st = std::mem::MaybeUninit::<libc::statvfs>::uninit();
    // SAFETY: `c` is NUL-terminated and `st` is large enough for the result.
    let rc = unsafe { libc::statvfs(c.as_ptr(), st.as_mut_ptr()) };
    if rc != 0 {
        return None;
    }
    // SAFETY: statvfs succeeded and filled `st`.
    let st = unsafe { st.assume_init() };
    // Field widths differ between targets.
    #[allow(clippy::unnecessary_cast)]
    let free = st.f_bavail as u64 * st.f_frsize as u64;
    Some(free)
}

/// Samples this host. Values the host does not expose stay `None`.
pub fn sample_host(scratch: &Path, cpus_requested: u64) -> HostProbe {
    HostProbe {
        max_map_count: fs::read_to_string(MAX_MAP_COUNT_FILE)
            .ok()
            .and_then(|s| s.trim().parse().ok()),
        page_size: page_size(),
        scratch_free: free_space(scratch),
        batch_mem_limit: std::env::var(SLURM_MEM_VAR)
            .ok()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .map(|mib| mib * MIB),
        cpus_requested,
    }
}
