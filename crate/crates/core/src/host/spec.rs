use std::fmt;
use std::fs;
use std::os::unix::fs::MetadataExt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use crate::bootparam::{
    self, BootParams, KEY_CHANGES, KEY_GID, KEY_JOBCMD, KEY_TAG, KEY_UID, KEY_WORKDIR,
};
use crate::guest::DEFAULT_WORKDIR_MOUNT;

use super::HostError;

/// Smallest guest memory size accepted, in MiB.
pub const MIN_MEMORY_MIB: u64 = 16;
pub const DEFAULT_MEMORY_MIB: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// In-process guest against a fixture appliance tree.
    Mock,
    /// User-mode Linux kernel run as an ordinary process.
    Uml,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock" => Ok(Backend::Mock),
            "uml" => Ok(Backend::Uml),
            other => Err(format!("unknown backend {other:?} (expected mock or uml)")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Mock => "mock",
            Backend::Uml => "uml",
        })
    }
}

/// Everything needed to run one appliance job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub image_path: Option<PathBuf>,
    pub kernel_path: Option<PathBuf>,
    pub memory_mib: u64,
    pub workdir: PathBuf,
    pub job_command: Option<String>,
    /// Must lie inside `workdir`; relative paths are taken from there.
    pub changes_path: Option<PathBuf>,
    /// Passed through to the guest kernel untouched.
    pub extra_boot_args: Vec<String>,
    pub backend: Backend,
    pub tag: Option<String>,
    /// Copy-on-write overlay for the image; the image itself stays untouched.
    pub cow_path: Option<PathBuf>,
    /// Where the guest mounts `workdir`.
    pub guest_workdir: String,
    /// Appliance tree for the mock backend; a fresh fixture when unset.
    pub mock_appliance: Option<PathBuf>,
}

impl JobSpec {
    pub fn new(workdir: impl Into<PathBuf>, backend: Backend) -> Self {
        JobSpec {
            image_path: None,
            kernel_path: None,
            memory_mib: DEFAULT_MEMORY_MIB,
            workdir: workdir.into(),
            job_command: None,
            changes_path: None,
            extra_boot_args: Vec::new(),
            backend,
            tag: None,
            cow_path: None,
            guest_workdir: DEFAULT_WORKDIR_MOUNT.to_owned(),
            mock_appliance: None,
        }
    }

    /// Checks that do not depend on the local filesystem, so a spec can be
    /// turned into a wrapper for some other machine.
    pub fn validate_portable(&self) -> Result<(), HostError> {
        let invalid = |msg: String| Err(HostError::InvalidSpec(msg));
        if self.memory_mib < MIN_MEMORY_MIB {
            return invalid(format!(
                "memory {} MiB is below the minimum of {MIN_MEMORY_MIB} MiB",
                self.memory_mib
            ));
        }
        if !self.guest_workdir.starts_with('/') {
            return invalid(format!(
                "guest workdir {:?} is not absolute",
                self.guest_workdir
            ));
        }
        let mut probe = BootParams::new();
        for token in &self.extra_boot_args {
            probe.push_passthrough(token.clone())?;
        }
        Ok(())
    }

    /// Full validation before a launch on this machine.
    pub fn validate(&self) -> Result<(), HostError> {
        self.validate_portable()?;
        if !self.workdir.is_dir() {
            return Err(HostError::InvalidSpec(format!(
                "working directory {} does not exist",
                self.workdir.display()
            )));
        }
        if self.backend == Backend::Uml {
            for (what, path) in [("image", &self.image_path), ("kernel", &self.kernel_path)] {
                if path.is_none() {
                    return Err(HostError::InvalidSpec(format!(
                        "the uml backend needs a {what}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Makes `workdir` canonical and `changes_path` absolute so the pure
    /// builders see stable paths.
    pub fn resolved(&self) -> Result<JobSpec, HostError> {
        let mut spec = self.clone();
        spec.workdir =
            fs::canonicalize(&self.workdir).map_err(|e| HostError::io(&self.workdir, e))?;
        if let Some(changes) = &self.changes_path {
            let joined = spec.workdir.join(changes);
            spec.changes_path = Some(fs::canonicalize(&joined).unwrap_or(joined));
        }
        Ok(spec)
    }

    /// Guest path of the changes archive, as seen through the workdir mount.
    pub fn guest_changes_path(&self) -> Result<Option<String>, HostError> {
        let Some(changes) = &self.changes_path else {
            return Ok(None);
        };
        let workdir = normalize(&self.workdir);
        let full = normalize(&self.workdir.join(changes));
        let rel = full
            .strip_prefix(&workdir)
            .ok()
            .filter(|r| !r.as_os_str().is_empty())
            .ok_or_else(|| {
                HostError::InvalidSpec(format!(
                    "changes archive {} is not inside the working directory {}",
                    changes.display(),
                    self.workdir.display()
                ))
            })?;
        let rel = rel
            .to_str()
            .ok_or_else(|| HostError::InvalidSpec(format!("non UTF-8 path {}", rel.display())))?;
        Ok(Some(format!(
            "{}/{rel}",
            self.guest_workdir.trim_end_matches('/')
        )))
    }
}

/// Lexically resolves `.` and `..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// Host owner of the working directory, as a stat sees it right now.
pub fn workdir_owner(spec: &JobSpec) -> Result<(u32, u32), HostError> {
    let meta = fs::metadata(&spec.workdir).map_err(|e| HostError::io(&spec.workdir, e))?;
    Ok((meta.uid(), meta.gid()))
}

pub fn build_boot_cmdline(spec: &JobSpec) -> Result<String, HostError> {
    spec.validate()?;
    let spec = spec.resolved()?;
    build_boot_cmdline_for(&spec, workdir_owner(&spec)?)
}

/// Boot command line for `spec` with the working directory owned by `owner`.
pub fn build_boot_cmdline_for(spec: &JobSpec, owner: (u32, u32)) -> Result<String, HostError> {
    spec.validate_portable()?;
    let mut params = BootParams::new();
    if let Some(cmd) = &spec.job_command {
        params.set(KEY_JOBCMD, cmd.as_str())?;
    }
    if let Some(changes) = spec.guest_changes_path()? {
        params.set(KEY_CHANGES, changes)?;
    }
    params.set(KEY_UID, owner.0.to_string())?;
    params.set(KEY_GID, owner.1.to_string())?;
    params.set(KEY_WORKDIR, spec.guest_workdir.as_str())?;
    if let Some(tag) = &spec.tag {
        params.set(KEY_TAG, tag.as_str())?;
    }
    for token in &spec.extra_boot_args {
        params.push_passthrough(token.clone())?;
    }
    Ok(bootparam::encode(&params)?)
}
