use thiserror::Error;

use crate::bootparam::{
    BootParams, KEY_CHANGES, KEY_GID, KEY_JOBCMD, KEY_MPI, KEY_TAG, KEY_UID, KEY_WORKDIR,
    RESERVED_KEYS,
};

/// Guest mount point of the host working directory unless overridden.
pub const DEFAULT_WORKDIR_MOUNT: &str = "/home/user/job";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("refusing {0} 0: jobs never run as or for root")]
    RootIdentity(&'static str),
    #[error("{key} must be a positive integer, got {value:?}")]
    BadId { key: &'static str, value: String },
    #[error("{present} given without {missing}")]
    PartialIdentity {
        present: &'static str,
        missing: &'static str,
    },
    #[error("workdir mount point must be absolute, got {0:?}")]
    RelativeWorkdir(String),
    #[error("{0} is reserved and not supported by this guest")]
    Unsupported(&'static str),
}

/// Host owner of the working directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostIdentity {
    pub uid: u32,
    pub gid: u32,
}

/// What the guest should do this boot, decoded from the boot parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitPlan {
    pub job_command: Option<String>,
    pub changes_path: Option<String>,
    pub workdir_mount: String,
    /// `None` leaves the guest user's ids alone.
    pub host_identity: Option<HostIdentity>,
    pub tag: Option<String>,
}

impl Default for InitPlan {
    fn default() -> Self {
        Self {
            job_command: None,
            changes_path: None,
            workdir_mount: DEFAULT_WORKDIR_MOUNT.to_owned(),
            host_identity: None,
            tag: None,
        }
    }
}

pub fn parse_plan(params: &BootParams) -> Result<InitPlan, PlanError> {
    parse_plan_with_warnings(params).map(|(plan, _)| plan)
}

/// Like [`parse_plan`], also returning one warning per unknown `apppot.*` key.
pub fn parse_plan_with_warnings(params: &BootParams) -> Result<(InitPlan, Vec<String>), PlanError> {
    if params.get(KEY_MPI).is_some() {
        return Err(PlanError::Unsupported(KEY_MPI));
    }
    let warnings = params
        .pairs
        .iter()
        .filter(|(k, _)| !RESERVED_KEYS.contains(&k.as_str()))
        .map(|(k, _)| format!("ignoring unknown boot parameter {k}"))
        .collect();

    let non_empty = |key| params.get(key).filter(|v| !v.is_empty()).map(str::to_owned);
    let uid = parse_id(params, KEY_UID, "uid")?;
    let gid = parse_id(params, KEY_GID, "gid")?;
    let host_identity = match (uid, gid) {
        (Some(uid), Some(gid)) => Some(HostIdentity { uid, gid }),
        (None, None) => None,
        (Some(_), None) => {
            return Err(PlanError::PartialIdentity {
                present: KEY_UID,
                missing: KEY_GID,
            })
        }
        (None, Some(_)) => {
            return Err(PlanError::PartialIdentity {
                present: KEY_GID,
                missing: KEY_UID,
            })
        }
    };
    let workdir_mount = match params.get(KEY_WORKDIR) {
        None => DEFAULT_WORKDIR_MOUNT.to_owned(),
        Some(w) if w.starts_with('/') => match w.trim_end_matches('/') {
            "" => "/".to_owned(),
            trimmed => trimmed.to_owned(),
        },
        Some(w) => return Err(PlanError::RelativeWorkdir(w.to_owned())),
    };

    let plan = InitPlan {
        job_command: non_empty(KEY_JOBCMD),
        changes_path: non_empty(KEY_CHANGES),
        workdir_mount,
        host_identity,
        tag: params.get(KEY_TAG).map(str::to_owned),
    };
    Ok((plan, warnings))
}

fn parse_id(
    params: &BootParams,
    key: &'static str,
    what: &'static str,
) -> Result<Option<u32>, PlanError> {
    let Some(raw) = params.get(key) else {
        return Ok(None);
    };
    match raw.parse::<u32>() {
        Ok(0) => Err(PlanError::RootIdentity(what)),
        Ok(id) if raw.bytes().all(|b| b.is_ascii_digit()) => Ok(Some(id)),
        _ => Err(PlanError::BadId {
            key,
            value: raw.to_owned(),
        }),
    }
}
