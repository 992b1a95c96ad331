use std::fmt;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use super::plan::InitPlan;

/// Name of the startup script looked up in the working directory and the
/// appliance.
pub const SCRIPT_NAME: &str = "apppot-run";
/// Where the appliance-embedded startup script lives unless configured.
pub const DEFAULT_APPLIANCE_SCRIPT: &str = "/usr/local/bin/apppot-run";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobSource {
    BootCmdline,
    WorkdirScript,
    ApplianceScript,
    Interactive,
}

impl fmt::Display for JobSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobSource::BootCmdline => "boot command line",
            JobSource::WorkdirScript => "working directory script",
            JobSource::ApplianceScript => "appliance script",
            JobSource::Interactive => "interactive shell",
        })
    }
}

/// The job selected for this boot. `command` is a shell command line for
/// [`JobSource::BootCmdline`], a guest script path for the script sources,
/// and empty for [`JobSource::Interactive`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobCommand {
    pub source: JobSource,
    pub command: String,
    /// Guest path.
    pub cwd: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobResolution {
    pub job: JobCommand,
    pub warnings: Vec<String>,
}

/// Picks the job: boot command line, then `apppot-run` in the working
/// directory, then the appliance's `apppot-run`, then an interactive shell.
///
/// `appliance_root` and `workdir` are paths this process can inspect;
/// `script_location` is the guest path of the appliance script.
pub fn resolve_job_command(
    plan: &InitPlan,
    appliance_root: &Path,
    workdir: &Path,
    script_location: &str,
) -> JobResolution {
    let cwd = plan.workdir_mount.clone();
    let mut warnings = Vec::new();
    let pick = |source, command: String, warnings| JobResolution {
        job: JobCommand {
            source,
            command,
            cwd: cwd.clone(),
        },
        warnings,
    };

    if let Some(cmd) = &plan.job_command {
        return pick(JobSource::BootCmdline, cmd.clone(), warnings);
    }
    if probe_script(&workdir.join(SCRIPT_NAME), &mut warnings) {
        let guest = format!("{}/{SCRIPT_NAME}", plan.workdir_mount.trim_end_matches('/'));
        return pick(JobSource::WorkdirScript, guest, warnings);
    }
    let in_appliance = appliance_root.join(script_location.trim_start_matches('/'));
    if probe_script(&in_appliance, &mut warnings) {
        return pick(
            JobSource::ApplianceScript,
            script_location.to_owned(),
            warnings,
        );
    }
    pick(JobSource::Interactive, String::new(), warnings)
}

fn probe_script(path: &Path, warnings: &mut Vec<String>) -> bool {
    match fs::metadata(path) {
        Ok(meta) if meta.is_file() && meta.permissions().mode() & 0o111 != 0 => true,
        Ok(meta) if meta.is_file() => {
            warnings.push(format!("{} is not executable, skipping", path.display()));
            false
        }
        Ok(_) => {
            warnings.push(format!(
                "{} is not a regular file, skipping",
                path.display()
            ));
            false
        }
        Err(_) => false,
    }
}
