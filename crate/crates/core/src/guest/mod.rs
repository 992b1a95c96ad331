//! The guest side: everything `apppot-init` does once the appliance kernel
//! has booted.
//!
//! [`init_main`] runs six stages in a fixed order and announces each on the
//! console with a `apppot-init: [x] name:` banner:
//!
//! | stage | banner     | failure status |
//! |-------|------------|----------------|
//! | a     | `params`   | 120            |
//! | b     | `mount`    | 121            |
//! | c     | `identity` | 122            |
//! | d     | `changes`  | 123            |
//! | e     | `job`      | 124 (resolution), 125 (launch) |
//! | f     | `shutdown` | -              |
//!
//! A failing stage skips everything up to shutdown. Otherwise the status is
//! the job's own exit status. The last console line is always
//! `apppot-init: exit status N`, which is how a host that only sees the
//! console learns the result.
//!
//! The stages talk to the outside world only through [`GuestEnv`]:
//! [`SystemGuest`] inside a real appliance, [`MockGuest`] for in-process runs
//! on the host.

mod identity;
mod mock;
mod plan;
mod resolve;
mod system;

use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

pub use identity::{
    remap_identity, GroupEntry, IdentityError, IdentityMapping, PasswdEntry, UserDatabase,
    DEFAULT_GUEST_USER,
};
pub use mock::{JobRecord, MockAppliance, MockGuest};
pub use plan::{
    parse_plan, parse_plan_with_warnings, HostIdentity, InitPlan, PlanError, DEFAULT_WORKDIR_MOUNT,
};
pub use resolve::{
    resolve_job_command, JobCommand, JobResolution, JobSource, DEFAULT_APPLIANCE_SCRIPT,
    SCRIPT_NAME,
};
pub use system::SystemGuest;

use crate::bootparam;
use crate::snapshot::{apply_changes, ChangesArchive};

/// Prefix of every console line written by init.
pub const CONSOLE_PREFIX: &str = "apppot-init:";

pub const STATUS_DECODE: i32 = 120;
pub const STATUS_MOUNT: i32 = 121;
pub const STATUS_IDENTITY: i32 = 122;
pub const STATUS_CHANGES: i32 = 123;
pub const STATUS_RESOLUTION: i32 = 124;
pub const STATUS_OTHER: i32 = 125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Params,
    Mount,
    Identity,
    Changes,
    Job,
    Shutdown,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Params,
        Stage::Mount,
        Stage::Identity,
        Stage::Changes,
        Stage::Job,
        Stage::Shutdown,
    ];

    pub fn letter(self) -> char {
        match self {
            Stage::Params => 'a',
            Stage::Mount => 'b',
            Stage::Identity => 'c',
            Stage::Changes => 'd',
            Stage::Job => 'e',
            Stage::Shutdown => 'f',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Params => "params",
            Stage::Mount => "mount",
            Stage::Identity => "identity",
            Stage::Changes => "changes",
            Stage::Job => "job",
            Stage::Shutdown => "shutdown",
        }
    }

    /// Stable banner prefix, e.g. `apppot-init: [c] identity:`.
    pub fn banner(self) -> String {
        format!("{CONSOLE_PREFIX} [{}] {}:", self.letter(), self.name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What init needs from the machine it runs on.
pub trait GuestEnv {
    /// The system console; init banners and job output both go here.
    fn console(&mut self) -> &mut dyn Write;
    /// Whether someone can type into the console.
    fn has_console(&self) -> bool;
    /// Root of the appliance filesystem, as seen by this process.
    fn appliance_root(&self) -> PathBuf;
    /// Makes the host working directory visible at `guest_path` and returns
    /// the path this process uses to reach it.
    fn mount_workdir(&mut self, guest_path: &str) -> io::Result<PathBuf>;
    /// Translates a guest path into one this process can open.
    fn resolve_path(&self, guest_path: &str) -> PathBuf;
    fn load_users(&mut self) -> io::Result<UserDatabase>;
    /// Persists `db` (already renumbered) and re-owns the guest user's home.
    /// Returns the number of objects re-owned. Called at most once per boot.
    fn apply_identity(&mut self, mapping: &IdentityMapping, db: &UserDatabase) -> io::Result<u64>;
    /// Runs `job` as `user` and returns its exit status.
    fn run_job(&mut self, job: &JobCommand, user: &PasswdEntry) -> io::Result<i32>;
    fn shutdown(&mut self, status: i32);
}

#[derive(Debug, Clone)]
pub struct InitOptions {
    pub guest_user: String,
    /// Guest path of the appliance-embedded startup script.
    pub script_location: String,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            guest_user: DEFAULT_GUEST_USER.to_owned(),
            script_location: DEFAULT_APPLIANCE_SCRIPT.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitReport {
    pub status: i32,
    /// Stage that aborted the boot, if any.
    pub failed_stage: Option<Stage>,
    pub stage_timings: Vec<(Stage, Duration)>,
    pub job: Option<JobCommand>,
}

struct Failure {
    stage: Stage,
    status: i32,
    message: String,
}

fn fail(stage: Stage, status: i32, err: impl fmt::Display) -> Failure {
    Failure {
        stage,
        status,
        message: err.to_string(),
    }
}

struct Run<'a> {
    env: &'a mut dyn GuestEnv,
    timings: Vec<(Stage, Duration)>,
    current: Option<(Stage, Instant)>,
    job: Option<JobCommand>,
}

impl Run<'_> {
    fn say(&mut self, line: &str) {
        let console = self.env.console();
        let _ = writeln!(console, "{CONSOLE_PREFIX} {line}");
        let _ = console.flush();
    }

    fn enter(&mut self, stage: Stage, detail: &str) {
        self.leave();
        let console = self.env.console();
        let _ = writeln!(console, "{} {detail}", stage.banner());
        let _ = console.flush();
        self.current = Some((stage, Instant::now()));
    }

    fn leave(&mut self) {
        if let Some((stage, started)) = self.current.take() {
            self.timings.push((stage, started.elapsed()));
        }
    }

    fn stages(&mut self, cmdline: &str, opts: &InitOptions) -> Result<i32, Failure> {
        self.enter(Stage::Params, "reading boot parameters");
        let (params, warnings) = bootparam::decode_with_warnings(cmdline)
            .map_err(|e| fail(Stage::Params, STATUS_DECODE, e))?;
        for w in warnings {
            self.say(&format!("warning: {w}"));
        }
        let (plan, warnings) =
            parse_plan_with_warnings(&params).map_err(|e| fail(Stage::Params, STATUS_DECODE, e))?;
        for w in warnings {
            self.say(&format!("warning: {w}"));
        }
        if let Some(tag) = &plan.tag {
            self.say(&format!("run tag {tag:?}"));
        }

        self.enter(
            Stage::Mount,
            &format!("mounting working directory at {}", plan.workdir_mount),
        );
        let workdir = self
            .env
            .mount_workdir(&plan.workdir_mount)
            .map_err(|e| fail(Stage::Mount, STATUS_MOUNT, e))?;

        self.enter(
            Stage::Identity,
            &format!(
                "matching guest user {:?} to the working directory owner",
                opts.guest_user
            ),
        );
        let identity_failed = |e: &dyn fmt::Display| fail(Stage::Identity, STATUS_IDENTITY, e);
        let mut db = self.env.load_users().map_err(|e| identity_failed(&e))?;
        let mapping =
            remap_identity(&db, &plan, &opts.guest_user).map_err(|e| identity_failed(&e))?;
        if mapping.is_identity() {
            self.say(&format!("identity unchanged ({mapping})"));
        } else {
            mapping.apply(&mut db).map_err(|e| identity_failed(&e))?;
            let reowned = self
                .env
                .apply_identity(&mapping, &db)
                .map_err(|e| identity_failed(&e))?;
            self.say(&format!("remapped {mapping}, {reowned} objects re-owned"));
        }
        let user = db.user(&opts.guest_user).cloned().ok_or_else(|| {
            identity_failed(&format!("guest user {:?} vanished", opts.guest_user))
        })?;

        match &plan.changes_path {
            None => self.enter(Stage::Changes, "no changes archive"),
            Some(path) => {
                self.enter(Stage::Changes, &format!("merging {path}"));
                let guest_path = if path.starts_with('/') {
                    path.clone()
                } else {
                    format!("{}/{path}", plan.workdir_mount.trim_end_matches('/'))
                };
                let archive = ChangesArchive::read_file(&self.env.resolve_path(&guest_path))
                    .map_err(|e| fail(Stage::Changes, STATUS_CHANGES, e))?;
                let report = apply_changes(&self.env.appliance_root(), &archive)
                    .map_err(|e| fail(Stage::Changes, STATUS_CHANGES, e))?;
                for w in &report.warnings {
                    self.say(&format!("warning: {}: {}", w.path, w.reason));
                }
                self.say(&format!(
                    "merged {} entries, removed {}",
                    report.applied, report.deleted
                ));
            }
        }

        let resolution = resolve_job_command(
            &plan,
            &self.env.appliance_root(),
            &workdir,
            &opts.script_location,
        );
        let job = resolution.job;
        self.enter(
            Stage::Job,
            &format!("running {}: {}", job.source, job.command),
        );
        for w in resolution.warnings {
            self.say(&format!("warning: {w}"));
        }
        self.job = Some(job.clone());
        if job.source == JobSource::Interactive && !self.env.has_console() {
            return Err(fail(
                Stage::Job,
                STATUS_RESOLUTION,
                "no job specified and no console attached",
            ));
        }
        self.env
            .run_job(&job, &user)
            .map_err(|e| fail(Stage::Job, STATUS_OTHER, format!("cannot start job: {e}")))
    }
}

/// Runs the init sequence against `cmdline` and shuts the guest down.
pub fn init_main(cmdline: &str, env: &mut dyn GuestEnv, opts: &InitOptions) -> InitReport {
    let mut run = Run {
        env,
        timings: Vec::new(),
        current: None,
        job: None,
    };
    let (status, failed_stage) = match run.stages(cmdline, opts) {
        Ok(status) => {
            run.enter(Stage::Shutdown, &format!("job exited with status {status}"));
            (status, None)
        }
        Err(f) => {
            run.say(&format!(
                "error: [{}] {}: {}",
                f.stage.letter(),
                f.stage,
                f.message
            ));
            run.enter(
                Stage::Shutdown,
                &format!("aborting boot after {} failure", f.stage),
            );
            (f.status, Some(f.stage))
        }
    };
    run.say(&format!("exit status {status}"));
    run.env.shutdown(status);
    run.leave();
    InitReport {
        status,
        failed_stage,
        stage_timings: run.timings,
        job: run.job,
    }
}

/// Finds the last `apppot-init: exit status N` line in a console transcript.
pub fn find_exit_status(transcript: &[u8]) -> Option<i32> {
    let marker = format!("{CONSOLE_PREFIX} exit status ");
    String::from_utf8_lossy(transcript)
        .lines()
        .rev()
        .find_map(|line| {
            line.trim_end_matches('\r')
                .strip_prefix(&marker)
                .and_then(|n| n.trim().parse().ok())
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banners_are_lettered() {
        let banners: Vec<String> = Stage::ALL.iter().map(|s| s.banner()).collect();
        assert_eq!(banners[0], "apppot-init: [a] params:");
        assert_eq!(banners[5], "apppot-init: [f] shutdown:");
    }

    #[test]
    fn exit_status_is_read_from_transcript() {
        let t = b"boot noise\napppot-init: exit status 7\r\nreboot: System halted\n";
        assert_eq!(find_exit_status(t), Some(7));
        assert_eq!(find_exit_status(b"kernel panic"), None);
    }
}
