//! The environment inside a booted appliance, where init runs as root.

use std::fs;
use std::io::{self, Stdout, Write};
use std::os::unix::fs::{lchown, MetadataExt};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::Command;

use super::{GuestEnv, IdentityMapping, JobCommand, JobSource, PasswdEntry, UserDatabase};

/// Where the kernel exposes its command line.
pub const KERNEL_CMDLINE: &str = "/proc/cmdline";

/// Mounts the host working directory with UML's `hostfs`, whose host-side
/// root is set by the `hostfs=` kernel argument the launcher adds.
pub struct SystemGuest {
    console: Stdout,
    identity_applied: bool,
    power_off: bool,
}

impl SystemGuest {
    pub fn new() -> Self {
        SystemGuest {
            console: io::stdout(),
            identity_applied: false,
            power_off: true,
        }
    }

    /// Keep the machine running after init finishes (for debugging images).
    pub fn without_power_off(mut self) -> Self {
        self.power_off = false;
        self
    }

    pub fn read_cmdline() -> io::Result<String> {
        fs::read_to_string(KERNEL_CMDLINE)
    }
}

impl Default for SystemGuest {
    fn default() -> Self {
        Self::new()
    }
}

fn reown_tree(path: &Path, mapping: &IdentityMapping) -> io::Result<u64> {
    let meta = fs::symlink_metadata(path)?;
    let mut count = 0;
    if let Some((uid, gid)) = mapping.remap_owner(meta.uid(), meta.gid()) {
        lchown(path, Some(uid), Some(gid))?;
        count += 1;
    }
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            count += reown_tree(&entry?.path(), mapping)?;
        }
    }
    Ok(count)
}

/// Whether `mount_point` appears as a mount target in `/proc/mounts`.
fn is_mounted(mount_point: &str) -> bool {
    fs::read_to_string("/proc/mounts")
        .map(|m| m.lines().any(|l| l.split(' ').nth(1) == Some(mount_point)))
        .unwrap_or(false)
}

impl GuestEnv for SystemGuest {
    fn console(&mut self) -> &mut dyn Write {
        &mut self.console
    }

    fn has_console(&self) -> bool {
        true
    }

    fn appliance_root(&self) -> PathBuf {
        PathBuf::from("/")
    }

    fn mount_workdir(&mut self, guest_path: &str) -> io::Result<PathBuf> {
        fs::create_dir_all(guest_path)?;
        if !is_mounted(guest_path) {
            let status = Command::new("mount")
                .args(["-t", "hostfs", "hostfs", guest_path])
                .status()?;
            if !status.success() {
                return Err(io::Error::other(format!(
                    "mount -t hostfs on {guest_path} failed ({status})"
                )));
            }
        }
        fs::read_dir(guest_path)?;
        Ok(PathBuf::from(guest_path))
    }

    fn resolve_path(&self, guest_path: &str) -> PathBuf {
        PathBuf::from(guest_path)
    }

    fn load_users(&mut self) -> io::Result<UserDatabase> {
        let passwd = fs::read_to_string("/etc/passwd")?;
        let group = fs::read_to_string("/etc/group")?;
        UserDatabase::parse(&passwd, &group).map_err(io::Error::other)
    }

    fn apply_identity(&mut self, mapping: &IdentityMapping, db: &UserDatabase) -> io::Result<u64> {
        if self.identity_applied {
            return Err(io::Error::other("identity already remapped this boot"));
        }
        let user = db
            .user(&mapping.guest_user)
            .ok_or_else(|| io::Error::other(format!("no guest user {:?}", mapping.guest_user)))?;
        fs::write("/etc/passwd", db.passwd_text())?;
        fs::write("/etc/group", db.group_text())?;
        self.identity_applied = true;
        let home = Path::new(&user.home);
        if home.is_dir() {
            reown_tree(home, mapping)
        } else {
            Ok(0)
        }
    }

    fn run_job(&mut self, job: &JobCommand, user: &PasswdEntry) -> io::Result<i32> {
        let shell = if user.shell.is_empty() {
            "/bin/sh"
        } else {
            &user.shell
        };
        let mut cmd = match job.source {
            JobSource::BootCmdline => {
                let mut c = Command::new(shell);
                c.arg("-c").arg(&job.command);
                c
            }
            JobSource::WorkdirScript | JobSource::ApplianceScript => Command::new(&job.command),
            JobSource::Interactive => {
                let mut c = Command::new(shell);
                c.arg("-l");
                c
            }
        };
        cmd.current_dir(&job.cwd)
            .env("HOME", &user.home)
            .env("USER", &user.name)
            .env("LOGNAME", &user.name)
            .uid(user.uid)
            .gid(user.gid);
        self.console.flush()?;
        let status = cmd.status()?;
        Ok(status
            .code()
            .or_else(|| status.signal().map(|s| 128 + s))
            .unwrap_or(255))
    }

    fn shutdown(&mut self, _status: i32) {
        let _ = self.console.flush();
        if self.power_off {
            // SAFETY: sync has no preconditions.
            unsafe { libc::sync() };
            let _ = Command::new("poweroff").arg("-f").status();
        }
    }
}
