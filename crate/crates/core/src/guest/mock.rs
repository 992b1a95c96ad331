//! In-process guest for running the init sequence on the host without a
//! hypervisor or privileges.
//!
//! The appliance is an ordinary host directory. Mounting the working
//! directory is path indirection: guest paths below the mount point resolve
//! into the host directory, everything else into the appliance tree. Guest
//! file ownership is simulated by a ledger covering the users' home trees,
//! and every job records the identity it ran under. When the host process is
//! root, jobs additionally drop to that identity for real.

use std::collections::BTreeMap;
use std::fs::{self, Permissions};
use std::io::{self, Write};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use super::{GuestEnv, IdentityMapping, JobCommand, JobSource, PasswdEntry, UserDatabase};
use crate::host::pump_console;

const FIXTURE_PASSWD: &str =
    "root:x:0:0:root:/root:/bin/sh\nuser:x:500:500:AppPot user:/home/user:/bin/sh\n";
const FIXTURE_GROUP: &str = "root:x:0:\nuser:x:500:\n";

/// Minimal appliance tree: a root account and the regular `user` (500:500).
pub struct MockAppliance;

impl MockAppliance {
    pub fn create(root: &Path) -> io::Result<()> {
        for dir in ["etc", "root", "home/user", "usr/local/bin", "opt"] {
            fs::create_dir_all(root.join(dir))?;
        }
        fs::write(root.join("etc/passwd"), FIXTURE_PASSWD)?;
        fs::write(root.join("etc/group"), FIXTURE_GROUP)?;
        fs::write(
            root.join("home/user/.profile"),
            "PATH=/usr/local/bin:/usr/bin:/bin\n",
        )?;
        for dir in [
            "",
            "etc",
            "home",
            "home/user",
            "opt",
            "usr",
            "usr/local",
            "usr/local/bin",
        ] {
            fs::set_permissions(root.join(dir), Permissions::from_mode(0o755))?;
        }
        Ok(())
    }
}

/// One job started by a [`MockGuest`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub source: JobSource,
    pub command: String,
    pub host_cwd: PathBuf,
    /// Effective guest identity the job ran under.
    pub uid: u32,
    pub gid: u32,
    pub status: i32,
}

pub struct MockGuest<W> {
    appliance: PathBuf,
    host_workdir: PathBuf,
    mount: Option<String>,
    console: W,
    interactive: bool,
    owners: BTreeMap<String, (u32, u32)>,
    identity_applied: bool,
    jobs: Vec<JobRecord>,
    shutdown_status: Option<i32>,
}

impl<W: Write> MockGuest<W> {
    /// Simulated ownership of every user's home tree is seeded from the
    /// appliance's `etc/passwd`.
    pub fn new(appliance: &Path, host_workdir: &Path, console: W) -> io::Result<Self> {
        let mut guest = MockGuest {
            appliance: appliance.to_path_buf(),
            host_workdir: host_workdir.to_path_buf(),
            mount: None,
            console,
            interactive: false,
            owners: BTreeMap::new(),
            identity_applied: false,
            jobs: Vec::new(),
            shutdown_status: None,
        };
        let db = guest.read_users()?;
        for user in db.users.iter().filter(|u| u.uid != 0) {
            let host_home = guest.resolve_path(&user.home);
            if host_home.is_dir() {
                let mut paths = vec![user.home.trim_end_matches('/').to_owned()];
                list_tree(&host_home, user.home.trim_end_matches('/'), &mut paths)?;
                for p in paths {
                    guest.owners.insert(p, (user.uid, user.gid));
                }
            }
        }
        Ok(guest)
    }

    /// Treat the console as interactive (a shell may be started on it).
    pub fn with_interactive(mut self, interactive: bool) -> Self {
        self.interactive = interactive;
        self
    }

    pub fn console_ref(&self) -> &W {
        &self.console
    }

    pub fn into_console(self) -> W {
        self.console
    }

    pub fn jobs(&self) -> &[JobRecord] {
        &self.jobs
    }

    pub fn shutdown_status(&self) -> Option<i32> {
        self.shutdown_status
    }

    pub fn mounted_at(&self) -> Option<&str> {
        self.mount.as_deref()
    }

    /// Owner of a guest path: simulated for the home trees, real for paths
    /// inside the mounted working directory, root for the rest.
    pub fn stat_owner(&self, guest_path: &str) -> Option<(u32, u32)> {
        let key = guest_path.trim_end_matches('/');
        if let Some(owner) = self.owners.get(key) {
            return Some(*owner);
        }
        let host = self.resolve_path(guest_path);
        let meta = fs::symlink_metadata(&host).ok()?;
        if self.in_mount(guest_path).is_some() {
            Some((meta.uid(), meta.gid()))
        } else {
            Some((0, 0))
        }
    }

    fn in_mount<'a>(&self, guest_path: &'a str) -> Option<&'a str> {
        let mount = self.mount.as_deref()?;
        if mount == "/" {
            return Some(guest_path.trim_start_matches('/'));
        }
        let rest = guest_path.strip_prefix(mount)?;
        if rest.is_empty() {
            Some("")
        } else {
            rest.strip_prefix('/')
        }
    }

    fn read_users(&self) -> io::Result<UserDatabase> {
        let passwd = fs::read_to_string(self.appliance.join("etc/passwd"))?;
        let group = fs::read_to_string(self.appliance.join("etc/group")).unwrap_or_default();
        UserDatabase::parse(&passwd, &group).map_err(io::Error::other)
    }

    fn host_shell(&self, shell: &str) -> PathBuf {
        let candidate = Path::new(shell);
        if candidate.is_absolute() && candidate.is_file() {
            candidate.to_path_buf()
        } else {
            PathBuf::from("/bin/sh")
        }
    }
}

fn list_tree(dir: &Path, guest_dir: &str, out: &mut Vec<String>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let guest = format!("{guest_dir}/{}", entry.file_name().to_string_lossy());
        let is_dir = entry.file_type()?.is_dir();
        out.push(guest.clone());
        if is_dir {
            list_tree(&entry.path(), &guest, out)?;
        }
    }
    Ok(())
}

fn effective_uid() -> u32 {
    // SAFETY: geteuid has no preconditions and cannot fail.
    unsafe { libc::geteuid() }
}

impl<W: Write> GuestEnv for MockGuest<W> {
    fn console(&mut self) -> &mut dyn Write {
        &mut self.console
    }

    fn has_console(&self) -> bool {
        self.interactive
    }

    fn appliance_root(&self) -> PathBuf {
        self.appliance.clone()
    }

    fn mount_workdir(&mut self, guest_path: &str) -> io::Result<PathBuf> {
        let meta = fs::metadata(&self.host_workdir)?;
        if !meta.is_dir() {
            return Err(io::Error::new(
                io::ErrorKind::NotADirectory,
                format!("{} is not a directory", self.host_workdir.display()),
            ));
        }
        // Checked on the mode bits too: a root test process bypasses access control.
        if meta.mode() & 0o500 != 0o500 {
            return Err(io::Error::new(
                io::ErrorKind::PermissionDenied,
                format!("{}: no read permission", self.host_workdir.display()),
            ));
        }
        fs::read_dir(&self.host_workdir)?;
        let mount = guest_path.trim_end_matches('/');
        self.mount = Some(if mount.is_empty() {
            "/".into()
        } else {
            mount.into()
        });
        Ok(self.host_workdir.clone())
    }

    fn resolve_path(&self, guest_path: &str) -> PathBuf {
        match self.in_mount(guest_path) {
            Some("") => self.host_workdir.clone(),
            Some(rest) => self.host_workdir.join(rest),
            None => self.appliance.join(guest_path.trim_start_matches('/')),
        }
    }

    fn load_users(&mut self) -> io::Result<UserDatabase> {
        self.read_users()
    }

    fn apply_identity(&mut self, mapping: &IdentityMapping, db: &UserDatabase) -> io::Result<u64> {
        if self.identity_applied {
            return Err(io::Error::other("identity already remapped this boot"));
        }
        let home = db
            .user(&mapping.guest_user)
            .map(|u| u.home.trim_end_matches('/').to_owned())
            .ok_or_else(|| io::Error::other(format!("no guest user {:?}", mapping.guest_user)))?;
        fs::write(self.appliance.join("etc/passwd"), db.passwd_text())?;
        fs::write(self.appliance.join("etc/group"), db.group_text())?;
        let prefix = format!("{home}/");
        let mut reowned = 0;
        for (path, owner) in self.owners.iter_mut() {
            if path != &home && !path.starts_with(&prefix) {
                continue;
            }
            if let Some(new) = mapping.remap_owner(owner.0, owner.1) {
                *owner = new;
                reowned += 1;
            }
        }
        self.identity_applied = true;
        Ok(reowned)
    }

    fn run_job(&mut self, job: &JobCommand, user: &PasswdEntry) -> io::Result<i32> {
        let shell = self.host_shell(&user.shell);
        let mut cmd = match job.source {
            JobSource::BootCmdline => {
                let mut c = Command::new(&shell);
                c.arg("-c").arg(&job.command);
                c
            }
            JobSource::WorkdirScript | JobSource::ApplianceScript => {
                Command::new(self.resolve_path(&job.command))
            }
            JobSource::Interactive => {
                let mut c = Command::new(&shell);
                c.arg("-i");
                c
            }
        };
        let host_cwd = self.resolve_path(&job.cwd);
        cmd.current_dir(&host_cwd)
            .env("HOME", self.resolve_path(&user.home))
            .env("USER", &user.name)
            .env("LOGNAME", &user.name)
            .env("APPPOT_GUEST_ROOT", &self.appliance)
            .stdin(Stdio::null());
        if effective_uid() == 0 && user.uid != 0 {
            cmd.uid(user.uid).gid(user.gid);
        }
        let (reader, writer) = io::pipe()?;
        cmd.stdout(writer.try_clone()?).stderr(writer);
        let mut child = cmd.spawn()?;
        // Our copies of the pipe's write end must be closed for EOF to arrive.
        drop(cmd);
        pump_console(reader, &mut self.console);
        let status = child.wait()?;
        let code = status
            .code()
            .or_else(|| status.signal().map(|s| 128 + s))
            .unwrap_or(255);
        self.jobs.push(JobRecord {
            source: job.source,
            command: job.command.clone(),
            host_cwd,
            uid: user.uid,
            gid: user.gid,
            status: code,
        });
        Ok(code)
    }

    fn shutdown(&mut self, status: i32) {
        self.shutdown_status = Some(status);
    }
}
