//! Guest user database view and the uid/gid remap applied at boot.
//!
//! Accesses to the shared working directory are checked by the host kernel
//! against the user running the hypervisor, so the guest's regular user is
//! renumbered to match the owner of that directory.

use std::fmt;

use thiserror::Error;

use super::plan::InitPlan;

/// Name of the regular user in the reference appliance.
pub const DEFAULT_GUEST_USER: &str = "user";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("guest user {0:?} does not exist")]
    NoSuchUser(String),
    #[error("malformed {file} line {line}: {text:?}")]
    Malformed {
        file: &'static str,
        line: usize,
        text: String,
    },
    #[error("refusing to map guest user {0:?} to uid 0")]
    RootTarget(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PasswdEntry {
    pub name: String,
    pub password: String,
    pub uid: u32,
    pub gid: u32,
    pub gecos: String,
    pub home: String,
    pub shell: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupEntry {
    pub name: String,
    pub password: String,
    pub gid: u32,
    pub members: String,
}

/// In-memory copy of `/etc/passwd` and `/etc/group`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UserDatabase {
    pub users: Vec<PasswdEntry>,
    pub groups: Vec<GroupEntry>,
}

impl UserDatabase {
    pub fn parse(passwd: &str, group: &str) -> Result<Self, IdentityError> {
        let mut db = UserDatabase::default();
        for (i, line) in passwd.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = || IdentityError::Malformed {
                file: "passwd",
                line: i + 1,
                text: line.to_owned(),
            };
            let f: Vec<&str> = line.split(':').collect();
            let [name, password, uid, gid, gecos, home, shell] = f[..] else {
                return Err(malformed());
            };
            db.users.push(PasswdEntry {
                name: name.into(),
                password: password.into(),
                uid: uid.parse().map_err(|_| malformed())?,
                gid: gid.parse().map_err(|_| malformed())?,
                gecos: gecos.into(),
                home: home.into(),
                shell: shell.into(),
            });
        }
        for (i, line) in group.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = || IdentityError::Malformed {
                file: "group",
                line: i + 1,
                text: line.to_owned(),
            };
            let f: Vec<&str> = line.split(':').collect();
            let [name, password, gid, members] = f[..] else {
                return Err(malformed());
            };
            db.groups.push(GroupEntry {
                name: name.into(),
                password: password.into(),
                gid: gid.parse().map_err(|_| malformed())?,
                members: members.into(),
            });
        }
        Ok(db)
    }

    pub fn passwd_text(&self) -> String {
        self.users
            .iter()
            .map(|u| {
                format!(
                    "{}:{}:{}:{}:{}:{}:{}\n",
                    u.name, u.password, u.uid, u.gid, u.gecos, u.home, u.shell
                )
            })
            .collect()
    }

    pub fn group_text(&self) -> String {
        self.groups
            .iter()
            .map(|g| format!("{}:{}:{}:{}\n", g.name, g.password, g.gid, g.members))
            .collect()
    }

    pub fn user(&self, name: &str) -> Option<&PasswdEntry> {
        self.users.iter().find(|u| u.name == name)
    }
}

/// Renumbering of one guest user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityMapping {
    pub guest_user: String,
    pub from_uid: u32,
    pub to_uid: u32,
    pub from_gid: u32,
    pub to_gid: u32,
}

impl IdentityMapping {
    pub fn is_identity(&self) -> bool {
        self.from_uid == self.to_uid && self.from_gid == self.to_gid
    }

    /// Renumbers the user and its primary group in `db`.
    pub fn apply(&self, db: &mut UserDatabase) -> Result<(), IdentityError> {
        let user = db
            .users
            .iter_mut()
            .find(|u| u.name == self.guest_user)
            .ok_or_else(|| IdentityError::NoSuchUser(self.guest_user.clone()))?;
        user.uid = self.to_uid;
        user.gid = self.to_gid;
        for group in db.groups.iter_mut().filter(|g| g.gid == self.from_gid) {
            group.gid = self.to_gid;
        }
        Ok(())
    }

    /// New owner for an object currently owned by `uid:gid`, if it changes.
    pub fn remap_owner(&self, uid: u32, gid: u32) -> Option<(u32, u32)> {
        let new_uid = if uid == self.from_uid {
            self.to_uid
        } else {
            uid
        };
        let new_gid = if gid == self.from_gid {
            self.to_gid
        } else {
            gid
        };
        (new_uid != uid || new_gid != gid).then_some((new_uid, new_gid))
    }
}

impl fmt::Display for IdentityMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} uid {}->{} gid {}->{}",
            self.guest_user, self.from_uid, self.to_uid, self.from_gid, self.to_gid
        )
    }
}

/// Maps `guest_user` onto the plan's host identity. Without one the mapping
/// is the identity on the user's current ids.
pub fn remap_identity(
    db: &UserDatabase,
    plan: &InitPlan,
    guest_user: &str,
) -> Result<IdentityMapping, IdentityError> {
    let user = db
        .user(guest_user)
        .ok_or_else(|| IdentityError::NoSuchUser(guest_user.to_owned()))?;
    let (to_uid, to_gid) = match plan.host_identity {
        Some(host) => (host.uid, host.gid),
        None => (user.uid, user.gid),
    };
    if to_uid == 0 {
        return Err(IdentityError::RootTarget(guest_user.to_owned()));
    }
    Ok(IdentityMapping {
        guest_user: guest_user.to_owned(),
        from_uid: user.uid,
        to_uid,
        from_gid: user.gid,
        to_gid,
    })
}
