use std::fs::{self, OpenOptions, Permissions};
use std::io::{self, Write};
use std::os::unix::fs::{lchown, MetadataExt, OpenOptionsExt, PermissionsExt};
use std::path::Path;

use filetime::FileTime;

use super::{
    is_normalized, ChangesArchive, FileData, Manifest, MemberKind, Result, SnapshotError,
    BASE_MANIFEST,
};

/// A soft mismatch found while merging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeWarning {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeReport {
    /// Members written.
    pub applied: usize,
    /// Whiteouts removed.
    pub deleted: usize,
    pub warnings: Vec<MergeWarning>,
}

impl MergeReport {
    fn warn(&mut self, path: &str, reason: impl Into<String>) {
        self.warnings.push(MergeWarning {
            path: path.to_owned(),
            reason: reason.into(),
        });
    }
}

/// Merges `changes` into the tree at `root`.
///
/// Whiteouts are removed first, deepest path first; members are then
/// materialized in path order, so parents always exist before their
/// children. Directory modes and times are fixed up last.
pub fn apply_changes(root: &Path, changes: &ChangesArchive) -> Result<MergeReport> {
    changes.validate()?;
    let mut report = MergeReport::default();

    if let Some(label) = recorded_label(root) {
        if label != changes.base_label {
            report.warn(
                "",
                format!(
                    "base label mismatch: archive {:?}, tree {:?}",
                    changes.base_label, label
                ),
            );
        }
    }

    for path in changes.whiteouts.iter().rev() {
        let fail = |report: &MergeReport, source| SnapshotError::PartialMerge {
            path: path.clone(),
            report: report.clone(),
            source,
        };
        if !ancestors_are_dirs(root, path) {
            report.warn(path, "whiteout target absent");
            continue;
        }
        let target = root.join(path);
        match fs::symlink_metadata(&target) {
            Ok(meta) => {
                let removed = if meta.is_dir() {
                    fs::remove_dir_all(&target)
                } else {
                    fs::remove_file(&target)
                };
                removed.map_err(|e| fail(&report, e))?;
                report.deleted += 1;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                report.warn(path, "whiteout target absent")
            }
            Err(e) => return Err(fail(&report, e)),
        }
    }

    let mut dirs = Vec::new();
    for member in &changes.members {
        let fail = |report: &MergeReport, source| SnapshotError::PartialMerge {
            path: member.path.clone(),
            report: report.clone(),
            source,
        };
        debug_assert!(is_normalized(&member.path));
        ensure_parents(root, &member.path).map_err(|e| match e {
            ParentError::Unsafe(p) => SnapshotError::UnsafePath(p),
            ParentError::Io(source) => fail(&report, source),
        })?;
        let target = root.join(&member.path);
        let existing = fs::symlink_metadata(&target).ok();
        match &member.kind {
            MemberKind::Dir => {
                match existing {
                    Some(meta) if meta.is_dir() => {
                        // Final mode is restored below; children must be writable meanwhile.
                        fs::set_permissions(
                            &target,
                            Permissions::from_mode((meta.mode() & 0o7777) | 0o700),
                        )
                        .map_err(|e| fail(&report, e))?;
                    }
                    Some(_) => {
                        fs::remove_file(&target).map_err(|e| fail(&report, e))?;
                        fs::create_dir(&target).map_err(|e| fail(&report, e))?;
                    }
                    None => fs::create_dir(&target).map_err(|e| fail(&report, e))?,
                }
                set_owner(&target, member.uid, member.gid, &member.path, &mut report);
                dirs.push(member);
            }
            MemberKind::File(data) => {
                clear(&target, existing.as_ref()).map_err(|e| fail(&report, e))?;
                write_file(&target, data).map_err(|e| fail(&report, e))?;
                set_owner(&target, member.uid, member.gid, &member.path, &mut report);
                fs::set_permissions(&target, Permissions::from_mode(member.mode))
                    .map_err(|e| fail(&report, e))?;
                let t = mtime(member.mtime);
                filetime::set_file_times(&target, t, t).map_err(|e| fail(&report, e))?;
            }
            MemberKind::Symlink { target: link } => {
                clear(&target, existing.as_ref()).map_err(|e| fail(&report, e))?;
                std::os::unix::fs::symlink(link, &target).map_err(|e| fail(&report, e))?;
                set_owner(&target, member.uid, member.gid, &member.path, &mut report);
                let t = mtime(member.mtime);
                filetime::set_symlink_file_times(&target, t, t).map_err(|e| fail(&report, e))?;
            }
        }
        report.applied += 1;
    }

    for member in dirs.iter().rev() {
        let target = root.join(&member.path);
        let fail = |report: &MergeReport, source| SnapshotError::PartialMerge {
            path: member.path.clone(),
            report: report.clone(),
            source,
        };
        fs::set_permissions(&target, Permissions::from_mode(member.mode))
            .map_err(|e| fail(&report, e))?;
        let t = mtime(member.mtime);
        filetime::set_file_times(&target, t, t).map_err(|e| fail(&report, e))?;
    }

    Ok(report)
}

fn recorded_label(root: &Path) -> Option<String> {
    let text = fs::read_to_string(root.join(BASE_MANIFEST)).ok()?;
    Manifest::parse(&text).ok().map(|m| m.root_label)
}

fn mtime(ns: i64) -> FileTime {
    FileTime::from_unix_time(
        ns.div_euclid(1_000_000_000),
        ns.rem_euclid(1_000_000_000) as u32,
    )
}

fn ancestors_are_dirs(root: &Path, path: &str) -> bool {
    let mut cur = root.to_path_buf();
    let mut parts = path.split('/').peekable();
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            return true;
        }
        cur.push(part);
        match fs::symlink_metadata(&cur) {
            Ok(meta) if meta.is_dir() => {}
            _ => return false,
        }
    }
    true
}

enum ParentError {
    Unsafe(String),
    Io(io::Error),
}

fn ensure_parents(root: &Path, path: &str) -> std::result::Result<(), ParentError> {
    let Some((parent, _)) = path.rsplit_once('/') else {
        return Ok(());
    };
    let mut cur = root.to_path_buf();
    for part in parent.split('/') {
        cur.push(part);
        match fs::symlink_metadata(&cur) {
            Ok(meta) if meta.is_dir() => {}
            Ok(_) => return Err(ParentError::Unsafe(cur.to_string_lossy().into_owned())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::create_dir(&cur).map_err(ParentError::Io)?
            }
            Err(e) => return Err(ParentError::Io(e)),
        }
    }
    Ok(())
}

fn clear(target: &Path, existing: Option<&fs::Metadata>) -> io::Result<()> {
    match existing {
        Some(meta) if meta.is_dir() => fs::remove_dir_all(target),
        Some(_) => fs::remove_file(target),
        None => Ok(()),
    }
}

fn write_file(target: &Path, data: &FileData) -> io::Result<()> {
    let mut out = OpenOptions::new()
        .write(true)
        .create_new(true)
        .mode(0o600)
        .open(target)?;
    match data {
        FileData::Inline(bytes) => out.write_all(bytes)?,
        FileData::OnDisk(src) => {
            io::copy(&mut fs::File::open(src)?, &mut out)?;
        }
    }
    Ok(())
}

fn set_owner(target: &Path, uid: u32, gid: u32, path: &str, report: &mut MergeReport) {
    let Ok(meta) = fs::symlink_metadata(target) else {
        return;
    };
    if meta.uid() == uid && meta.gid() == gid {
        return;
    }
    if let Err(e) = lchown(target, Some(uid), Some(gid)) {
        report.warn(path, format!("cannot set owner {uid}:{gid}: {e}"));
    }
}
