//! Base manifests, changes archives, and merging them back into a tree.
//!
//! The lifecycle is three steps:
//!
//! 1. [`record_base`] walks an appliance tree and records the state of every
//!    file, directory and symlink in a [`Manifest`].
//! 2. [`compute_changes`] walks the (modified) tree again and collects every
//!    entry that is new or differs from the manifest into a
//!    [`ChangesArchive`], together with a whiteout list of deleted paths.
//! 3. [`apply_changes`] materializes an archive on top of another tree that
//!    holds the same base content.
//!
//! Modification times are ignored by the difference test unless
//! [`SnapOptions::paranoid`] is set.

mod archive;
mod manifest;
mod merge;
mod walk;

use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use archive::{
    ChangeMember, ChangesArchive, FileData, MemberKind, LABEL_MEMBER, WHITEOUTS_MEMBER,
};
pub use manifest::{ContentHash, EntryKind, Manifest, ManifestEntry, HASH_NAME, MAGIC};
pub use merge::{apply_changes, MergeReport, MergeWarning};

/// Toolkit state directory at the top of a tree. Never recorded.
pub const STATE_DIR: &str = ".apppot";
/// Where `snap base` stores the manifest by default, relative to the root.
pub const BASE_MANIFEST: &str = ".apppot/base.manifest";
/// Volatile top-level trees of a live system.
pub const DEFAULT_EXCLUSIONS: &[&str] = &["proc", "sys", "dev", "tmp", "run", STATE_DIR];
/// Conventional file extension of changes archives.
pub const ARCHIVE_EXTENSION: &str = ".changes.tar.gz";

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: unsupported file type ({kind})", path.display())]
    UnsupportedKind { path: PathBuf, kind: &'static str },
    #[error("{}: path is not valid UTF-8", .0.display())]
    NonUtf8Path(PathBuf),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("bad changes archive: {0}")]
    BadArchive(String),
    #[error("invalid exclude pattern {pattern:?}: {source}")]
    BadPattern {
        pattern: String,
        #[source]
        source: glob::PatternError,
    },
    #[error("refusing to write through non-directory ancestor {0:?}")]
    UnsafePath(String),
    #[error("merge stopped at {path:?} after {} members and {} whiteouts: {source}", report.applied, report.deleted)]
    PartialMerge {
        path: String,
        report: MergeReport,
        #[source]
        source: io::Error,
    },
}

impl SnapshotError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        SnapshotError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SnapshotError> = std::result::Result<T, E>;

/// Knobs shared by the snapshot operations.
#[derive(Debug, Clone)]
pub struct SnapOptions {
    /// Glob patterns. Patterns containing `/` match the tree-relative path,
    /// others match the final path component.
    pub exclude: Vec<String>,
    /// Exact tree-relative paths to skip (e.g. an output file inside the tree).
    pub exclude_paths: Vec<String>,
    /// Skip [`DEFAULT_EXCLUSIONS`] at the top level.
    pub default_exclusions: bool,
    /// Include modification times in the difference test.
    pub paranoid: bool,
    /// Label recorded in the manifest; derived from the content when unset.
    pub label: Option<String>,
    /// Manifest timestamp in seconds since the epoch; `now` when unset.
    pub created_at: Option<i64>,
}

impl Default for SnapOptions {
    fn default() -> Self {
        Self {
            exclude: Vec::new(),
            exclude_paths: Vec::new(),
            default_exclusions: true,
            paranoid: false,
            label: None,
            created_at: None,
        }
    }
}

/// Records the state of every object below `root`.
pub fn record_base(root: &Path, opts: &SnapOptions) -> Result<Manifest> {
    let filter = walk::Filter::new(opts)?;
    let entries = walk::scan_tree(root, &filter)?;
    let root_label = match &opts.label {
        Some(label) => label.clone(),
        None => default_label(root, &entries),
    };
    let created_at = opts.created_at.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    });
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        root_label,
        created_at,
        entries,
    })
}

fn default_label(root: &Path, entries: &[ManifestEntry]) -> String {
    let mut hasher = Sha256::new();
    for entry in entries {
        hasher.update(entry.to_record().as_bytes());
        hasher.update(b"\n");
    }
    let digest = hex::encode(hasher.finalize());
    let name = root
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "root".to_owned());
    format!("{name}-{}", &digest[..12])
}

/// True when `current` must be shipped to turn `base` into it.
pub fn entry_differs(base: &ManifestEntry, current: &ManifestEntry, paranoid: bool) -> bool {
    base.kind != current.kind
        || base.mode != current.mode
        || base.uid != current.uid
        || base.gid != current.gid
        || (paranoid && base.mtime != current.mtime)
}

/// Collects every entry of `root` that is new or differs from `base`, and
/// every path of `base` that no longer exists.
pub fn compute_changes(root: &Path, base: &Manifest, opts: &SnapOptions) -> Result<ChangesArchive> {
    base.validate()?;
    let filter = walk::Filter::new(opts)?;
    let current = walk::scan_tree(root, &filter)?;

    let mut members = Vec::new();
    let mut whiteouts = Vec::new();
    let mut old = base
        .entries
        .iter()
        .filter(|e| !filter.excludes_path(&e.path))
        .peekable();
    let mut new = current.into_iter().peekable();
    loop {
        match (old.peek(), new.peek()) {
            (None, None) => break,
            (Some(_), None) => whiteouts.push(old.next().unwrap().path.clone()),
            (None, Some(_)) => members.push(ChangeMember::from_entry(root, new.next().unwrap())),
            (Some(o), Some(n)) => match o.path.as_bytes().cmp(n.path.as_bytes()) {
                std::cmp::Ordering::Less => whiteouts.push(old.next().unwrap().path.clone()),
                std::cmp::Ordering::Greater => {
                    members.push(ChangeMember::from_entry(root, new.next().unwrap()))
                }
                std::cmp::Ordering::Equal => {
                    let o = old.next().unwrap();
                    let n = new.next().unwrap();
                    if entry_differs(o, &n, opts.paranoid) {
                        members.push(ChangeMember::from_entry(root, n));
                    }
                }
            },
        }
    }

    Ok(ChangesArchive {
        format_version: FORMAT_VERSION,
        base_label: base.root_label.clone(),
        members,
        whiteouts,
    })
}

/// Checks that `path` is tree-relative, `/`-separated and free of `.`/`..`.
pub fn is_normalized(path: &str) -> bool {
    !path.is_empty()
        && path
            .split('/')
            .all(|c| !c.is_empty() && c != "." && c != "..")
}

/// Percent-escapes the bytes that would break a line/tab oriented record.
pub(crate) fn escape_field(s: &str) -> String {
    crate::pct::encode(s, |b| b.is_ascii_control())
}

pub(crate) fn unescape_field(s: &str) -> std::result::Result<String, crate::pct::DecodeError> {
    crate::pct::decode(s)
}
