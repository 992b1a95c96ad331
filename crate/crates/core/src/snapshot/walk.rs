use std::fs::{self, File};
use std::io;
use std::os::unix::fs::{FileTypeExt, MetadataExt};
use std::path::Path;

use glob::{MatchOptions, Pattern};
use sha2::{Digest, Sha256};

use super::{
    ContentHash, EntryKind, ManifestEntry, Result, SnapOptions, SnapshotError, DEFAULT_EXCLUSIONS,
};

const MATCH: MatchOptions = MatchOptions {
    case_sensitive: true,
    require_literal_separator: true,
    require_literal_leading_dot: false,
};

pub(super) struct Filter {
    top_level: Vec<String>,
    paths: Vec<String>,
    path_patterns: Vec<Pattern>,
    name_patterns: Vec<Pattern>,
}

impl Filter {
    pub(super) fn new(opts: &SnapOptions) -> Result<Self> {
        let mut path_patterns = Vec::new();
        let mut name_patterns = Vec::new();
        for raw in &opts.exclude {
            let trimmed = raw.trim_start_matches('/');
            let pattern = Pattern::new(trimmed).map_err(|source| SnapshotError::BadPattern {
                pattern: raw.clone(),
                source,
            })?;
            if trimmed.contains('/') {
                path_patterns.push(pattern);
            } else {
                name_patterns.push(pattern);
            }
        }
        let top_level = if opts.default_exclusions {
            DEFAULT_EXCLUSIONS.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        };
        Ok(Filter {
            top_level,
            paths: opts.exclude_paths.clone(),
            path_patterns,
            name_patterns,
        })
    }

    /// Whether `path` or any of its ancestors is excluded.
    pub(super) fn excludes_path(&self, path: &str) -> bool {
        let mut end = 0;
        loop {
            let next = path[end..].find('/').map(|i| end + i);
            let prefix = &path[..next.unwrap_or(path.len())];
            if self.excludes_one(prefix) {
                return true;
            }
            match next {
                Some(i) => end = i + 1,
                None => return false,
            }
        }
    }

    fn excludes_one(&self, path: &str) -> bool {
        let name = path.rsplit('/').next().unwrap_or(path);
        (!path.contains('/') && self.top_level.iter().any(|t| t == path))
            || self.paths.iter().any(|p| p == path)
            || self
                .path_patterns
                .iter()
                .any(|p| p.matches_with(path, MATCH))
            || self
                .name_patterns
                .iter()
                .any(|p| p.matches_with(name, MATCH))
    }
}

/// Lists everything below `root`, sorted by path bytes.
pub(super) fn scan_tree(root: &Path, filter: &Filter) -> Result<Vec<ManifestEntry>> {
    let meta = fs::metadata(root).map_err(|e| SnapshotError::io(root, e))?;
    if !meta.is_dir() {
        return Err(SnapshotError::io(
            root,
            io::Error::new(io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }
    let mut entries = Vec::new();
    scan_dir(root, "", filter, &mut entries)?;
    entries.sort_unstable_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    Ok(entries)
}

fn scan_dir(dir: &Path, rel: &str, filter: &Filter, out: &mut Vec<ManifestEntry>) -> Result<()> {
    let read = fs::read_dir(dir).map_err(|e| SnapshotError::io(dir, e))?;
    for dirent in read {
        let dirent = dirent.map_err(|e| SnapshotError::io(dir, e))?;
        let full = dirent.path();
        let name = dirent
            .file_name()
            .into_string()
            .map_err(|_| SnapshotError::NonUtf8Path(full.clone()))?;
        let path = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        if filter.excludes_one(&path) {
            continue;
        }
        let meta = fs::symlink_metadata(&full).map_err(|e| SnapshotError::io(&full, e))?;
        let ft = meta.file_type();
        let kind = if ft.is_dir() {
            EntryKind::Dir
        } else if ft.is_file() {
            EntryKind::File {
                size: meta.len(),
                hash: hash_file(&full)?,
            }
        } else if ft.is_symlink() {
            let target = fs::read_link(&full).map_err(|e| SnapshotError::io(&full, e))?;
            let target = target
                .into_os_string()
                .into_string()
                .map_err(|_| SnapshotError::NonUtf8Path(full.clone()))?;
            EntryKind::Symlink { target }
        } else {
            let kind = if ft.is_socket() {
                "socket"
            } else if ft.is_fifo() {
                "fifo"
            } else if ft.is_block_device() {
                "block device"
            } else if ft.is_char_device() {
                "character device"
            } else {
                "unknown"
            };
            return Err(SnapshotError::UnsupportedKind { path: full, kind });
        };
        let is_dir = matches!(kind, EntryKind::Dir);
        out.push(ManifestEntry {
            path: path.clone(),
            kind,
            mtime: meta.mtime() * 1_000_000_000 + meta.mtime_nsec(),
            mode: meta.mode() & 0o7777,
            uid: meta.uid(),
            gid: meta.gid(),
        });
        if is_dir {
            scan_dir(&full, &path, filter, out)?;
        }
    }
    Ok(())
}

fn hash_file(path: &Path) -> Result<ContentHash> {
    let mut file = File::open(path).map_err(|e| SnapshotError::io(path, e))?;
    let mut hasher = Sha256::new();
    io::copy(&mut file, &mut hasher).map_err(|e| SnapshotError::io(path, e))?;
    Ok(ContentHash(hasher.finalize().into()))
}
