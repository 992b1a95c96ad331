use std::fmt;
use std::str::FromStr;

use super::{escape_field, is_normalized, unescape_field, Result, SnapshotError, FORMAT_VERSION};

/// First token of a manifest file.
pub const MAGIC: &str = "APPPOT-MANIFEST/1";
/// Digest used for file contents.
pub const HASH_NAME: &str = "sha256";

/// SHA-256 of a file's bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

impl FromStr for ContentHash {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)?;
        Ok(ContentHash(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryKind {
    File { size: u64, hash: ContentHash },
    Dir,
    Symlink { target: String },
}

impl EntryKind {
    pub fn name(&self) -> &'static str {
        match self {
            EntryKind::File { .. } => "file",
            EntryKind::Dir => "dir",
            EntryKind::Symlink { .. } => "symlink",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: EntryKind,
    /// Nanoseconds since the epoch.
    pub mtime: i64,
    /// Permission bits only.
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
}

impl ManifestEntry {
    /// One tab-separated record line, without the trailing newline.
    pub fn to_record(&self) -> String {
        let (size, tail) = match &self.kind {
            EntryKind::File { size, hash } => (size.to_string(), hash.to_string()),
            EntryKind::Dir => ("-".to_owned(), "-".to_owned()),
            EntryKind::Symlink { target } => ("-".to_owned(), escape_field(target)),
        };
        format!(
            "{}\t{}\t{}\t{}\t{:04o}\t{}\t{}\t{}",
            escape_field(&self.path),
            self.kind.name(),
            size,
            self.mtime,
            self.mode,
            self.uid,
            self.gid,
            tail
        )
    }

    fn parse_record(line: &str, lineno: usize) -> Result<Self> {
        let bad = |what: &str| SnapshotError::CorruptManifest(format!("line {lineno}: {what}"));
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, kind, size, mtime, mode, uid, gid, tail] = fields[..] else {
            return Err(bad("expected 8 tab-separated fields"));
        };
        let path = unescape_field(path).map_err(|_| bad("bad path escape"))?;
        if !is_normalized(&path) {
            return Err(bad("path is not normalized"));
        }
        let kind = match kind {
            "file" => EntryKind::File {
                size: size.parse().map_err(|_| bad("bad size"))?,
                hash: tail.parse().map_err(|_| bad("bad content hash"))?,
            },
            "dir" if size == "-" && tail == "-" => EntryKind::Dir,
            "symlink" if size == "-" => EntryKind::Symlink {
                target: unescape_field(tail).map_err(|_| bad("bad link target escape"))?,
            },
            _ => return Err(bad("bad kind")),
        };
        let mode = u32::from_str_radix(mode, 8).map_err(|_| bad("bad mode"))?;
        if mode > 0o7777 {
            return Err(bad("mode carries type bits"));
        }
        Ok(ManifestEntry {
            path,
            kind,
            mtime: mtime.parse().map_err(|_| bad("bad mtime"))?,
            mode,
            uid: uid.parse().map_err(|_| bad("bad uid"))?,
            gid: gid.parse().map_err(|_| bad("bad gid"))?,
        })
    }
}

/// Recorded state of a base tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub format_version: u32,
    pub root_label: String,
    /// Seconds since the epoch.
    pub created_at: i64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.entries
            .binary_search_by(|e| e.path.as_bytes().cmp(path.as_bytes()))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Entries must be normalized, strictly increasing by byte order.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(SnapshotError::CorruptManifest(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        for entry in &self.entries {
            if !is_normalized(&entry.path) {
                return Err(SnapshotError::CorruptManifest(format!(
                    "path {:?} is not normalized",
                    entry.path
                )));
            }
            if entry.mode > 0o7777 {
                return Err(SnapshotError::CorruptManifest(format!(
                    "{:?}: mode carries type bits",
                    entry.path
                )));
            }
        }
        for pair in self.entries.windows(2) {
            match pair[0].path.as_bytes().cmp(pair[1].path.as_bytes()) {
                std::cmp::Ordering::Less => {}
                std::cmp::Ordering::Equal => {
                    return Err(SnapshotError::CorruptManifest(format!(
                        "duplicate path {:?}",
                        pair[0].path
                    )))
                }
                std::cmp::Ordering::Greater => {
                    return Err(SnapshotError::CorruptManifest(format!(
                        "{:?} is out of order",
                        pair[1].path
                    )))
                }
            }
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MAGIC} {HASH_NAME}\n@label {}\n@created {}\n",
            escape_field(&self.root_label),
            self.created_at
        );
        for entry in &self.entries {
            out.push_str(&entry.to_record());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let corrupt = |what: String| SnapshotError::CorruptManifest(what);
        let mut lines = text.split_terminator('\n');
        let header = lines.next().ok_or_else(|| corrupt("empty file".into()))?;
        match header.split_once(' ') {
            Some((MAGIC, HASH_NAME)) => {}
            Some((MAGIC, other)) => return Err(corrupt(format!("unsupported hash {other:?}"))),
            _ => return Err(corrupt(format!("bad header {header:?}"))),
        }
        let root_label = lines
            .next()
            .and_then(|l| l.strip_prefix("@label "))
            .ok_or_else(|| corrupt("missing @label line".into()))?;
        let root_label =
            unescape_field(root_label).map_err(|_| corrupt("bad label escape".into()))?;
        let created_at = lines
            .next()
            .and_then(|l| l.strip_prefix("@created "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing or bad @created line".into()))?;
        let entries = lines
            .enumerate()
            .map(|(i, line)| ManifestEntry::parse_record(line, i + 4))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            root_label,
            created_at,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}
