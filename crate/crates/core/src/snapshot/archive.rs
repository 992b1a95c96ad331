//! Changes archives: a gzip-compressed POSIX (pax) tar stream.
//!
//! Layout, in order:
//!
//! * `.apppot/MANIFEST-LABEL`: label of the base manifest the diff was taken
//!   against.
//! * `.apppot/WHITEOUTS`: newline-terminated, sorted, escaped list of deleted
//!   paths.
//! * one member per added or modified entry, sorted by path.
//!
//! Every member is preceded by a pax extended header carrying `path`,
//! `linkpath` (symlinks) and `mtime` with nanosecond precision, so names are
//! not limited by the ustar header and mtimes survive a round trip.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use tar::{EntryType, Header};

use super::{
    escape_field, is_normalized, unescape_field, EntryKind, ManifestEntry, Result, SnapshotError,
    FORMAT_VERSION,
};

pub const LABEL_MEMBER: &str = ".apppot/MANIFEST-LABEL";
pub const WHITEOUTS_MEMBER: &str = ".apppot/WHITEOUTS";

/// File content of a member, either already in memory or still on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileData {
    Inline(Vec<u8>),
    OnDisk(PathBuf),
}

impl FileData {
    pub fn read_all(&self) -> io::Result<Vec<u8>> {
        match self {
            FileData::Inline(bytes) => Ok(bytes.clone()),
            FileData::OnDisk(path) => std::fs::read(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemberKind {
    File(FileData),
    Dir,
    Symlink { target: String },
}

/// An added or modified entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMember {
    pub path: String,
    pub kind: MemberKind,
    pub mode: u32,
    pub uid: u32,
    pub gid: u32,
    /// Nanoseconds since the epoch.
    pub mtime: i64,
}

impl ChangeMember {
    pub(super) fn from_entry(root: &Path, entry: ManifestEntry) -> Self {
        let kind = match entry.kind {
            EntryKind::File { .. } => MemberKind::File(FileData::OnDisk(root.join(&entry.path))),
            EntryKind::Dir => MemberKind::Dir,
            EntryKind::Symlink { target } => MemberKind::Symlink { target },
        };
        ChangeMember {
            path: entry.path,
            kind,
            mode: entry.mode,
            uid: entry.uid,
            gid: entry.gid,
            mtime: entry.mtime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangesArchive {
    pub format_version: u32,
    pub base_label: String,
    pub members: Vec<ChangeMember>,
    pub whiteouts: Vec<String>,
}

impl ChangesArchive {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty() && self.whiteouts.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SnapshotError::BadArchive(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "unsupported format version {}",
                self.format_version
            ));
        }
        for path in self.members.iter().map(|m| &m.path).chain(&self.whiteouts) {
            if !is_normalized(path) {
                return bad(format!("path {path:?} is not normalized"));
            }
            if path == LABEL_MEMBER || path == WHITEOUTS_MEMBER {
                return bad(format!("path {path:?} is reserved"));
            }
        }
        if let Some(m) = self.members.iter().find(|m| m.mode > 0o7777) {
            return bad(format!("{:?}: mode carries type bits", m.path));
        }
        let sorted = |paths: Vec<&str>, what: &str| match paths
            .windows(2)
            .find(|w| w[0].as_bytes() >= w[1].as_bytes())
        {
            Some(w) => Err(SnapshotError::BadArchive(format!(
                "{what} not strictly sorted at {:?}",
                w[1]
            ))),
            None => Ok(()),
        };
        sorted(
            self.members.iter().map(|m| m.path.as_str()).collect(),
            "members",
        )?;
        sorted(
            self.whiteouts.iter().map(String::as_str).collect(),
            "whiteouts",
        )?;
        for m in &self.members {
            if self
                .whiteouts
                .binary_search_by(|w| w.as_bytes().cmp(m.path.as_bytes()))
                .is_ok()
            {
                return bad(format!("{:?} is both a member and a whiteout", m.path));
            }
        }
        Ok(())
    }

    /// Writes the gzip-compressed archive. Output is a pure function of the
    /// archive contents.
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        self.validate()?;
        let io_err = |e| SnapshotError::io("<archive>", e);
        let mut builder = tar::Builder::new(GzEncoder::new(out, Compression::default()));

        append_plain(&mut builder, LABEL_MEMBER, self.base_label.as_bytes()).map_err(io_err)?;
        let mut listing = String::new();
        for path in &self.whiteouts {
            listing.push_str(&escape_field(path));
            listing.push('\n');
        }
        append_plain(&mut builder, WHITEOUTS_MEMBER, listing.as_bytes()).map_err(io_err)?;

        for member in &self.members {
            append_member(&mut builder, member)?;
        }
        let gz = builder.into_inner().map_err(io_err)?;
        gz.finish().map_err(io_err)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SnapshotError::io(path, e))?;
        let mut out = self.write_to(BufWriter::new(file))?;
        out.flush().map_err(|e| SnapshotError::io(path, e))
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let bad = |msg: String| SnapshotError::BadArchive(msg);
        let io_err = |e: io::Error| SnapshotError::BadArchive(e.to_string());
        let mut archive = tar::Archive::new(GzDecoder::new(input));
        let mut base_label = None;
        let mut whiteouts = None;
        let mut members = Vec::new();

        for entry in archive.entries().map_err(io_err)? {
            let mut entry = entry.map_err(io_err)?;
            let raw_path = String::from_utf8(entry.path_bytes().into_owned())
                .map_err(|_| bad("non UTF-8 member path".into()))?;
            let path = raw_path.trim_end_matches('/').to_owned();
            let mut mtime = None;
            if let Some(exts) = entry.pax_extensions().map_err(io_err)? {
                for ext in exts {
                    let ext = ext.map_err(io_err)?;
                    if ext.key_bytes() == b"mtime" {
                        let value = ext.value().map_err(|_| bad("bad pax mtime".into()))?;
                        mtime = Some(
                            parse_pax_time(value)
                                .ok_or_else(|| bad(format!("bad pax mtime {value:?}")))?,
                        );
                    }
                }
            }
            let header = entry.header();
            let entry_type = header.entry_type();
            let mode = header.mode().map_err(io_err)? & 0o7777;
            let uid = header.uid().map_err(io_err)? as u32;
            let gid = header.gid().map_err(io_err)? as u32;
            let mtime = match mtime {
                Some(ns) => ns,
                None => header.mtime().map_err(io_err)? as i64 * 1_000_000_000,
            };

            if path == LABEL_MEMBER || path == WHITEOUTS_MEMBER {
                let mut text = String::new();
                entry
                    .read_to_string(&mut text)
                    .map_err(|_| bad(format!("{path} is not UTF-8")))?;
                if path == LABEL_MEMBER {
                    base_label = Some(text);
                } else {
                    whiteouts = Some(
                        text.lines()
                            .map(|l| {
                                unescape_field(l).map_err(|_| bad(format!("bad whiteout {l:?}")))
                            })
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                continue;
            }

            let kind = match entry_type {
                EntryType::Regular | EntryType::Continuous => {
                    let mut data = Vec::new();
                    entry.read_to_end(&mut data).map_err(io_err)?;
                    MemberKind::File(FileData::Inline(data))
                }
                EntryType::Directory => MemberKind::Dir,
                EntryType::Symlink => {
                    let target = entry
                        .link_name_bytes()
                        .ok_or_else(|| bad(format!("{path:?}: symlink without target")))?;
                    let target = String::from_utf8(target.into_owned())
                        .map_err(|_| bad(format!("{path:?}: non UTF-8 link target")))?;
                    MemberKind::Symlink { target }
                }
                other => return Err(bad(format!("{path:?}: unsupported member type {other:?}"))),
            };
            members.push(ChangeMember {
                path,
                kind,
                mode,
                uid,
                gid,
                mtime,
            });
        }

        let archive = ChangesArchive {
            format_version: FORMAT_VERSION,
            base_label: base_label.ok_or_else(|| bad(format!("missing {LABEL_MEMBER}")))?,
            members,
            whiteouts: whiteouts.ok_or_else(|| bad(format!("missing {WHITEOUTS_MEMBER}")))?,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| SnapshotError::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn append_plain<W: Write>(
    builder: &mut tar::Builder<W>,
    name: &str,
    data: &[u8],
) -> io::Result<()> {
    let mut header = Header::new_ustar();
    header.set_entry_type(EntryType::Regular);
    header.set_path(name)?;
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_uid(0);
    header.set_gid(0);
    header.set_mtime(0);
    header.set_cksum();
    builder.append(&header, data)
}

fn append_member<W: Write>(builder: &mut tar::Builder<W>, member: &ChangeMember) -> Result<()> {
    let io_err = |e| SnapshotError::io(&member.path, e);
    let mut pax = Vec::new();
    let name = match member.kind {
        MemberKind::Dir => format!("{}/", member.path),
        _ => member.path.clone(),
    };
    push_pax_record(&mut pax, "path", &name);
    if let MemberKind::Symlink { target } = &member.kind {
        push_pax_record(&mut pax, "linkpath", target);
    }
    push_pax_record(&mut pax, "mtime", &format_pax_time(member.mtime));

    let mut xheader = Header::new_ustar();
    xheader.set_entry_type(EntryType::XHeader);
    xheader.set_path("././@PaxHeader").map_err(io_err)?;
    xheader.set_size(pax.len() as u64);
    xheader.set_mode(0o644);
    xheader.set_mtime(0);
    xheader.set_uid(0);
    xheader.set_gid(0);
    xheader.set_cksum();
    builder.append(&xheader, pax.as_slice()).map_err(io_err)?;

    let mut header = Header::new_ustar();
    // The pax `path` wins; the ustar name is only a readable fallback.
    if header.set_path(&name).is_err() {
        header.set_path(truncated_name(&name)).map_err(io_err)?;
    }
    header.set_mode(member.mode);
    header.set_uid(member.uid as u64);
    header.set_gid(member.gid as u64);
    header.set_mtime(member.mtime.max(0) as u64 / 1_000_000_000);
    match &member.kind {
        MemberKind::File(data) => {
            header.set_entry_type(EntryType::Regular);
            match data {
                FileData::Inline(bytes) => {
                    header.set_size(bytes.len() as u64);
                    header.set_cksum();
                    builder.append(&header, bytes.as_slice()).map_err(io_err)?;
                }
                FileData::OnDisk(src) => {
                    let file = File::open(src).map_err(|e| SnapshotError::io(src, e))?;
                    let len = file
                        .metadata()
                        .map_err(|e| SnapshotError::io(src, e))?
                        .len();
                    header.set_size(len);
                    header.set_cksum();
                    builder
                        .append(&header, BufReader::new(file).take(len))
                        .map_err(|e| SnapshotError::io(src, e))?;
                }
            }
        }
        MemberKind::Dir => {
            header.set_entry_type(EntryType::Directory);
            header.set_size(0);
            header.set_cksum();
            builder.append(&header, io::empty()).map_err(io_err)?;
        }
        MemberKind::Symlink { target } => {
            header.set_entry_type(EntryType::Symlink);
            header.set_size(0);
            if header.set_link_name(target).is_err() {
                header
                    .set_link_name(truncated_name(target))
                    .map_err(io_err)?;
            }
            header.set_cksum();
            builder.append(&header, io::empty()).map_err(io_err)?;
        }
    }
    Ok(())
}

fn truncated_name(name: &str) -> &str {
    let mut end = name.len().min(99);
    while !name.is_char_boundary(end) {
        end -= 1;
    }
    &name[..end]
}

/// One pax record: `"<len> <key>=<value>\n"` where `len` counts itself.
fn push_pax_record(out: &mut Vec<u8>, key: &str, value: &str) {
    let body = key.len() + value.len() + 3; // space, '=', newline
    let mut len = body + 1;
    while len != body + len.to_string().len() {
        len = body + len.to_string().len();
    }
    out.extend_from_slice(format!("{len} {key}={value}\n").as_bytes());
}

fn format_pax_time(ns: i64) -> String {
    let sign = if ns < 0 { "-" } else { "" };
    let abs = ns.unsigned_abs();
    format!("{sign}{}.{:09}", abs / 1_000_000_000, abs % 1_000_000_000)
}

fn parse_pax_time(s: &str) -> Option<i64> {
    let (neg, s) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (secs, frac) = s.split_once('.').unwrap_or((s, ""));
    if secs.is_empty()
        || !secs.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let mut nanos: i64 = 0;
    for (i, digit) in frac.bytes().take(9).enumerate() {
        nanos += (digit - b'0') as i64 * 10i64.pow(8 - i as u32);
    }
    let total = secs
        .parse::<i64>()
        .ok()?
        .checked_mul(1_000_000_000)?
        .checked_add(nanos)?;
    Some(if neg { -total } else { total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn member(path: &str, kind: MemberKind) -> ChangeMember {
        ChangeMember {
            path: path.into(),
            kind,
            mode: 0o640,
            uid: 1000,
            gid: 1000,
            mtime: 1_700_000_000_987_654_321,
        }
    }

    fn sample() -> ChangesArchive {
        ChangesArchive {
            format_version: 1,
            base_label: "base-1".into(),
            members: vec![
                member(
                    "a.txt",
                    MemberKind::File(FileData::Inline(b"hello".to_vec())),
                ),
                member("d", MemberKind::Dir),
                member(&format!("d/{}", "a".repeat(180)), MemberKind::Dir),
                member(
                    "d/link",
                    MemberKind::Symlink {
                        target: format!("../{}", "t".repeat(150)),
                    },
                ),
            ],
            whiteouts: vec!["gone\nline".into(), "old/file".into()],
        }
    }

    #[test]
    fn archive_round_trip() {
        let archive = sample();
        let bytes = archive.write_to(Vec::new()).unwrap();
        assert_eq!(
            ChangesArchive::read_from(bytes.as_slice()).unwrap(),
            archive
        );
    }

    #[test]
    fn output_is_deterministic() {
        let a = sample().write_to(Vec::new()).unwrap();
        let b = sample().write_to(Vec::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlapping_member_and_whiteout_is_invalid() {
        let mut archive = sample();
        archive.whiteouts = vec!["a.txt".into()];
        assert!(matches!(
            archive.validate(),
            Err(SnapshotError::BadArchive(_))
        ));
    }

    #[test]
    fn unsorted_members_are_invalid() {
        let mut archive = sample();
        archive.members.swap(0, 1);
        assert!(archive.validate().is_err());
    }

    #[test]
    fn pax_record_length_counts_itself() {
        let mut out = Vec::new();
        push_pax_record(&mut out, "path", "abc");
        assert_eq!(out, b"12 path=abc\n");
        let mut out = Vec::new();
        push_pax_record(&mut out, "path", &"x".repeat(90));
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text.split(' ').next().unwrap().parse::<usize>().unwrap(),
            text.len()
        );
    }

    #[test]
    fn pax_time_round_trip() {
        for ns in [0, 1, -1, 1_500_000_000, -1_500_000_000, i64::MAX / 2] {
            assert_eq!(parse_pax_time(&format_pax_time(ns)), Some(ns), "{ns}");
        }
        assert_eq!(parse_pax_time("12.5"), Some(12_500_000_000));
        assert_eq!(parse_pax_time("12"), Some(12_000_000_000));
        assert_eq!(parse_pax_time("x"), None);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(ChangesArchive::read_from(&b"not gzip"[..]).is_err());
    }
}
