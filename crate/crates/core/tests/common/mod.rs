//! Helpers shared by the integration tests, written independently of the
//! library's own tree walker.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs::{self, Permissions};
use std::os::unix::fs::{chown, symlink, PermissionsExt};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

/// What the byte-level comparison looks at for one filesystem object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Dir { mode: u32 },
    File { mode: u32, data: Vec<u8> },
    Link { target: String },
}

/// Every object below `root`, keyed by relative path. The top-level
/// `.apppot` state directory is skipped.
pub fn read_tree(root: &Path) -> BTreeMap<String, Node> {
    scan(root, true)
}

/// Like [`read_tree`] but leaves file contents empty.
fn list_tree(root: &Path) -> BTreeMap<String, Node> {
    scan(root, false)
}

fn scan(root: &Path, contents: bool) -> BTreeMap<String, Node> {
    fn walk(dir: &Path, prefix: &str, contents: bool, out: &mut BTreeMap<String, Node>) {
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let name = entry.file_name().into_string().unwrap();
            if prefix.is_empty() && name == ".apppot" {
                continue;
            }
            let rel = if prefix.is_empty() {
                name
            } else {
                format!("{prefix}/{name}")
            };
            let path = entry.path();
            let meta = fs::symlink_metadata(&path).unwrap();
            let mode = meta.permissions().mode() & 0o7777;
            if meta.file_type().is_symlink() {
                let target = fs::read_link(&path)
                    .unwrap()
                    .into_os_string()
                    .into_string()
                    .unwrap();
                out.insert(rel, Node::Link { target });
            } else if meta.is_dir() {
                out.insert(rel.clone(), Node::Dir { mode });
                walk(&path, &rel, contents, out);
            } else {
                let data = if contents {
                    fs::read(&path).unwrap()
                } else {
                    Vec::new()
                };
                out.insert(rel, Node::File { mode, data });
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, "", contents, &mut out);
    out
}

/// First difference between two trees, if any.
pub fn tree_diff(left: &Path, right: &Path) -> Option<String> {
    let a = read_tree(left);
    let b = read_tree(right);
    for (path, node) in &a {
        match b.get(path) {
            None => return Some(format!("{path}: only on the left")),
            Some(other) if other != node => {
                return Some(format!("{path}: {node:?} vs {other:?}"));
            }
            _ => {}
        }
    }
    b.keys()
        .find(|p| !a.contains_key(*p))
        .map(|p| format!("{p}: only on the right"))
}

/// Recursive copy keeping kinds, contents, modes and link targets.
pub fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    let mut dirs = Vec::new();
    for (rel, node) in read_tree(from) {
        let dst = to.join(&rel);
        match node {
            Node::Dir { mode } => {
                fs::create_dir(&dst).unwrap();
                dirs.push((dst, mode));
            }
            Node::File { mode, data } => {
                fs::write(&dst, data).unwrap();
                fs::set_permissions(&dst, Permissions::from_mode(mode)).unwrap();
            }
            Node::Link { target } => symlink(target, &dst).unwrap(),
        }
    }
    for (dir, mode) in dirs.into_iter().rev() {
        fs::set_permissions(dir, Permissions::from_mode(mode)).unwrap();
    }
}

/// Temporary directory, on tmpfs when the host has one: the property tests
/// create hundreds of thousands of small files.
pub fn scratch() -> TempDir {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        if let Ok(dir) = tempfile::tempdir_in(shm) {
            return dir;
        }
    }
    tempfile::tempdir().unwrap()
}

pub fn is_root() -> bool {
    // SAFETY: geteuid cannot fail.
    unsafe { libc::geteuid() == 0 }
}

/// Owner given to job directories when the tests run as root, since a
/// root-owned working directory is refused by the guest.
pub const JOB_OWNER: (u32, u32) = (1000, 1000);

/// A fresh working directory the guest will accept.
pub fn job_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::set_permissions(dir.path(), Permissions::from_mode(0o755)).unwrap();
    if is_root() {
        chown(dir.path(), Some(JOB_OWNER.0), Some(JOB_OWNER.1)).unwrap();
    }
    dir
}

/// Expected host owner of files a job creates in `dir`.
pub fn owner_of(path: &Path) -> (u32, u32) {
    use std::os::unix::fs::MetadataExt;
    let m = fs::metadata(path).unwrap();
    (m.uid(), m.gid())
}

// Random trees. Names never collide with the default exclusions.

const NAMES: &[&str] = &[
    "a", "b", "c", "d", "e", "f", "g", "h", "lib", "bin", "x.txt", "y.dat", "z z", "ü",
];
const FILE_MODES: &[u32] = &[0o644, 0o600, 0o755, 0o640, 0o444, 0o700];
const DIR_MODES: &[u32] = &[0o755, 0o750, 0o700];

fn random_name(rng: &mut StdRng) -> String {
    let base = NAMES.choose(rng).unwrap();
    if rng.gen_bool(0.6) {
        format!("{base}{}", rng.gen_range(0..40))
    } else {
        (*base).to_owned()
    }
}

fn random_data(rng: &mut StdRng) -> Vec<u8> {
    let len = match rng.gen_range(0..10) {
        0 => 0,
        1 => rng.gen_range(4096..20000),
        _ => rng.gen_range(1..300),
    };
    (0..len).map(|_| rng.gen()).collect()
}

fn dirs_of(tree: &BTreeMap<String, Node>) -> Vec<String> {
    let mut dirs: Vec<String> = tree
        .iter()
        .filter(|(_, n)| matches!(n, Node::Dir { .. }))
        .map(|(p, _)| p.clone())
        .collect();
    dirs.push(String::new());
    dirs
}

fn join(dir: &str, name: &str) -> String {
    if dir.is_empty() {
        name.to_owned()
    } else {
        format!("{dir}/{name}")
    }
}

/// Adds one random object under a random existing directory. Returns false
/// when the chosen name is taken.
fn add_random(root: &Path, rng: &mut StdRng, dirs: &mut Vec<String>) -> bool {
    let parent = dirs.choose(rng).unwrap().clone();
    let rel = join(&parent, &random_name(rng));
    let path = root.join(&rel);
    if !root.join(&parent).is_dir() || fs::symlink_metadata(&path).is_ok() {
        return false;
    }
    match rng.gen_range(0..10) {
        0..=5 => {
            fs::write(&path, random_data(rng)).unwrap();
            fs::set_permissions(
                &path,
                Permissions::from_mode(*FILE_MODES.choose(rng).unwrap()),
            )
            .unwrap();
        }
        6..=8 => {
            fs::create_dir(&path).unwrap();
            dirs.push(rel);
        }
        _ => {
            let target = if rng.gen_bool(0.5) {
                random_name(rng)
            } else {
                format!("../{}", random_name(rng))
            };
            symlink(target, &path).unwrap();
        }
    }
    true
}

/// A random tree with at most `entries` objects; directory modes are set
/// last so a non-root creator can still fill them.
pub fn random_tree(root: &Path, seed: u64, entries: usize) {
    let mut rng = StdRng::seed_from_u64(seed);
    fs::create_dir_all(root).unwrap();
    let mut dirs = vec![String::new()];
    let mut made = 0;
    let mut attempts = 0;
    while made < entries && attempts < entries * 4 {
        attempts += 1;
        if add_random(root, &mut rng, &mut dirs) {
            made += 1;
        }
    }
    for dir in dirs.iter().skip(1) {
        let mode = *DIR_MODES.choose(&mut rng).unwrap();
        fs::set_permissions(root.join(dir), Permissions::from_mode(mode)).unwrap();
    }
}

fn current(path: &Path) -> Option<Node> {
    let meta = fs::symlink_metadata(path).ok()?;
    let mode = meta.permissions().mode() & 0o7777;
    Some(if meta.file_type().is_symlink() {
        Node::Link {
            target: String::new(),
        }
    } else if meta.is_dir() {
        Node::Dir { mode }
    } else {
        Node::File {
            mode,
            data: Vec::new(),
        }
    })
}

/// Applies `edits` random modifications: content and mode changes, removals
/// of files and whole subtrees, additions, kind swaps and relinks.
pub fn random_edits(root: &Path, seed: u64, edits: usize) {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x005e_ed0f_ed17);
    let tree = list_tree(root);
    let paths: Vec<&String> = tree.keys().collect();
    let mut dirs = dirs_of(&tree);
    for _ in 0..edits {
        let victim = paths.choose(&mut rng).map(|p| root.join(p));
        let Some((path, node)) = victim.and_then(|p| current(&p).map(|n| (p, n))) else {
            add_random(root, &mut rng, &mut dirs);
            continue;
        };
        match (rng.gen_range(0..8), node) {
            (0, Node::File { .. }) => fs::write(&path, random_data(&mut rng)).unwrap(),
            (1, Node::File { .. }) => fs::set_permissions(
                &path,
                Permissions::from_mode(*FILE_MODES.choose(&mut rng).unwrap()),
            )
            .unwrap(),
            (1, Node::Dir { .. }) => fs::set_permissions(
                &path,
                Permissions::from_mode(*DIR_MODES.choose(&mut rng).unwrap()),
            )
            .unwrap(),
            (2, Node::Dir { .. }) => fs::remove_dir_all(&path).unwrap(),
            (2, _) => fs::remove_file(&path).unwrap(),
            (3, Node::File { .. }) | (3, Node::Link { .. }) => {
                fs::remove_file(&path).unwrap();
                fs::create_dir(&path).unwrap();
                fs::write(path.join("inner"), b"swapped in").unwrap();
            }
            (3, Node::Dir { .. }) => {
                fs::remove_dir_all(&path).unwrap();
                fs::write(&path, b"was a directory").unwrap();
            }
            (4, Node::Link { .. }) => {
                fs::remove_file(&path).unwrap();
                symlink(format!("elsewhere-{}", rng.gen::<u16>()), &path).unwrap();
            }
            _ => {
                add_random(root, &mut rng, &mut dirs);
            }
        }
    }
}

pub mod criteria;

// Checks used by both the snapshot tests and the acceptance run.

use apppot::snapshot::{apply_changes, compute_changes, record_base, ChangesArchive, SnapOptions};

fn fixed_options() -> SnapOptions {
    SnapOptions {
        label: Some("base".into()),
        created_at: Some(0),
        ..SnapOptions::default()
    }
}

/// Records a random base, edits it, ships the changes through an archive
/// file and merges them into an untouched copy of the base.
pub fn round_trip_case(seed: u64, entries: usize, edits: usize) -> Result<(), String> {
    let tmp = scratch();
    let (live, copy) = (tmp.path().join("live"), tmp.path().join("copy"));
    random_tree(&live, seed, entries);
    let opts = fixed_options();
    let base = record_base(&live, &opts).map_err(|e| e.to_string())?;
    copy_tree(&live, &copy);
    random_edits(&live, seed, edits);

    let changes = compute_changes(&live, &base, &opts).map_err(|e| e.to_string())?;
    let file = tmp.path().join("c.changes.tar.gz");
    changes.write_file(&file).map_err(|e| e.to_string())?;
    let shipped = ChangesArchive::read_file(&file).map_err(|e| e.to_string())?;
    apply_changes(&copy, &shipped).map_err(|e| e.to_string())?;
    match tree_diff(&live, &copy) {
        None => Ok(()),
        Some(d) => Err(format!("seed {seed}: merged copy differs at {d}")),
    }
}

/// No changes against a fresh manifest; merging twice equals merging once.
pub fn emptiness_case(seed: u64, entries: usize, edits: usize) -> Result<(), String> {
    let tmp = scratch();
    let (live, once, twice) = (
        tmp.path().join("live"),
        tmp.path().join("once"),
        tmp.path().join("twice"),
    );
    random_tree(&live, seed, entries);
    let opts = fixed_options();
    let base = record_base(&live, &opts).map_err(|e| e.to_string())?;
    let empty = compute_changes(&live, &base, &opts).map_err(|e| e.to_string())?;
    if !empty.is_empty() {
        return Err(format!(
            "seed {seed}: unchanged tree produced {} members, {} whiteouts",
            empty.members.len(),
            empty.whiteouts.len()
        ));
    }
    copy_tree(&live, &once);
    copy_tree(&live, &twice);
    random_edits(&live, seed, edits);
    let changes = compute_changes(&live, &base, &opts).map_err(|e| e.to_string())?;
    apply_changes(&once, &changes).map_err(|e| e.to_string())?;
    apply_changes(&twice, &changes).map_err(|e| e.to_string())?;
    apply_changes(&twice, &changes).map_err(|e| e.to_string())?;
    match tree_diff(&once, &twice) {
        None => Ok(()),
        Some(d) => Err(format!("seed {seed}: double merge differs at {d}")),
    }
}
