//! One check per acceptance criterion, each returning a description of the
//! first failure. The topic test files and the acceptance target share them.

use std::fs::{self, Permissions};
use std::io::{self, Read, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use flate2::read::GzDecoder;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use apppot::bootparam::{self, BootParams};
use apppot::guest::{
    resolve_job_command, InitPlan, JobSource, DEFAULT_APPLIANCE_SCRIPT, SCRIPT_NAME,
};
use apppot::host::{self, Backend, Flavor, JobSpec};
use apppot::preflight::{check_host, Code, HostProbe, Severity};
use apppot::snapshot::{
    ChangeMember, ChangesArchive, ContentHash, EntryKind, FileData, Manifest, ManifestEntry,
    MemberKind, FORMAT_VERSION,
};

pub type Check = Result<(), String>;

// Boot parameters.

const VALUE_PIECES: &[&str] = &[
    " ",
    "=",
    "%",
    "%20",
    "ü",
    "日本",
    "a",
    "Z",
    "0",
    "-",
    "/",
    "\t",
    "\n",
    "'",
    "\"",
    "apppot.x=1",
    "%%",
    "\u{7f}",
    "\u{1F600}",
    ";",
    "",
];

fn random_value(rng: &mut StdRng) -> String {
    let n = rng.gen_range(0..8);
    (0..n).map(|_| *VALUE_PIECES.choose(rng).unwrap()).collect()
}

fn random_key(rng: &mut StdRng) -> String {
    const KEY_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789_.";
    let n = rng.gen_range(1..10);
    let tail: String = (0..n)
        .map(|_| *KEY_CHARS.choose(rng).unwrap() as char)
        .collect();
    format!("apppot.{tail}")
}

fn random_passthrough(rng: &mut StdRng) -> String {
    loop {
        let n = rng.gen_range(1..16);
        let token: String = (0..n).map(|_| rng.gen_range(b'!'..=b'~') as char).collect();
        if !token.starts_with("apppot.") {
            return token;
        }
    }
}

pub fn random_params(rng: &mut StdRng) -> BootParams {
    let mut p = BootParams::new();
    for _ in 0..rng.gen_range(0..7) {
        let key = random_key(rng);
        if p.get(&key).is_none() {
            p.pairs.push((key, random_value(rng)));
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        p.passthrough.push(random_passthrough(rng));
    }
    p
}

/// `decode(encode(p)) == p` for `cases` random parameter sets.
pub fn codec_fuzz(seed: u64, cases: usize) -> Check {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..cases {
        let p = random_params(&mut rng);
        let line = bootparam::encode(&p).map_err(|e| format!("case {i}: encode {p:?}: {e}"))?;
        if line.chars().any(|c| c.is_whitespace() && c != ' ') || line.contains("  ") {
            return Err(format!("case {i}: unsafe separator in {line:?}"));
        }
        let back =
            bootparam::decode(&line).map_err(|e| format!("case {i}: decode {line:?}: {e}"))?;
        if back != p {
            return Err(format!("case {i}: {p:?} came back as {back:?}"));
        }
    }
    Ok(())
}

// Job precedence.

/// One row of the precedence table.
pub struct PrecedenceRow {
    pub boot_command: bool,
    pub workdir_script: bool,
    pub appliance_script: bool,
    pub expected: JobSource,
}

/// The documented ladder, highest rung first.
pub fn precedence_table() -> Vec<PrecedenceRow> {
    (0..8)
        .map(|mask| {
            let (boot_command, workdir_script, appliance_script) =
                (mask & 4 != 0, mask & 2 != 0, mask & 1 != 0);
            let expected = if boot_command {
                JobSource::BootCmdline
            } else if workdir_script {
                JobSource::WorkdirScript
            } else if appliance_script {
                JobSource::ApplianceScript
            } else {
                JobSource::Interactive
            };
            PrecedenceRow {
                boot_command,
                workdir_script,
                appliance_script,
                expected,
            }
        })
        .collect()
}

fn write_script(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, "#!/bin/sh\nexit 0\n").unwrap();
    fs::set_permissions(path, Permissions::from_mode(0o755)).unwrap();
}

pub fn resolve_row(row: &PrecedenceRow) -> JobSource {
    let appliance = tempfile::tempdir().unwrap();
    let workdir = tempfile::tempdir().unwrap();
    if row.workdir_script {
        write_script(&workdir.path().join(SCRIPT_NAME));
    }
    if row.appliance_script {
        write_script(
            &appliance
                .path()
                .join(DEFAULT_APPLIANCE_SCRIPT.trim_start_matches('/')),
        );
    }
    let plan = InitPlan {
        job_command: row.boot_command.then(|| "echo from boot".to_owned()),
        ..InitPlan::default()
    };
    resolve_job_command(
        &plan,
        appliance.path(),
        workdir.path(),
        DEFAULT_APPLIANCE_SCRIPT,
    )
    .job
    .source
}

pub fn precedence() -> Check {
    for row in precedence_table() {
        let got = resolve_row(&row);
        if got != row.expected {
            return Err(format!(
                "command={} workdir={} appliance={}: got {got:?}, expected {:?}",
                row.boot_command, row.workdir_script, row.appliance_script, row.expected
            ));
        }
    }
    // The three rows the original description states outright.
    let stated = [
        ((true, true, true), JobSource::BootCmdline),
        ((false, true, false), JobSource::WorkdirScript),
        ((false, false, false), JobSource::Interactive),
    ];
    for ((c, w, a), expected) in stated {
        let row = PrecedenceRow {
            boot_command: c,
            workdir_script: w,
            appliance_script: a,
            expected,
        };
        if resolve_row(&row) != expected {
            return Err(format!(
                "stated row {c}/{w}/{a} does not resolve to {expected:?}"
            ));
        }
    }
    Ok(())
}

// Mock end to end through the CLI.

pub const STAGE_BANNERS: [&str; 6] = [
    "apppot-init: [a] params:",
    "apppot-init: [b] mount:",
    "apppot-init: [c] identity:",
    "apppot-init: [d] changes:",
    "apppot-init: [e] job:",
    "apppot-init: [f] shutdown:",
];

/// Positions of the stage banners in `transcript`, if all are present in order.
pub fn banners_in_order(transcript: &str) -> Result<(), String> {
    let mut from = 0;
    for banner in STAGE_BANNERS {
        match transcript[from..].find(banner) {
            Some(pos) => from += pos + banner.len(),
            None => return Err(format!("banner {banner:?} missing or out of order")),
        }
    }
    Ok(())
}

pub fn mock_cli_end_to_end() -> Check {
    let dir = super::job_dir();
    let out = Command::new(env!("CARGO_BIN_EXE_apptool"))
        .args([
            "start",
            "--backend",
            "mock",
            "--",
            "sh",
            "-c",
            "echo hi > out.txt; exit 7",
        ])
        .current_dir(dir.path())
        .output()
        .map_err(|e| format!("cannot run apptool: {e}"))?;
    let transcript = String::from_utf8_lossy(&out.stdout);
    if out.status.code() != Some(7) {
        return Err(format!(
            "exit status {:?}, expected 7\n{transcript}{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let created = dir.path().join("out.txt");
    match fs::read_to_string(&created) {
        Ok(text) if text == "hi\n" => {}
        Ok(text) => return Err(format!("out.txt holds {text:?}")),
        Err(e) => return Err(format!("out.txt not created on the host: {e}")),
    }
    banners_in_order(&transcript)
}

// Preflight.

pub fn boundary_probe() -> HostProbe {
    HostProbe {
        max_map_count: Some(65536),
        page_size: 4096,
        scratch_free: Some(64 << 30),
        batch_mem_limit: None,
        cpus_requested: 1,
    }
}

pub fn map_limit(probe: &HostProbe, mib: u64) -> Severity {
    let d = check_host(probe, mib).unwrap();
    d.iter()
        .find(|d| d.code == Code::MapLimit)
        .unwrap()
        .severity
}

pub fn preflight_boundary() -> Check {
    let probe = boundary_probe();
    match (map_limit(&probe, 256), map_limit(&probe, 257)) {
        (Severity::Pass, Severity::Fail) => Ok(()),
        (a, b) => Err(format!("MAP_LIMIT at 256 MiB: {a}, at 257 MiB: {b}")),
    }
}

// Goldens.

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Compares `actual` with the committed golden file; `UPDATE_GOLDEN=1`
/// rewrites it instead.
pub fn check_golden(name: &str, actual: &str) -> Check {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).map_err(|e| format!("{name}: {e}"))?;
        return Ok(());
    }
    let expected = fs::read_to_string(&path).map_err(|e| format!("{name}: {e}"))?;
    if expected == actual {
        Ok(())
    } else {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map(|i| i + 1)
            .unwrap_or_else(|| expected.lines().count().min(actual.lines().count()) + 1);
        Err(format!(
            "{name}: differs from golden at line {line}\n--- actual ---\n{actual}"
        ))
    }
}

pub fn sample_spec() -> JobSpec {
    let mut spec = JobSpec::new("/srv/jobs/42", Backend::Uml);
    spec.image_path = Some("/images/debian.img".into());
    spec.kernel_path = Some("/images/linux".into());
    spec.memory_mib = 512;
    spec.job_command = Some("./analyse --input 'data set.csv' > result.txt".into());
    spec.changes_path = Some("/srv/jobs/42/tools.changes.tar.gz".into());
    spec.tag = Some("run-42".into());
    spec.extra_boot_args = vec!["eth0=slirp,,/usr/bin/slirp".into()];
    spec
}

pub fn uml_argv_text() -> String {
    let plain = {
        let mut s = JobSpec::new("/a/work", Backend::Uml);
        s.image_path = Some("/a/img".into());
        s.kernel_path = Some("/a/linux".into());
        s.memory_mib = 512;
        s.job_command = Some("true".into());
        s
    };
    let mut cow = sample_spec();
    cow.cow_path = Some("/tmp/j.cow".into());
    let mut text = String::new();
    for (name, spec) in [("plain", plain), ("copy-on-write", cow)] {
        text.push_str(&format!("# {name}\n"));
        for arg in host::uml_argv(&spec, (1000, 1000)).unwrap() {
            text.push_str(&arg);
            text.push('\n');
        }
    }
    text
}

fn hash(data: &[u8]) -> ContentHash {
    ContentHash(Sha256::digest(data).into())
}

pub fn sample_manifest() -> Manifest {
    let entry = |path: &str, kind, mode| ManifestEntry {
        path: path.into(),
        kind,
        mtime: 1_300_000_000_123_456_789,
        mode,
        uid: 0,
        gid: 0,
    };
    let hostname = b"appliance\n";
    Manifest {
        format_version: FORMAT_VERSION,
        root_label: "debian base".into(),
        created_at: 1_300_000_000,
        entries: vec![
            entry(
                "bin",
                EntryKind::Symlink {
                    target: "usr/bin".into(),
                },
                0o777,
            ),
            entry("etc", EntryKind::Dir, 0o755),
            entry(
                "etc/hostname",
                EntryKind::File {
                    size: hostname.len() as u64,
                    hash: hash(hostname),
                },
                0o644,
            ),
            entry("home", EntryKind::Dir, 0o755),
            ManifestEntry {
                uid: 500,
                gid: 500,
                ..entry("home/user", EntryKind::Dir, 0o700)
            },
            entry(
                "opt/dätä file\tx",
                EntryKind::File {
                    size: 0,
                    hash: hash(b""),
                },
                0o4755,
            ),
        ],
    }
}

pub fn sample_archive() -> ChangesArchive {
    let member = |path: &str, kind, mode, uid| ChangeMember {
        path: path.into(),
        kind,
        mode,
        uid,
        gid: uid,
        mtime: -1_500_000_000,
    };
    let long = format!("usr/share/{}/{}", "d".repeat(60), "f".repeat(70));
    ChangesArchive {
        format_version: FORMAT_VERSION,
        base_label: "debian base".into(),
        members: vec![
            member("etc", MemberKind::Dir, 0o755, 0),
            member(
                "etc/motd",
                MemberKind::File(FileData::Inline(b"hello\n".to_vec())),
                0o644,
                0,
            ),
            member(
                "home/user/.profile",
                MemberKind::File(FileData::Inline(Vec::new())),
                0o600,
                1000,
            ),
            member(
                "lib64",
                MemberKind::Symlink {
                    target: "lib".into(),
                },
                0o777,
                0,
            ),
            member(
                &long,
                MemberKind::File(FileData::Inline(b"x".to_vec())),
                0o644,
                0,
            ),
        ],
        whiteouts: vec!["var/cache/old".into(), "zz top".into()],
    }
}

/// Raw tar headers of a changes archive, pax records expanded.
pub fn archive_layout(archive: &ChangesArchive) -> String {
    let gz = archive.write_to(Vec::new()).unwrap();
    let mut tar_bytes = Vec::new();
    GzDecoder::new(gz.as_slice())
        .read_to_end(&mut tar_bytes)
        .unwrap();
    let mut out = String::new();
    let mut reader = tar::Archive::new(tar_bytes.as_slice());
    for entry in reader.entries().unwrap().raw(true) {
        let mut entry = entry.unwrap();
        let h = entry.header().clone();
        let kind = h.entry_type().as_byte() as char;
        out.push_str(&format!(
            "{kind} {:?} mode={:o} uid={} gid={} mtime={} size={}",
            String::from_utf8_lossy(&entry.path_bytes()),
            h.mode().unwrap(),
            h.uid().unwrap(),
            h.gid().unwrap(),
            h.mtime().unwrap(),
            h.size().unwrap(),
        ));
        if let Some(link) = entry.link_name_bytes() {
            out.push_str(&format!(" link={:?}", String::from_utf8_lossy(&link)));
        }
        out.push('\n');
        let mut body = Vec::new();
        entry.read_to_end(&mut body).unwrap();
        if kind == 'x' {
            for record in String::from_utf8(body).unwrap().lines() {
                out.push_str(&format!("    {record}\n"));
            }
        } else if !body.is_empty() {
            out.push_str(&format!("    data {:?}\n", String::from_utf8_lossy(&body)));
        }
    }
    out
}

pub fn goldens() -> Check {
    check_golden("uml_argv.txt", &uml_argv_text())?;
    check_golden("manifest.txt", &sample_manifest().to_text())?;
    check_golden("changes_layout.txt", &archive_layout(&sample_archive()))?;
    let spec = sample_spec();
    check_golden(
        "wrapper_generic.sh",
        &host::emit_batch_wrapper(&spec, Flavor::GenericBatch).unwrap(),
    )?;
    check_golden(
        "wrapper_grid.xrsl",
        &host::emit_batch_wrapper(&spec, Flavor::GridDescription).unwrap(),
    )?;
    Ok(())
}

// Console pump.

pub fn corpus() -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(0xc0ffee);
    (0..1 << 20).map(|_| rng.gen()).collect()
}

/// Hands out the corpus in random slices, with spurious interruptions.
struct Chunked<'a> {
    data: &'a [u8],
    rng: StdRng,
}

impl Read for Chunked<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.data.is_empty() {
            return Ok(0);
        }
        if self.rng.gen_ratio(1, 50) {
            return Err(io::ErrorKind::Interrupted.into());
        }
        let max = if self.rng.gen_bool(0.3) { 16 } else { 40_000 };
        let n = self
            .rng
            .gen_range(1..=max)
            .min(buf.len())
            .min(self.data.len());
        buf[..n].copy_from_slice(&self.data[..n]);
        self.data = &self.data[n..];
        Ok(n)
    }
}

/// Accepts random short writes.
struct Dribble {
    out: Vec<u8>,
    rng: StdRng,
}

impl Write for Dribble {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.rng.gen_range(1..=buf.len().max(1)).min(buf.len());
        self.out.extend_from_slice(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub fn chunking_case(corpus: &[u8], seed: u64) -> Check {
    let mut sink = Dribble {
        out: Vec::with_capacity(corpus.len()),
        rng: StdRng::seed_from_u64(!seed),
    };
    let source = Chunked {
        data: corpus,
        rng: StdRng::seed_from_u64(seed),
    };
    let r = host::pump_console(source, &mut sink);
    if r.truncated || r.forwarded != corpus.len() as u64 {
        return Err(format!(
            "seed {seed}: forwarded {} of {}, truncated {}",
            r.forwarded,
            corpus.len(),
            r.truncated
        ));
    }
    if sink.out != corpus {
        let at = sink.out.iter().zip(corpus).position(|(a, b)| a != b);
        return Err(format!("seed {seed}: output differs at byte {at:?}"));
    }
    Ok(())
}
