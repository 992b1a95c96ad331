use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use apppot::guest::{
    init_main, InitOptions, SystemGuest, DEFAULT_APPLIANCE_SCRIPT, DEFAULT_GUEST_USER,
};
use apppot::host::{self, Backend, Flavor, JobSpec, DEFAULT_MEMORY_MIB};
use apppot::preflight::{self, Severity};
use apppot::snapshot::{
    self, ChangesArchive, Manifest, SnapOptions, ARCHIVE_EXTENSION, BASE_MANIFEST,
};

#[derive(Parser)]
#[command(
    name = "apptool",
    version,
    about = "Prepare, diff and run software appliances as batch jobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record, diff and merge appliance trees.
    #[command(subcommand)]
    Snap(Snap),
    /// Boot an appliance and run a job in it.
    Start(JobArgs),
    /// Print a batch or grid wrapper for a job.
    Wrap {
        #[arg(long, value_parser = clap::value_parser!(Flavor))]
        flavor: Flavor,
        #[command(flatten)]
        job: JobArgs,
    },
    /// Check host limits before submitting a job.
    Preflight {
        /// Guest memory in MiB.
        #[arg(long)]
        mem: u64,
        #[arg(long, default_value_t = 1)]
        cpus: u64,
        /// Filesystem backing guest memory; defaults to the launch scratch directory.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
    /// Init sequence inside a booted appliance.
    #[command(hide = true)]
    GuestInit {
        /// Use this command line instead of the kernel's.
        #[arg(long)]
        cmdline: Option<String>,
        #[arg(long, default_value = DEFAULT_GUEST_USER)]
        guest_user: String,
        #[arg(long, default_value = DEFAULT_APPLIANCE_SCRIPT)]
        script: String,
        /// Leave the machine running afterwards.
        #[arg(long)]
        no_poweroff: bool,
    },
}

#[derive(Args)]
struct SnapFlags {
    /// Glob to leave out; patterns with `/` match the whole relative path.
    #[arg(long, value_name = "GLOB")]
    exclude: Vec<String>,
    /// Also compare modification times.
    #[arg(long)]
    paranoid: bool,
}

#[derive(Subcommand)]
enum Snap {
    /// Record the base manifest of a tree.
    Base {
        root: PathBuf,
        /// Output manifest (default: <root>/.apppot/base.manifest).
        #[arg(short)]
        o: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        flags: SnapFlags,
    },
    /// Write the changes of a tree relative to a base manifest.
    Changes {
        root: PathBuf,
        /// Base manifest (default: <root>/.apppot/base.manifest).
        #[arg(short)]
        b: Option<PathBuf>,
        /// Output archive (default: ./<root name>.changes.tar.gz).
        #[arg(short)]
        o: Option<PathBuf>,
        #[command(flatten)]
        flags: SnapFlags,
    },
    /// Apply a changes archive to a tree.
    Merge {
        root: PathBuf,
        #[arg(short)]
        c: PathBuf,
    },
}

#[derive(Args)]
struct JobArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    kernel: Option<PathBuf>,
    /// Guest memory in MiB.
    #[arg(long, default_value_t = DEFAULT_MEMORY_MIB)]
    mem: u64,
    /// Changes archive, inside the working directory.
    #[arg(long)]
    changes: Option<PathBuf>,
    #[arg(long, default_value = "uml", value_parser = clap::value_parser!(Backend))]
    backend: Backend,
    #[arg(long)]
    tag: Option<String>,
    /// Extra kernel argument, passed through untouched.
    #[arg(
        long = "extra-boot-arg",
        value_name = "TOKEN",
        allow_hyphen_values = true
    )]
    extra_boot_args: Vec<String>,
    /// Host directory shared with the guest (default: current directory).
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Copy-on-write file layered over the image.
    #[arg(long)]
    cow: Option<PathBuf>,
    /// Enable slirp networking through this helper binary.
    #[arg(long, value_name = "PATH")]
    slirp: Option<PathBuf>,
    /// Appliance tree for the mock backend.
    #[arg(long, value_name = "DIR")]
    mock_appliance: Option<PathBuf>,
    /// Job command; several words are shell-quoted and joined.
    #[arg(last = true)]
    command: Vec<String>,
}

impl JobArgs {
    fn into_spec(self) -> Result<JobSpec> {
        let workdir = match self.workdir {
            Some(w) => w,
            None => std::env::current_dir().context("cannot determine current directory")?,
        };
        let mut spec = JobSpec::new(workdir, self.backend);
        spec.image_path = self.image;
        spec.kernel_path = self.kernel;
        spec.memory_mib = self.mem;
        spec.changes_path = self.changes;
        spec.tag = self.tag;
        spec.cow_path = self.cow;
        spec.mock_appliance = self.mock_appliance;
        spec.extra_boot_args = self.extra_boot_args;
        if let Some(slirp) = self.slirp {
            spec.extra_boot_args
                .push(format!("eth0=slirp,,{}", slirp.display()));
        }
        spec.job_command = match self.command.len() {
            0 => None,
            1 => self.command.into_iter().next(),
            _ => Some(
                self.command
                    .iter()
                    .map(|w| host::shell_quote(w))
                    .collect::<Vec<_>>()
                    .join(" "),
            ),
        };
        Ok(spec)
    }
}

fn snap_options(flags: SnapFlags) -> SnapOptions {
    SnapOptions {
        exclude: flags.exclude,
        paranoid: flags.paranoid,
        ..SnapOptions::default()
    }
}

/// Relative path of `file` if it would land inside `root`.
fn inside(root: &Path, file: &Path) -> Option<String> {
    let root = fs::canonicalize(root).ok()?;
    let parent = fs::canonicalize(file.parent().filter(|p| !p.as_os_str().is_empty())?).ok()?;
    let rel = parent.join(file.file_name()?);
    rel.strip_prefix(&root).ok()?.to_str().map(str::to_owned)
}

fn run_snap(cmd: Snap) -> Result<()> {
    match cmd {
        Snap::Base {
            root,
            o,
            label,
            flags,
        } => {
            let out = o.unwrap_or_else(|| root.join(BASE_MANIFEST));
            let mut opts = snap_options(flags);
            opts.label = label;
            opts.exclude_paths.extend(inside(&root, &out));
            let manifest = snapshot::record_base(&root, &opts)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(&out, manifest.to_text())
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "recorded {} entries as {:?} in {}",
                manifest.entries.len(),
                manifest.root_label,
                out.display()
            );
        }
        Snap::Changes { root, b, o, flags } => {
            let base_path = b.unwrap_or_else(|| root.join(BASE_MANIFEST));
            let text = fs::read_to_string(&base_path)
                .with_context(|| format!("reading {}", base_path.display()))?;
            let base = Manifest::parse(&text)?;
            let out = match o {
                Some(o) => o,
                None => {
                    let name = fs::canonicalize(&root)?
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "root".into());
                    PathBuf::from(format!("{name}{ARCHIVE_EXTENSION}"))
                }
            };
            let mut opts = snap_options(flags);
            opts.exclude_paths.extend(inside(&root, &out));
            opts.exclude_paths.extend(inside(&root, &base_path));
            let changes = snapshot::compute_changes(&root, &base, &opts)?;
            changes.write_file(&out)?;
            eprintln!(
                "{} changed, {} removed, written to {}",
                changes.members.len(),
                changes.whiteouts.len(),
                out.display()
            );
        }
        Snap::Merge { root, c } => {
            let archive = ChangesArchive::read_file(&c)?;
            let report = snapshot::apply_changes(&root, &archive)?;
            for w in &report.warnings {
                eprintln!("warning: {}: {}", w.path, w.reason);
            }
            eprintln!("applied {}, removed {}", report.applied, report.deleted);
        }
    }
    Ok(())
}

fn run_preflight(mem: u64, cpus: u64, scratch: Option<PathBuf>) -> Result<ExitCode> {
    let scratch = scratch.unwrap_or_else(host::scratch_dir);
    let probe = preflight::sample_host(&scratch, cpus);
    let diagnostics = preflight::check_host(&probe, mem)?;
    let mut out = io::stdout().lock();
    for d in &diagnostics {
        writeln!(
            out,
            "{:<16} {:<4}  {}",
            d.code.to_string(),
            d.severity.to_string(),
            d.message
        )?;
    }
    for d in &diagnostics {
        writeln!(out, "{}", serde_json::to_string(d)?)?;
    }
    let failed = diagnostics.iter().any(|d| d.severity == Severity::Fail);
    Ok(if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn run_guest_init(
    cmdline: Option<String>,
    guest_user: String,
    script: String,
    no_poweroff: bool,
) -> Result<ExitCode> {
    let cmdline = match cmdline {
        Some(c) => c,
        None => SystemGuest::read_cmdline().context("reading the kernel command line")?,
    };
    let mut guest = SystemGuest::new();
    if no_poweroff {
        guest = guest.without_power_off();
    }
    let opts = InitOptions {
        guest_user,
        script_location: script,
    };
    let report = init_main(cmdline.trim_end(), &mut guest, &opts);
    Ok(ExitCode::from(report.status.clamp(0, 255) as u8))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Snap(cmd) => run_snap(cmd).map(|_| ExitCode::SUCCESS),
        Command::Start(job) => {
            let spec = job.into_spec()?;
            let mut stdout = io::stdout().lock();
            let outcome = host::launch(&spec, &mut stdout)?;
            if outcome.truncated {
                eprintln!("apptool: console output truncated");
            }
            Ok(ExitCode::from(outcome.exit_status as u8))
        }
        Command::Wrap { flavor, job } => {
            let text = host::emit_batch_wrapper(&job.into_spec()?, flavor)?;
            io::stdout().write_all(text.as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Preflight { mem, cpus, scratch } => run_preflight(mem, cpus, scratch),
        Command::GuestInit {
            cmdline,
            guest_user,
            script,
            no_poweroff,
        } => run_guest_init(cmdline, guest_user, script, no_poweroff),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("apptool: {e:#}");
            ExitCode::FAILURE
        }
    }
}
