use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::guest::{find_exit_status, init_main, InitOptions, MockAppliance, MockGuest, Stage};

use super::spec::{build_boot_cmdline_for, workdir_owner, Backend, JobSpec};
use super::{pump_console, HostError, Tee};

/// Environment variable selecting the scratch directory for launches.
pub const TMPDIR_VAR: &str = "APPTOOL_TMPDIR";

/// Status reported when the guest never announced one.
pub const STATUS_GUEST_CRASH: i32 = 255;

/// How to start a hypervisor process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendInvocation {
    pub argv: Vec<String>,
    /// Added to the launcher's own environment.
    pub env: BTreeMap<String, String>,
    pub stdio: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub exit_status: i32,
    pub transcript: Vec<u8>,
    pub wall_time: Duration,
    /// Only the mock backend can time the init stages.
    pub stage_timings: Option<Vec<(Stage, Duration)>>,
    /// The output sink failed before the console closed.
    pub truncated: bool,
}

/// Scratch directory for launches: `APPTOOL_TMPDIR`, else the system default.
pub fn scratch_dir() -> PathBuf {
    env::var_os(TMPDIR_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(env::temp_dir)
}

fn path_arg(path: &Path) -> Result<&str, HostError> {
    path.to_str()
        .ok_or_else(|| HostError::InvalidSpec(format!("non UTF-8 path {}", path.display())))
}

/// UML command line for `spec` with the working directory owned by `owner`.
///
/// `hostfs=` goes last; it names the host directory the guest mounts with
/// `mount -t hostfs`.
pub fn uml_argv(spec: &JobSpec, owner: (u32, u32)) -> Result<Vec<String>, HostError> {
    let missing = |what| HostError::InvalidSpec(format!("the uml backend needs a {what}"));
    let kernel = spec
        .kernel_path
        .as_deref()
        .ok_or_else(|| missing("kernel"))?;
    let image = spec.image_path.as_deref().ok_or_else(|| missing("image"))?;
    let ubd = match &spec.cow_path {
        Some(cow) => format!("ubd0={},{}", path_arg(cow)?, path_arg(image)?),
        None => format!("ubd0={}", path_arg(image)?),
    };
    let mut argv = vec![
        path_arg(kernel)?.to_owned(),
        ubd,
        format!("mem={}M", spec.memory_mib),
        "con0=fd:0,fd:1".to_owned(),
        "con=null".to_owned(),
    ];
    argv.extend(
        build_boot_cmdline_for(spec, owner)?
            .split(' ')
            .map(str::to_owned),
    );
    argv.push(format!("hostfs={}", path_arg(&spec.workdir)?));
    Ok(argv)
}

fn is_executable(path: &Path) -> bool {
    fs::metadata(path)
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

pub fn build_uml_invocation(spec: &JobSpec) -> Result<BackendInvocation, HostError> {
    if spec.backend != Backend::Uml {
        return Err(HostError::InvalidSpec(format!(
            "backend is {}, not uml",
            spec.backend
        )));
    }
    if let Some(kernel) = &spec.kernel_path {
        if !is_executable(kernel) {
            return Err(HostError::BackendUnavailable(format!(
                "no executable guest kernel at {}",
                kernel.display()
            )));
        }
    }
    if let Some(image) = &spec.image_path {
        if !image.is_file() {
            return Err(HostError::BackendUnavailable(format!(
                "no disk image at {}",
                image.display()
            )));
        }
    }
    spec.validate()?;
    let spec = spec.resolved()?;
    let argv = uml_argv(&spec, workdir_owner(&spec)?)?;
    let mut env = BTreeMap::new();
    env.insert("TMPDIR".to_owned(), path_arg(&scratch_dir())?.to_owned());
    Ok(BackendInvocation {
        argv,
        env,
        stdio: "stdin inherited as guest console input; stdout and stderr merged into one console stream"
            .to_owned(),
    })
}

/// Runs `spec` to completion, forwarding the console to `sink`.
pub fn launch(spec: &JobSpec, sink: &mut dyn Write) -> Result<RunOutcome, HostError> {
    match spec.backend {
        Backend::Mock => launch_mock(spec, sink),
        Backend::Uml => launch_uml(spec, sink),
    }
}

fn launch_mock(spec: &JobSpec, sink: &mut dyn Write) -> Result<RunOutcome, HostError> {
    spec.validate()?;
    let spec = spec.resolved()?;
    let cmdline = build_boot_cmdline_for(&spec, workdir_owner(&spec)?)?;
    let started = Instant::now();

    let scratch = scratch_dir();
    let tmp = tempfile::Builder::new()
        .prefix("apptool-mock-")
        .tempdir_in(&scratch)
        .map_err(|e| HostError::io(&scratch, e))?;
    let appliance = match &spec.mock_appliance {
        Some(tree) => tree.clone(),
        None => {
            let root = tmp.path().join("appliance");
            MockAppliance::create(&root).map_err(|e| HostError::io(&root, e))?;
            // Jobs may run under a dropped identity and must reach the tree.
            fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o755))
                .map_err(|e| HostError::io(tmp.path(), e))?;
            root
        }
    };

    let mut guest = MockGuest::new(&appliance, &spec.workdir, Tee::new(sink))
        .map_err(|e| HostError::io(&appliance, e))?;
    let report = init_main(&cmdline, &mut guest, &InitOptions::default());
    let (_, transcript, truncated) = guest.into_console().into_parts();
    Ok(RunOutcome {
        exit_status: report.status.clamp(0, 255),
        transcript,
        wall_time: started.elapsed(),
        stage_timings: Some(report.stage_timings),
        truncated,
    })
}

fn launch_uml(spec: &JobSpec, sink: &mut dyn Write) -> Result<RunOutcome, HostError> {
    let invocation = build_uml_invocation(spec)?;
    let started = Instant::now();
    let (reader, writer) = io::pipe().map_err(HostError::Spawn)?;
    let mut cmd = Command::new(&invocation.argv[0]);
    cmd.args(&invocation.argv[1..])
        .envs(&invocation.env)
        .stdin(Stdio::inherit())
        .stdout(writer.try_clone().map_err(HostError::Spawn)?)
        .stderr(writer);
    let mut child = cmd.spawn().map_err(HostError::Spawn)?;
    drop(cmd);

    let mut tee = Tee::new(sink);
    let (waited, pumped) = thread::scope(|s| {
        let waiter = s.spawn(move || child.wait());
        let pumped = pump_console(reader, &mut tee);
        (waiter.join().expect("wait thread panicked"), pumped)
    });
    let status = waited.map_err(HostError::Spawn)?;
    let (_, transcript, _) = tee.into_parts();

    let exit_status = if status.signal().is_some() {
        STATUS_GUEST_CRASH
    } else {
        find_exit_status(&transcript)
            .filter(|s| (0..=255).contains(s))
            .unwrap_or(STATUS_GUEST_CRASH)
    };
    Ok(RunOutcome {
        exit_status,
        transcript,
        wall_time: started.elapsed(),
        stage_timings: None,
        truncated: pumped.truncated,
    })
}
