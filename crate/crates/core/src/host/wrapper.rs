use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::spec::JobSpec;
use super::HostError;

/// File name the grid description expects the batch wrapper under.
pub const WRAPPER_NAME: &str = "apppot-wrapper.sh";
/// Console capture file named in grid descriptions.
pub const GRID_STDOUT: &str = "apppot.out";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// POSIX shell script for a local batch system.
    GenericBatch,
    /// xRSL job description for grid submission.
    GridDescription,
}

impl FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generic-batch" => Ok(Flavor::GenericBatch),
            "grid-description" => Ok(Flavor::GridDescription),
            other => Err(format!(
                "unknown wrapper flavor {other:?} (expected generic-batch or grid-description)"
            )),
        }
    }
}

/// Quotes `word` for a POSIX shell, leaving plain words alone.
pub fn shell_quote(word: &str) -> String {
    let plain = !word.is_empty()
        && word
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-_./,:=+@%".contains(&b));
    if plain {
        word.to_owned()
    } else {
        format!("'{}'", word.replace('\'', r"'\''"))
    }
}

struct Input<'a> {
    flag: &'static str,
    env: &'static str,
    source: Option<&'a Path>,
}

fn inputs(spec: &JobSpec) -> [Input<'_>; 3] {
    [
        Input {
            flag: "--image",
            env: "APPPOT_IMAGE",
            source: spec.image_path.as_deref(),
        },
        Input {
            flag: "--kernel",
            env: "APPPOT_KERNEL",
            source: spec.kernel_path.as_deref(),
        },
        Input {
            flag: "--changes",
            env: "",
            source: spec.changes_path.as_deref(),
        },
    ]
}

fn staged_name(path: &Path) -> Result<String, HostError> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| HostError::InvalidSpec(format!("cannot stage {}", path.display())))
}

fn path_text(path: &Path) -> Result<&str, HostError> {
    path.to_str()
        .ok_or_else(|| HostError::InvalidSpec(format!("non UTF-8 path {}", path.display())))
}

pub fn emit_batch_wrapper(spec: &JobSpec, flavor: Flavor) -> Result<String, HostError> {
    spec.validate_portable()?;
    match flavor {
        Flavor::GenericBatch => generic_batch(spec),
        Flavor::GridDescription => grid_description(spec),
    }
}

/// Copies each input into the job directory, then hands over to
/// `apptool start`. Missing image or kernel are taken from a pre-deployed
/// base named by `$APPPOT_IMAGE` / `$APPPOT_KERNEL`.
fn generic_batch(spec: &JobSpec) -> Result<String, HostError> {
    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    s.push_str("# AppPot batch wrapper: stage inputs, run the appliance, exit with its status.\n");
    s.push_str("set -eu\n\n");
    s.push_str("stage_in() {\n");
    s.push_str("    if [ ! -e \"$2\" ]; then\n");
    s.push_str("        cp -- \"$1\" \"$2\"\n");
    s.push_str("    fi\n");
    s.push_str("}\n\n");

    let mut args = vec![
        "start".to_owned(),
        "--backend".to_owned(),
        spec.backend.to_string(),
    ];
    for input in inputs(spec) {
        match input.source {
            Some(path) => {
                let name = staged_name(path)?;
                writeln!(
                    s,
                    "stage_in {} {}",
                    shell_quote(path_text(path)?),
                    shell_quote(&name)
                )
                .unwrap();
                args.push(input.flag.to_owned());
                args.push(shell_quote(&name));
            }
            None if !input.env.is_empty() => {
                args.push(input.flag.to_owned());
                args.push(format!(
                    "\"${{{}:?pre-deployed base not configured}}\"",
                    input.env
                ));
            }
            None => {}
        }
    }
    if let Some(cow) = &spec.cow_path {
        args.push("--cow".to_owned());
        args.push(shell_quote(path_text(cow)?));
    }
    args.push("--mem".to_owned());
    args.push(spec.memory_mib.to_string());
    if let Some(tag) = &spec.tag {
        args.push("--tag".to_owned());
        args.push(shell_quote(tag));
    }
    for token in &spec.extra_boot_args {
        args.push("--extra-boot-arg".to_owned());
        args.push(shell_quote(token));
    }
    if let Some(cmd) = &spec.job_command {
        args.push("--".to_owned());
        args.push(shell_quote(cmd));
    }
    writeln!(s, "\nexec apptool {}", args.join(" ")).unwrap();
    Ok(s)
}

fn xrsl_quote(value: &str) -> String {
    format!("\"{}\"", value.replace('"', "\"\""))
}

/// xRSL document running [`WRAPPER_NAME`] with the inputs staged in.
fn grid_description(spec: &JobSpec) -> Result<String, HostError> {
    let mut s = String::new();
    writeln!(s, "&(executable={})", xrsl_quote(WRAPPER_NAME)).unwrap();
    let name = spec.tag.as_deref().unwrap_or("apppot-job");
    writeln!(s, " (jobName={})", xrsl_quote(name)).unwrap();
    s.push_str(" (inputFiles=\n");
    writeln!(s, "    ({} \"\")", xrsl_quote(WRAPPER_NAME)).unwrap();
    for input in inputs(spec) {
        if let Some(path) = input.source {
            writeln!(
                s,
                "    ({} {})",
                xrsl_quote(&staged_name(path)?),
                xrsl_quote(path_text(path)?)
            )
            .unwrap();
        }
    }
    s.push_str(" )\n");
    writeln!(s, " (stdout={})", xrsl_quote(GRID_STDOUT)).unwrap();
    s.push_str(" (join=\"yes\")\n");
    writeln!(s, " (memory=\"{}\")", spec.memory_mib).unwrap();
    Ok(s)
}
