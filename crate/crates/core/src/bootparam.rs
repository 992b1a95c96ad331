//! The host to guest channel carried on the kernel command line.
//!
//! Launcher-owned arguments are `apppot.<key>=<value>` tokens whose values are
//! percent-encoded so they survive the kernel's whitespace tokenization. Every
//! other token is a hypervisor or kernel argument and is carried through
//! untouched, after the launcher's own pairs.

use std::fmt;

use thiserror::Error;

use crate::pct;

/// Prefix shared by every launcher-owned key.
pub const KEY_PREFIX: &str = "apppot.";

pub const KEY_JOBCMD: &str = "apppot.jobcmd";
pub const KEY_CHANGES: &str = "apppot.changes";
pub const KEY_UID: &str = "apppot.uid";
pub const KEY_GID: &str = "apppot.gid";
pub const KEY_WORKDIR: &str = "apppot.workdir";
pub const KEY_TAG: &str = "apppot.tag";
/// Reserved for multi-instance MPI launch; guests reject it.
pub const KEY_MPI: &str = "apppot.mpi";

/// Keys understood by this version of the protocol.
pub const RESERVED_KEYS: &[&str] = &[
    KEY_JOBCMD,
    KEY_CHANGES,
    KEY_UID,
    KEY_GID,
    KEY_WORKDIR,
    KEY_TAG,
    KEY_MPI,
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BootParamError {
    #[error("invalid boot parameter key {0:?}")]
    InvalidKey(String),
    #[error("duplicate boot parameter key {0:?}")]
    DuplicateKey(String),
    #[error("invalid passthrough token {0:?}")]
    InvalidPassthrough(String),
    #[error("malformed percent-escape in boot parameter token {0:?}")]
    MalformedEscape(String),
}

/// Non-fatal findings while decoding a command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeWarning {
    /// An earlier occurrence of `key` carrying `dropped` was overridden.
    DuplicateKey { key: String, dropped: String },
}

impl fmt::Display for DecodeWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeWarning::DuplicateKey { key, dropped } => {
                write!(f, "duplicate key {key}: earlier value {dropped:?} dropped")
            }
        }
    }
}

/// Ordered key/value pairs plus passthrough tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BootParams {
    pub pairs: Vec<(String, String)>,
    pub passthrough: Vec<String>,
}

impl BootParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty() && self.passthrough.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Sets `key`, replacing the value in place if it is already present.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), BootParamError> {
        if !is_valid_key(key) {
            return Err(BootParamError::InvalidKey(key.to_owned()));
        }
        let value = value.into();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key.to_owned(), value)),
        }
        Ok(())
    }

    pub fn push_passthrough(&mut self, token: impl Into<String>) -> Result<(), BootParamError> {
        let token = token.into();
        if !is_valid_passthrough(&token) {
            return Err(BootParamError::InvalidPassthrough(token));
        }
        self.passthrough.push(token);
        Ok(())
    }
}

/// `apppot.` followed by one or more of `[a-z0-9_.]`.
pub fn is_valid_key(key: &str) -> bool {
    match key.strip_prefix(KEY_PREFIX) {
        Some(rest) => {
            !rest.is_empty()
                && rest
                    .bytes()
                    .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
        }
        None => false,
    }
}

fn is_valid_passthrough(token: &str) -> bool {
    !token.is_empty()
        && !token.starts_with(KEY_PREFIX)
        && token.bytes().all(|b| b.is_ascii_graphic())
}

/// `"` is included because the kernel's own parser treats it as quoting.
fn needs_escape(b: u8) -> bool {
    matches!(b, b' ' | b'=' | b'"') || b.is_ascii_control() || !b.is_ascii()
}

/// Renders `params` as a single-space separated command-line fragment.
pub fn encode(params: &BootParams) -> Result<String, BootParamError> {
    let mut tokens = Vec::with_capacity(params.pairs.len() + params.passthrough.len());
    for (i, (key, value)) in params.pairs.iter().enumerate() {
        if !is_valid_key(key) {
            return Err(BootParamError::InvalidKey(key.clone()));
        }
        if params.pairs[..i].iter().any(|(k, _)| k == key) {
            return Err(BootParamError::DuplicateKey(key.clone()));
        }
        tokens.push(format!("{key}={}", pct::encode(value, needs_escape)));
    }
    for token in &params.passthrough {
        if !is_valid_passthrough(token) {
            return Err(BootParamError::InvalidPassthrough(token.clone()));
        }
        tokens.push(token.clone());
    }
    Ok(tokens.join(" "))
}

/// Parses a command line, dropping earlier duplicates silently.
pub fn decode(cmdline: &str) -> Result<BootParams, BootParamError> {
    decode_with_warnings(cmdline).map(|(params, _)| params)
}

/// Parses a command line. For a repeated key the last occurrence wins and
/// takes the position of that last occurrence.
pub fn decode_with_warnings(
    cmdline: &str,
) -> Result<(BootParams, Vec<DecodeWarning>), BootParamError> {
    let mut params = BootParams::new();
    let mut warnings = Vec::new();
    for token in cmdline.split_ascii_whitespace() {
        if !token.starts_with(KEY_PREFIX) {
            params.passthrough.push(token.to_owned());
            continue;
        }
        let (key, raw) = token.split_once('=').unwrap_or((token, ""));
        if !is_valid_key(key) {
            return Err(BootParamError::InvalidKey(token.to_owned()));
        }
        let value =
            pct::decode(raw).map_err(|_| BootParamError::MalformedEscape(token.to_owned()))?;
        if let Some(pos) = params.pairs.iter().position(|(k, _)| k == key) {
            let (_, dropped) = params.pairs.remove(pos);
            warnings.push(DecodeWarning::DuplicateKey {
                key: key.to_owned(),
                dropped,
            });
        }
        params.pairs.push((key.to_owned(), value));
    }
    Ok((params, warnings))
}
