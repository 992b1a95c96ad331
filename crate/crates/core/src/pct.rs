//! Strict percent-encoding shared by the boot-parameter codec and the
//! manifest text format.
//!
//! Unlike lenient URL decoders, a `%` that is not followed by two hex digits
//! is rejected rather than passed through, so every encoded string has
//! exactly one decoding.

use std::io::Write;

/// Encodes every byte for which `escape` returns true as `%XX` (uppercase).
///
/// `escape` must treat all bytes of a multi-byte character alike.
pub(crate) fn encode(input: &str, escape: impl Fn(u8) -> bool) -> String {
    let mut out = Vec::with_capacity(input.len());
    for &b in input.as_bytes() {
        if b == b'%' || escape(b) {
            let _ = write!(out, "%{b:02X}");
        } else {
            out.push(b);
        }
    }
    String::from_utf8(out).expect("escape predicate split a multi-byte character")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum DecodeError {
    /// A `%` at this byte offset is not followed by two hex digits.
    BadEscape(usize),
    /// The decoded bytes are not valid UTF-8.
    NotUtf8,
}

pub(crate) fn decode(input: &str) -> Result<String, DecodeError> {
    if !input.contains('%') {
        return Ok(input.to_owned());
    }
    let bytes = input.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hi = bytes.get(i + 1).and_then(|&c| hex_val(c));
            let lo = bytes.get(i + 2).and_then(|&c| hex_val(c));
            match (hi, lo) {
                (Some(hi), Some(lo)) => out.push(hi << 4 | lo),
                _ => return Err(DecodeError::BadEscape(i)),
            }
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| DecodeError::NotUtf8)
}

fn hex_val(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    }
}
