use std::io::{self, Read, Write};

const CHUNK: usize = 8 * 1024;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PumpResult {
    /// Bytes written to the sink.
    pub forwarded: u64,
    /// The sink failed before the source reached end of stream.
    pub truncated: bool,
}

/// Copies `source` to `sink` until end of stream, flushing after every read
/// so partial lines show up as soon as the guest emits them.
///
/// A read error ends the stream (a console pty reports `EIO` once the other
/// side is gone). A write error stops pumping and marks the result truncated.
pub fn pump_console<R: Read, W: Write>(mut source: R, mut sink: W) -> PumpResult {
    let mut buf = [0u8; CHUNK];
    let mut result = PumpResult::default();
    loop {
        let n = match source.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        };
        if sink
            .write_all(&buf[..n])
            .and_then(|_| sink.flush())
            .is_err()
        {
            result.truncated = true;
            break;
        }
        result.forwarded += n as u64;
    }
    result
}

/// Forwards to `sink` while keeping a copy of everything written.
///
/// The copy is taken before forwarding, so it stays complete even after the
/// sink fails; once failed the sink is not written again.
pub struct Tee<W> {
    sink: W,
    transcript: Vec<u8>,
    sink_failed: bool,
}

impl<W: Write> Tee<W> {
    pub fn new(sink: W) -> Self {
        Tee {
            sink,
            transcript: Vec::new(),
            sink_failed: false,
        }
    }

    pub fn transcript(&self) -> &[u8] {
        &self.transcript
    }

    pub fn sink_failed(&self) -> bool {
        self.sink_failed
    }

    pub fn into_parts(self) -> (W, Vec<u8>, bool) {
        (self.sink, self.transcript, self.sink_failed)
    }
}

impl<W: Write> Write for Tee<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.transcript.extend_from_slice(buf);
        if self.sink_failed {
            return Err(io::Error::new(
                io::ErrorKind::BrokenPipe,
                "console sink closed",
            ));
        }
        if let Err(e) = self.sink.write_all(buf) {
            self.sink_failed = true;
            return Err(e);
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if self.sink_failed {
            return Ok(());
        }
        self.sink.flush().inspect_err(|_| self.sink_failed = true)
    }
}
