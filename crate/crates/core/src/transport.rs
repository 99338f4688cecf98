//! Framing for the two transports the proxy speaks: newline-delimited frames
//! over a byte stream (stdio) and one message per HTTP POST body.

use std::io::{self, BufRead, Write};

use crate::protocol::{encode_message, Message};

pub const CONTENT_TYPE: &str = "application/json";
/// Header carrying the agent session on the HTTP transport.
pub const SESSION_HEADER: &str = "Mcp-Session-Id";

/// Reads newline-delimited frames. Blank lines are skipped and a trailing
/// `\r` is stripped.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::new(),
        }
    }

    /// Next frame, or `None` at end of stream.
    pub fn read_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        loop {
            self.buf.clear();
            if self.inner.read_until(b'\n', &mut self.buf)? == 0 {
                return Ok(None);
            }
            while matches!(self.buf.last(), Some(b'\n' | b'\r')) {
                self.buf.pop();
            }
            if self.buf.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            return Ok(Some(std::mem::take(&mut self.buf)));
        }
    }
}

/// Writes one canonical frame followed by a newline and flushes.
pub fn write_frame<W: Write>(out: &mut W, msg: &Message) -> io::Result<()> {
    let mut bytes = encode_message(msg);
    bytes.push(b'\n');
    out.write_all(&bytes)?;
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::decode_message;
    use std::io::Cursor;

    #[test]
    fn reads_lines_and_skips_blanks() {
        let input = b"{\"jsonrpc\":\"2.0\",\"method\":\"a\"}\r\n\n   \n{\"jsonrpc\":\"2.0\",\"method\":\"b\"}";
        let mut reader = FrameReader::new(Cursor::new(&input[..]));
        let a = reader.read_frame().unwrap().unwrap();
        assert_eq!(decode_message(&a).unwrap().method.as_deref(), Some("a"));
        let b = reader.read_frame().unwrap().unwrap();
        assert_eq!(decode_message(&b).unwrap().method.as_deref(), Some("b"));
        assert!(reader.read_frame().unwrap().is_none());
    }

    #[test]
    fn writes_one_line_per_frame() {
        let mut out = Vec::new();
        write_frame(&mut out, &Message::request(1, "tools/list", None)).unwrap();
        write_frame(&mut out, &Message::notification("x", None)).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.ends_with('\n'));
    }
}
