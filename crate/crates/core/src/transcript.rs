//! Build transcript output.
//!
//! Line formats here are user-facing and stable: instruction headers,
//! argument vectors in Python list notation, and workaround lines.

use std::io::{self, Write};

/// Line-oriented sink for builder messages plus raw child output.
pub struct Transcript<'a> {
    out: &'a mut dyn Write,
    at_line_start: bool,
}

impl<'a> Transcript<'a> {
    pub fn new(out: &'a mut dyn Write) -> Self {
        Transcript {
            out,
            at_line_start: true,
        }
    }

    /// Write one builder line, starting a new line first if child output
    /// left one open.
    pub fn line(&mut self, s: &str) {
        if !self.at_line_start {
            let _ = self.out.write_all(b"\n");
        }
        let _ = writeln!(self.out, "{s}");
        let _ = self.out.flush();
        self.at_line_start = true;
    }

    /// Pass child output through unchanged.
    pub fn raw(&mut self, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        let _ = self.out.write_all(bytes);
        let _ = self.out.flush();
        self.at_line_start = bytes.ends_with(b"\n");
    }
}

impl Write for Transcript<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.raw(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Python `repr()` of a string.
pub fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                out.push_str(&format!("\\x{:02x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Argument vector as a Python list literal: `['/bin/sh', '-c', 'echo hello']`.
pub fn format_argv<S: AsRef<str>>(argv: &[S]) -> String {
    let items: Vec<String> = argv.iter().map(|a| py_repr(a.as_ref())).collect();
    format!("[{}]", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argv_lists() {
        assert_eq!(
            format_argv(&["/bin/sh", "-c", "echo hello"]),
            "['/bin/sh', '-c', 'echo hello']"
        );
        assert_eq!(
            format_argv(&["fakeroot", "/bin/sh", "-c", "yum install -y openssh"]),
            "['fakeroot', '/bin/sh', '-c', 'yum install -y openssh']"
        );
    }

    #[test]
    fn repr_quoting() {
        // Both quote kinds present: single quotes, inner ones escaped.
        assert_eq!(
            py_repr("echo 'APT::Sandbox::User \"root\";' > /etc/apt/apt.conf.d/no-sandbox"),
            "'echo \\'APT::Sandbox::User \"root\";\\' > /etc/apt/apt.conf.d/no-sandbox'"
        );
        assert_eq!(py_repr("it's"), "\"it's\"");
        assert_eq!(py_repr("a\\b\n"), "'a\\\\b\\n'");
        assert_eq!(py_repr("\x01"), "'\\x01'");
    }

    #[test]
    fn lines_after_partial_output() {
        let mut buf = Vec::new();
        {
            let mut t = Transcript::new(&mut buf);
            t.raw(b"no newline");
            t.line("next");
            t.raw(b"done\n");
            t.line("last");
        }
        assert_eq!(String::from_utf8(buf).unwrap(), "no newline\nnext\ndone\nlast\n");
    }
}
