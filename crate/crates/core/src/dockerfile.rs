//! Dockerfile subset parser.
//!
//! Supported instructions are `FROM`, `RUN`, `COPY`, `ENV`, `WORKDIR` and
//! `ARG`. `RUN` is shell form only; its payload is passed to `/bin/sh -c`
//! untouched, so `$VAR` references in it are left for the shell (ENV and ARG
//! values are exported into the step's environment by the builder). The other
//! instructions get `$NAME` / `${NAME}` substitution from the ARG and ENV
//! values defined on earlier lines.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("{path}:{line}: instruction before FROM")]
    MissingFrom { path: String, line: usize },
    #[error("{path}: no FROM instruction")]
    NoFrom { path: String },
    #[error("{path}:{line}: multiple FROM instructions (multi-stage builds unsupported)")]
    MultipleFrom { path: String, line: usize },
    #[error("{path}:{line}: unknown instruction: {detail}")]
    UnknownInstruction {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{path}:{line}: unterminated line continuation at end of file")]
    UnterminatedContinuation { path: String, line: usize },
    #[error("{path}:{line}: {detail}")]
    Syntax {
        path: String,
        line: usize,
        detail: String,
    },
}

impl ParseError {
    /// Whether this error is one of the "missing FROM" family.
    pub fn is_missing_from(&self) -> bool {
        matches!(self, ParseError::MissingFrom { .. } | ParseError::NoFrom { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("expected RUN instruction, got {0}")]
pub struct WrongKind(pub Kind);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    From,
    Run,
    Copy,
    Env,
    Workdir,
    Arg,
}

impl Kind {
    pub fn keyword(self) -> &'static str {
        match self {
            Kind::From => "FROM",
            Kind::Run => "RUN",
            Kind::Copy => "COPY",
            Kind::Env => "ENV",
            Kind::Workdir => "WORKDIR",
            Kind::Arg => "ARG",
        }
    }

    fn from_keyword(word: &str) -> Option<Kind> {
        Some(match word.to_ascii_uppercase().as_str() {
            "FROM" => Kind::From,
            "RUN" => Kind::Run,
            "COPY" => Kind::Copy,
            "ENV" => Kind::Env,
            "WORKDIR" => Kind::Workdir,
            "ARG" => Kind::Arg,
            _ => return None,
        })
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Instruction payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    From { image: String },
    Run { command: String },
    Copy { sources: Vec<String>, dest: String },
    Env { key: String, value: Option<String> },
    Workdir { path: String },
    Arg { key: String, value: Option<String> },
}

impl Op {
    pub fn kind(&self) -> Kind {
        match self {
            Op::From { .. } => Kind::From,
            Op::Run { .. } => Kind::Run,
            Op::Copy { .. } => Kind::Copy,
            Op::Env { .. } => Kind::Env,
            Op::Workdir { .. } => Kind::Workdir,
            Op::Arg { .. } => Kind::Arg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub op: Op,
    /// 1-based line of the instruction keyword.
    pub line: usize,
}

impl Instruction {
    pub fn kind(&self) -> Kind {
        self.op.kind()
    }

    /// Single-line Dockerfile text that parses back to the same op.
    pub fn to_source(&self) -> String {
        match &self.op {
            Op::From { image } => format!("FROM {image}"),
            Op::Run { command } => format!("RUN {command}"),
            Op::Copy { sources, dest } => {
                let mut s = String::from("COPY");
                for p in sources.iter().chain(std::iter::once(dest)) {
                    s.push(' ');
                    s.push_str(&escape_word(p));
                }
                s
            }
            Op::Env { key, value } | Op::Arg { key, value } => {
                let kw = self.kind().keyword();
                match value {
                    Some(v) => format!("{kw} {key}={}", quote_value(v)),
                    None => format!("{kw} {key}"),
                }
            }
            Op::Workdir { path } => format!("WORKDIR {}", escape_word(path)),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_source())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recipe {
    pub instructions: Vec<Instruction>,
    pub source_path: String,
    /// Non-fatal diagnostics, e.g. references to undefined variables.
    pub warnings: Vec<String>,
}

impl Recipe {
    pub fn base_image(&self) -> &str {
        match &self.instructions[0].op {
            Op::From { image } => image,
            _ => unreachable!("recipe invariant: first instruction is FROM"),
        }
    }

    /// Dockerfile text with one instruction per line.
    pub fn to_source(&self) -> String {
        let mut out = String::new();
        for i in &self.instructions {
            out.push_str(&i.to_source());
            out.push('\n');
        }
        out
    }
}

/// Parse with no `--build-arg` overrides.
pub fn parse(text: &str, source_path: &str) -> Result<Recipe, ParseError> {
    parse_with_args(text, source_path, &BTreeMap::new())
}

/// Parse, letting `build_args` override ARG defaults.
pub fn parse_with_args(
    text: &str,
    source_path: &str,
    build_args: &BTreeMap<String, String>,
) -> Result<Recipe, ParseError> {
    let mut p = Parser {
        path: source_path,
        build_args,
        vars: BTreeMap::new(),
        warnings: Vec::new(),
    };
    let mut instructions: Vec<Instruction> = Vec::new();

    for (line, logical) in logical_lines(text, source_path)? {
        let (word, rest) = split_keyword(&logical);
        let kind = Kind::from_keyword(word).ok_or_else(|| ParseError::UnknownInstruction {
            path: source_path.to_string(),
            line,
            detail: word.to_string(),
        })?;
        match (kind, instructions.is_empty()) {
            (Kind::From, false) => {
                return Err(ParseError::MultipleFrom {
                    path: source_path.to_string(),
                    line,
                })
            }
            (k, true) if k != Kind::From => {
                return Err(ParseError::MissingFrom {
                    path: source_path.to_string(),
                    line,
                })
            }
            _ => {}
        }
        let op = p.op(kind, rest.trim(), line)?;
        instructions.push(Instruction { op, line });
    }

    if instructions.is_empty() {
        return Err(ParseError::NoFrom {
            path: source_path.to_string(),
        });
    }
    Ok(Recipe {
        instructions,
        source_path: source_path.to_string(),
        warnings: p.warnings,
    })
}

/// Shell-form argument vector for a RUN instruction.
pub fn shell_form(run: &Instruction) -> Result<Vec<String>, WrongKind> {
    match &run.op {
        Op::Run { command } => Ok(vec!["/bin/sh".into(), "-c".into(), command.clone()]),
        _ => Err(WrongKind(run.kind())),
    }
}

/// Join continuations and drop comments and blank lines. Yields the line
/// number where each logical line starts.
fn logical_lines(text: &str, path: &str) -> Result<Vec<(usize, String)>, ParseError> {
    let mut out = Vec::new();
    let mut pending: Option<(usize, String)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (body, continues) = match raw.trim_end().strip_suffix('\\') {
            Some(b) => (b, true),
            None => (raw, false),
        };
        let (start, mut acc) = pending.take().unwrap_or((lineno, String::new()));
        if acc.is_empty() {
            acc.push_str(body.trim_start());
        } else {
            acc.push_str(body);
        }
        if continues {
            pending = Some((start, acc));
        } else {
            out.push((start, acc.trim_end().to_string()));
        }
    }
    if let Some((start, _)) = pending {
        return Err(ParseError::UnterminatedContinuation {
            path: path.to_string(),
            line: start,
        });
    }
    Ok(out)
}

fn split_keyword(line: &str) -> (&str, &str) {
    match line.find(char::is_whitespace) {
        Some(i) => (&line[..i], &line[i..]),
        None => (line, ""),
    }
}

struct Parser<'a> {
    path: &'a str,
    build_args: &'a BTreeMap<String, String>,
    vars: BTreeMap<String, String>,
    warnings: Vec<String>,
}

impl Parser<'_> {
    fn syntax(&self, line: usize, detail: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            path: self.path.to_string(),
            line,
            detail: detail.into(),
        }
    }

    fn op(&mut self, kind: Kind, rest: &str, line: usize) -> Result<Op, ParseError> {
        match kind {
            Kind::Run => {
                if rest.is_empty() {
                    return Err(self.syntax(line, "RUN with empty command"));
                }
                if rest.starts_with('[') {
                    return Err(ParseError::UnknownInstruction {
                        path: self.path.to_string(),
                        line,
                        detail: "RUN exec form (JSON array) unsupported; use shell form".into(),
                    });
                }
                Ok(Op::Run {
                    command: rest.to_string(),
                })
            }
            Kind::From => {
                let words = self.words(rest, line)?;
                match words.as_slice() {
                    [image] => Ok(Op::From {
                        image: image.clone(),
                    }),
                    [] => Err(self.syntax(line, "FROM requires an image reference")),
                    _ => Err(self.syntax(line, "FROM takes exactly one image reference")),
                }
            }
            Kind::Workdir => {
                let words = self.words(rest, line)?;
                match words.as_slice() {
                    [path] => Ok(Op::Workdir { path: path.clone() }),
                    _ => Err(self.syntax(line, "WORKDIR takes exactly one path")),
                }
            }
            Kind::Copy => {
                if rest.starts_with('[') {
                    return Err(self.syntax(line, "COPY JSON form unsupported"));
                }
                let mut words = self.words(rest, line)?;
                if let Some(flag) = words.iter().find(|w| w.starts_with("--")) {
                    return Err(self.syntax(line, format!("COPY option unsupported: {flag}")));
                }
                if words.len() < 2 {
                    return Err(self.syntax(line, "COPY requires at least one source and a destination"));
                }
                let dest = words.pop().unwrap();
                Ok(Op::Copy {
                    sources: words,
                    dest,
                })
            }
            Kind::Env | Kind::Arg => {
                let (key, value) = self.key_value(kind, rest, line)?;
                let effective = match kind {
                    Kind::Arg => self.build_args.get(&key).cloned().or_else(|| value.clone()),
                    _ => value.clone(),
                };
                if let Some(v) = effective {
                    self.vars.insert(key.clone(), v);
                }
                let value = if kind == Kind::Arg { self.vars.get(&key).cloned() } else { value };
                Ok(match kind {
                    Kind::Env => Op::Env { key, value },
                    _ => Op::Arg { key, value },
                })
            }
        }
    }

    fn key_value(
        &mut self,
        kind: Kind,
        rest: &str,
        line: usize,
    ) -> Result<(String, Option<String>), ParseError> {
        let key_end = rest
            .find(|c: char| c == '=' || c.is_whitespace())
            .unwrap_or(rest.len());
        let key = &rest[..key_end];
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(self.syntax(line, format!("{kind}: bad variable name {key:?}")));
        }
        let after = &rest[key_end..];
        let value_src = if let Some(v) = after.strip_prefix('=') {
            Some(v)
        } else if after.trim().is_empty() {
            None
        } else if kind == Kind::Env {
            // legacy `ENV KEY value`
            Some(after.trim_start())
        } else {
            return Err(self.syntax(line, "ARG expects KEY or KEY=VALUE"));
        };
        let value = match value_src {
            None if kind == Kind::Env => {
                return Err(self.syntax(line, "ENV requires a value"));
            }
            None => None,
            Some(v) => {
                let words = self.words(v, line)?;
                match words.len() {
                    0 => Some(String::new()),
                    1 => Some(words.into_iter().next().unwrap()),
                    _ if kind == Kind::Env && !v.trim_start().starts_with(['"', '\'']) => {
                        // unquoted value with spaces: keep the rest of the line
                        Some(words.join(" "))
                    }
                    _ => return Err(self.syntax(line, format!("{kind}: one KEY=VALUE per line"))),
                }
            }
        };
        Ok((key.to_string(), value))
    }

    /// Split into words honoring quotes and backslash escapes, expanding
    /// variables outside single quotes.
    fn words(&mut self, s: &str, line: usize) -> Result<Vec<String>, ParseError> {
        let mut words = Vec::new();
        let mut cur = String::new();
        let mut in_word = false;
        let mut chars = s.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                c if c.is_whitespace() => {
                    if in_word {
                        words.push(std::mem::take(&mut cur));
                        in_word = false;
                    }
                }
                '\\' => {
                    in_word = true;
                    match chars.next() {
                        Some(n) => cur.push(n),
                        None => cur.push('\\'),
                    }
                }
                '\'' => {
                    in_word = true;
                    loop {
                        match chars.next() {
                            Some('\'') => break,
                            Some(n) => cur.push(n),
                            None => return Err(self.syntax(line, "unterminated single quote")),
                        }
                    }
                }
                '"' => {
                    in_word = true;
                    loop {
                        match chars.next() {
                            Some('"') => break,
                            Some('\\') => match chars.next() {
                                Some(n @ ('"' | '\\' | '$')) => cur.push(n),
                                Some(n) => {
                                    cur.push('\\');
                                    cur.push(n);
                                }
                                None => return Err(self.syntax(line, "unterminated double quote")),
                            },
                            Some('$') => self.expand(&mut chars, &mut cur, line)?,
                            Some(n) => cur.push(n),
                            None => return Err(self.syntax(line, "unterminated double quote")),
                        }
                    }
                }
                '$' => {
                    in_word = true;
                    self.expand(&mut chars, &mut cur, line)?;
                }
                c => {
                    in_word = true;
                    cur.push(c);
                }
            }
        }
        if in_word {
            words.push(cur);
        }
        Ok(words)
    }

    /// Expand a variable reference; the leading `$` has been consumed.
    fn expand(
        &mut self,
        chars: &mut std::iter::Peekable<std::str::Chars<'_>>,
        out: &mut String,
        line: usize,
    ) -> Result<(), ParseError> {
        let name = if chars.peek() == Some(&'{') {
            chars.next();
            let mut name = String::new();
            loop {
                match chars.next() {
                    Some('}') => break,
                    Some(c) => name.push(c),
                    None => return Err(self.syntax(line, "unterminated ${...}")),
                }
            }
            name
        } else {
            let mut name = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' {
                    name.push(c);
                    chars.next();
                } else {
                    break;
                }
            }
            if name.is_empty() {
                out.push('$');
                return Ok(());
            }
            name
        };
        match self.vars.get(&name) {
            Some(v) => out.push_str(v),
            None => self.warnings.push(format!(
                "{}:{}: undefined variable {} expands to empty string",
                self.path, line, name
            )),
        }
        Ok(())
    }
}

fn escape_word(s: &str) -> String {
    if !s.is_empty() && s.chars().all(|c| !c.is_whitespace() && !"\\'\"$".contains(c)) {
        return s.to_string();
    }
    quote_value(s)
}

fn quote_value(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if matches!(c, '"' | '\\' | '$') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}
