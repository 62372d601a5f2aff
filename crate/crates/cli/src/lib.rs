//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use ubuild_core::build::{self, BuildRequest, Builder};
use ubuild_core::idmap::{self, LintFinding, Severity};
use ubuild_core::image::{ImageRef, StoreLayout, STORE_ENV};
use ubuild_core::inject;
use ubuild_core::registry::RegistryClient;
use ubuild_core::sandbox::{self, NamespaceRunner, UserNsSupport};

pub const EXIT_LINT_READ: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ubuild", version, about = "Build container images without privilege")]
pub struct Cli {
    /// Image store directory.
    #[arg(long, global = true, env = STORE_ENV)]
    pub storage: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an image from a Dockerfile.
    Build {
        #[arg(short = 't', long = "tag")]
        tag: String,
        #[arg(short = 'f', long = "file")]
        file: Option<PathBuf>,
        /// Modify privileged RUN instructions so they can succeed.
        #[arg(long)]
        force: bool,
        #[arg(long = "build-arg", value_name = "K=V", value_parser = parse_kv)]
        build_arg: Vec<(String, String)>,
        /// Extra distribution configurations (TOML).
        #[arg(long = "force-config", value_name = "FILE")]
        force_config: Vec<PathBuf>,
        /// Root-faking preload shim to use instead of an in-image wrapper.
        #[arg(long, env = "UBUILD_SHIM")]
        shim: Option<PathBuf>,
        context: PathBuf,
    },
    /// Download an image into the store.
    Pull { reference: String },
    /// Upload a stored image.
    Push { reference: String },
    /// List stored images.
    List,
    /// Import a directory tree as an image.
    Import { reference: String, dir: PathBuf },
    /// Check subordinate ID files for dangerous ranges.
    LintSubid {
        #[arg(long, default_value = "/etc/subuid")]
        subuid: PathBuf,
        #[arg(long, default_value = "/etc/subgid")]
        subgid: PathBuf,
        #[arg(long, default_value = "/etc/passwd")]
        passwd: PathBuf,
        #[arg(long, default_value = "/etc/group")]
        group: PathBuf,
    },
    /// Report whether unprivileged sandboxes work here.
    Probe,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let store_root = cli.storage.clone().unwrap_or_else(StoreLayout::default_root);
    let open_store = |err: &mut dyn Write| match StoreLayout::open(&store_root) {
        Ok(s) => Some(s),
        Err(e) => {
            let _ = writeln!(err, "error: cannot open store {}: {e}", store_root.display());
            None
        }
    };
    match cli.command {
        Command::Build {
            tag,
            file,
            force,
            build_arg,
            force_config,
            shim,
            context,
        } => {
            let mut configs = inject::Registry::builtin();
            for p in &force_config {
                let loaded = fs::read_to_string(p)
                    .map_err(|e| e.to_string())
                    .and_then(|t| configs.extend_from_toml(&t).map_err(|e| e.to_string()));
                if let Err(e) = loaded {
                    let _ = writeln!(err, "error: {}: {e}", p.display());
                    return build::EXIT_PARSE;
                }
            }
            let Some(store) = open_store(err) else {
                return build::EXIT_RUN;
            };
            let mut client = match RegistryClient::new() {
                Ok(c) => c,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return build::EXIT_PULL;
                }
            };
            let req = BuildRequest {
                tag,
                dockerfile: file.unwrap_or_else(|| context.join("Dockerfile")),
                context,
                force,
                build_args: build_arg.into_iter().collect::<BTreeMap<_, _>>(),
                shim,
            };
            Builder {
                store: &store,
                runner: &mut NamespaceRunner,
                source: &mut client,
                configs: &configs,
            }
            .build(&req, out)
        }
        Command::Pull { reference } => {
            let Some(r) = parse_ref(&reference, err) else {
                return build::EXIT_PARSE;
            };
            let Some(store) = open_store(err) else {
                return build::EXIT_PULL;
            };
            let result = RegistryClient::new()
                .and_then(|mut c| ubuild_core::registry::pull_to_store(&mut c, &r, &store));
            match result {
                Ok((meta, pulled)) => {
                    let s = pulled.stats;
                    let _ = writeln!(
                        out,
                        "pulled {} {} ({} blobs downloaded, {} cached)",
                        meta.reference, meta.manifest_digest, s.downloaded, s.cached
                    );
                    0
                }
                Err(e) => {
                    let _ = writeln!(err, "error: pull {r}: {e}");
                    build::EXIT_PULL
                }
            }
        }
        Command::Push { reference } => {
            let Some(r) = parse_ref(&reference, err) else {
                return build::EXIT_PARSE;
            };
            let Some(store) = open_store(err) else {
                return build::EXIT_EXPORT;
            };
            match RegistryClient::new().and_then(|mut c| c.push(&r, &store)) {
                Ok((digest, s)) => {
                    let _ = writeln!(
                        out,
                        "pushed {r} {digest} ({} blobs uploaded, {} already present)",
                        s.uploaded, s.skipped
                    );
                    0
                }
                Err(e) => {
                    let _ = writeln!(err, "error: push {r}: {e}");
                    build::EXIT_EXPORT
                }
            }
        }
        Command::List => {
            let Some(store) = open_store(err) else {
                return 1;
            };
            match store.list() {
                Ok(images) => {
                    for m in images {
                        let _ = writeln!(out, "{} {}", m.reference, m.manifest_digest);
                    }
                    0
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    1
                }
            }
        }
        Command::Import { reference, dir } => {
            let Some(r) = parse_ref(&reference, err) else {
                return build::EXIT_PARSE;
            };
            let Some(store) = open_store(err) else {
                return build::EXIT_EXPORT;
            };
            match build::import_root(&store, &r, &dir) {
                Ok(m) => {
                    let _ = writeln!(out, "imported {} {}", m.reference, m.manifest_digest);
                    0
                }
                Err(e) => {
                    let _ = writeln!(err, "error: import {}: {e}", dir.display());
                    build::EXIT_EXPORT
                }
            }
        }
        Command::LintSubid {
            subuid,
            subgid,
            passwd,
            group,
        } => lint_subid(&subuid, &subgid, &passwd, &group, out, err),
        Command::Probe => {
            let r = sandbox::probe_host();
            let _ = writeln!(out, "euid: {}", r.euid);
            let _ = writeln!(out, "egid: {}", r.egid);
            for (k, v) in &r.sysctls {
                let _ = writeln!(out, "{k}: {v}");
            }
            match r.user_ns {
                UserNsSupport::Available => {
                    let _ = writeln!(out, "user namespaces: available");
                    0
                }
                UserNsSupport::Unavailable { reason } => {
                    let _ = writeln!(out, "user namespaces: unavailable: {reason}");
                    1
                }
            }
        }
    }
}

fn parse_ref(s: &str, err: &mut dyn Write) -> Option<ImageRef> {
    match s.parse() {
        Ok(r) => Some(r),
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            None
        }
    }
}

/// Lint both ID spaces. Exit 0 when there are no errors, 1 otherwise, 2
/// when a file cannot be read.
pub fn lint_subid(
    subuid: &Path,
    subgid: &Path,
    passwd: &Path,
    group: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let mut texts = Vec::new();
    for p in [subuid, subgid, passwd, group] {
        match fs::read_to_string(p) {
            Ok(t) => texts.push(t),
            Err(e) => {
                let _ = writeln!(err, "error: {}: {e}", p.display());
                return EXIT_LINT_READ;
            }
        }
    }
    let mut errors = 0;
    for (label, sub, acct) in [("subuid", &texts[0], &texts[2]), ("subgid", &texts[1], &texts[3])] {
        for f in lint_one(sub, acct) {
            if f.severity == Severity::Error {
                errors += 1;
            }
            let _ = writeln!(out, "{label}: {f}");
        }
    }
    i32::from(errors > 0)
}

/// Findings for one subordinate ID file against one account file.
pub fn lint_one(subid_text: &str, account_text: &str) -> Vec<LintFinding> {
    let parsed = idmap::parse_subid(subid_text);
    let mut findings = parsed.findings;
    findings.extend(idmap::lint_config(&parsed.entries, &idmap::account_ids(account_text)));
    findings
}
