//! Build pipeline: parse, fetch the base, run each instruction in the
//! sandbox with optional `--force` injection, export a single-layer image.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::dockerfile::{self, Op};
use crate::fsutil::{resolve_in_root, with_suffix};
use crate::image::{self, ImageError, ImageMeta, ImageRef, StoreLayout};
use crate::inject::{self, ForceState, InjectError};
use crate::oci::{self, Descriptor, ImageConfig, Manifest, RunConfig};
use crate::ownerdb::{self, DbSession};
use crate::registry::{self, RegistryClient};
use crate::sandbox::{Preload, Runner, SandboxSpec};
use crate::transcript::{format_argv, py_repr, Transcript};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_PULL: i32 = 3;
pub const EXIT_EXPORT: i32 = 4;

static SOCK_SEQ: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone, Default)]
pub struct BuildRequest {
    /// Tag as given by the user; printed in the summary line.
    pub tag: String,
    pub dockerfile: PathBuf,
    pub context: PathBuf,
    pub force: bool,
    pub build_args: BTreeMap<String, String>,
    /// Builder-provided root-faking shim. When set, `--force` preloads it
    /// instead of prefixing RUNs with the image's wrapper.
    pub shim: Option<PathBuf>,
}

/// Where base images come from when the store lacks them.
pub trait BaseSource {
    fn fetch(&mut self, r: &ImageRef, store: &StoreLayout) -> Result<(), String>;
}

impl BaseSource for RegistryClient {
    fn fetch(&mut self, r: &ImageRef, store: &StoreLayout) -> Result<(), String> {
        registry::pull_to_store(self, r, store)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

/// Refuses every fetch.
pub struct Offline;

impl BaseSource for Offline {
    fn fetch(&mut self, r: &ImageRef, _: &StoreLayout) -> Result<(), String> {
        Err(format!("{r} is not in the store"))
    }
}

pub struct Builder<'a> {
    pub store: &'a StoreLayout,
    pub runner: &'a mut dyn Runner,
    pub source: &'a mut dyn BaseSource,
    pub configs: &'a inject::Registry,
}

struct Failure(i32, String);

fn fail<E: std::fmt::Display>(code: i32) -> impl Fn(E) -> Failure {
    move |e| Failure(code, e.to_string())
}

/// Image config of a stored image, if it has a readable one.
pub fn stored_config(store: &StoreLayout, r: &ImageRef) -> Option<ImageConfig> {
    let meta = store.read_meta(r).ok()??;
    let m = Manifest::parse(&store.read_blob(&meta.manifest_digest).ok()?, None).ok()?;
    serde_json::from_slice(&store.read_blob(&m.config.digest).ok()?).ok()
}

/// Export `root` and record it in the store as image `r`, moving `root`
/// into place.
pub fn commit_image(
    store: &StoreLayout,
    r: &ImageRef,
    root: &Path,
    db: Option<&DbSession>,
    run_config: RunConfig,
) -> Result<ImageMeta, ImageError> {
    let layer = image::export_layer(root, db, store)?;
    let config = ImageConfig::new(run_config, vec![layer.diff_id.clone()]).to_bytes();
    let config_d = store.put_blob(&config)?;
    let manifest = Manifest::new(
        Descriptor::new(oci::OCI_CONFIG, config_d, config.len() as u64),
        vec![layer.descriptor],
    );
    let manifest_digest = store.put_blob(&manifest.to_bytes())?;
    let dest = store.image_root(r);
    if dest != root {
        store.remove_image(r)?;
        fs::rename(root, &dest)?;
    }
    let meta = ImageMeta {
        reference: r.to_string(),
        manifest_digest,
    };
    store.write_meta(r, &meta)?;
    Ok(meta)
}

/// Copy a directory tree into the store as image `r`.
pub fn import_root(store: &StoreLayout, r: &ImageRef, src: &Path) -> Result<ImageMeta, ImageError> {
    let _lock = store.lock(&r.encoded())?;
    let staging = with_suffix(&store.image_root(r), ".importing");
    if staging.exists() {
        image::make_tree_writable(&staging)?;
        fs::remove_dir_all(&staging)?;
    }
    image::snapshot(src, &staging)?;
    commit_image(store, r, &staging, None, RunConfig::default())
}

/// Merge `src` (file or directory contents) into `dst`.
fn copy_into(src: &Path, dst: &Path) -> io::Result<()> {
    let md = fs::symlink_metadata(src)?;
    if md.is_dir() {
        fs::create_dir_all(dst)?;
        for e in fs::read_dir(src)? {
            let e = e?;
            copy_into(&e.path(), &dst.join(e.file_name()))?;
        }
        fs::set_permissions(dst, md.permissions())?;
    } else if md.file_type().is_symlink() {
        if fs::symlink_metadata(dst).is_ok() {
            fs::remove_file(dst)?;
        }
        std::os::unix::fs::symlink(fs::read_link(src)?, dst)?;
    } else {
        if fs::symlink_metadata(dst).is_ok_and(|m| !m.is_dir()) {
            fs::remove_file(dst)?;
        }
        fs::copy(src, dst)?;
    }
    Ok(())
}

fn container_abs(workdir: &str, p: &str) -> String {
    if p.starts_with('/') {
        p.to_string()
    } else {
        format!("{}/{p}", workdir.trim_end_matches('/'))
    }
}

fn do_copy(root: &Path, context: &Path, workdir: &str, sources: &[String], dest: &str) -> io::Result<()> {
    let dest_abs = container_abs(workdir, dest);
    let dest_host = resolve_in_root(root, Path::new(&dest_abs))?;
    let into_dir = dest.ends_with('/') || sources.len() > 1 || dest_host.is_dir();
    for s in sources {
        let src = resolve_in_root(context, Path::new(s))?;
        let md = fs::metadata(&src)
            .map_err(|e| io::Error::new(e.kind(), format!("COPY source {s}: {e}")))?;
        let target = if md.is_dir() || !into_dir {
            dest_host.clone()
        } else {
            dest_host.join(src.file_name().unwrap_or_default())
        };
        if let Some(p) = target.parent() {
            fs::create_dir_all(p)?;
        }
        copy_into(&src, &target)?;
    }
    Ok(())
}

struct ShimSession {
    server: ownerdb::Server,
}

impl Builder<'_> {
    /// Run the build, writing the transcript to `out`; returns the exit code.
    pub fn build(&mut self, req: &BuildRequest, out: &mut dyn Write) -> i32 {
        let mut t = Transcript::new(out);
        match self.run(req, &mut t) {
            Ok(()) => EXIT_OK,
            Err(Failure(code, msg)) => {
                t.line(&format!("error: {msg}"));
                code
            }
        }
    }

    fn run(&mut self, req: &BuildRequest, t: &mut Transcript<'_>) -> Result<(), Failure> {
        let text = fs::read_to_string(&req.dockerfile)
            .map_err(|e| Failure(EXIT_PARSE, format!("cannot read {}: {e}", req.dockerfile.display())))?;
        let recipe = dockerfile::parse_with_args(&text, &req.dockerfile.to_string_lossy(), &req.build_args)
            .map_err(fail(EXIT_PARSE))?;
        let tag: ImageRef = req.tag.parse().map_err(fail(EXIT_PARSE))?;
        if !req.context.is_dir() {
            return Err(Failure(
                EXIT_PARSE,
                format!("context {} is not a directory", req.context.display()),
            ));
        }
        for w in &recipe.warnings {
            t.line(&format!("warning: {w}"));
        }
        let context = req.context.canonicalize().map_err(fail(EXIT_PARSE))?;
        let _build_lock = self.store.lock("build").map_err(fail(EXIT_RUN))?;

        let base_text = recipe.base_image();
        t.line(&format!("  1 FROM {base_text}"));
        let base: ImageRef = base_text.parse().map_err(fail(EXIT_PARSE))?;
        let have = self.store.read_meta(&base).ok().flatten().is_some() && self.store.image_root(&base).is_dir();
        if !have {
            self.source
                .fetch(&base, self.store)
                .map_err(|e| Failure(EXIT_PULL, format!("pull failed: {e}")))?;
        }

        let work = with_suffix(&self.store.image_root(&tag), ".building");
        if work.exists() {
            image::make_tree_writable(&work).map_err(fail(EXIT_RUN))?;
            fs::remove_dir_all(&work).map_err(fail(EXIT_RUN))?;
        }
        image::snapshot(&self.store.image_root(&base), &work).map_err(fail(EXIT_RUN))?;

        let base_cfg = stored_config(self.store, &base).map(|c| c.config).unwrap_or_default();
        let mut env: Vec<(String, String)> = base_cfg
            .env
            .iter()
            .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let mut workdir = if base_cfg.working_dir.is_empty() {
            "/".to_string()
        } else {
            base_cfg.working_dir.clone()
        };

        let config = inject::detect_config(&work, self.configs).cloned();
        let mut state = ForceState::new(req.force, config.clone());
        match (&config, req.force) {
            (Some(c), true) => t.line(&inject::will_use_line(c)),
            (None, true) => t.line("warning: --force: no matching configuration; building unmodified"),
            _ => {}
        }
        let mut shim: Option<ShimSession> = None;

        let result = (|| -> Result<(), Failure> {
            for (idx, ins) in recipe.instructions.iter().enumerate().skip(1) {
                let n = idx + 1;
                match &ins.op {
                    Op::From { .. } => unreachable!("single FROM"),
                    Op::Run { command } => {
                        let mut argv = dockerfile::shell_form(ins).expect("RUN");
                        t.line(&format!("{n:>3} RUN {}", format_argv(&argv)));
                        let mut spec = SandboxSpec::new(&work, vec![]);
                        spec.env = env.clone();
                        spec.workdir = workdir.clone();
                        spec.merge_stderr = true;
                        let modify = state.enabled
                            && state.config.as_ref().is_some_and(|c| inject::needs_modification(command, c));
                        if modify {
                            let c = state.config.clone().expect("checked");
                            if let Some(path) = &req.shim {
                                if shim.is_none() {
                                    shim = Some(self.start_shim(&work)?);
                                }
                                spec.preload = Some(Preload {
                                    shim: path.clone(),
                                    db_socket: shim.as_ref().expect("started").server.path().to_path_buf(),
                                });
                            }
                            if !state.initialized {
                                state = inject::apply_init(
                                    self.runner,
                                    &spec,
                                    &c,
                                    state.clone(),
                                    req.shim.is_some(),
                                    t,
                                )
                                .map_err(|e| match e {
                                    InjectError::InitStepFailed { step, code } => Failure(
                                        EXIT_RUN,
                                        format!("build failed: --force init step {step} exited with {code}"),
                                    ),
                                    e => Failure(EXIT_RUN, format!("build failed: {e}")),
                                })?;
                            }
                            if req.shim.is_none() {
                                argv = inject::rewrite(&argv, &c);
                                t.line(&inject::rewrite_line(&argv));
                            } else {
                                t.line(&format!("workarounds: RUN: preloading shim: {}", format_argv(&argv)));
                            }
                            state.modified_count += 1;
                        }
                        spec.argv = argv;
                        let res = self
                            .runner
                            .run(&spec, &mut |_, b| t.raw(b))
                            .map_err(|e| Failure(EXIT_RUN, format!("build failed: {e}")))?;
                        if !res.status.success() {
                            if let Some(hint) = inject::advise(&state, true).filter(|_| !state.enabled) {
                                t.line(&hint);
                            }
                            return Err(Failure(
                                EXIT_RUN,
                                format!("build failed: RUN command exited with {}", res.status.code()),
                            ));
                        }
                    }
                    Op::Copy { sources, dest } => {
                        t.line(&format!("{n:>3} COPY {} -> {}", format_argv(sources), py_repr(dest)));
                        do_copy(&work, &context, &workdir, sources, dest)
                            .map_err(|e| Failure(EXIT_RUN, format!("build failed: COPY: {e}")))?;
                    }
                    Op::Env { key, value } => {
                        let v = value.clone().unwrap_or_default();
                        t.line(&format!("{n:>3} ENV {key}={}", py_repr(&v)));
                        env.retain(|(k, _)| k != key);
                        env.push((key.clone(), v));
                    }
                    Op::Arg { key, value } => match value {
                        Some(v) => {
                            t.line(&format!("{n:>3} ARG {key}={}", py_repr(v)));
                            env.retain(|(k, _)| k != key);
                            env.push((key.clone(), v.clone()));
                        }
                        None => t.line(&format!("{n:>3} ARG {key}")),
                    },
                    Op::Workdir { path } => {
                        workdir = container_abs(&workdir, path);
                        t.line(&format!("{n:>3} WORKDIR {workdir}"));
                        let host = resolve_in_root(&work, Path::new(&workdir)).map_err(fail(EXIT_RUN))?;
                        fs::create_dir_all(host)
                            .map_err(|e| Failure(EXIT_RUN, format!("build failed: WORKDIR: {e}")))?;
                    }
                }
            }
            Ok(())
        })();

        let db = shim.map(|s| s.server.shutdown());
        result?;

        if state.enabled && state.config.is_some() {
            if let Some(summary) = inject::advise(&state, false) {
                t.line(&summary);
            }
        }
        let run_config = RunConfig {
            env: env.iter().map(|(k, v)| format!("{k}={v}")).collect(),
            working_dir: workdir,
            cmd: base_cfg.cmd,
        };
        commit_image(self.store, &tag, &work, db.as_ref(), run_config)
            .map_err(|e| Failure(EXIT_EXPORT, format!("export failed: {e}")))?;
        if db.is_some() {
            let _ = fs::remove_file(with_suffix(&work, ".ownerdb"));
        }
        t.line(&format!("grown in {} instructions: {}", recipe.instructions.len(), req.tag));
        Ok(())
    }

    fn start_shim(&self, work: &Path) -> Result<ShimSession, Failure> {
        let journal = with_suffix(work, ".ownerdb");
        let sock = std::env::temp_dir().join(format!(
            "ubuild-{}-{}.sock",
            std::process::id(),
            SOCK_SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        let _ = fs::remove_file(&journal);
        let _ = fs::remove_file(&sock);
        let session = DbSession::load(&journal).map_err(fail(EXIT_RUN))?;
        let server = ownerdb::serve(session, &sock).map_err(fail(EXIT_RUN))?;
        Ok(ShimSession { server })
    }
}
