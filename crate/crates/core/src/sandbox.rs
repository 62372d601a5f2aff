//! Type III runtime: run a command in a fresh unprivileged user + mount + PID
//! namespace rooted at an image directory.
//!
//! The child maps exactly one UID and one GID (the invoker's) and writes
//! `deny` to `setgroups` before installing the GID map, which the kernel
//! requires for unprivileged GID maps. Supplementary groups stay unmapped.
//!
//! Setup happens in a `pre_exec` hook: unshare, write the maps, then fork so
//! the grandchild is PID 1 of the new PID namespace (needed to mount a fresh
//! `/proc`). The intermediate process only waits and relays the exit status.
//! Everything the hook touches is prepared beforehand because it runs after
//! `fork` in a possibly multithreaded process and must not allocate.

use std::ffi::{CString, OsStr};
use std::io::{self, Read};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{mpsc, Arc};
use std::thread;

use thiserror::Error;

use crate::idmap::Id;

/// `PATH` used when the spec's environment has none.
pub const DEFAULT_PATH: &str = "/usr/sbin:/usr/bin:/sbin:/bin";
/// Dynamic-linker preload variable set when a shim is configured.
pub const PRELOAD_ENV: &str = "LD_PRELOAD";
/// Variable carrying the in-container path of the ownership-database socket.
pub const DB_ENDPOINT_ENV: &str = "UBUILD_FAKEDB_SOCKET";
/// Reserved in-container directory for builder-provided files.
pub const RESERVED_DIR: &str = "/.ubuild";
/// In-container path of the preload shim.
pub const SHIM_CONTAINER_PATH: &str = "/.ubuild/libfakeshim.so";
/// In-container path of the ownership-database socket.
pub const DB_CONTAINER_PATH: &str = "/.ubuild/db.sock";

const DEVICES: [&str; 4] = ["/dev/null", "/dev/zero", "/dev/urandom", "/dev/tty"];

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error(
        "cannot create unprivileged user namespace: {reason} \
         (check sysctls user.max_user_namespaces, kernel.unprivileged_userns_clone \
         and kernel.apparmor_restrict_unprivileged_userns; RHEL/CentOS before 7.6 lacks support)"
    )]
    UserNsUnavailable { reason: String },
    #[error("cannot write {file}: {source}")]
    MapWriteFailed { file: &'static str, source: io::Error },
    #[error("image root {path} not usable: {why}")]
    RootNotUsable { path: PathBuf, why: String },
    #[error("cannot execute {argv0:?} in image: {source}")]
    ExecFailed { argv0: String, source: io::Error },
    #[error("container setup failed at {stage}: {source}")]
    Setup { stage: &'static str, source: io::Error },
    #[error("bind target {0} resolves outside the image")]
    BindEscape(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bind {
    pub host: PathBuf,
    /// Absolute path inside the container.
    pub container: String,
    pub read_only: bool,
}

/// Builder-provided root-faking shim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preload {
    pub shim: PathBuf,
    pub db_socket: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SandboxSpec {
    pub image_root: PathBuf,
    /// (namespace ID, host ID)
    pub map_uid: (Id, Id),
    pub map_gid: (Id, Id),
    pub binds: Vec<Bind>,
    pub env: Vec<(String, String)>,
    pub workdir: String,
    pub argv: Vec<String>,
    pub preload: Option<Preload>,
    /// Send stderr down the stdout pipe so the capture keeps the child's
    /// own interleaving.
    pub merge_stderr: bool,
}

impl SandboxSpec {
    /// Root inside is the invoking user outside.
    pub fn new(image_root: impl Into<PathBuf>, argv: Vec<String>) -> Self {
        SandboxSpec {
            image_root: image_root.into(),
            map_uid: (0, nix::unistd::geteuid().as_raw()),
            map_gid: (0, nix::unistd::getegid().as_raw()),
            binds: Vec::new(),
            env: Vec::new(),
            workdir: "/".into(),
            argv,
            preload: None,
            merge_stderr: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
}

impl ExitStatus {
    pub fn success(self) -> bool {
        self == ExitStatus::Code(0)
    }

    /// Shell-style single number: the code, or 128 + signal.
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Code(c) => c,
            ExitStatus::Signal(s) => 128 + s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Stdout,
    Stderr,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub status: ExitStatus,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl RunResult {
    pub fn stdout_str(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_str(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

/// Anything that runs a spec to completion. The builder and the injection
/// engine are written against this so tests can substitute a recorder.
pub trait Runner {
    fn run(
        &mut self,
        spec: &SandboxSpec,
        sink: &mut dyn FnMut(Stream, &[u8]),
    ) -> Result<RunResult, SandboxError>;
}

/// The real namespace runner.
#[derive(Debug, Default, Clone, Copy)]
pub struct NamespaceRunner;

impl Runner for NamespaceRunner {
    fn run(
        &mut self,
        spec: &SandboxSpec,
        sink: &mut dyn FnMut(Stream, &[u8]),
    ) -> Result<RunResult, SandboxError> {
        run_streaming(spec, sink)
    }
}

/// Run and capture, discarding live output.
pub fn run(spec: &SandboxSpec) -> Result<RunResult, SandboxError> {
    run_streaming(spec, &mut |_, _| {})
}

/// Run, passing output chunks to `sink` as they arrive and capturing them.
pub fn run_streaming(
    spec: &SandboxSpec,
    sink: &mut dyn FnMut(Stream, &[u8]),
) -> Result<RunResult, SandboxError> {
    let argv0 = spec
        .argv
        .first()
        .ok_or_else(|| SandboxError::Setup {
            stage: "argv",
            source: io::Error::new(io::ErrorKind::InvalidInput, "empty argv"),
        })?
        .clone();
    let plan = Plan::prepare(spec)?;

    let mut cmd = Command::new(&argv0);
    cmd.args(&spec.argv[1..]).env_clear().stdin(Stdio::null());
    for (k, v) in plan.env.iter() {
        cmd.env(k, v);
    }

    let (reader, writer) = io::pipe()?;
    let (err_reader, err_writer) = if spec.merge_stderr {
        (None, writer.try_clone()?)
    } else {
        let (r, w) = io::pipe()?;
        (Some(r), w)
    };
    cmd.stdout(writer).stderr(err_writer);

    let (stage_rd, stage_wr) = cloexec_pipe()?;
    let stage_fd = stage_wr.as_raw_fd();
    let plan = Arc::new(plan);
    let hook_plan = Arc::clone(&plan);
    // SAFETY: the hook only performs raw syscalls on data prepared in `plan`.
    unsafe {
        cmd.pre_exec(move || hook_plan.enter(stage_fd));
    }
    let spawned = cmd.spawn();
    drop(stage_wr);
    // Drop our copies of the pipe write ends so readers see EOF.
    drop(cmd);

    let mut child = match spawned {
        Ok(c) => c,
        Err(e) => return Err(plan.spawn_error(stage_rd, e, argv0)),
    };

    let (tx, rx) = mpsc::channel::<(Stream, Vec<u8>)>();
    let mut readers = vec![spawn_reader(reader, Stream::Stdout, tx.clone())];
    if let Some(r) = err_reader {
        readers.push(spawn_reader(r, Stream::Stderr, tx.clone()));
    }
    drop(tx);

    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    for (stream, chunk) in rx {
        sink(stream, &chunk);
        match stream {
            Stream::Stdout => stdout.extend_from_slice(&chunk),
            Stream::Stderr => stderr.extend_from_slice(&chunk),
        }
    }
    for r in readers {
        let _ = r.join();
    }
    let st = child.wait()?;
    let status = match (st.code(), st.signal()) {
        (Some(c), _) => ExitStatus::Code(c),
        (None, Some(s)) => ExitStatus::Signal(s),
        (None, None) => ExitStatus::Code(255),
    };
    Ok(RunResult {
        status,
        stdout,
        stderr,
    })
}

fn spawn_reader(
    mut r: io::PipeReader,
    stream: Stream,
    tx: mpsc::Sender<(Stream, Vec<u8>)>,
) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut buf = vec![0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    if tx.send((stream, buf[..n].to_vec())).is_err() {
                        break;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
    })
}

fn cloexec_pipe() -> io::Result<(OwnedFd, OwnedFd)> {
    let mut fds = [0 as libc::c_int; 2];
    // SAFETY: fds is a valid two-element buffer.
    if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: pipe2 just returned these descriptors to us.
    unsafe { Ok((OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1]))) }
}

fn cstr(p: impl AsRef<OsStr>) -> Result<CString, SandboxError> {
    CString::new(p.as_ref().as_bytes()).map_err(|_| SandboxError::Setup {
        stage: "path",
        source: io::Error::new(io::ErrorKind::InvalidInput, "NUL in path"),
    })
}

/// Join an absolute container path onto the image root without `..`.
pub fn container_path(root: &Path, inner: &str) -> PathBuf {
    let mut out = root.to_path_buf();
    for c in Path::new(inner).components() {
        if let Component::Normal(n) = c {
            out.push(n)
        }
    }
    out
}

// Setup stages, reported through the stage pipe.
const STAGE_UNSHARE: u8 = 1;
const STAGE_SETGROUPS: u8 = 2;
const STAGE_UID_MAP: u8 = 3;
const STAGE_GID_MAP: u8 = 4;
const STAGE_FORK: u8 = 5;
const STAGE_MOUNT: u8 = 6;
const STAGE_PIVOT: u8 = 7;
const STAGE_WORKDIR: u8 = 8;

fn stage_name(stage: u8) -> &'static str {
    match stage {
        STAGE_UNSHARE => "unshare",
        STAGE_SETGROUPS => "/proc/self/setgroups",
        STAGE_UID_MAP => "/proc/self/uid_map",
        STAGE_GID_MAP => "/proc/self/gid_map",
        STAGE_FORK => "fork",
        STAGE_MOUNT => "mount",
        STAGE_PIVOT => "pivot_root",
        STAGE_WORKDIR => "workdir",
        _ => "unknown",
    }
}

struct MountOp {
    source: Option<CString>,
    target: CString,
    fstype: Option<CString>,
    flags: libc::c_ulong,
    /// Retry as a recursive bind of this source on EPERM (used for /proc).
    fallback_bind: Option<CString>,
}

struct Plan {
    root: CString,
    setgroups_path: CString,
    uid_map_path: CString,
    gid_map_path: CString,
    uid_map: CString,
    gid_map: CString,
    mounts: Vec<MountOp>,
    workdir: CString,
    env: Vec<(String, String)>,
}

impl Plan {
    fn prepare(spec: &SandboxSpec) -> Result<Self, SandboxError> {
        if spec.argv.is_empty() {
            return Err(SandboxError::Setup {
                stage: "argv",
                source: io::Error::new(io::ErrorKind::InvalidInput, "empty argv"),
            });
        }
        let root = check_root(&spec.image_root)?;
        let mut mounts = Vec::new();

        // Bind root onto itself so pivot_root sees a mount point.
        mounts.push(MountOp {
            source: Some(cstr(&root)?),
            target: cstr(&root)?,
            fstype: None,
            flags: libc::MS_BIND | libc::MS_REC,
            fallback_bind: None,
        });

        let proc_dir = container_path(&root, "/proc");
        std::fs::create_dir_all(&proc_dir)?;
        mounts.push(MountOp {
            source: Some(cstr("proc")?),
            target: cstr(&proc_dir)?,
            fstype: Some(cstr("proc")?),
            flags: libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC,
            fallback_bind: Some(cstr("/proc")?),
        });

        std::fs::create_dir_all(container_path(&root, "/dev"))?;
        for dev in DEVICES {
            if !Path::new(dev).exists() {
                continue;
            }
            let target = prepare_target(&root, dev, false)?;
            mounts.push(bind_op(Path::new(dev), &target, false)?);
        }

        let mut binds = spec.binds.clone();
        if let Some(p) = &spec.preload {
            binds.push(Bind {
                host: p.shim.clone(),
                container: SHIM_CONTAINER_PATH.into(),
                read_only: true,
            });
            binds.push(Bind {
                host: p.db_socket.clone(),
                container: DB_CONTAINER_PATH.into(),
                read_only: false,
            });
        }
        for b in &binds {
            let is_dir = b.host.is_dir();
            let target = prepare_target(&root, &b.container, is_dir)?;
            mounts.push(bind_op(&b.host, &target, false)?);
            if b.read_only {
                let mut op = bind_op(&b.host, &target, true)?;
                op.source = None;
                mounts.push(op);
            }
        }

        let mut env = spec.env.clone();
        if !env.iter().any(|(k, _)| k == "PATH") {
            env.push(("PATH".into(), DEFAULT_PATH.into()));
        }
        if spec.preload.is_some() {
            env.retain(|(k, _)| k != PRELOAD_ENV && k != DB_ENDPOINT_ENV);
            env.push((PRELOAD_ENV.into(), SHIM_CONTAINER_PATH.into()));
            env.push((DB_ENDPOINT_ENV.into(), DB_CONTAINER_PATH.into()));
        }

        let workdir = if spec.workdir.is_empty() { "/" } else { &spec.workdir };
        Ok(Plan {
            root: cstr(&root)?,
            setgroups_path: cstr("/proc/self/setgroups")?,
            uid_map_path: cstr("/proc/self/uid_map")?,
            gid_map_path: cstr("/proc/self/gid_map")?,
            uid_map: cstr(format!("{} {} 1\n", spec.map_uid.0, spec.map_uid.1))?,
            gid_map: cstr(format!("{} {} 1\n", spec.map_gid.0, spec.map_gid.1))?,
            mounts,
            workdir: cstr(workdir)?,
            env,
        })
    }

    fn spawn_error(&self, stage_rd: OwnedFd, err: io::Error, argv0: String) -> SandboxError {
        let mut buf = [0u8; 5];
        let mut f = std::fs::File::from(stage_rd);
        let n = f.read(&mut buf).unwrap_or(0);
        if n < 5 {
            // Setup went through; exec itself failed.
            return SandboxError::ExecFailed { argv0, source: err };
        }
        let errno = i32::from_ne_bytes([buf[1], buf[2], buf[3], buf[4]]);
        let source = io::Error::from_raw_os_error(errno);
        match buf[0] {
            STAGE_UNSHARE => SandboxError::UserNsUnavailable {
                reason: format!("unshare(2) refused: {source}"),
            },
            s @ (STAGE_SETGROUPS | STAGE_UID_MAP | STAGE_GID_MAP) => SandboxError::MapWriteFailed {
                file: stage_name(s),
                source,
            },
            s => SandboxError::Setup {
                stage: stage_name(s),
                source,
            },
        }
    }

    /// Runs in the forked child. Async-signal-safe calls only.
    fn enter(&self, stage_fd: libc::c_int) -> io::Result<()> {
        // SAFETY: raw syscalls on pointers into `self`, which outlives the hook.
        unsafe {
            let fail = |stage: u8| -> io::Error {
                let e = io::Error::last_os_error();
                let errno = e.raw_os_error().unwrap_or(0).to_ne_bytes();
                let msg = [stage, errno[0], errno[1], errno[2], errno[3]];
                libc::write(stage_fd, msg.as_ptr().cast(), msg.len());
                e
            };

            if libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNS | libc::CLONE_NEWPID) != 0 {
                return Err(fail(STAGE_UNSHARE));
            }
            if !write_file(&self.setgroups_path, b"deny") {
                return Err(fail(STAGE_SETGROUPS));
            }
            if !write_file(&self.uid_map_path, self.uid_map.as_bytes()) {
                return Err(fail(STAGE_UID_MAP));
            }
            if !write_file(&self.gid_map_path, self.gid_map.as_bytes()) {
                return Err(fail(STAGE_GID_MAP));
            }

            match libc::fork() {
                -1 => return Err(fail(STAGE_FORK)),
                0 => {}
                pid => relay_exit(pid),
            }

            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
            if libc::mount(
                std::ptr::null(),
                c"/".as_ptr(),
                std::ptr::null(),
                libc::MS_REC | libc::MS_PRIVATE,
                std::ptr::null(),
            ) != 0
            {
                return Err(fail(STAGE_MOUNT));
            }
            for m in &self.mounts {
                let src = m.source.as_ref().map_or(std::ptr::null(), |s| s.as_ptr());
                let fstype = m.fstype.as_ref().map_or(std::ptr::null(), |s| s.as_ptr());
                let mut rc = libc::mount(src, m.target.as_ptr(), fstype, m.flags, std::ptr::null());
                if rc != 0 {
                    if let Some(fb) = &m.fallback_bind {
                        rc = libc::mount(
                            fb.as_ptr(),
                            m.target.as_ptr(),
                            std::ptr::null(),
                            libc::MS_BIND | libc::MS_REC,
                            std::ptr::null(),
                        );
                    }
                }
                if rc != 0 {
                    return Err(fail(STAGE_MOUNT));
                }
            }

            if libc::chdir(self.root.as_ptr()) != 0 {
                return Err(fail(STAGE_PIVOT));
            }
            // Stack the old root under the new one, then detach it.
            if libc::syscall(libc::SYS_pivot_root, c".".as_ptr(), c".".as_ptr()) != 0 {
                return Err(fail(STAGE_PIVOT));
            }
            if libc::umount2(c".".as_ptr(), libc::MNT_DETACH) != 0 {
                return Err(fail(STAGE_PIVOT));
            }
            if libc::chdir(self.workdir.as_ptr()) != 0 {
                return Err(fail(STAGE_WORKDIR));
            }
        }
        Ok(())
    }
}

/// Intermediate process: wait for the PID-1 child and mirror its fate.
unsafe fn relay_exit(pid: libc::pid_t) -> ! {
    let mut status = 0;
    loop {
        let rc = libc::waitpid(pid, &mut status, 0);
        if rc == pid {
            break;
        }
        if rc == -1 && *libc::__errno_location() != libc::EINTR {
            libc::_exit(255);
        }
    }
    if libc::WIFEXITED(status) {
        libc::_exit(libc::WEXITSTATUS(status));
    }
    if libc::WIFSIGNALED(status) {
        let sig = libc::WTERMSIG(status);
        libc::signal(sig, libc::SIG_DFL);
        libc::kill(libc::getpid(), sig);
        libc::_exit(128 + sig);
    }
    libc::_exit(255)
}

unsafe fn write_file(path: &CString, data: &[u8]) -> bool {
    let fd = libc::open(path.as_ptr(), libc::O_WRONLY | libc::O_CLOEXEC);
    if fd < 0 {
        return false;
    }
    let n = libc::write(fd, data.as_ptr().cast(), data.len());
    let ok = n == data.len() as isize;
    if !ok {
        // keep errno from write
        let e = *libc::__errno_location();
        libc::close(fd);
        *libc::__errno_location() = e;
        return false;
    }
    libc::close(fd);
    true
}

fn check_root(root: &Path) -> Result<PathBuf, SandboxError> {
    let canon = root.canonicalize().map_err(|e| SandboxError::RootNotUsable {
        path: root.to_path_buf(),
        why: e.to_string(),
    })?;
    if !canon.is_dir() {
        return Err(SandboxError::RootNotUsable {
            path: root.to_path_buf(),
            why: "not a directory".into(),
        });
    }
    if !canon.join("bin").exists() && !canon.join("usr/bin").exists() {
        return Err(SandboxError::RootNotUsable {
            path: root.to_path_buf(),
            why: "no /bin or /usr/bin".into(),
        });
    }
    Ok(canon)
}

/// Create a mount point inside the image and verify it stays inside after
/// symlink resolution.
fn prepare_target(root: &Path, inner: &str, dir: bool) -> Result<PathBuf, SandboxError> {
    let target = container_path(root, inner);
    let mut existing = target.as_path();
    while std::fs::symlink_metadata(existing).is_err() {
        existing = existing.parent().unwrap_or(root);
    }
    if !existing.canonicalize()?.starts_with(root) {
        return Err(SandboxError::BindEscape(inner.to_string()));
    }
    if let Some(parent) = target.parent() {
        std::fs::create_dir_all(parent)?;
    }
    if dir {
        std::fs::create_dir_all(&target)?;
    } else if std::fs::symlink_metadata(&target).is_err() {
        std::fs::File::create(&target)?;
    }
    let canon = target.canonicalize()?;
    if !canon.starts_with(root) {
        return Err(SandboxError::BindEscape(inner.to_string()));
    }
    Ok(canon)
}

fn bind_op(host: &Path, target: &Path, read_only: bool) -> Result<MountOp, SandboxError> {
    let mut flags = libc::MS_BIND | libc::MS_REC;
    if read_only {
        // Remounting inside a user namespace must keep the locked flags of
        // the source mount.
        flags = libc::MS_BIND | libc::MS_REMOUNT | libc::MS_RDONLY;
        if let Ok(st) = nix::sys::statvfs::statvfs(host) {
            use nix::sys::statvfs::FsFlags;
            let f = st.flags();
            if f.contains(FsFlags::ST_NOSUID) {
                flags |= libc::MS_NOSUID;
            }
            if f.contains(FsFlags::ST_NODEV) {
                flags |= libc::MS_NODEV;
            }
            if f.contains(FsFlags::ST_NOEXEC) {
                flags |= libc::MS_NOEXEC;
            }
        }
    }
    Ok(MountOp {
        source: Some(cstr(host)?),
        target: cstr(target)?,
        fstype: None,
        flags,
        fallback_bind: None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserNsSupport {
    Available,
    Unavailable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostReport {
    pub user_ns: UserNsSupport,
    pub euid: Id,
    pub egid: Id,
    /// Relevant sysctl values found on the host.
    pub sysctls: Vec<(String, String)>,
}

impl HostReport {
    pub fn available(&self) -> bool {
        self.user_ns == UserNsSupport::Available
    }
}

const SYSCTLS: [&str; 3] = [
    "/proc/sys/user/max_user_namespaces",
    "/proc/sys/kernel/unprivileged_userns_clone",
    "/proc/sys/kernel/apparmor_restrict_unprivileged_userns",
];

/// Check whether unprivileged user namespaces can be created, by creating a
/// throwaway one in a forked child.
pub fn probe_host() -> HostReport {
    let sysctls = SYSCTLS
        .iter()
        .filter_map(|p| {
            std::fs::read_to_string(p).ok().map(|v| {
                let name = p.trim_start_matches("/proc/sys/").replace('/', ".");
                (name, v.trim().to_string())
            })
        })
        .collect();
    HostReport {
        user_ns: probe_userns(),
        euid: nix::unistd::geteuid().as_raw(),
        egid: nix::unistd::getegid().as_raw(),
        sysctls,
    }
}

#[cfg(target_os = "linux")]
fn probe_userns() -> UserNsSupport {
    // SAFETY: the child only calls unshare and _exit.
    unsafe {
        match libc::fork() {
            -1 => UserNsSupport::Unavailable {
                reason: format!("fork failed: {}", io::Error::last_os_error()),
            },
            0 => {
                let rc = libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNS);
                let code = if rc == 0 {
                    0
                } else {
                    (*libc::__errno_location()).clamp(1, 254)
                };
                libc::_exit(code)
            }
            pid => {
                let mut status = 0;
                while libc::waitpid(pid, &mut status, 0) == -1
                    && *libc::__errno_location() == libc::EINTR
                {}
                if libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0 {
                    UserNsSupport::Available
                } else {
                    let errno = libc::WEXITSTATUS(status);
                    UserNsSupport::Unavailable {
                        reason: format!(
                            "creation refused: {}",
                            io::Error::from_raw_os_error(errno)
                        ),
                    }
                }
            }
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn probe_userns() -> UserNsSupport {
    UserNsSupport::Unavailable {
        reason: "unsupported platform".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_path_strips_dotdot() {
        let root = Path::new("/img");
        assert_eq!(container_path(root, "/etc/x"), PathBuf::from("/img/etc/x"));
        assert_eq!(container_path(root, "/../../etc"), PathBuf::from("/img/etc"));
        assert_eq!(container_path(root, "/"), PathBuf::from("/img"));
    }

    #[test]
    fn unusable_roots() {
        let d = tempfile::tempdir().unwrap();
        let e = check_root(d.path()).unwrap_err();
        assert!(matches!(e, SandboxError::RootNotUsable { .. }));
        let e = check_root(&d.path().join("missing")).unwrap_err();
        assert!(matches!(e, SandboxError::RootNotUsable { .. }));
        std::fs::create_dir_all(d.path().join("usr/bin")).unwrap();
        assert!(check_root(d.path()).is_ok());
    }

    #[test]
    fn bind_target_cannot_escape() {
        let d = tempfile::tempdir().unwrap();
        let root = d.path().canonicalize().unwrap();
        std::os::unix::fs::symlink("/etc", root.join("evil")).unwrap();
        let e = prepare_target(&root, "/evil/x", false).unwrap_err();
        assert!(matches!(e, SandboxError::BindEscape(_)));
    }

    #[test]
    fn exit_status_codes() {
        assert!(ExitStatus::Code(0).success());
        assert_eq!(ExitStatus::Signal(9).code(), 137);
        assert_eq!(ExitStatus::Code(100).code(), 100);
    }

    #[test]
    fn probe_reports() {
        let r = probe_host();
        assert_eq!(r.euid, nix::unistd::geteuid().as_raw());
        if let UserNsSupport::Unavailable { reason } = &r.user_ns {
            assert!(!reason.is_empty());
        }
    }
}
