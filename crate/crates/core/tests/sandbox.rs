use std::os::unix::fs::MetadataExt;

use ubuild_core::sandbox::{self, ExitStatus, SandboxError, SandboxSpec};
use ubuild_core::testing::fixture;

fn sh(root: &std::path::Path, script: &str) -> SandboxSpec {
    SandboxSpec::new(root, vec!["/bin/sh".into(), "-c".into(), script.into()])
}

fn fixture_root() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fixture::base_rootfs(d.path()).unwrap();
    d
}

#[test]
fn echo_hello() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "echo hello")).unwrap();
    assert_eq!(r.status, ExitStatus::Code(0));
    assert_eq!(r.stdout_str(), "hello\n");
}

#[test]
fn root_inside() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "id -u; id -g; cat /proc/self/uid_map; cat /proc/self/setgroups")).unwrap();
    let euid = nix::unistd::geteuid().as_raw();
    let lines: Vec<_> = r.stdout_str().lines().map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ")).collect();
    assert_eq!(lines, ["0", "0", &format!("0 {euid} 1"), "deny"], "{}", r.stderr_str());
}

#[test]
fn chown_fails_without_shim() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "touch /tmp/f && chown nobody /tmp/f")).unwrap();
    assert!(!r.status.success());
    assert!(r.stderr_str().contains("chown"), "{}", r.stderr_str());
}

#[test]
fn setgroups_denied() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "setpriv --groups 65534 true")).unwrap();
    assert!(!r.status.success());
    assert!(r.stderr_str().contains("not permitted"), "{}", r.stderr_str());
}

#[test]
fn created_files_belong_to_invoker() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "echo x > /tmp/made; mkdir /tmp/dir")).unwrap();
    assert!(r.status.success(), "{}", r.stderr_str());
    for p in ["tmp/made", "tmp/dir"] {
        let md = std::fs::metadata(d.path().join(p)).unwrap();
        assert_eq!(md.uid(), nix::unistd::geteuid().as_raw());
        assert_eq!(md.gid(), nix::unistd::getegid().as_raw());
    }
}

#[test]
fn exit_codes_and_env() {
    let d = fixture_root();
    let mut spec = sh(d.path(), "echo \"$FOO:$PATH\"; pwd; exit 7");
    spec.env.push(("FOO".into(), "bar".into()));
    spec.workdir = "/tmp".into();
    let r = sandbox::run(&spec).unwrap();
    assert_eq!(r.status, ExitStatus::Code(7));
    assert_eq!(r.stdout_str(), format!("bar:{}\n/tmp\n", sandbox::DEFAULT_PATH));
}

#[test]
fn fresh_proc() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "echo $$; ls /proc | grep -c '^[0-9]'")).unwrap();
    assert!(r.status.success(), "{}", r.stderr_str());
    let out = r.stdout_str();
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("1"));
}

#[test]
fn devices_available() {
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "echo gone > /dev/null && head -c 4 /dev/zero | wc -c")).unwrap();
    assert!(r.status.success(), "{}", r.stderr_str());
    assert_eq!(r.stdout_str().trim(), "4");
}

#[test]
fn bind_mount_read_only() {
    let d = fixture_root();
    let host = tempfile::tempdir().unwrap();
    std::fs::write(host.path().join("data"), "payload").unwrap();
    let mut spec = sh(d.path(), "cat /mnt/in/data; echo x > /mnt/in/new");
    spec.binds.push(sandbox::Bind { host: host.path().into(), container: "/mnt/in".into(), read_only: true });
    let r = sandbox::run(&spec).unwrap();
    assert_eq!(r.stdout_str(), "payload");
    assert!(!r.status.success());
    assert!(!host.path().join("new").exists());
}

#[test]
fn merged_output_keeps_order() {
    let d = fixture_root();
    let mut spec = sh(d.path(), "echo a; echo b >&2; echo c");
    spec.merge_stderr = true;
    let mut live = Vec::new();
    let r = sandbox::run_streaming(&spec, &mut |_, b| live.extend_from_slice(b)).unwrap();
    assert_eq!(r.stdout_str(), "a\nb\nc\n");
    assert_eq!(live, r.stdout);
    assert!(r.stderr.is_empty());
}

#[test]
fn missing_program() {
    let d = fixture_root();
    let e = sandbox::run(&SandboxSpec::new(d.path(), vec!["/bin/nonexistent".into()])).unwrap_err();
    assert!(matches!(e, SandboxError::ExecFailed { .. }), "{e}");
}

#[test]
fn bad_root() {
    let d = tempfile::tempdir().unwrap();
    let e = sandbox::run(&sh(d.path(), "true")).unwrap_err();
    assert!(matches!(e, SandboxError::RootNotUsable { .. }));
}

#[test]
fn child_killed_by_signal() {
    // The command is PID 1 of its namespace and cannot be killed from
    // inside; a grandchild can.
    let d = fixture_root();
    let r = sandbox::run(&sh(d.path(), "sh -c 'kill -9 $$'")).unwrap();
    assert_eq!(r.status, ExitStatus::Code(137));
}

#[test]
fn preload_exposes_shim_and_db_socket() {
    use ubuild_core::ownerdb::{self, DbSession};
    use ubuild_core::sandbox::{Preload, DB_CONTAINER_PATH, DB_ENDPOINT_ENV, PRELOAD_ENV, SHIM_CONTAINER_PATH};

    let d = fixture_root();
    let aux = tempfile::tempdir().unwrap();
    let shim = aux.path().join("libfakeshim.so");
    std::fs::write(&shim, b"").unwrap();
    let server = ownerdb::serve(DbSession::in_memory(), &aux.path().join("db.sock")).unwrap();
    let mut spec = sh(
        d.path(),
        &format!("echo ${PRELOAD_ENV}; echo ${DB_ENDPOINT_ENV}; test -S {DB_CONTAINER_PATH} && echo socket; test -f {SHIM_CONTAINER_PATH} && echo shim"),
    );
    spec.preload = Some(Preload {
        shim,
        db_socket: server.path().to_path_buf(),
    });
    let r = sandbox::run(&spec).unwrap();
    assert_eq!(
        r.stdout_str(),
        "/.ubuild/libfakeshim.so\n/.ubuild/db.sock\nsocket\nshim\n",
        "{}",
        r.stderr_str()
    );
    assert_eq!(PRELOAD_ENV, "LD_PRELOAD");
    assert_eq!(DB_ENDPOINT_ENV, "UBUILD_FAKEDB_SOCKET");
    server.shutdown();
}
