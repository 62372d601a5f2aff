//! Self-contained root filesystems for tests.
//!
//! A fixture is a directory tree with a handful of host binaries (and the
//! shared libraries they link) plus shell-script stand-ins for distribution
//! package managers. The stubs perform real `chown(2)`, `setgroups(2)` and
//! `setresuid(2)` calls, so they fail in a single-ID user namespace exactly
//! where real package managers do. An image-installed `fakeroot` stub sets
//! `FAKEROOTKEY`, which the stubs take as "privileged calls are faked".

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};
use std::process::Command;

/// Host programs copied into every fixture.
pub const BASE_PROGRAMS: &[&str] = &[
    "cat", "chown", "chmod", "cp", "env", "grep", "head", "id", "ln", "ls", "mkdir", "mknod",
    "mv", "rm", "sed", "setpriv", "sha256sum", "sort", "stat", "touch", "tr", "wc",
];

const SEARCH_DIRS: &[&str] = &["/usr/bin", "/bin", "/usr/sbin", "/sbin"];

fn find_program(name: &str) -> Option<PathBuf> {
    SEARCH_DIRS
        .iter()
        .map(|d| Path::new(d).join(name))
        .find(|p| p.is_file())
}

/// Shared objects a dynamically linked program needs, from `ldd`.
fn shared_libs(program: &Path) -> io::Result<BTreeSet<PathBuf>> {
    let out = Command::new("ldd").arg(program).output()?;
    let mut libs = BTreeSet::new();
    for line in String::from_utf8_lossy(&out.stdout).lines() {
        let path = match line.split_once("=>") {
            Some((_, rhs)) => rhs.split_whitespace().next(),
            None => line.split_whitespace().next(),
        };
        if let Some(p) = path.filter(|p| p.starts_with('/')) {
            libs.insert(PathBuf::from(p));
        }
    }
    Ok(libs)
}

fn copy_into(root: &Path, host: &Path, inner: &Path) -> io::Result<()> {
    let dest = root.join(inner.strip_prefix("/").unwrap_or(inner));
    if dest.exists() {
        return Ok(());
    }
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::copy(host, &dest)?;
    Ok(())
}

pub fn write_file(root: &Path, inner: &str, contents: &str, mode: u32) -> io::Result<()> {
    let dest = root.join(inner.trim_start_matches('/'));
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&dest, contents)?;
    fs::set_permissions(&dest, fs::Permissions::from_mode(mode))
}

/// Minimal tree: `/bin -> usr/bin`, a POSIX shell and [`BASE_PROGRAMS`].
pub fn base_rootfs(root: &Path) -> io::Result<()> {
    fs::create_dir_all(root.join("usr/bin"))?;
    if fs::symlink_metadata(root.join("bin")).is_err() {
        symlink("usr/bin", root.join("bin"))?;
    }
    if fs::symlink_metadata(root.join("sbin")).is_err() {
        symlink("usr/bin", root.join("sbin"))?;
    }
    for d in ["etc", "tmp", "root", "var/log", "usr/lib", "usr/libexec"] {
        fs::create_dir_all(root.join(d))?;
    }
    fs::set_permissions(root.join("tmp"), fs::Permissions::from_mode(0o1777))?;

    let shell = find_program("dash")
        .or_else(|| find_program("sh"))
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no host shell"))?;
    let mut programs = vec![(shell, "sh".to_string())];
    for name in BASE_PROGRAMS {
        let p = find_program(name)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("host lacks {name}")))?;
        programs.push((p, name.to_string()));
    }
    let mut libs = BTreeSet::new();
    for (host, name) in &programs {
        copy_into(root, host, &Path::new("/usr/bin").join(name))?;
        libs.extend(shared_libs(host)?);
    }
    for lib in libs {
        let real = lib.canonicalize()?;
        copy_into(root, &real, &lib)?;
    }
    // Plain fgrep; the host one may be a wrapper that prints deprecation noise.
    write_file(root, "/usr/bin/fgrep", "#!/bin/sh\nexec grep -F \"$@\"\n", 0o755)?;
    write_file(root, "/usr/bin/true", "#!/bin/sh\nexit 0\n", 0o755)?;
    write_file(root, "/usr/bin/false", "#!/bin/sh\nexit 1\n", 0o755)?;
    write_file(
        root,
        "/etc/passwd",
        "root:x:0:0:root:/root:/bin/sh\nnobody:x:65534:65534:nobody:/nonexistent:/usr/sbin/nologin\n",
        0o644,
    )?;
    write_file(
        root,
        "/etc/group",
        "root:x:0:\nadm:x:4:\nnogroup:x:65534:\n",
        0o644,
    )?;
    Ok(())
}

const FAKEROOT_STUB: &str = r#"#!/bin/sh
# fixture fakeroot: marks the environment as faked and runs the command
FAKEROOTKEY=fixture
export FAKEROOTKEY
exec "$@"
"#;

const YUM_STUB: &str = r#"#!/bin/sh
# fixture yum: installs marker files; unpacking performs a real chown
enablerepo=""
pkgs=""
while [ $# -gt 0 ]; do
  case "$1" in
    --enablerepo=*) enablerepo="${1#--enablerepo=}" ;;
    install|-y) ;;
    *) pkgs="$pkgs $1" ;;
  esac
  shift
done
epel_enabled() {
  [ "$enablerepo" = epel ] || grep -q '^enabled=1' /etc/yum.repos.d/epel.repo 2>/dev/null
}
for p in $pkgs; do
  case "$p" in
    epel-release)
      echo "  Installing : epel-release-7-14.noarch"
      printf '[epel]\nenabled=1\n' > /etc/yum.repos.d/epel.repo
      ;;
    fakeroot)
      if ! epel_enabled; then
        echo "No package fakeroot available."
        echo "Error: Nothing to do"
        exit 1
      fi
      echo "  Installing : fakeroot-1.26-1.el7.x86_64"
      cat > /usr/bin/fakeroot <<'EOF'
@FAKEROOT@EOF
      chmod 755 /usr/bin/fakeroot
      ;;
    openssh)
      echo "  Installing : openssh-7.4p1-21.el7.x86_64"
      mkdir -p /usr/libexec/openssh
      : > /usr/libexec/openssh/ssh-keysign
      if [ -z "$FAKEROOTKEY" ] && ! chown 0:999 /usr/libexec/openssh/ssh-keysign; then
        echo "Error unpacking rpm package openssh-7.4p1-21.el7.x86_64"
        echo "error: unpacking of archive failed on file /usr/libexec/openssh/ssh-keysign: cpio: chown"
        exit 1
      fi
      ;;
    *)
      echo "No package $p available."
      exit 1
      ;;
  esac
done
echo "Complete!"
"#;

const YUM_CONFIG_MANAGER_STUB: &str = r#"#!/bin/sh
# fixture yum-config-manager: only --disable REPO
if [ "$1" = --disable ] && [ -f "/etc/yum.repos.d/$2.repo" ]; then
  sed -i 's/^enabled=1/enabled=0/' "/etc/yum.repos.d/$2.repo"
  echo "Loaded plugins: fastestmirror"
  exit 0
fi
exit 1
"#;

/// CentOS 7 shaped root.
pub fn rhel7_rootfs(root: &Path) -> io::Result<()> {
    base_rootfs(root)?;
    write_file(
        root,
        "/etc/redhat-release",
        "CentOS Linux release 7.9.2009 (Core)\n",
        0o644,
    )?;
    write_file(root, "/etc/yum.conf", "[main]\ngpgcheck=1\n", 0o644)?;
    write_file(
        root,
        "/etc/yum.repos.d/CentOS-Base.repo",
        "[base]\nname=CentOS-7 - Base\n",
        0o644,
    )?;
    write_file(
        root,
        "/usr/bin/yum",
        &YUM_STUB.replace("@FAKEROOT@", FAKEROOT_STUB),
        0o755,
    )?;
    write_file(root, "/usr/bin/yum-config-manager", YUM_CONFIG_MANAGER_STUB, 0o755)?;
    Ok(())
}

const APT_CONFIG_STUB: &str = r#"#!/bin/sh
# fixture apt-config: "dump" prints the configuration fragments
[ "$1" = dump ] || exit 1
cat /etc/apt/apt.conf.d/* 2>/dev/null
exit 0
"#;

const APT_GET_STUB: &str = r#"#!/bin/sh
# fixture apt-get: drops privileges to _apt unless configured otherwise,
# then installs marker files; dpkg unpacking performs a real chown
errno_of() {
  case "$1" in
    *"Operation not permitted"*) echo "1: Operation not permitted" ;;
    *"Invalid argument"*) echo "22: Invalid argument" ;;
    *) echo "$1" ;;
  esac
}
drop_privs() {
  if apt-config dump | grep -Fq 'APT::Sandbox::User "root"'; then return 0; fi
  if ! grep -q '^_apt:' /etc/passwd; then return 0; fi
  failed=0
  if ! msg=$(setpriv --groups 65534 true 2>&1); then
    echo "E: setgroups 65534 failed - setgroups ($(errno_of "$msg"))"; failed=1
  fi
  if ! msg=$(setpriv --regid 65534 --keep-groups true 2>&1); then
    echo "E: setegid 65534 failed - setegid ($(errno_of "$msg"))"; failed=1
  fi
  if ! msg=$(setpriv --reuid 100 true 2>&1); then
    echo "E: seteuid 100 failed - seteuid ($(errno_of "$msg"))"; failed=1
  fi
  [ $failed = 0 ] || exit 100
}
cmd=""
pkgs=""
for a in "$@"; do
  case "$a" in
    -y|-q) ;;
    update|install) cmd="$a" ;;
    *) pkgs="$pkgs $a" ;;
  esac
done
[ -n "$FAKEROOTKEY" ] || drop_privs
case "$cmd" in
  update)
    mkdir -p /var/lib/apt/lists
    echo "buster main" > /var/lib/apt/lists/deb.debian.org_buster_Packages
    echo "Reading package lists..."
    ;;
  install)
    if [ ! -f /var/lib/apt/lists/deb.debian.org_buster_Packages ]; then
      for p in $pkgs; do echo "E: Unable to locate package $p"; done
      exit 100
    fi
    mkdir -p /var/log/apt
    : > /var/log/apt/term.log
    for p in $pkgs; do
      case "$p" in
        pseudo)
          echo "Setting up pseudo (1.9.0+git20180920-1) ..."
          cat > /usr/bin/fakeroot <<'EOF'
@FAKEROOT@EOF
          chmod 755 /usr/bin/fakeroot
          ;;
        openssh-client)
          : > /usr/bin/ssh-agent
          if [ -z "$FAKEROOTKEY" ] && ! chown 0:999 /usr/bin/ssh-agent 2>/dev/null; then
            echo "dpkg: error processing archive openssh-client_1%3a7.9p1-10+deb10u2_amd64.deb (--unpack):"
            echo " error setting ownership of './usr/bin/ssh-agent': Invalid argument"
            echo "E: Sub-process /usr/bin/dpkg returned an error code (1)"
            exit 100
          fi
          echo "Setting up openssh-client (1:7.9p1-10+deb10u2) ..."
          ;;
        *)
          echo "E: Unable to locate package $p"
          exit 100
          ;;
      esac
    done
    if [ -z "$FAKEROOTKEY" ] && ! chown 0:4 /var/log/apt/term.log 2>/dev/null; then
      echo "W: chown to root:adm of file /var/log/apt/term.log failed - OpenLog (22: Invalid argument)"
    fi
    ;;
  *)
    echo "E: Invalid operation $cmd"
    exit 100
    ;;
esac
"#;

/// Debian 10 shaped root.
pub fn debderiv_rootfs(root: &Path) -> io::Result<()> {
    base_rootfs(root)?;
    write_file(
        root,
        "/etc/os-release",
        "PRETTY_NAME=\"Debian GNU/Linux 10 (buster)\"\nNAME=\"Debian GNU/Linux\"\nVERSION_ID=\"10\"\nVERSION_CODENAME=buster\nID=debian\n",
        0o644,
    )?;
    let passwd = fs::read_to_string(root.join("etc/passwd"))?;
    write_file(
        root,
        "/etc/passwd",
        &format!("{passwd}_apt:x:100:65534::/nonexistent:/usr/sbin/nologin\n"),
        0o644,
    )?;
    fs::create_dir_all(root.join("etc/apt/apt.conf.d"))?;
    write_file(root, "/usr/bin/apt-config", APT_CONFIG_STUB, 0o755)?;
    write_file(
        root,
        "/usr/bin/apt-get",
        &APT_GET_STUB.replace("@FAKEROOT@", FAKEROOT_STUB),
        0o755,
    )?;
    Ok(())
}

/// Dockerfiles from the running examples.
pub mod dockerfiles {
    pub const CENTOS7: &str = "FROM centos:7\nRUN echo hello\nRUN yum install -y openssh\n";
    pub const DEBIAN10: &str =
        "FROM debian:buster\nRUN echo hello\nRUN apt-get update\nRUN apt-get install -y openssh-client\n";
    pub const CENTOS7_MANUAL: &str = "FROM centos:7\nRUN yum install -y epel-release\nRUN yum install -y fakeroot\nRUN echo hello\nRUN fakeroot yum install -y openssh\n";
    pub const DEBIAN10_MANUAL: &str = "FROM debian:buster\nRUN echo 'APT::Sandbox::User \"root\";' > /etc/apt/apt.conf.d/no-sandbox\nRUN echo hello\nRUN apt-get update\nRUN apt-get install -y pseudo\nRUN fakeroot apt-get install -y openssh-client\n";
}
