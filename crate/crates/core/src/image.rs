//! Local image store, layer unpacking and single-layer export.
//!
//! Store layout under the store root:
//!
//! ```text
//! imgs/<encoded ref>/        unpacked image root
//! imgs/<encoded ref>.json    reference and manifest digest of that root
//! dl/sha256/<hex>            blob cache (manifests, configs, layers)
//! dl/tmp/                    partial downloads, never visible as blobs
//! locks/                     flock(2) files
//! ```

use std::collections::HashMap;
use std::ffi::OsStr;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use flate2::read::GzDecoder;
use flate2::{Compression, GzBuilder};
use nix::fcntl::{Flock, FlockArg};
use serde::{Deserialize, Serialize};
use tar::{EntryType, Header};
use thiserror::Error;

use crate::fsutil::resolve_in_root;
use crate::oci::{Descriptor, Digest, HashingWriter, OCI_LAYER_GZIP};
use crate::ownerdb::{DbSession, FileIdentity, FileKind, OwnershipRecord};

pub const DEFAULT_HOST: &str = "registry-1.docker.io";
pub const STORE_ENV: &str = "UBUILD_STORAGE";
/// Timestamp of every exported archive entry.
pub const EXPORT_MTIME: u64 = 0;

const WHITEOUT_PREFIX: &str = ".wh.";
const OPAQUE_MARKER: &str = ".wh..wh..opq";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image reference {0:?}: {1}")]
    BadRef(String, &'static str),
    #[error("corrupt archive {layer}: {detail}")]
    ArchiveCorrupt { layer: PathBuf, detail: String },
    #[error("archive entry {entry:?} escapes the image root")]
    PathEscape { entry: String },
    #[error("cannot walk {path}: {source}")]
    WalkFailed {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot copy {path}: {source}")]
    CopyFailed {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("snapshot destination {0} overlaps its source")]
    Aliasing(PathBuf),
    #[error("image metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `[host/]repo[:tag]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageRef {
    pub host: String,
    pub repo: String,
    pub tag: String,
}

impl FromStr for ImageRef {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, ImageError> {
        let bad = |why| ImageError::BadRef(s.to_string(), why);
        if s.is_empty() {
            return Err(bad("empty"));
        }
        if s.contains('@') {
            return Err(bad("digest references are not supported"));
        }
        let (host, rest) = match s.split_once('/') {
            Some((h, r)) if h.contains('.') || h.contains(':') || h == "localhost" => (h, r),
            _ => (DEFAULT_HOST, s),
        };
        let (repo, tag) = match rest.rsplit_once(':') {
            Some((r, t)) if !t.contains('/') => (r, t),
            _ => (rest, "latest"),
        };
        if host.is_empty() || host.chars().any(|c| !(c.is_ascii_alphanumeric() || ".-:[]".contains(c))) {
            return Err(bad("bad host"));
        }
        if repo.is_empty()
            || !repo.split('/').all(|part| {
                !part.is_empty()
                    && part.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "._-".contains(c))
                    && part.starts_with(|c: char| c.is_ascii_alphanumeric())
            })
        {
            return Err(bad("bad repository name"));
        }
        if tag.is_empty()
            || tag.len() > 128
            || tag.starts_with(['.', '-'])
            || !tag.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
        {
            return Err(bad("bad tag"));
        }
        let repo = if host == DEFAULT_HOST && !repo.contains('/') {
            format!("library/{repo}")
        } else {
            repo.to_string()
        };
        Ok(ImageRef {
            host: host.to_string(),
            repo,
            tag: tag.to_string(),
        })
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}:{}", self.host, self.repo, self.tag)
    }
}

impl ImageRef {
    /// Name for directories: `/` becomes `%`, `:` becomes `+`.
    pub fn encoded(&self) -> String {
        self.to_string().replace('/', "%").replace(':', "+")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub reference: String,
    pub manifest_digest: Digest,
}

#[derive(Debug, Clone)]
pub struct StoreLayout {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl StoreLayout {
    /// Open (creating if needed) the store at `root`.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let s = StoreLayout { root: root.into() };
        for d in ["imgs", "dl/sha256", "dl/tmp", "locks"] {
            fs::create_dir_all(s.root.join(d))?;
        }
        Ok(s)
    }

    /// `$UBUILD_STORAGE`, else the user cache directory.
    pub fn default_root() -> PathBuf {
        if let Some(p) = std::env::var_os(STORE_ENV).filter(|p| !p.is_empty()) {
            return p.into();
        }
        let cache = std::env::var_os("XDG_CACHE_HOME")
            .filter(|p| !p.is_empty())
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HOME").map(|h| Path::new(&h).join(".cache")))
            .unwrap_or_else(|| PathBuf::from("/tmp"));
        cache.join("ubuild")
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn image_root(&self, r: &ImageRef) -> PathBuf {
        self.root.join("imgs").join(r.encoded())
    }

    fn meta_path(&self, r: &ImageRef) -> PathBuf {
        self.root.join("imgs").join(format!("{}.json", r.encoded()))
    }

    pub fn blob_path(&self, d: &Digest) -> PathBuf {
        self.root.join("dl/sha256").join(d.hex())
    }

    pub fn has_blob(&self, d: &Digest) -> bool {
        self.blob_path(d).is_file()
    }

    pub fn read_blob(&self, d: &Digest) -> io::Result<Vec<u8>> {
        fs::read(self.blob_path(d))
    }

    /// Fresh path for a partial blob.
    pub fn tmp_path(&self) -> PathBuf {
        let n = TMP_COUNTER.fetch_add(1, Ordering::SeqCst);
        self.root
            .join("dl/tmp")
            .join(format!("{}-{n}", std::process::id()))
    }

    /// Move a verified partial blob into place.
    pub fn commit_blob(&self, tmp: &Path, d: &Digest) -> io::Result<()> {
        fs::rename(tmp, self.blob_path(d))
    }

    pub fn put_blob(&self, bytes: &[u8]) -> io::Result<Digest> {
        let d = Digest::of(bytes);
        if !self.has_blob(&d) {
            let tmp = self.tmp_path();
            fs::write(&tmp, bytes)?;
            self.commit_blob(&tmp, &d)?;
        }
        Ok(d)
    }

    /// Exclusive lock held until the guard drops.
    pub fn lock(&self, name: &str) -> io::Result<Flock<File>> {
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.root.join("locks").join(format!("{name}.lock")))?;
        Flock::lock(f, FlockArg::LockExclusive).map_err(|(_, e)| io::Error::from(e))
    }

    pub fn read_meta(&self, r: &ImageRef) -> Result<Option<ImageMeta>, ImageError> {
        match fs::read(self.meta_path(r)) {
            Ok(b) => Ok(Some(serde_json::from_slice(&b)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn write_meta(&self, r: &ImageRef, m: &ImageMeta) -> Result<(), ImageError> {
        let tmp = self.tmp_path();
        fs::write(&tmp, serde_json::to_vec(m)?)?;
        fs::rename(tmp, self.meta_path(r))?;
        Ok(())
    }

    /// Complete images (root plus metadata), sorted by reference.
    pub fn list(&self) -> Result<Vec<ImageMeta>, ImageError> {
        let mut out = Vec::new();
        for e in fs::read_dir(self.root.join("imgs"))? {
            let p = e?.path();
            if p.extension() == Some(OsStr::new("json")) && p.with_extension("").is_dir() {
                out.push(serde_json::from_slice::<ImageMeta>(&fs::read(&p)?)?);
            }
        }
        out.sort_by(|a, b| a.reference.cmp(&b.reference));
        Ok(out)
    }

    /// Remove an image's root and metadata.
    pub fn remove_image(&self, r: &ImageRef) -> io::Result<()> {
        let _ = fs::remove_file(self.meta_path(r));
        let root = self.image_root(r);
        if root.exists() {
            make_tree_writable(&root)?;
            fs::remove_dir_all(root)?;
        }
        Ok(())
    }
}

/// Ensure every directory under `root` is user-writable so it can be removed.
pub fn make_tree_writable(root: &Path) -> io::Result<()> {
    for e in walkdir::WalkDir::new(root).follow_links(false) {
        let e = e.map_err(io::Error::other)?;
        if e.file_type().is_dir() {
            let mode = e.metadata().map_err(io::Error::other)?.mode();
            if mode & 0o700 != 0o700 {
                fs::set_permissions(e.path(), fs::Permissions::from_mode((mode | 0o700) & 0o7777))?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct UnpackReport {
    pub warnings: Vec<String>,
}

fn open_layer(path: &Path) -> io::Result<Box<dyn Read>> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic)?;
    drop(f);
    let f = BufReader::new(File::open(path)?);
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(f)))
    } else {
        Ok(Box::new(f))
    }
}

/// Relative path of an archive entry; `..` anywhere is an escape.
fn entry_rel(raw: &Path) -> Result<PathBuf, ImageError> {
    let mut out = PathBuf::new();
    for c in raw.components() {
        match c {
            Component::Normal(n) => out.push(n),
            Component::CurDir | Component::RootDir => {}
            Component::ParentDir | Component::Prefix(_) => {
                return Err(ImageError::PathEscape {
                    entry: raw.display().to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Directory in `dest` that holds `rel`'s final component.
fn parent_in(dest: &Path, rel: &Path) -> Result<PathBuf, ImageError> {
    let parent = resolve_in_root(dest, rel.parent().unwrap_or(Path::new("")))?;
    if !parent.starts_with(dest) {
        return Err(ImageError::PathEscape {
            entry: rel.display().to_string(),
        });
    }
    Ok(parent)
}

fn remove_any(p: &Path) -> io::Result<()> {
    match fs::symlink_metadata(p) {
        Ok(md) if md.is_dir() => {
            make_tree_writable(p)?;
            fs::remove_dir_all(p)
        }
        Ok(_) => fs::remove_file(p),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Apply `layers` in order onto `dest`. Files end up owned by the caller,
/// setuid/setgid bits are dropped, owner read/write (and search, for
/// directories) is always granted, and device nodes are skipped.
pub fn unpack(layers: &[PathBuf], dest: &Path) -> Result<UnpackReport, ImageError> {
    fs::create_dir_all(dest)?;
    let dest = dest.canonicalize()?;
    let mut report = UnpackReport::default();
    for layer in layers {
        let corrupt = |e: io::Error| ImageError::ArchiveCorrupt {
            layer: layer.clone(),
            detail: e.to_string(),
        };
        // Whiteouts only hide lower layers, so they go first.
        let mut ar = tar::Archive::new(open_layer(layer)?);
        for entry in ar.entries().map_err(corrupt)? {
            let entry = entry.map_err(corrupt)?;
            let rel = entry_rel(&entry.path().map_err(corrupt)?)?;
            let Some(name) = rel.file_name().and_then(OsStr::to_str) else {
                continue;
            };
            if name == OPAQUE_MARKER {
                let dir = resolve_in_root(&dest, rel.parent().unwrap_or(Path::new("")))?;
                if dir.is_dir() && dir.starts_with(&dest) {
                    for child in fs::read_dir(&dir)? {
                        remove_any(&child?.path())?;
                    }
                }
            } else if let Some(hidden) = name.strip_prefix(WHITEOUT_PREFIX) {
                if hidden.is_empty() || hidden == "." || hidden == ".." {
                    return Err(ImageError::PathEscape {
                        entry: rel.display().to_string(),
                    });
                }
                remove_any(&parent_in(&dest, &rel)?.join(hidden))?;
            }
        }

        let mut ar = tar::Archive::new(open_layer(layer)?);
        for entry in ar.entries().map_err(corrupt)? {
            let mut entry = entry.map_err(corrupt)?;
            let raw = entry.path().map_err(corrupt)?.into_owned();
            let rel = entry_rel(&raw)?;
            let Some(name) = rel.file_name() else {
                continue;
            };
            if name.to_str().is_some_and(|n| n.starts_with(WHITEOUT_PREFIX)) {
                continue;
            }
            let parent = parent_in(&dest, &rel)?;
            fs::create_dir_all(&parent)?;
            let target = parent.join(name);
            let mode = entry.header().mode().map_err(corrupt)? & 0o1777;
            match entry.header().entry_type() {
                EntryType::Directory => {
                    if !fs::symlink_metadata(&target).is_ok_and(|m| m.is_dir()) {
                        remove_any(&target)?;
                        fs::create_dir(&target)?;
                    }
                    fs::set_permissions(&target, fs::Permissions::from_mode(mode | 0o700))?;
                }
                EntryType::Regular | EntryType::Continuous => {
                    remove_any(&target)?;
                    let mut f = OpenOptions::new().write(true).create_new(true).open(&target)?;
                    io::copy(&mut entry, &mut f).map_err(corrupt)?;
                    f.set_permissions(fs::Permissions::from_mode(mode | 0o600))?;
                }
                EntryType::Symlink => {
                    let link = entry.link_name().map_err(corrupt)?.ok_or_else(|| {
                        corrupt(io::Error::other(format!("symlink {} without target", raw.display())))
                    })?;
                    remove_any(&target)?;
                    std::os::unix::fs::symlink(link, &target)?;
                }
                EntryType::Link => {
                    let link = entry.link_name().map_err(corrupt)?.ok_or_else(|| {
                        corrupt(io::Error::other(format!("hard link {} without target", raw.display())))
                    })?;
                    let link_rel = entry_rel(&link)?;
                    let src = parent_in(&dest, &link_rel)?.join(link_rel.file_name().unwrap_or_default());
                    remove_any(&target)?;
                    fs::hard_link(&src, &target).map_err(|e| {
                        corrupt(io::Error::other(format!("hard link {}: {e}", raw.display())))
                    })?;
                }
                EntryType::Fifo => {
                    remove_any(&target)?;
                    nix::unistd::mkfifo(&target, nix::sys::stat::Mode::from_bits_truncate(mode | 0o600))
                        .map_err(io::Error::from)?;
                }
                EntryType::Char | EntryType::Block => {
                    report
                        .warnings
                        .push(format!("skipping device file: {}", rel.display()));
                }
                EntryType::XGlobalHeader | EntryType::XHeader => {}
                other => {
                    report
                        .warnings
                        .push(format!("skipping unsupported entry {other:?}: {}", rel.display()));
                }
            }
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

/// True for paths that never go into an exported layer: the builder's
/// reserved directory and the contents of the sandbox's mount points.
fn excluded(rel: &Path) -> bool {
    let mut comps = rel.components();
    match comps.next() {
        Some(Component::Normal(first)) => {
            first == ".ubuild"
                || ((first == "dev" || first == "proc" || first == "sys") && comps.next().is_some())
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExportStats {
    pub entries: usize,
    pub from_db: usize,
}

/// Write `build_root` as a single uncompressed tar layer. Entries are sorted
/// by path with a fixed timestamp. Files with a `db` record carry its
/// ownership, mode and type; all others are root:root with setuid/setgid
/// cleared.
pub fn export<W: Write>(
    build_root: &Path,
    db: Option<&DbSession>,
    out: W,
) -> Result<(W, ExportStats), ImageError> {
    let walk_err = |path: &Path, source: io::Error| ImageError::WalkFailed {
        path: path.to_path_buf(),
        source,
    };
    let mut items: Vec<(String, PathBuf, fs::Metadata)> = Vec::new();
    let mut walker = walkdir::WalkDir::new(build_root).follow_links(false).min_depth(1).into_iter();
    while let Some(e) = walker.next() {
        let e = e.map_err(|e| {
            let p = e.path().unwrap_or(build_root).to_path_buf();
            walk_err(&p, e.into())
        })?;
        let rel = e.path().strip_prefix(build_root).expect("walk stays under root");
        if excluded(rel) {
            if e.file_type().is_dir() {
                walker.skip_current_dir();
            }
            continue;
        }
        let md = e.metadata().map_err(|err| walk_err(e.path(), err.into()))?;
        let name = rel
            .to_str()
            .ok_or_else(|| walk_err(e.path(), io::Error::other("path is not UTF-8")))?
            .to_string();
        items.push((name, e.path().to_path_buf(), md));
    }
    items.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));

    let mut stats = ExportStats::default();
    let mut seen: HashMap<FileIdentity, String> = HashMap::new();
    let mut b = tar::Builder::new(out);
    for (name, path, md) in items {
        let id = FileIdentity::of(&md);
        let record: Option<&OwnershipRecord> = db.and_then(|db| db.lookup(id));
        let disk_kind = FileKind::of(md.file_type());
        let kind = match record {
            Some(r) if disk_kind == FileKind::Regular && r.kind != FileKind::Directory && r.kind != FileKind::Symlink => r.kind,
            _ => disk_kind,
        };
        if kind == FileKind::Socket {
            continue;
        }
        let mut h = Header::new_gnu();
        h.set_mtime(EXPORT_MTIME);
        match record {
            Some(r) => {
                h.set_uid(r.uid.into());
                h.set_gid(r.gid.into());
                h.set_mode(r.mode);
                stats.from_db += 1;
            }
            None => {
                h.set_uid(0);
                h.set_gid(0);
                h.set_mode(md.mode() & 0o1777);
            }
        }
        h.set_size(0);
        let io_err = |e: io::Error| walk_err(&path, e);
        match kind {
            FileKind::Directory => {
                h.set_entry_type(EntryType::Directory);
                b.append_data(&mut h, format!("{name}/"), io::empty()).map_err(io_err)?;
            }
            FileKind::Symlink => {
                h.set_entry_type(EntryType::Symlink);
                let target = fs::read_link(&path).map_err(io_err)?;
                b.append_link(&mut h, &name, target).map_err(io_err)?;
            }
            FileKind::Regular => {
                if md.nlink() > 1 {
                    if let Some(first) = seen.get(&id) {
                        h.set_entry_type(EntryType::Link);
                        b.append_link(&mut h, &name, first).map_err(io_err)?;
                        stats.entries += 1;
                        continue;
                    }
                    seen.insert(id, name.clone());
                }
                h.set_entry_type(EntryType::Regular);
                h.set_size(md.len());
                let f = File::open(&path).map_err(io_err)?;
                b.append_data(&mut h, &name, f.take(md.len())).map_err(io_err)?;
            }
            FileKind::CharDevice | FileKind::BlockDevice => {
                let rdev = record.and_then(|r| r.rdev()).unwrap_or(md.rdev());
                h.set_entry_type(if kind == FileKind::CharDevice {
                    EntryType::Char
                } else {
                    EntryType::Block
                });
                h.set_device_major(libc::major(rdev)).map_err(io_err)?;
                h.set_device_minor(libc::minor(rdev)).map_err(io_err)?;
                b.append_data(&mut h, &name, io::empty()).map_err(io_err)?;
            }
            FileKind::Fifo => {
                h.set_entry_type(EntryType::Fifo);
                b.append_data(&mut h, &name, io::empty()).map_err(io_err)?;
            }
            FileKind::Socket => unreachable!(),
        }
        stats.entries += 1;
    }
    let out = b.into_inner().map_err(|e| walk_err(build_root, e))?;
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedLayer {
    /// Compressed blob as stored in the cache.
    pub descriptor: Descriptor,
    /// Digest of the uncompressed tar.
    pub diff_id: Digest,
    pub stats: ExportStats,
}

/// Export into the blob cache as a gzip-compressed layer.
pub fn export_layer(
    build_root: &Path,
    db: Option<&DbSession>,
    store: &StoreLayout,
) -> Result<ExportedLayer, ImageError> {
    let tmp = store.tmp_path();
    let file = File::create(&tmp)?;
    let gz = GzBuilder::new()
        .mtime(0)
        .write(HashingWriter::new(io::BufWriter::new(file)), Compression::default());
    let result = export(build_root, db, HashingWriter::new(gz)).and_then(|(w, stats)| {
        let (gz, diff_id, _) = w.finish();
        let (inner, digest, size) = gz.finish()?.finish();
        inner.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok((stats, diff_id, digest, size))
    });
    match result {
        Ok((stats, diff_id, digest, size)) => {
            store.commit_blob(&tmp, &digest)?;
            Ok(ExportedLayer {
                descriptor: Descriptor::new(OCI_LAYER_GZIP, digest, size),
                diff_id,
                stats,
            })
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Recursive copy of `src` to `dest` keeping modes and symlinks. Device
/// nodes and sockets are skipped.
pub fn snapshot(src: &Path, dest: &Path) -> Result<(), ImageError> {
    let copy_err = |path: &Path, source: io::Error| ImageError::CopyFailed {
        path: path.to_path_buf(),
        source,
    };
    let src_c = src.canonicalize().map_err(|e| copy_err(src, e))?;
    let dest_abs = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p
            .canonicalize()
            .map_err(|e| copy_err(dest, e))?
            .join(dest.file_name().unwrap_or_default()),
        _ => std::env::current_dir()?.join(dest),
    };
    if dest_abs.starts_with(&src_c) || src_c.starts_with(&dest_abs) {
        return Err(ImageError::Aliasing(dest.to_path_buf()));
    }
    if fs::symlink_metadata(&dest_abs).is_ok() {
        return Err(copy_err(dest, io::Error::from(io::ErrorKind::AlreadyExists)));
    }
    copy_tree(&src_c, &dest_abs).map_err(|(p, e)| copy_err(&p, e))
}

fn copy_tree(src: &Path, dest: &Path) -> Result<(), (PathBuf, io::Error)> {
    let at = |p: &Path| {
        let p = p.to_path_buf();
        move |e| (p, e)
    };
    let md = fs::symlink_metadata(src).map_err(at(src))?;
    let ft = md.file_type();
    if ft.is_dir() {
        fs::create_dir(dest).map_err(at(dest))?;
        fs::set_permissions(dest, fs::Permissions::from_mode(0o700)).map_err(at(dest))?;
        let mut names: Vec<_> = fs::read_dir(src)
            .map_err(at(src))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<Result<_, _>>()
            .map_err(at(src))?;
        names.sort();
        for n in names {
            copy_tree(&src.join(&n), &dest.join(&n))?;
        }
        fs::set_permissions(dest, fs::Permissions::from_mode(md.mode() & 0o7777)).map_err(at(dest))?;
    } else if ft.is_symlink() {
        let t = fs::read_link(src).map_err(at(src))?;
        std::os::unix::fs::symlink(t, dest).map_err(at(dest))?;
    } else if ft.is_file() {
        fs::copy(src, dest).map_err(at(src))?;
    } else if FileKind::of(ft) == FileKind::Fifo {
        nix::unistd::mkfifo(dest, nix::sys::stat::Mode::from_bits_truncate(md.mode() & 0o777))
            .map_err(|e| (dest.to_path_buf(), io::Error::from(e)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refs() {
        let r: ImageRef = "centos:7".parse().unwrap();
        assert_eq!(r.host, DEFAULT_HOST);
        assert_eq!(r.repo, "library/centos");
        assert_eq!(r.tag, "7");
        let r: ImageRef = "foo".parse().unwrap();
        assert_eq!(r.tag, "latest");
        let r: ImageRef = "localhost:5000/a/b:1.0".parse().unwrap();
        assert_eq!((r.host.as_str(), r.repo.as_str(), r.tag.as_str()), ("localhost:5000", "a/b", "1.0"));
        assert_eq!(r.encoded(), "localhost+5000%a%b+1.0");
        let r: ImageRef = "example.com/x".parse().unwrap();
        assert_eq!(r.to_string(), "example.com/x:latest");
        let r: ImageRef = "user/img".parse().unwrap();
        assert_eq!(r.repo, "user/img");
        for bad in ["", "Foo", "a:", "a::b", "a//b", "x@sha256:00", "a:b/c:d e", "-a", "a:-t"] {
            assert!(bad.parse::<ImageRef>().is_err(), "{bad}");
        }
    }

    #[test]
    fn exclusions() {
        assert!(excluded(Path::new(".ubuild")));
        assert!(excluded(Path::new(".ubuild/db.sock")));
        assert!(excluded(Path::new("dev/null")));
        assert!(!excluded(Path::new("dev")));
        assert!(!excluded(Path::new("devices/x")));
        assert!(!excluded(Path::new("etc/dev/x")));
    }
}
