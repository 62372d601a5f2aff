//! Faked ownership database ("consistent lies").
//!
//! Records are keyed by (device, inode) so metadata follows the file across
//! renames and hard links. A session can be journaled to disk (append-only,
//! length-prefixed binary records) and served over a Unix socket to
//! sandboxed processes.
//!
//! Wire protocol, all integers little-endian:
//!
//! ```text
//! request  = len:u32 type:u8 dev:u64 ino:u64 [uid:u32 gid:u32 mode:u32 kind:u8 rdev:u64]
//!            type 1=GET 2=SET 3=UNLINK 4=MKNOD; the bracketed part only for SET/MKNOD;
//!            len counts the bytes after the length field (17 or 38)
//! response = status:u8 [uid:u32 gid:u32 mode:u32 kind:u8 rdev:u64]
//!            status 0=absent 1=present (record follows) 2=ok 255=malformed
//! ```
//!
//! After a malformed frame the server answers 255 and closes the connection.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::os::unix::fs::{FileTypeExt, MetadataExt};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use thiserror::Error;

pub const MSG_GET: u8 = 1;
pub const MSG_SET: u8 = 2;
pub const MSG_UNLINK: u8 = 3;
pub const MSG_MKNOD: u8 = 4;

pub const STATUS_ABSENT: u8 = 0;
pub const STATUS_PRESENT: u8 = 1;
pub const STATUS_OK: u8 = 2;
pub const STATUS_MALFORMED: u8 = 255;

const ID_LEN: usize = 16;
const RECORD_LEN: usize = 21;
/// Upper bound on a frame body; anything larger is malformed.
const MAX_FRAME: u32 = 1 + (ID_LEN + RECORD_LEN) as u32;

const JOURNAL_MAGIC: &[u8; 4] = b"UBDB";
const JOURNAL_VERSION: u8 = 1;
const J_PUT: u8 = 1;
const J_DELETE: u8 = 2;

#[derive(Debug, Error)]
pub enum OwnerDbError {
    #[error("journal write failed: {0}")]
    JournalWriteFailed(#[source] io::Error),
    #[error("corrupt journal {path} at byte {offset}: {reason}")]
    CorruptJournal {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("cannot bind {path}: {source}")]
    BindFailed {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FileIdentity {
    pub dev: u64,
    pub ino: u64,
}

impl FileIdentity {
    pub fn of(md: &fs::Metadata) -> Self {
        FileIdentity {
            dev: md.dev(),
            ino: md.ino(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum FileKind {
    Regular = 0,
    Directory = 1,
    Symlink = 2,
    CharDevice = 3,
    BlockDevice = 4,
    Fifo = 5,
    Socket = 6,
}

impl FileKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        use FileKind::*;
        Some(match v {
            0 => Regular,
            1 => Directory,
            2 => Symlink,
            3 => CharDevice,
            4 => BlockDevice,
            5 => Fifo,
            6 => Socket,
            _ => return None,
        })
    }

    pub fn is_device(self) -> bool {
        matches!(self, FileKind::CharDevice | FileKind::BlockDevice)
    }

    /// `S_IFMT` bits.
    pub fn type_bits(self) -> u32 {
        match self {
            FileKind::Regular => libc::S_IFREG,
            FileKind::Directory => libc::S_IFDIR,
            FileKind::Symlink => libc::S_IFLNK,
            FileKind::CharDevice => libc::S_IFCHR,
            FileKind::BlockDevice => libc::S_IFBLK,
            FileKind::Fifo => libc::S_IFIFO,
            FileKind::Socket => libc::S_IFSOCK,
        }
    }

    pub fn from_mode(mode: u32) -> Option<Self> {
        Some(match mode & libc::S_IFMT {
            libc::S_IFREG => FileKind::Regular,
            libc::S_IFDIR => FileKind::Directory,
            libc::S_IFLNK => FileKind::Symlink,
            libc::S_IFCHR => FileKind::CharDevice,
            libc::S_IFBLK => FileKind::BlockDevice,
            libc::S_IFIFO => FileKind::Fifo,
            libc::S_IFSOCK => FileKind::Socket,
            _ => return None,
        })
    }

    pub fn of(ft: fs::FileType) -> Self {
        if ft.is_dir() {
            FileKind::Directory
        } else if ft.is_symlink() {
            FileKind::Symlink
        } else if ft.is_char_device() {
            FileKind::CharDevice
        } else if ft.is_block_device() {
            FileKind::BlockDevice
        } else if ft.is_fifo() {
            FileKind::Fifo
        } else if ft.is_socket() {
            FileKind::Socket
        } else {
            FileKind::Regular
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OwnershipRecord {
    pub uid: u32,
    pub gid: u32,
    /// Permission, setuid, setgid and sticky bits.
    pub mode: u32,
    pub kind: FileKind,
    rdev: Option<u64>,
}

impl OwnershipRecord {
    /// Record for a non-device file.
    pub fn new(uid: u32, gid: u32, mode: u32, kind: FileKind) -> Self {
        assert!(!kind.is_device(), "device records need rdev");
        OwnershipRecord {
            uid,
            gid,
            mode: mode & 0o7777,
            kind,
            rdev: None,
        }
    }

    pub fn device(uid: u32, gid: u32, mode: u32, kind: FileKind, rdev: u64) -> Self {
        assert!(kind.is_device(), "rdev only for device records");
        OwnershipRecord {
            uid,
            gid,
            mode: mode & 0o7777,
            kind,
            rdev: Some(rdev),
        }
    }

    pub fn rdev(&self) -> Option<u64> {
        self.rdev
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.uid.to_le_bytes());
        out.extend_from_slice(&self.gid.to_le_bytes());
        out.extend_from_slice(&self.mode.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.rdev.unwrap_or(0).to_le_bytes());
    }

    fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() != RECORD_LEN {
            return Err(format!("record length {}", b.len()));
        }
        let uid = u32_at(b, 0);
        let gid = u32_at(b, 4);
        let mode = u32_at(b, 8);
        let kind = FileKind::from_u8(b[12]).ok_or_else(|| format!("bad kind {}", b[12]))?;
        let rdev = u64_at(b, 13);
        if mode & !0o7777 != 0 {
            return Err(format!("mode {mode:o} has type bits"));
        }
        if kind.is_device() {
            Ok(OwnershipRecord::device(uid, gid, mode, kind, rdev))
        } else if rdev != 0 {
            Err("rdev on non-device".into())
        } else {
            Ok(OwnershipRecord::new(uid, gid, mode, kind))
        }
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn encode_id(id: FileIdentity, out: &mut Vec<u8>) {
    out.extend_from_slice(&id.dev.to_le_bytes());
    out.extend_from_slice(&id.ino.to_le_bytes());
}

fn decode_id(b: &[u8]) -> FileIdentity {
    FileIdentity {
        dev: u64_at(b, 0),
        ino: u64_at(b, 8),
    }
}

/// Subset of stat(2) results that the lies touch, plus what they must not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatView {
    pub uid: u32,
    pub gid: u32,
    /// Full `st_mode` including type bits.
    pub mode: u32,
    pub rdev: u64,
    pub size: u64,
    pub nlink: u64,
    pub mtime: i64,
}

impl StatView {
    pub fn of(md: &fs::Metadata) -> Self {
        StatView {
            uid: md.uid(),
            gid: md.gid(),
            mode: md.mode(),
            rdev: md.rdev(),
            size: md.size(),
            nlink: md.nlink(),
            mtime: md.mtime(),
        }
    }
}

/// What a wrapped process sees: unrecorded files appear root-owned.
pub fn rewrite_stat(real: StatView, record: Option<&OwnershipRecord>) -> StatView {
    let mut v = real;
    match record {
        None => {
            v.uid = 0;
            v.gid = 0;
        }
        Some(r) => {
            v.uid = r.uid;
            v.gid = r.gid;
            v.mode = r.kind.type_bits() | r.mode;
            v.rdev = r.rdev.unwrap_or(0);
        }
    }
    v
}

/// In-memory store with an optional append-only journal.
#[derive(Debug, Default)]
pub struct DbSession {
    store: BTreeMap<FileIdentity, OwnershipRecord>,
    journal_path: Option<PathBuf>,
    journal: Option<BufWriter<File>>,
}

impl DbSession {
    pub fn in_memory() -> Self {
        DbSession::default()
    }

    /// Replay the journal at `path` (absent means empty) and keep appending
    /// to it.
    pub fn load(path: &Path) -> Result<Self, OwnerDbError> {
        let store = match File::open(path) {
            Ok(f) => replay(path, BufReader::new(f))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut s = DbSession {
            store,
            journal_path: Some(path.to_path_buf()),
            journal: None,
        };
        s.save()?;
        Ok(s)
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    pub fn lookup(&self, id: FileIdentity) -> Option<&OwnershipRecord> {
        self.store.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = (&FileIdentity, &OwnershipRecord)> {
        self.store.iter()
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Journaled before the store changes.
    pub fn upsert(&mut self, id: FileIdentity, record: OwnershipRecord) -> Result<(), OwnerDbError> {
        let mut entry = vec![J_PUT];
        encode_id(id, &mut entry);
        record.encode(&mut entry);
        self.append(&entry)?;
        self.store.insert(id, record);
        Ok(())
    }

    pub fn delete(&mut self, id: FileIdentity) -> Result<Option<OwnershipRecord>, OwnerDbError> {
        if !self.store.contains_key(&id) {
            return Ok(None);
        }
        let mut entry = vec![J_DELETE];
        encode_id(id, &mut entry);
        self.append(&entry)?;
        Ok(self.store.remove(&id))
    }

    fn append(&mut self, entry: &[u8]) -> Result<(), OwnerDbError> {
        let Some(j) = self.journal.as_mut() else {
            return Ok(());
        };
        let len = entry.len() as u32;
        j.write_all(&len.to_le_bytes())
            .and_then(|_| j.write_all(entry))
            .and_then(|_| j.flush())
            .map_err(OwnerDbError::JournalWriteFailed)
    }

    /// Rewrite the journal compactly (one put per record) and reopen it for
    /// appending. No-op for in-memory sessions.
    pub fn save(&mut self) -> Result<(), OwnerDbError> {
        let Some(path) = self.journal_path.clone() else {
            return Ok(());
        };
        self.journal = None;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(OwnerDbError::JournalWriteFailed)?);
            let mut buf = Vec::with_capacity(64);
            buf.extend_from_slice(JOURNAL_MAGIC);
            buf.push(JOURNAL_VERSION);
            w.write_all(&buf).map_err(OwnerDbError::JournalWriteFailed)?;
            for (id, rec) in &self.store {
                buf.clear();
                buf.push(J_PUT);
                encode_id(*id, &mut buf);
                rec.encode(&mut buf);
                w.write_all(&(buf.len() as u32).to_le_bytes())
                    .and_then(|_| w.write_all(&buf))
                    .map_err(OwnerDbError::JournalWriteFailed)?;
            }
            w.flush().map_err(OwnerDbError::JournalWriteFailed)?;
            w.get_ref().sync_all().map_err(OwnerDbError::JournalWriteFailed)?;
        }
        fs::rename(&tmp, &path).map_err(OwnerDbError::JournalWriteFailed)?;
        let f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(OwnerDbError::JournalWriteFailed)?;
        self.journal = Some(BufWriter::new(f));
        Ok(())
    }
}

impl PartialEq for DbSession {
    fn eq(&self, other: &Self) -> bool {
        self.store == other.store
    }
}

fn replay(
    path: &Path,
    mut r: impl Read,
) -> Result<BTreeMap<FileIdentity, OwnershipRecord>, OwnerDbError> {
    let corrupt = |offset: u64, reason: String| OwnerDbError::CorruptJournal {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() < 5 || &data[..4] != JOURNAL_MAGIC {
        return Err(corrupt(0, "bad header".into()));
    }
    if data[4] != JOURNAL_VERSION {
        return Err(corrupt(4, format!("unsupported version {}", data[4])));
    }
    let mut store = BTreeMap::new();
    let mut pos = 5usize;
    while pos < data.len() {
        let start = pos as u64;
        if data.len() - pos < 4 {
            return Err(corrupt(start, "truncated length".into()));
        }
        let len = u32_at(&data, pos) as usize;
        pos += 4;
        if data.len() - pos < len {
            return Err(corrupt(start, format!("truncated entry of {len} bytes")));
        }
        let entry = &data[pos..pos + len];
        pos += len;
        match (entry.first(), len) {
            (Some(&J_PUT), n) if n == 1 + ID_LEN + RECORD_LEN => {
                let rec = OwnershipRecord::decode(&entry[1 + ID_LEN..]).map_err(|e| corrupt(start, e))?;
                store.insert(decode_id(&entry[1..]), rec);
            }
            (Some(&J_DELETE), n) if n == 1 + ID_LEN => {
                store.remove(&decode_id(&entry[1..]));
            }
            _ => return Err(corrupt(start, format!("bad entry of {len} bytes"))),
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Request {
    Get(FileIdentity),
    Set(FileIdentity, OwnershipRecord),
    Unlink(FileIdentity),
    Mknod(FileIdentity, OwnershipRecord),
}

impl Request {
    pub fn encode(&self) -> Vec<u8> {
        let (ty, id, rec) = match *self {
            Request::Get(id) => (MSG_GET, id, None),
            Request::Set(id, r) => (MSG_SET, id, Some(r)),
            Request::Unlink(id) => (MSG_UNLINK, id, None),
            Request::Mknod(id, r) => (MSG_MKNOD, id, Some(r)),
        };
        let mut body = vec![ty];
        encode_id(id, &mut body);
        if let Some(r) = rec {
            r.encode(&mut body);
        }
        let mut out = (body.len() as u32).to_le_bytes().to_vec();
        out.extend(body);
        out
    }

    /// Decode a frame body (after the length field).
    pub fn decode(body: &[u8]) -> Result<Self, String> {
        let (&ty, rest) = body.split_first().ok_or("empty frame")?;
        let need = match ty {
            MSG_GET | MSG_UNLINK => ID_LEN,
            MSG_SET | MSG_MKNOD => ID_LEN + RECORD_LEN,
            _ => return Err(format!("unknown type {ty}")),
        };
        if rest.len() != need {
            return Err(format!("type {ty} with {} field bytes", rest.len()));
        }
        let id = decode_id(rest);
        Ok(match ty {
            MSG_GET => Request::Get(id),
            MSG_UNLINK => Request::Unlink(id),
            _ => {
                let rec = OwnershipRecord::decode(&rest[ID_LEN..])?;
                if ty == MSG_SET {
                    Request::Set(id, rec)
                } else if matches!(rec.kind, FileKind::Directory | FileKind::Symlink) {
                    return Err("mknod of directory or symlink".into());
                } else {
                    Request::Mknod(id, rec)
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Absent,
    Present(OwnershipRecord),
    Ok,
    Malformed,
}

impl Response {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Absent => vec![STATUS_ABSENT],
            Response::Ok => vec![STATUS_OK],
            Response::Malformed => vec![STATUS_MALFORMED],
            Response::Present(r) => {
                let mut v = vec![STATUS_PRESENT];
                r.encode(&mut v);
                v
            }
        }
    }
}

/// Apply one request to the session.
pub fn handle(session: &mut DbSession, req: Request) -> Result<Response, OwnerDbError> {
    Ok(match req {
        Request::Get(id) => session.lookup(id).copied().map_or(Response::Absent, Response::Present),
        Request::Set(id, r) | Request::Mknod(id, r) => {
            session.upsert(id, r)?;
            Response::Ok
        }
        Request::Unlink(id) => {
            session.delete(id)?;
            Response::Ok
        }
    })
}

type Conns = Arc<Mutex<Vec<(UnixStream, JoinHandle<()>)>>>;

/// Running socket service. Dropping it without [`Server::shutdown`] leaves
/// the threads running until the process exits.
pub struct Server {
    path: PathBuf,
    session: Arc<Mutex<DbSession>>,
    stop: Arc<AtomicBool>,
    errors: Arc<AtomicU64>,
    conns: Conns,
    acceptor: Option<JoinHandle<()>>,
}

/// Listen on `path` and serve `session` until shutdown.
pub fn serve(session: DbSession, path: &Path) -> Result<Server, OwnerDbError> {
    let listener = UnixListener::bind(path).map_err(|source| OwnerDbError::BindFailed {
        path: path.to_path_buf(),
        source,
    })?;
    let session = Arc::new(Mutex::new(session));
    let stop = Arc::new(AtomicBool::new(false));
    let errors = Arc::new(AtomicU64::new(0));
    let conns: Conns = Arc::default();
    let acceptor = {
        let (session, stop, errors, conns) =
            (session.clone(), stop.clone(), errors.clone(), conns.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let Ok(keep) = stream.try_clone() else { continue };
                let (session, errors) = (session.clone(), errors.clone());
                let h = std::thread::spawn(move || connection(stream, &session, &errors));
                let mut c = conns.lock().unwrap();
                c.retain(|(_, h)| !h.is_finished());
                c.push((keep, h));
            }
        })
    };
    Ok(Server {
        path: path.to_path_buf(),
        session,
        stop,
        errors,
        conns,
        acceptor: Some(acceptor),
    })
}

fn connection(mut stream: UnixStream, session: &Mutex<DbSession>, errors: &AtomicU64) {
    loop {
        let mut len = [0u8; 4];
        match stream.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return,
            Err(_) => {
                errors.fetch_add(1, Ordering::SeqCst);
                return;
            }
        }
        let len = u32::from_le_bytes(len);
        let req = if len == 0 || len > MAX_FRAME {
            Err(format!("frame length {len}"))
        } else {
            let mut body = vec![0u8; len as usize];
            if stream.read_exact(&mut body).is_err() {
                errors.fetch_add(1, Ordering::SeqCst);
                return;
            }
            Request::decode(&body)
        };
        let resp = match req {
            Ok(req) => handle(&mut session.lock().unwrap(), req),
            Err(e) => {
                log::warn!("ownerdb: malformed frame: {e}");
                errors.fetch_add(1, Ordering::SeqCst);
                let _ = stream.write_all(&Response::Malformed.encode());
                return;
            }
        };
        match resp {
            Ok(r) => {
                if stream.write_all(&r.encode()).is_err() {
                    return;
                }
            }
            Err(e) => {
                log::error!("ownerdb: {e}");
                errors.fetch_add(1, Ordering::SeqCst);
                let _ = stream.write_all(&Response::Malformed.encode());
                return;
            }
        }
    }
}

impl Server {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Malformed frames and failed requests seen so far.
    pub fn error_count(&self) -> u64 {
        self.errors.load(Ordering::SeqCst)
    }

    /// Run `f` against the live store.
    pub fn with_session<R>(&self, f: impl FnOnce(&mut DbSession) -> R) -> R {
        f(&mut self.session.lock().unwrap())
    }

    /// Stop accepting, close open connections and hand the session back.
    pub fn shutdown(mut self) -> DbSession {
        self.stop.store(true, Ordering::SeqCst);
        let _ = UnixStream::connect(&self.path);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for (s, h) in self.conns.lock().unwrap().drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
            let _ = h.join();
        }
        let _ = fs::remove_file(&self.path);
        let session = std::mem::take(&mut *self.session.lock().unwrap());
        session
    }
}

/// Blocking client for the wire protocol.
pub struct Client {
    stream: UnixStream,
}

impl Client {
    pub fn connect(path: &Path) -> io::Result<Self> {
        Ok(Client {
            stream: UnixStream::connect(path)?,
        })
    }

    pub fn request(&mut self, req: Request) -> Result<Response, OwnerDbError> {
        self.stream.write_all(&req.encode())?;
        self.read_response()
    }

    /// Send raw bytes (for testing malformed input).
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<Response, OwnerDbError> {
        self.stream.write_all(bytes)?;
        self.read_response()
    }

    fn read_response(&mut self) -> Result<Response, OwnerDbError> {
        let mut status = [0u8; 1];
        self.stream.read_exact(&mut status)?;
        Ok(match status[0] {
            STATUS_ABSENT => Response::Absent,
            STATUS_OK => Response::Ok,
            STATUS_MALFORMED => Response::Malformed,
            STATUS_PRESENT => {
                let mut b = [0u8; RECORD_LEN];
                self.stream.read_exact(&mut b)?;
                Response::Present(OwnershipRecord::decode(&b).map_err(OwnerDbError::Protocol)?)
            }
            s => return Err(OwnerDbError::Protocol(format!("unknown status {s}"))),
        })
    }

    pub fn get(&mut self, id: FileIdentity) -> Result<Option<OwnershipRecord>, OwnerDbError> {
        match self.request(Request::Get(id))? {
            Response::Absent => Ok(None),
            Response::Present(r) => Ok(Some(r)),
            other => Err(OwnerDbError::Protocol(format!("unexpected {other:?}"))),
        }
    }

    pub fn set(&mut self, id: FileIdentity, r: OwnershipRecord) -> Result<(), OwnerDbError> {
        self.expect_ok(Request::Set(id, r))
    }

    pub fn mknod(&mut self, id: FileIdentity, r: OwnershipRecord) -> Result<(), OwnerDbError> {
        self.expect_ok(Request::Mknod(id, r))
    }

    pub fn unlink(&mut self, id: FileIdentity) -> Result<(), OwnerDbError> {
        self.expect_ok(Request::Unlink(id))
    }

    fn expect_ok(&mut self, req: Request) -> Result<(), OwnerDbError> {
        match self.request(req)? {
            Response::Ok => Ok(()),
            other => Err(OwnerDbError::Protocol(format!("unexpected {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(ino: u64) -> FileIdentity {
        FileIdentity { dev: 1, ino }
    }

    #[test]
    fn read_your_write_and_last_writer() {
        let mut s = DbSession::in_memory();
        let a = OwnershipRecord::new(65534, 0, 0o640, FileKind::Regular);
        s.upsert(id(42), a).unwrap();
        assert_eq!(s.lookup(id(42)), Some(&a));
        let b = OwnershipRecord::new(7, 0, 0o640, FileKind::Regular);
        s.upsert(id(42), b).unwrap();
        assert_eq!(s.lookup(id(42)), Some(&b));
        let dev = OwnershipRecord::device(0, 0, 0o640, FileKind::CharDevice, libc::makedev(1, 1));
        s.upsert(id(43), dev).unwrap();
        let got = s.lookup(id(43)).unwrap().rdev().unwrap();
        assert_eq!((libc::major(got), libc::minor(got)), (1, 1));
    }

    #[test]
    #[should_panic]
    fn rdev_only_on_devices() {
        OwnershipRecord::device(0, 0, 0, FileKind::Regular, 5);
    }

    #[test]
    fn stat_lies() {
        let real = StatView {
            uid: 1234,
            gid: 1234,
            mode: libc::S_IFREG | 0o640,
            rdev: 0,
            size: 99,
            nlink: 2,
            mtime: 17,
        };
        let v = rewrite_stat(real, None);
        assert_eq!((v.uid, v.gid, v.mode), (0, 0, real.mode));
        let nobody = OwnershipRecord::new(65534, 0, 0o640, FileKind::Regular);
        let v = rewrite_stat(real, Some(&nobody));
        assert_eq!((v.uid, v.gid), (65534, 0));
        let dev = OwnershipRecord::device(0, 0, 0o640, FileKind::CharDevice, libc::makedev(1, 1));
        let v = rewrite_stat(real, Some(&dev));
        assert_eq!(v.mode, libc::S_IFCHR | 0o640);
        assert_eq!((libc::major(v.rdev), libc::minor(v.rdev)), (1, 1));
        assert_eq!((v.size, v.nlink, v.mtime), (99, 2, 17));
    }

    #[test]
    fn frames_are_bit_exact() {
        let get = Request::Get(FileIdentity { dev: 0x0102, ino: 0x0a0b }).encode();
        assert_eq!(
            get,
            [
                17, 0, 0, 0, 1, 0x02, 0x01, 0, 0, 0, 0, 0, 0, 0x0b, 0x0a, 0, 0, 0, 0, 0, 0
            ]
        );
        let rec = OwnershipRecord::device(65534, 0, 0o640, FileKind::CharDevice, 0x0101);
        let set = Request::Mknod(id(2), rec).encode();
        assert_eq!(set.len(), 4 + 38);
        assert_eq!(&set[..5], &[38, 0, 0, 0, MSG_MKNOD]);
        assert_eq!(&set[21..25], &65534u32.to_le_bytes());
        assert_eq!(&set[29..33], &0o640u32.to_le_bytes());
        assert_eq!(set[33], 3);
        assert_eq!(&set[34..42], &0x0101u64.to_le_bytes());
        assert_eq!(Request::decode(&set[4..]).unwrap(), Request::Mknod(id(2), rec));
        assert_eq!(Response::Absent.encode(), [0]);
        assert_eq!(Response::Ok.encode(), [2]);
        assert_eq!(Response::Malformed.encode(), [255]);
        assert_eq!(Response::Present(rec).encode().len(), 22);
    }

    #[test]
    fn decode_rejects() {
        assert!(Request::decode(&[]).is_err());
        assert!(Request::decode(&[9; 17]).is_err());
        assert!(Request::decode(&[MSG_GET; 10]).is_err());
        let mut bad = Request::Set(id(1), OwnershipRecord::new(0, 0, 0, FileKind::Regular)).encode();
        bad[4 + 1 + 16 + 12] = 42;
        assert!(Request::decode(&bad[4..]).is_err());
        let dir = Request::Mknod(id(1), OwnershipRecord::new(0, 0, 0, FileKind::Directory)).encode();
        assert!(Request::decode(&dir[4..]).is_err());
    }
}
