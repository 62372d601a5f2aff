use std::collections::BTreeMap;

use proptest::prelude::*;
use ubuild_core::ownerdb::{
    self, Client, DbSession, FileIdentity, FileKind, OwnerDbError, OwnershipRecord, Request, Response,
};

fn id(ino: u64) -> FileIdentity {
    FileIdentity { dev: 8, ino }
}

fn rec(uid: u32) -> OwnershipRecord {
    OwnershipRecord::new(uid, 0, 0o644, FileKind::Regular)
}

#[test]
fn save_load_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("db");
    let mut s = DbSession::load(&path).unwrap();
    assert!(s.is_empty());
    s.upsert(id(1), rec(1)).unwrap();
    s.upsert(id(2), rec(2)).unwrap();
    s.upsert(id(3), OwnershipRecord::device(0, 0, 0o640, FileKind::CharDevice, libc::makedev(1, 1)))
        .unwrap();
    drop(s);
    let back = DbSession::load(&path).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.lookup(id(2)), Some(&rec(2)));
}

#[test]
fn journal_replays_deletes_and_overwrites() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("db");
    let mut s = DbSession::load(&path).unwrap();
    s.upsert(id(1), rec(1)).unwrap();
    s.upsert(id(1), rec(5)).unwrap();
    s.upsert(id(2), rec(2)).unwrap();
    s.delete(id(2)).unwrap();
    let back = DbSession::load(&path).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.lookup(id(1)), Some(&rec(5)));
}

#[test]
fn truncated_journal_is_corrupt() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("db");
    let mut s = DbSession::load(&path).unwrap();
    for i in 0..3 {
        s.upsert(id(i), rec(i as u32)).unwrap();
    }
    s.save().unwrap();
    drop(s);
    let bytes = std::fs::read(&path).unwrap();
    // header 5 bytes, then three entries of 4 + 38 bytes
    assert_eq!(bytes.len(), 5 + 3 * 42);
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    match DbSession::load(&path) {
        Err(OwnerDbError::CorruptJournal { offset, .. }) => assert_eq!(offset, 5 + 2 * 42),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(DbSession::load(&path), Err(OwnerDbError::CorruptJournal { offset: 0, .. })));
}

#[test]
fn service_basics() {
    let d = tempfile::tempdir().unwrap();
    let sock = d.path().join("db.sock");
    let server = ownerdb::serve(DbSession::in_memory(), &sock).unwrap();
    let mut c = Client::connect(&sock).unwrap();
    assert_eq!(c.get(id(9)).unwrap(), None);
    c.set(id(9), rec(65534)).unwrap();
    assert_eq!(c.get(id(9)).unwrap(), Some(rec(65534)));
    let dev = OwnershipRecord::device(0, 0, 0o640, FileKind::CharDevice, libc::makedev(1, 1));
    c.mknod(id(10), dev).unwrap();
    c.unlink(id(9)).unwrap();
    assert_eq!(c.get(id(9)).unwrap(), None);

    let mut bad = Client::connect(&sock).unwrap();
    assert_eq!(bad.send_raw(&[3, 0, 0, 0, 77, 0, 0]).unwrap(), Response::Malformed);
    assert_eq!(server.error_count(), 1);
    // service continues for other connections
    assert_eq!(c.request(Request::Get(id(10))).unwrap(), Response::Present(dev));
    let mut fresh = Client::connect(&sock).unwrap();
    assert_eq!(fresh.get(id(10)).unwrap(), Some(dev));

    assert!(matches!(
        ownerdb::serve(DbSession::in_memory(), &sock),
        Err(OwnerDbError::BindFailed { .. })
    ));
    let session = server.shutdown();
    assert_eq!(session.len(), 1);
    assert!(!sock.exists());
}

#[derive(Debug, Clone)]
enum Op {
    Get(u64),
    Set(u64, u32),
    Unlink(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u64..8).prop_map(Op::Get),
        (0u64..8, 0u32..4).prop_map(|(i, u)| Op::Set(i, u)),
        (0u64..8).prop_map(Op::Unlink),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn service_matches_reference_map(ops in prop::collection::vec(op(), 1..60)) {
        let d = tempfile::tempdir().unwrap();
        let sock = d.path().join("s");
        let journal = d.path().join("j");
        let server = ownerdb::serve(DbSession::load(&journal).unwrap(), &sock).unwrap();
        let mut c = Client::connect(&sock).unwrap();
        let mut model: BTreeMap<u64, OwnershipRecord> = BTreeMap::new();
        for op in &ops {
            match *op {
                Op::Get(i) => prop_assert_eq!(c.get(id(i)).unwrap(), model.get(&i).copied()),
                Op::Set(i, u) => {
                    c.set(id(i), rec(u)).unwrap();
                    model.insert(i, rec(u));
                }
                Op::Unlink(i) => {
                    c.unlink(id(i)).unwrap();
                    model.remove(&i);
                }
            }
        }
        drop(c);
        let live = server.shutdown();
        let replayed = DbSession::load(&journal).unwrap();
        prop_assert_eq!(&live, &replayed);
        let got: BTreeMap<u64, OwnershipRecord> =
            replayed.records().map(|(k, v)| (k.ino, *v)).collect();
        prop_assert_eq!(got, model);
    }
}
