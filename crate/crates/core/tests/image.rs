use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use tar::{EntryType, Header};
use ubuild_core::image::{self, ImageError, StoreLayout};
use ubuild_core::ownerdb::{DbSession, FileIdentity, FileKind, OwnershipRecord};

enum E<'a> {
    File(&'a str, &'a [u8], u32),
    Dir(&'a str, u32),
    Sym(&'a str, &'a str),
    Hard(&'a str, &'a str),
    Dev(&'a str),
    /// Raw name bytes, bypassing the builder's path checks.
    Raw(&'a str, &'a [u8]),
}

fn layer(dir: &Path, name: &str, entries: &[E]) -> PathBuf {
    let mut b = tar::Builder::new(Vec::new());
    for e in entries {
        let mut h = Header::new_gnu();
        h.set_uid(0);
        h.set_gid(0);
        h.set_mtime(0);
        match *e {
            E::File(p, data, mode) => {
                h.set_mode(mode);
                h.set_size(data.len() as u64);
                h.set_entry_type(EntryType::Regular);
                b.append_data(&mut h, p, data).unwrap();
            }
            E::Dir(p, mode) => {
                h.set_mode(mode);
                h.set_size(0);
                h.set_entry_type(EntryType::Directory);
                b.append_data(&mut h, p, &[][..]).unwrap();
            }
            E::Sym(p, t) => {
                h.set_mode(0o777);
                h.set_size(0);
                h.set_entry_type(EntryType::Symlink);
                b.append_link(&mut h, p, t).unwrap();
            }
            E::Hard(p, t) => {
                h.set_mode(0o644);
                h.set_size(0);
                h.set_entry_type(EntryType::Link);
                b.append_link(&mut h, p, t).unwrap();
            }
            E::Dev(p) => {
                h.set_mode(0o666);
                h.set_size(0);
                h.set_entry_type(EntryType::Char);
                h.set_device_major(1).unwrap();
                h.set_device_minor(3).unwrap();
                b.append_data(&mut h, p, &[][..]).unwrap();
            }
            E::Raw(p, data) => {
                h.set_mode(0o644);
                h.set_size(data.len() as u64);
                h.set_entry_type(EntryType::Regular);
                h.as_old_mut().name[..p.len()].copy_from_slice(p.as_bytes());
                h.set_cksum();
                b.append(&h, data).unwrap();
            }
        }
    }
    let path = dir.join(name);
    fs::write(&path, b.into_inner().unwrap()).unwrap();
    path
}

/// path → (kind letter, contents or link target)
fn tree(root: &Path) -> BTreeMap<String, (char, Vec<u8>, u32)> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root).min_depth(1) {
        let e = e.unwrap();
        let rel = e.path().strip_prefix(root).unwrap().to_str().unwrap().to_string();
        let md = e.path().symlink_metadata().unwrap();
        let v = if md.is_dir() {
            ('d', vec![], md.mode() & 0o7777)
        } else if md.file_type().is_symlink() {
            ('l', fs::read_link(e.path()).unwrap().to_str().unwrap().as_bytes().to_vec(), 0)
        } else {
            ('f', fs::read(e.path()).unwrap(), md.mode() & 0o7777)
        };
        out.insert(rel, v);
    }
    out
}

#[test]
fn unpack_owns_files_and_drops_setid() {
    let d = tempfile::tempdir().unwrap();
    let l = layer(d.path(), "l1", &[
        E::Dir("bin", 0o755),
        E::File("bin/sh", b"#!", 0o4755),
        E::File("bin/g", b"g", 0o2711),
        E::Dir("tmp", 0o1777),
        E::Dev("dev/null"),
        E::File("etc/shadow", b"s", 0o000),
        E::Hard("bin/sh2", "bin/sh"),
    ]);
    let dest = d.path().join("root");
    let rep = image::unpack(&[l], &dest).unwrap();
    assert_eq!(rep.warnings, ["skipping device file: dev/null"]);
    let me = nix::unistd::geteuid().as_raw();
    let sh = fs::metadata(dest.join("bin/sh")).unwrap();
    assert_eq!(sh.uid(), me);
    assert_eq!(sh.mode() & 0o7777, 0o755);
    assert_eq!(fs::metadata(dest.join("bin/g")).unwrap().mode() & 0o7777, 0o711 | 0o600);
    assert_eq!(fs::metadata(dest.join("tmp")).unwrap().mode() & 0o7777, 0o1777);
    assert_eq!(fs::metadata(dest.join("etc/shadow")).unwrap().mode() & 0o777, 0o600);
    assert!(!dest.join("dev/null").exists());
    assert_eq!(fs::metadata(dest.join("bin/sh2")).unwrap().ino(), sh.ino());
}

/// Reference whiteout semantics over a flat path → contents map.
fn reference_apply(layers: &[Vec<(&str, Option<&str>)>]) -> BTreeMap<String, String> {
    let mut fs: BTreeMap<String, String> = BTreeMap::new();
    for l in layers {
        for (path, _) in l {
            let (dir, name) = path.rsplit_once('/').unwrap_or(("", path));
            let prefix = |p: &str| if dir.is_empty() { p.to_string() } else { format!("{dir}/{p}") };
            if name == ".wh..wh..opq" {
                let under = prefix("");
                fs.retain(|k, _| !(k.starts_with(&under) && k.len() > under.len()));
            } else if let Some(h) = name.strip_prefix(".wh.") {
                let gone = prefix(h);
                fs.retain(|k, _| *k != gone && !k.starts_with(&format!("{gone}/")));
            }
        }
        for (path, content) in l {
            if let Some(c) = content {
                fs.insert(path.to_string(), c.to_string());
            }
        }
    }
    fs
}

#[test]
fn whiteouts_match_reference() {
    let lower = vec![("etc/foo", Some("1")), ("etc/bar", Some("2")), ("usr/baz", Some("3"))];
    let upper = vec![
        ("etc/.wh.foo", None),
        ("usr/.wh..wh..opq", None),
        ("usr/new", Some("4")),
    ];
    let want = reference_apply(&[lower.clone(), upper.clone()]);
    assert_eq!(
        want.keys().collect::<Vec<_>>(),
        ["etc/bar", "usr/new"],
        "hand-checked reference"
    );

    let d = tempfile::tempdir().unwrap();
    let mk = |name: &str, es: &[(&str, Option<&str>)]| {
        let entries: Vec<E> = es
            .iter()
            .map(|(p, c)| E::File(p, c.map_or(&b""[..], str::as_bytes), 0o644))
            .collect();
        layer(d.path(), name, &entries)
    };
    let l1 = mk("l1", &lower);
    let l2 = mk("l2", &upper);
    let dest = d.path().join("root");
    image::unpack(&[l1, l2], &dest).unwrap();
    let got: BTreeMap<String, String> = tree(&dest)
        .into_iter()
        .filter(|(_, v)| v.0 == 'f')
        .map(|(k, v)| (k, String::from_utf8(v.1).unwrap()))
        .collect();
    assert_eq!(got, want);
}

#[test]
fn whiteout_removes_directory_tree() {
    let d = tempfile::tempdir().unwrap();
    let l1 = layer(d.path(), "l1", &[E::Dir("a", 0o555), E::File("a/x", b"x", 0o444)]);
    let l2 = layer(d.path(), "l2", &[E::File(".wh.a", b"", 0o644)]);
    let dest = d.path().join("root");
    image::unpack(&[l1, l2], &dest).unwrap();
    assert!(!dest.join("a").exists());
}

#[test]
fn traversal_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let l = layer(d.path(), "trav.tar", &[E::Raw("../../evil", b"x")]);
    let dest = d.path().join("a/b/root");
    let err = image::unpack(&[l], &dest).unwrap_err();
    assert!(matches!(err, ImageError::PathEscape { .. }), "{err:?}");
    assert!(!d.path().join("a/evil").exists());
    assert!(!d.path().join("evil").exists());
}

#[test]
fn symlinks_cannot_redirect_writes_outside() {
    let d = tempfile::tempdir().unwrap();
    let outside = d.path().join("outside");
    fs::create_dir(&outside).unwrap();
    let l = layer(d.path(), "l", &[
        E::Sym("up", outside.to_str().unwrap()),
        E::Sym("rel", "../../outside"),
        E::File("up/a", b"a", 0o644),
        E::File("rel/b", b"b", 0o644),
    ]);
    let dest = d.path().join("root");
    image::unpack(&[l], &dest).unwrap();
    assert_eq!(fs::read_dir(&outside).unwrap().count(), 0);
    // the writes land at the link targets as seen from inside the image
    assert!(dest.join(outside.strip_prefix("/").unwrap()).join("a").is_file());
    assert!(dest.join("outside/b").is_file());
}

#[test]
fn corrupt_archive() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad");
    let mut junk = vec![0x41u8; 512];
    junk[148..156].copy_from_slice(b"garbage!");
    fs::write(&p, junk).unwrap();
    assert!(matches!(
        image::unpack(&[p], &d.path().join("r")),
        Err(ImageError::ArchiveCorrupt { .. })
    ));
}

fn entries(tar_bytes: &[u8]) -> Vec<(String, EntryType, u64, u64, u32, Vec<u8>)> {
    let mut ar = tar::Archive::new(tar_bytes);
    ar.entries()
        .unwrap()
        .map(|e| {
            let mut e = e.unwrap();
            let h = e.header().clone();
            let mut data = Vec::new();
            e.read_to_end(&mut data).unwrap();
            (
                e.path().unwrap().to_str().unwrap().to_string(),
                h.entry_type(),
                h.uid().unwrap(),
                h.gid().unwrap(),
                h.mode().unwrap(),
                data,
            )
        })
        .collect()
}

#[test]
fn export_normalizes_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    fs::create_dir_all(root.join("usr/bin")).unwrap();
    fs::write(root.join("usr/bin/su"), b"su").unwrap();
    fs::set_permissions(root.join("usr/bin/su"), fs::Permissions::from_mode(0o4755)).unwrap();
    fs::write(root.join("a.txt"), b"a").unwrap();
    std::os::unix::fs::symlink("usr/bin", root.join("bin")).unwrap();
    fs::create_dir_all(root.join(".ubuild")).unwrap();
    fs::write(root.join(".ubuild/junk"), b"").unwrap();
    fs::create_dir_all(root.join("dev")).unwrap();
    fs::write(root.join("dev/null"), b"").unwrap();

    let (one, stats) = image::export(root, None, Vec::new()).unwrap();
    let (two, _) = image::export(root, None, Vec::new()).unwrap();
    assert_eq!(one, two);
    assert_eq!(stats.from_db, 0);
    let es = entries(&one);
    let names: Vec<_> = es.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(names, ["a.txt", "bin", "dev/", "usr/", "usr/bin/", "usr/bin/su"]);
    let su = es.iter().find(|e| e.0 == "usr/bin/su").unwrap();
    assert_eq!((su.2, su.3, su.4), (0, 0, 0o755));
    assert_eq!(su.5, b"su");
    assert!(es.iter().all(|e| e.2 == 0 && e.3 == 0));
}

#[test]
fn export_uses_db_records() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    fs::write(root.join("test.file"), b"x").unwrap();
    fs::write(root.join("test.dev"), b"").unwrap();
    fs::set_permissions(root.join("test.file"), fs::Permissions::from_mode(0o640)).unwrap();
    let mut db = DbSession::in_memory();
    let id = |p: &str| FileIdentity::of(&fs::symlink_metadata(root.join(p)).unwrap());
    db.upsert(id("test.file"), OwnershipRecord::new(65534, 0, 0o640, FileKind::Regular)).unwrap();
    db.upsert(
        id("test.dev"),
        OwnershipRecord::device(0, 0, 0o640, FileKind::CharDevice, libc::makedev(1, 1)),
    )
    .unwrap();
    let (bytes, stats) = image::export(root, Some(&db), Vec::new()).unwrap();
    assert_eq!(stats.from_db, 2);
    let mut ar = tar::Archive::new(&bytes[..]);
    let mut seen = 0;
    for e in ar.entries().unwrap() {
        let e = e.unwrap();
        let h = e.header();
        match e.path().unwrap().to_str().unwrap() {
            "test.file" => {
                assert_eq!((h.uid().unwrap(), h.gid().unwrap(), h.mode().unwrap()), (65534, 0, 0o640));
                seen += 1;
            }
            "test.dev" => {
                assert_eq!(h.entry_type(), EntryType::Char);
                assert_eq!((h.device_major().unwrap(), h.device_minor().unwrap()), (Some(1), Some(1)));
                assert_eq!(h.size().unwrap(), 0);
                seen += 1;
            }
            other => panic!("{other}"),
        }
    }
    assert_eq!(seen, 2);
}

#[test]
fn export_empty_root() {
    let d = tempfile::tempdir().unwrap();
    let (bytes, stats) = image::export(d.path(), None, Vec::new()).unwrap();
    assert_eq!(stats.entries, 0);
    assert_eq!(bytes, vec![0u8; 1024]);
    assert_eq!(tar::Archive::new(&bytes[..]).entries().unwrap().count(), 0);
}

#[test]
fn export_layer_into_store() {
    let d = tempfile::tempdir().unwrap();
    let store = StoreLayout::open(d.path().join("store")).unwrap();
    let root = d.path().join("root");
    fs::create_dir(&root).unwrap();
    fs::write(root.join("f"), b"f").unwrap();
    let a = image::export_layer(&root, None, &store).unwrap();
    let b = image::export_layer(&root, None, &store).unwrap();
    assert_eq!(a, b);
    let blob = store.read_blob(&a.descriptor.digest).unwrap();
    assert_eq!(blob.len() as u64, a.descriptor.size);
    let mut tarbytes = Vec::new();
    flate2::read::GzDecoder::new(&blob[..]).read_to_end(&mut tarbytes).unwrap();
    assert_eq!(ubuild_core::oci::Digest::of(&tarbytes), a.diff_id);
    assert_eq!(fs::read_dir(store.root().join("dl/tmp")).unwrap().count(), 0);
}

#[test]
fn snapshot_copies() {
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("src");
    fs::create_dir_all(src.join("sub")).unwrap();
    fs::write(src.join("one"), b"1").unwrap();
    fs::write(src.join("sub/two"), b"2").unwrap();
    fs::set_permissions(src.join("one"), fs::Permissions::from_mode(0o751)).unwrap();
    std::os::unix::fs::symlink("/nonexistent", src.join("dangling")).unwrap();
    fs::set_permissions(src.join("sub"), fs::Permissions::from_mode(0o555)).unwrap();
    let dest = d.path().join("dest");
    image::snapshot(&src, &dest).unwrap();
    assert_eq!(tree(&src), tree(&dest));
    assert!(matches!(image::snapshot(&src, &src), Err(ImageError::Aliasing(_))));
    assert!(matches!(image::snapshot(&src, &src.join("in")), Err(ImageError::Aliasing(_))));
    fs::set_permissions(src.join("sub"), fs::Permissions::from_mode(0o755)).unwrap();
    fs::set_permissions(dest.join("sub"), fs::Permissions::from_mode(0o755)).unwrap();
}

#[test]
fn store_meta_and_list() {
    let d = tempfile::tempdir().unwrap();
    let store = StoreLayout::open(d.path()).unwrap();
    assert!(store.list().unwrap().is_empty());
    let r: image::ImageRef = "foo".parse().unwrap();
    fs::create_dir_all(store.image_root(&r)).unwrap();
    let digest = store.put_blob(b"{}").unwrap();
    let meta = image::ImageMeta {
        reference: r.to_string(),
        manifest_digest: digest,
    };
    store.write_meta(&r, &meta).unwrap();
    assert_eq!(store.list().unwrap(), std::slice::from_ref(&meta));
    assert_eq!(store.read_meta(&r).unwrap(), Some(meta));
    let _g = store.lock("build").unwrap();
    store.remove_image(&r).unwrap();
    assert!(store.list().unwrap().is_empty());
}

fn rel_path() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-c]{1,2}", 1..4).prop_map(|v| v.join("/"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Unpacking an exported tree reproduces paths, bytes and modes.
    #[test]
    fn export_unpack_round_trip(
        files in prop::collection::btree_map(rel_path(), (prop::collection::vec(any::<u8>(), 0..64), prop::sample::select(vec![0o644u32, 0o755, 0o600, 0o700])), 1..12)
    ) {
        let d = tempfile::tempdir().unwrap();
        let src = d.path().join("src");
        fs::create_dir(&src).unwrap();
        for (p, (data, mode)) in &files {
            let target = src.join(p);
            // skip paths that collide with an existing file used as a directory
            if target.ancestors().skip(1).any(|a| a.is_file()) || target.is_dir() {
                continue;
            }
            fs::create_dir_all(target.parent().unwrap()).unwrap();
            fs::write(&target, data).unwrap();
            fs::set_permissions(&target, fs::Permissions::from_mode(*mode)).unwrap();
        }
        let layer = d.path().join("layer.tar");
        let (bytes, _) = image::export(&src, None, Vec::new()).unwrap();
        fs::write(&layer, &bytes).unwrap();
        let dest = d.path().join("dest");
        image::unpack(&[layer], &dest).unwrap();
        prop_assert_eq!(tree(&src), tree(&dest));
    }
}
