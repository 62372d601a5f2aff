//! In-process registry speaking the distribution endpoints the client uses.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Request, Response, Server};

use crate::oci::{self, Descriptor, Digest, ImageConfig, Index, Manifest, Platform, RunConfig};

#[derive(Default)]
struct State {
    blobs: HashMap<Digest, Vec<u8>>,
    /// (repo, tag or digest) → (media type, bytes)
    manifests: HashMap<(String, String), (String, Vec<u8>)>,
    uploads: HashSet<String>,
    next_id: u64,
    log: Vec<String>,
    tampered: HashSet<Digest>,
    auth: bool,
    tokens: HashSet<String>,
}

pub struct MockRegistry {
    server: Arc<Server>,
    state: Arc<Mutex<State>>,
    thread: Option<JoinHandle<()>>,
    port: u16,
}

impl MockRegistry {
    pub fn start() -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind mock registry"));
        let port = server.server_addr().to_ip().expect("tcp").port();
        let state: Arc<Mutex<State>> = Arc::default();
        let thread = {
            let (server, state) = (server.clone(), state.clone());
            std::thread::spawn(move || {
                for req in server.incoming_requests() {
                    handle(req, &state, port);
                }
            })
        };
        MockRegistry {
            server,
            state,
            thread: Some(thread),
            port,
        }
    }

    /// `127.0.0.1:<port>`, usable as the host part of an image reference.
    pub fn host(&self) -> String {
        format!("127.0.0.1:{}", self.port)
    }

    /// Require bearer tokens from now on.
    pub fn require_auth(&self) {
        self.state.lock().unwrap().auth = true;
    }

    /// Invalidate every token issued so far.
    pub fn expire_tokens(&self) {
        self.state.lock().unwrap().tokens.clear();
    }

    /// Serve corrupted bytes for this blob.
    pub fn tamper(&self, d: &Digest) {
        self.state.lock().unwrap().tampered.insert(d.clone());
    }

    /// `METHOD /path` for every request so far.
    pub fn log(&self) -> Vec<String> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn clear_log(&self) {
        self.state.lock().unwrap().log.clear();
    }

    pub fn blob(&self, d: &Digest) -> Option<Vec<u8>> {
        self.state.lock().unwrap().blobs.get(d).cloned()
    }

    pub fn manifest(&self, repo: &str, reference: &str) -> Option<Vec<u8>> {
        let st = self.state.lock().unwrap();
        st.manifests
            .get(&(repo.to_string(), reference.to_string()))
            .map(|(_, b)| b.clone())
    }

    pub fn put_blob(&self, bytes: Vec<u8>) -> Digest {
        let d = Digest::of(&bytes);
        self.state.lock().unwrap().blobs.insert(d.clone(), bytes);
        d
    }

    pub fn put_manifest(&self, repo: &str, reference: &str, media_type: &str, bytes: Vec<u8>) -> Digest {
        let d = Digest::of(&bytes);
        let mut st = self.state.lock().unwrap();
        for r in [reference.to_string(), d.to_string()] {
            st.manifests
                .insert((repo.to_string(), r), (media_type.to_string(), bytes.clone()));
        }
        d
    }

    /// Store an image whose layers are the given uncompressed tars; returns
    /// the manifest digest.
    pub fn seed_image(&self, repo: &str, tag: &str, layers: &[Vec<u8>]) -> Digest {
        self.seed_with_type(repo, tag, layers, oci::OCI_MANIFEST)
    }

    /// Same, with a chosen manifest media type (OCI or legacy Docker).
    pub fn seed_with_type(&self, repo: &str, tag: &str, layers: &[Vec<u8>], media_type: &str) -> Digest {
        let (manifest, _) = self.build_manifest(layers, media_type);
        self.put_manifest(repo, tag, media_type, manifest)
    }

    /// Store an index with an entry for this host's platform and a decoy.
    pub fn seed_index(&self, repo: &str, tag: &str, layers: &[Vec<u8>]) -> Digest {
        let (bytes, _) = self.build_manifest(layers, oci::OCI_MANIFEST);
        let d = self.put_manifest(repo, &Digest::of(&bytes).to_string(), oci::OCI_MANIFEST, bytes.clone());
        let decoy = self.build_manifest(&[b"decoy".to_vec()], oci::OCI_MANIFEST).0;
        let decoy_d = self.put_manifest(repo, &Digest::of(&decoy).to_string(), oci::OCI_MANIFEST, decoy.clone());
        let entry = |digest: Digest, size: usize, arch: &str| Descriptor {
            media_type: oci::OCI_MANIFEST.into(),
            digest,
            size: size as u64,
            platform: Some(Platform {
                architecture: arch.into(),
                os: "linux".into(),
                variant: None,
            }),
        };
        let other_arch = if oci::host_arch() == "s390x" { "amd64" } else { "s390x" };
        let idx = Index {
            schema_version: 2,
            media_type: oci::OCI_INDEX.into(),
            manifests: vec![entry(decoy_d, decoy.len(), other_arch), entry(d.clone(), bytes.len(), oci::host_arch())],
        };
        self.put_manifest(repo, tag, oci::OCI_INDEX, serde_json::to_vec(&idx).unwrap());
        d
    }

    fn build_manifest(&self, layers: &[Vec<u8>], media_type: &str) -> (Vec<u8>, Digest) {
        let docker = media_type == oci::DOCKER_MANIFEST;
        let mut descs = Vec::new();
        let mut diff_ids = Vec::new();
        for l in layers {
            let d = self.put_blob(l.clone());
            diff_ids.push(d.clone());
            descs.push(Descriptor::new(
                if docker { oci::DOCKER_LAYER_GZIP } else { oci::OCI_LAYER_TAR },
                d,
                l.len() as u64,
            ));
        }
        let config = ImageConfig::new(RunConfig::default(), diff_ids).to_bytes();
        let cd = self.put_blob(config.clone());
        let mut m = Manifest::new(
            Descriptor::new(if docker { oci::DOCKER_CONFIG } else { oci::OCI_CONFIG }, cd, config.len() as u64),
            descs,
        );
        m.media_type = media_type.into();
        let bytes = m.to_bytes();
        let d = Digest::of(&bytes);
        (bytes, d)
    }
}

impl Drop for MockRegistry {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn header(k: &str, v: &str) -> Header {
    Header::from_bytes(k.as_bytes(), v.as_bytes()).expect("valid header")
}

fn reply(req: Request, status: u16, body: Vec<u8>, headers: Vec<Header>) {
    let mut r = Response::from_data(body).with_status_code(status);
    for h in headers {
        r.add_header(h);
    }
    let _ = req.respond(r);
}

fn handle(mut req: Request, state: &Mutex<State>, port: u16) {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let path = path.to_string();
    let method = req.method().clone();
    let mut body = Vec::new();
    let _ = req.as_reader().read_to_end(&mut body);
    let mut st = state.lock().unwrap();
    st.log.push(format!("{} {path}", method.as_str()));

    if path == "/token" {
        st.next_id += 1;
        let tok = format!("tok-{}", st.next_id);
        st.tokens.insert(tok.clone());
        let body = format!(r#"{{"token":"{tok}","expires_in":300}}"#).into_bytes();
        drop(st);
        return reply(req, 200, body, vec![header("Content-Type", "application/json")]);
    }
    let Some(rest) = path.strip_prefix("/v2/") else {
        drop(st);
        return reply(req, 404, vec![], vec![]);
    };
    if st.auth {
        let ok = req.headers().iter().any(|h| {
            h.field.equiv("Authorization")
                && h.value
                    .as_str()
                    .strip_prefix("Bearer ")
                    .is_some_and(|t| st.tokens.contains(t))
        });
        if !ok {
            let name = rest.split("/manifests/").next().unwrap_or("").split("/blobs/").next().unwrap_or("");
            let challenge = format!(
                r#"Bearer realm="http://127.0.0.1:{port}/token",service="mock",scope="repository:{name}:pull,push""#
            );
            drop(st);
            return reply(req, 401, vec![], vec![header("WWW-Authenticate", &challenge)]);
        }
    }
    if rest.is_empty() {
        drop(st);
        return reply(req, 200, b"{}".to_vec(), vec![]);
    }

    if let Some((name, id)) = rest.split_once("/blobs/uploads/") {
        let name = name.to_string();
        if method == Method::Post && id.is_empty() {
            st.next_id += 1;
            let id = format!("u{}", st.next_id);
            st.uploads.insert(id.clone());
            drop(st);
            return reply(req, 202, vec![], vec![header("Location", &format!("/v2/{name}/blobs/uploads/{id}"))]);
        }
        if method == Method::Put && st.uploads.remove(id) {
            let want = query
                .split('&')
                .find_map(|kv| kv.strip_prefix("digest="))
                .map(|d| d.replace("%3A", ":"))
                .and_then(|d| d.parse::<Digest>().ok());
            let actual = Digest::of(&body);
            return match want {
                Some(w) if w == actual => {
                    st.blobs.insert(actual.clone(), body);
                    drop(st);
                    reply(req, 201, vec![], vec![header("Docker-Content-Digest", actual.as_str())])
                }
                _ => {
                    drop(st);
                    reply(req, 400, b"DIGEST_INVALID".to_vec(), vec![])
                }
            };
        }
        drop(st);
        return reply(req, 404, vec![], vec![]);
    }
    if let Some((_, d)) = rest.rsplit_once("/blobs/") {
        let found = d.parse::<Digest>().ok().and_then(|d| {
            st.blobs.get(&d).map(|b| {
                let mut b = b.clone();
                if st.tampered.contains(&d) && !b.is_empty() {
                    b[0] ^= 0xff;
                } else if st.tampered.contains(&d) {
                    b.push(0);
                }
                b
            })
        });
        drop(st);
        return match (found, &method) {
            (Some(b), Method::Get | Method::Head) => reply(req, 200, b, vec![]),
            _ => reply(req, 404, vec![], vec![]),
        };
    }
    if let Some((name, reference)) = rest.rsplit_once("/manifests/") {
        let key = (name.to_string(), reference.to_string());
        match method {
            Method::Get | Method::Head => {
                let found = st.manifests.get(&key).cloned();
                drop(st);
                match found {
                    Some((mt, b)) => {
                        let d = Digest::of(&b);
                        reply(req, 200, b, vec![header("Content-Type", &mt), header("Docker-Content-Digest", d.as_str())])
                    }
                    None => reply(req, 404, vec![], vec![]),
                }
            }
            Method::Put => {
                let mt = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Content-Type"))
                    .map(|h| h.value.as_str().to_string())
                    .unwrap_or_default();
                let parsed = Manifest::parse(&body, Some(&mt));
                let missing = parsed.as_ref().ok().and_then(|m| {
                    std::iter::once(&m.config)
                        .chain(&m.layers)
                        .find(|d| !st.blobs.contains_key(&d.digest))
                        .map(|d| d.digest.clone())
                });
                match (parsed, missing) {
                    (Ok(_), None) => {
                        let d = Digest::of(&body);
                        for r in [reference.to_string(), d.to_string()] {
                            st.manifests.insert((name.to_string(), r), (mt.clone(), body.clone()));
                        }
                        drop(st);
                        reply(req, 201, vec![], vec![header("Docker-Content-Digest", d.as_str())])
                    }
                    (Ok(_), Some(d)) => {
                        drop(st);
                        reply(req, 400, format!("BLOB_UNKNOWN {d}").into_bytes(), vec![])
                    }
                    (Err(e), _) => {
                        drop(st);
                        reply(req, 400, format!("MANIFEST_INVALID {e}").into_bytes(), vec![])
                    }
                }
            }
            _ => {
                drop(st);
                reply(req, 405, vec![], vec![])
            }
        }
    } else {
        drop(st);
        reply(req, 404, vec![], vec![])
    }
}
