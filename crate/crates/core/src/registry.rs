//! OCI distribution client: pull into the blob cache, push from it.
//!
//! Proxies come from the usual `HTTP_PROXY`/`HTTPS_PROXY`/`NO_PROXY`
//! variables and extra CA certificates from `SSL_CERT_FILE`. Loopback
//! registries and hosts listed in `UBUILD_REGISTRY_HTTP` (comma-separated)
//! are spoken to over plain HTTP.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::time::{Duration, Instant};

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::header::{ACCEPT, CONTENT_TYPE, LOCATION, WWW_AUTHENTICATE};
use reqwest::{StatusCode, Url};
use serde::Deserialize;
use thiserror::Error;

use crate::fsutil::with_suffix;
use crate::image::{self, ImageError, ImageMeta, ImageRef, StoreLayout};
use crate::oci::{self, Digest, HashingWriter, Index, Manifest, OciError};

pub const PLAIN_HTTP_ENV: &str = "UBUILD_REGISTRY_HTTP";
pub const USER_ENV: &str = "UBUILD_REGISTRY_USER";
pub const PASSWORD_ENV: &str = "UBUILD_REGISTRY_PASSWORD";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("digest mismatch for {expected}: got {actual}")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unsupported media type {0:?}")]
    UnsupportedMediaType(String),
    #[error("upload rejected: HTTP {status}: {body}")]
    UploadRejected { status: u16, body: String },
    #[error("image not in store: {0}")]
    NotInStore(String),
    #[error("registry error: HTTP {status} for {url}")]
    Status { status: u16, url: String },
    #[error("HTTP: {0}")]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Oci(#[from] OciError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub realm: String,
    pub service: Option<String>,
    pub scope: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum AuthMode {
    #[default]
    Anonymous,
    Bearer { token: String, expiry: Instant },
}

#[derive(Debug, Clone, Default)]
pub struct AuthState {
    pub mode: AuthMode,
    pub challenge: Option<Challenge>,
}

/// Parse a `WWW-Authenticate: Bearer k="v",...` header.
pub fn parse_challenge(header: &str) -> Option<Challenge> {
    let rest = header.trim().strip_prefix("Bearer")?.trim_start();
    let mut realm = None;
    let mut service = None;
    let mut scope = None;
    let mut s = rest;
    while !s.is_empty() {
        let (key, after) = s.split_once('=')?;
        let after = after.trim_start();
        let (val, next) = if let Some(q) = after.strip_prefix('"') {
            let end = q.find('"')?;
            (&q[..end], &q[end + 1..])
        } else {
            let end = after.find(',').unwrap_or(after.len());
            (&after[..end], &after[end..])
        };
        match key.trim() {
            "realm" => realm = Some(val.to_string()),
            "service" => service = Some(val.to_string()),
            "scope" => scope = Some(val.to_string()),
            _ => {}
        }
        s = next.trim_start().trim_start_matches(',').trim_start();
    }
    Some(Challenge {
        realm: realm?,
        service,
        scope,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferStats {
    pub downloaded: usize,
    pub cached: usize,
    pub uploaded: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct Pulled {
    pub manifest_digest: Digest,
    pub manifest: Manifest,
    pub stats: TransferStats,
}

pub struct RegistryClient {
    http: Client,
    auth: AuthState,
    credentials: Option<(String, String)>,
}

fn base_url(host: &str) -> Result<Url, RegistryError> {
    let bare = host.rsplit_once(':').map_or(host, |(h, p)| {
        if p.chars().all(|c| c.is_ascii_digit()) {
            h
        } else {
            host
        }
    });
    let loopback = matches!(bare, "localhost" | "127.0.0.1" | "[::1]");
    let listed = std::env::var(PLAIN_HTTP_ENV)
        .map(|v| v.split(',').any(|h| h.trim() == host))
        .unwrap_or(false);
    let scheme = if loopback || listed { "http" } else { "https" };
    Url::parse(&format!("{scheme}://{host}/"))
        .map_err(|_| RegistryError::NotFound(format!("bad registry host {host:?}")))
}

impl RegistryClient {
    pub fn new() -> Result<Self, RegistryError> {
        let mut b = Client::builder().timeout(Duration::from_secs(300));
        if let Some(path) = std::env::var_os("SSL_CERT_FILE") {
            match fs::read(&path) {
                Ok(pem) => b = b.tls_certs_merge(reqwest::Certificate::from_pem_bundle(&pem)?),
                Err(e) => log::warn!("SSL_CERT_FILE {}: {e}", path.to_string_lossy()),
            }
        }
        let credentials = match (std::env::var(USER_ENV), std::env::var(PASSWORD_ENV)) {
            (Ok(u), Ok(p)) => Some((u, p)),
            _ => None,
        };
        Ok(RegistryClient {
            http: b.build()?,
            auth: AuthState::default(),
            credentials,
        })
    }

    pub fn auth(&self) -> &AuthState {
        &self.auth
    }

    fn fetch_token(&mut self, ch: &Challenge) -> Result<(), RegistryError> {
        let mut url = Url::parse(&ch.realm)
            .map_err(|_| RegistryError::AuthFailed(format!("bad realm {:?}", ch.realm)))?;
        {
            let mut q = url.query_pairs_mut();
            if let Some(s) = &ch.service {
                q.append_pair("service", s);
            }
            if let Some(s) = &ch.scope {
                q.append_pair("scope", s);
            }
        }
        let mut req = self.http.get(url);
        if let Some((u, p)) = &self.credentials {
            req = req.basic_auth(u, Some(p));
        }
        let resp = req.send()?;
        if !resp.status().is_success() {
            return Err(RegistryError::AuthFailed(format!("token endpoint: HTTP {}", resp.status())));
        }
        #[derive(Deserialize)]
        struct Token {
            token: Option<String>,
            access_token: Option<String>,
            expires_in: Option<u64>,
        }
        let t: Token = serde_json::from_slice(&resp.bytes()?)
            .map_err(|e| RegistryError::AuthFailed(format!("token response: {e}")))?;
        let token = t
            .token
            .or(t.access_token)
            .ok_or_else(|| RegistryError::AuthFailed("no token in response".into()))?;
        self.auth = AuthState {
            mode: AuthMode::Bearer {
                token,
                expiry: Instant::now() + Duration::from_secs(t.expires_in.unwrap_or(60)),
            },
            challenge: Some(ch.clone()),
        };
        Ok(())
    }

    /// Send a request, answering one bearer challenge (or an expired token)
    /// by fetching a fresh token and retrying once.
    fn send(&mut self, build: impl Fn(&Client) -> RequestBuilder) -> Result<Response, RegistryError> {
        if let (AuthMode::Bearer { expiry, .. }, Some(ch)) = (&self.auth.mode, &self.auth.challenge) {
            if *expiry <= Instant::now() {
                let ch = ch.clone();
                self.fetch_token(&ch)?;
            }
        }
        for attempt in 0..2 {
            let mut req = build(&self.http);
            if let AuthMode::Bearer { token, .. } = &self.auth.mode {
                req = req.bearer_auth(token);
            }
            let resp = req.send()?;
            if resp.status() != StatusCode::UNAUTHORIZED {
                return Ok(resp);
            }
            if attempt == 1 {
                break;
            }
            let ch = resp
                .headers()
                .get(WWW_AUTHENTICATE)
                .and_then(|h| h.to_str().ok())
                .and_then(parse_challenge)
                .ok_or_else(|| RegistryError::AuthFailed("401 without a bearer challenge".into()))?;
            self.fetch_token(&ch)?;
        }
        Err(RegistryError::AuthFailed("credentials rejected".into()))
    }

    fn get_manifest(
        &mut self,
        base: &Url,
        r: &ImageRef,
        reference: &str,
    ) -> Result<(Vec<u8>, Option<String>), RegistryError> {
        let url = base.join(&format!("v2/{}/manifests/{reference}", r.repo)).expect("valid path");
        let accept = [oci::OCI_MANIFEST, oci::DOCKER_MANIFEST, oci::OCI_INDEX, oci::DOCKER_MANIFEST_LIST].join(", ");
        let resp = self.send(|c| c.get(url.clone()).header(ACCEPT, accept.clone()))?;
        match resp.status() {
            s if s.is_success() => {}
            StatusCode::NOT_FOUND => return Err(RegistryError::NotFound(format!("{}:{reference}", r.repo))),
            s => {
                return Err(RegistryError::Status {
                    status: s.as_u16(),
                    url: url.to_string(),
                })
            }
        }
        let ct = resp
            .headers()
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        Ok((resp.bytes()?.to_vec(), ct))
    }

    /// Fetch the manifest (resolving one index level for this host's
    /// platform) and every blob it names into the cache. Blobs become
    /// visible only after all of them check out; the manifest is stored
    /// last.
    pub fn pull(&mut self, r: &ImageRef, store: &StoreLayout) -> Result<Pulled, RegistryError> {
        let base = base_url(&r.host)?;
        let (mut bytes, mut ct) = self.get_manifest(&base, r, &r.tag)?;
        let media = oci::sniff_media_type(&bytes, ct.as_deref()).unwrap_or_default();
        if oci::INDEX_TYPES.contains(&media.as_str()) {
            let idx: Index = serde_json::from_slice(&bytes).map_err(OciError::from)?;
            let d = idx
                .select("linux", oci::host_arch())
                .ok_or_else(|| RegistryError::NotFound(format!("{r}: no image for linux/{}", oci::host_arch())))?
                .clone();
            (bytes, ct) = self.get_manifest(&base, r, d.digest.as_str())?;
            let actual = Digest::of(&bytes);
            if actual != d.digest {
                return Err(RegistryError::DigestMismatch {
                    expected: d.digest,
                    actual,
                });
            }
        } else if !media.is_empty() && !oci::MANIFEST_TYPES.contains(&media.as_str()) {
            return Err(RegistryError::UnsupportedMediaType(media));
        }
        let manifest = Manifest::parse(&bytes, ct.as_deref()).map_err(|e| match e {
            OciError::UnsupportedMediaType(m) => RegistryError::UnsupportedMediaType(m),
            e => e.into(),
        })?;
        let mut stats = TransferStats::default();
        let mut staged: Vec<(std::path::PathBuf, &Digest)> = Vec::new();
        let mut fetched = Ok(());
        for d in std::iter::once(&manifest.config).chain(&manifest.layers) {
            if store.has_blob(&d.digest) || staged.iter().any(|(_, s)| **s == d.digest) {
                stats.cached += 1;
                continue;
            }
            match self.fetch_blob(&base, r, &d.digest, store) {
                Ok(tmp) => staged.push((tmp, &d.digest)),
                Err(e) => {
                    fetched = Err(e);
                    break;
                }
            }
            stats.downloaded += 1;
        }
        if let Err(e) = fetched {
            for (tmp, _) in &staged {
                let _ = fs::remove_file(tmp);
            }
            return Err(e);
        }
        for (tmp, d) in &staged {
            store.commit_blob(tmp, d)?;
        }
        let manifest_digest = store.put_blob(&bytes)?;
        Ok(Pulled {
            manifest_digest,
            manifest,
            stats,
        })
    }

    fn fetch_blob(
        &mut self,
        base: &Url,
        r: &ImageRef,
        digest: &Digest,
        store: &StoreLayout,
    ) -> Result<std::path::PathBuf, RegistryError> {
        let url = base.join(&format!("v2/{}/blobs/{digest}", r.repo)).expect("valid path");
        let mut resp = self.send(|c| c.get(url.clone()))?;
        match resp.status() {
            s if s.is_success() => {}
            StatusCode::NOT_FOUND => return Err(RegistryError::NotFound(digest.to_string())),
            s => {
                return Err(RegistryError::Status {
                    status: s.as_u16(),
                    url: url.to_string(),
                })
            }
        }
        let tmp = store.tmp_path();
        let result = (|| -> Result<Digest, RegistryError> {
            let mut w = HashingWriter::new(BufWriter::new(File::create(&tmp)?));
            resp.copy_to(&mut w)?;
            let (buf, actual, _) = w.finish();
            buf.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            Ok(actual)
        })();
        match result {
            Ok(actual) if actual == *digest => Ok(tmp),
            Ok(actual) => {
                let _ = fs::remove_file(&tmp);
                Err(RegistryError::DigestMismatch {
                    expected: digest.clone(),
                    actual,
                })
            }
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                Err(e)
            }
        }
    }

    /// Upload the stored image `r` (blobs first, skipping ones the registry
    /// has, then the manifest) and return the manifest digest.
    pub fn push(&mut self, r: &ImageRef, store: &StoreLayout) -> Result<(Digest, TransferStats), RegistryError> {
        let meta = store
            .read_meta(r)?
            .ok_or_else(|| RegistryError::NotInStore(r.to_string()))?;
        let manifest_bytes = store.read_blob(&meta.manifest_digest)?;
        let manifest = Manifest::parse(&manifest_bytes, None)?;
        let base = base_url(&r.host)?;
        let mut stats = TransferStats::default();
        for d in manifest.layers.iter().chain(std::iter::once(&manifest.config)) {
            let head = base.join(&format!("v2/{}/blobs/{}", r.repo, d.digest)).expect("valid path");
            if self.send(|c| c.head(head.clone()))?.status().is_success() {
                stats.skipped += 1;
                continue;
            }
            let start = base.join(&format!("v2/{}/blobs/uploads/", r.repo)).expect("valid path");
            let resp = self.send(|c| c.post(start.clone()))?;
            if resp.status() != StatusCode::ACCEPTED {
                return Err(rejected(resp));
            }
            let loc = resp
                .headers()
                .get(LOCATION)
                .and_then(|v| v.to_str().ok())
                .ok_or_else(|| RegistryError::UploadRejected {
                    status: 202,
                    body: "no Location header".into(),
                })?;
            let mut put = base.join(loc).map_err(|_| RegistryError::UploadRejected {
                status: 202,
                body: format!("bad Location {loc:?}"),
            })?;
            put.query_pairs_mut().append_pair("digest", d.digest.as_str());
            let body = store.read_blob(&d.digest)?;
            let resp = self.send(|c| {
                c.put(put.clone())
                    .header(CONTENT_TYPE, "application/octet-stream")
                    .body(body.clone())
            })?;
            if resp.status() != StatusCode::CREATED {
                return Err(rejected(resp));
            }
            stats.uploaded += 1;
        }
        let url = base.join(&format!("v2/{}/manifests/{}", r.repo, r.tag)).expect("valid path");
        let resp = self.send(|c| {
            c.put(url.clone())
                .header(CONTENT_TYPE, manifest.media_type.clone())
                .body(manifest_bytes.clone())
        })?;
        if resp.status() != StatusCode::CREATED {
            return Err(rejected(resp));
        }
        Ok((Digest::of(&manifest_bytes), stats))
    }
}

fn rejected(resp: Response) -> RegistryError {
    let status = resp.status().as_u16();
    RegistryError::UploadRejected {
        status,
        body: resp.text().unwrap_or_default(),
    }
}

/// Pull `r` and unpack it as a store image (replacing any previous one).
pub fn pull_to_store(
    client: &mut RegistryClient,
    r: &ImageRef,
    store: &StoreLayout,
) -> Result<(ImageMeta, Pulled), RegistryError> {
    let _lock = store.lock(&r.encoded())?;
    let pulled = client.pull(r, store)?;
    let layers: Vec<_> = pulled
        .manifest
        .layers
        .iter()
        .map(|d| store.blob_path(&d.digest))
        .collect();
    let dest = store.image_root(r);
    let staging = with_suffix(&dest, ".unpacking");
    if staging.exists() {
        image::make_tree_writable(&staging)?;
        fs::remove_dir_all(&staging)?;
    }
    image::unpack(&layers, &staging)?;
    store.remove_image(r)?;
    fs::rename(&staging, &dest)?;
    let meta = ImageMeta {
        reference: r.to_string(),
        manifest_digest: pulled.manifest_digest.clone(),
    };
    store.write_meta(r, &meta)?;
    Ok((meta, pulled))
}
