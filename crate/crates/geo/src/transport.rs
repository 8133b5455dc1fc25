//! Request executors: live HTTP, digest-keyed fixture playback and
//! recording, an in-memory responder, and a guard that fails on contact.
//!
//! A fixture file `{key}.resp` holds an HTTP-style status line, optional
//! `Name: value` header lines, a blank line, then the raw body bytes.
//! `key` is the first 16 hex digits of `sha256(method + "\n" + url)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::error::{redact, GeoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Response {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        Self {
            status: 200,
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn with_status(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            headers: Vec::new(),
            body: body.into(),
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    /// First header named `name`, compared case-insensitively.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

pub trait Transport {
    fn execute(&self, method: Method, url: &str, body: &[u8]) -> Result<Response>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn execute(&self, method: Method, url: &str, body: &[u8]) -> Result<Response> {
        (**self).execute(method, url, body)
    }
}

/// 16 hex digits of `sha256(method + "\n" + url)`.
pub fn request_digest(method: Method, url: &str) -> String {
    let mut h = Sha256::new();
    h.update(method.as_str().as_bytes());
    h.update(b"\n");
    h.update(url.as_bytes());
    let mut s = hex::encode(h.finalize());
    s.truncate(16);
    s
}

pub fn fixture_path(dir: &Path, method: Method, url: &str) -> PathBuf {
    dir.join(format!("{}.resp", request_digest(method, url)))
}

pub fn encode_fixture(resp: &Response) -> Vec<u8> {
    let mut out = format!("HTTP/1.1 {}\n", resp.status).into_bytes();
    for (k, v) in &resp.headers {
        out.extend_from_slice(format!("{k}: {v}\n").as_bytes());
    }
    out.push(b'\n');
    out.extend_from_slice(&resp.body);
    out
}

pub fn decode_fixture(bytes: &[u8], path: &Path) -> Result<Response> {
    let bad = |message: &str| GeoError::Fixture {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing blank line before body"))?;
        pos += end + 1;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| bad("non-UTF-8 header"))?;
        Ok(line.trim_end_matches('\r'))
    };
    let status_line = next_line()?;
    let status = status_line
        .split_whitespace()
        .find_map(|tok| tok.parse::<u16>().ok())
        .ok_or_else(|| bad("status line has no status code"))?;
    let mut headers = Vec::new();
    loop {
        let line = next_line()?;
        if line.is_empty() {
            break;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| bad("header without ':'"))?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(Response {
        status,
        headers,
        body: bytes[pos..].to_vec(),
    })
}

pub fn write_fixture(dir: &Path, method: Method, url: &str, resp: &Response) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| GeoError::io(dir, e))?;
    let path = fixture_path(dir, method, url);
    fs::write(&path, encode_fixture(resp)).map_err(|e| GeoError::io(&path, e))?;
    Ok(path)
}

/// Serves recorded responses from a fixture directory.
#[derive(Debug, Clone)]
pub struct FixtureTransport {
    dir: PathBuf,
}

impl FixtureTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Transport for FixtureTransport {
    fn execute(&self, method: Method, url: &str, _body: &[u8]) -> Result<Response> {
        let path = fixture_path(&self.dir, method, url);
        match fs::read(&path) {
            Ok(bytes) => decode_fixture(&bytes, &path),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(GeoError::FixtureMissing {
                key: request_digest(method, url),
                method: method.as_str(),
                url: redact(url),
            }),
            Err(e) => Err(GeoError::io(path, e)),
        }
    }
}

/// Forwards to an inner transport and saves every response as a fixture.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
    lock: Mutex<()>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            lock: Mutex::new(()),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn execute(&self, method: Method, url: &str, body: &[u8]) -> Result<Response> {
        let resp = self.inner.execute(method, url, body)?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        write_fixture(&self.dir, method, url, &resp)?;
        Ok(resp)
    }
}

/// Canned responses keyed by `(method, url)`.
#[derive(Debug, Default)]
pub struct MemoryTransport {
    routes: HashMap<(Method, String), Response>,
    calls: AtomicUsize,
}

impl MemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn route(mut self, method: Method, url: &str, resp: Response) -> Self {
        self.routes.insert((method, url.to_string()), resp);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for MemoryTransport {
    fn execute(&self, method: Method, url: &str, _body: &[u8]) -> Result<Response> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.routes
            .get(&(method, url.to_string()))
            .cloned()
            .ok_or_else(|| GeoError::FixtureMissing {
                key: request_digest(method, url),
                method: method.as_str(),
                url: redact(url),
            })
    }
}

/// Refuses every request and counts the attempts.
#[derive(Debug, Default)]
pub struct NoNetwork {
    attempts: AtomicUsize,
}

impl NoNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl Transport for NoNetwork {
    fn execute(&self, method: Method, url: &str, _body: &[u8]) -> Result<Response> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(GeoError::NetworkContact {
            method: method.as_str(),
            url: redact(url),
        })
    }
}

/// Blocking HTTPS client.
#[cfg(feature = "live")]
pub struct LiveTransport {
    agent: ureq::Agent,
}

#[cfg(feature = "live")]
impl LiveTransport {
    pub fn new() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_secs(30)))
            .build()
            .into();
        Self { agent }
    }
}

#[cfg(feature = "live")]
impl Default for LiveTransport {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(feature = "live")]
impl Transport for LiveTransport {
    fn execute(&self, method: Method, url: &str, body: &[u8]) -> Result<Response> {
        let failed = |e: ureq::Error| GeoError::Network {
            url: redact(url),
            message: e.to_string(),
        };
        let mut resp = match method {
            Method::Get => self.agent.get(url).call(),
            Method::Post => self
                .agent
                .post(url)
                .header("Content-Type", "application/json")
                .send(body),
        }
        .map_err(failed)?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
            .collect();
        let body = resp
            .body_mut()
            .with_config()
            .limit(32 * 1024 * 1024)
            .read_to_vec()
            .map_err(failed)?;
        Ok(Response {
            status,
            headers,
            body,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_sha256_prefix() {
        // sha256("GET\nhttps://example.com/") computed with coreutils sha256sum
        assert_eq!(request_digest(Method::Get, "https://example.com/"), EXAMPLE_DIGEST);
        assert_ne!(
            request_digest(Method::Post, "https://example.com/"),
            request_digest(Method::Get, "https://example.com/")
        );
    }

    const EXAMPLE_DIGEST: &str = "6301673fdba56901";

    #[test]
    fn fixture_encoding_roundtrip() {
        let resp = Response::with_status(403, b"denied\n\nbody".to_vec())
            .with_header("Content-Type", "text/plain");
        let back = decode_fixture(&encode_fixture(&resp), Path::new("x")).unwrap();
        assert_eq!(back, resp);
        assert_eq!(back.header("content-type"), Some("text/plain"));

        let bare = decode_fixture(b"HTTP/1.1 200 OK\n\n{}", Path::new("x")).unwrap();
        assert_eq!((bare.status, bare.body.as_slice()), (200, &b"{}"[..]));
        assert!(decode_fixture(b"garbage", Path::new("x")).is_err());
    }

    #[test]
    fn playback_and_recording() {
        let dir = tempfile::tempdir().unwrap();
        let url = "https://example.com/a?key=K";
        let mem = MemoryTransport::new().route(Method::Get, url, Response::ok(b"hello".to_vec()));
        let rec = RecordingTransport::new(&mem, dir.path());
        assert_eq!(rec.execute(Method::Get, url, b"").unwrap().body, b"hello");

        let play = FixtureTransport::new(dir.path());
        let a = play.execute(Method::Get, url, b"").unwrap();
        let b = play.execute(Method::Get, url, b"").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.body, b"hello");
        assert_eq!(mem.calls(), 1);

        let err = play.execute(Method::Post, url, b"").unwrap_err();
        assert!(matches!(err, GeoError::FixtureMissing { .. }));
        assert!(!err.to_string().contains("key=K"));
    }

    #[test]
    fn guard_counts_attempts() {
        let guard = NoNetwork::new();
        assert!(matches!(
            guard.execute(Method::Get, "https://x?key=S", b""),
            Err(GeoError::NetworkContact { .. })
        ));
        assert_eq!(guard.attempts(), 1);
    }
}
