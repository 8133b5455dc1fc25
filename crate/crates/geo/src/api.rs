//! Geolocation, street-view metadata and street-view image requests.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{redact, GeoError, Result};
use crate::transport::{request_digest, Method, Response, Transport};

pub const GEOLOCATE_ENDPOINT: &str = "https://www.googleapis.com/geolocation/v1/geolocate";
pub const STREETVIEW_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/streetview";
pub const METADATA_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/streetview/metadata";

/// Largest width or height the image endpoint accepts.
pub const MAX_SIZE: u32 = 640;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoLocation {
    pub lat: f64,
    pub lng: f64,
    pub accuracy_m: f64,
}

impl GeoLocation {
    pub fn new(lat: f64, lng: f64, accuracy_m: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Range(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lng) {
            return Err(GeoError::Range(format!("longitude {lng} outside [-180, 180]")));
        }
        if !(accuracy_m >= 0.0 && accuracy_m.is_finite()) {
            return Err(GeoError::Range(format!("accuracy {accuracy_m} m must be finite and >= 0")));
        }
        Ok(Self { lat, lng, accuracy_m })
    }
}

/// Camera parameters for a street-view request, independent of location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub size: (u32, u32),
    pub heading: f64,
    pub fov: f64,
}

impl Default for ViewParams {
    fn default() -> Self {
        Self {
            size: (640, 320),
            heading: 0.0,
            fov: 90.0,
        }
    }
}

impl ViewParams {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.size;
        if w == 0 || h == 0 || w > MAX_SIZE || h > MAX_SIZE {
            return Err(GeoError::Range(format!(
                "image size {w}x{h} must be within 1..={MAX_SIZE} on each side"
            )));
        }
        if !(0.0..360.0).contains(&self.heading) {
            return Err(GeoError::Range(format!("heading {} outside [0, 360)", self.heading)));
        }
        if !(self.fov > 0.0 && self.fov <= 120.0) {
            return Err(GeoError::Range(format!("fov {} outside (0, 120]", self.fov)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreetViewRequest {
    pub location: GeoLocation,
    pub view: ViewParams,
    pub api_key: String,
}

impl StreetViewRequest {
    pub fn new(location: GeoLocation, view: ViewParams, api_key: impl Into<String>) -> Result<Self> {
        view.validate()?;
        Ok(Self {
            location,
            view,
            api_key: api_key.into(),
        })
    }

    fn query(&self) -> String {
        let (w, h) = self.view.size;
        format!(
            "size={w}x{h}&location={:.6},{:.6}&heading={}&fov={}&key={}",
            self.location.lat, self.location.lng, self.view.heading, self.view.fov, self.api_key
        )
    }
}

pub fn build_streetview_url(req: &StreetViewRequest) -> String {
    format!("{STREETVIEW_ENDPOINT}?{}", req.query())
}

pub fn metadata_url(req: &StreetViewRequest) -> String {
    format!("{METADATA_ENDPOINT}?{}", req.query())
}

pub fn geolocate_url(api_key: &str) -> String {
    format!("{GEOLOCATE_ENDPOINT}?key={api_key}")
}

fn expect_ok(resp: &Response, url: &str) -> Result<()> {
    if resp.status == 200 {
        Ok(())
    } else {
        Err(GeoError::Http {
            status: resp.status,
            url: redact(url),
        })
    }
}

fn parse_json(body: &[u8]) -> Result<Value> {
    serde_json::from_slice(body).map_err(|e| GeoError::Parse(e.to_string()))
}

fn number(v: &Value, path: &[&str]) -> Result<f64> {
    let mut cur = v;
    for key in path {
        cur = cur.get(key).ok_or_else(|| GeoError::Schema(path.join(".")))?;
    }
    cur.as_f64().ok_or_else(|| GeoError::Schema(format!("{} (number)", path.join("."))))
}

pub fn geolocate(transport: &impl Transport, api_key: &str) -> Result<GeoLocation> {
    let url = geolocate_url(api_key);
    let resp = transport.execute(Method::Post, &url, b"{}")?;
    expect_ok(&resp, &url)?;
    let v = parse_json(&resp.body)?;
    GeoLocation::new(
        number(&v, &["location", "lat"])?,
        number(&v, &["location", "lng"])?,
        number(&v, &["accuracy"])?,
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Availability {
    Available { pano_id: String },
    NoImagery,
}

pub fn streetview_metadata(transport: &impl Transport, req: &StreetViewRequest) -> Result<Availability> {
    req.view.validate()?;
    let url = metadata_url(req);
    let resp = transport.execute(Method::Get, &url, b"")?;
    expect_ok(&resp, &url)?;
    let v = parse_json(&resp.body)?;
    let status = v
        .get("status")
        .and_then(Value::as_str)
        .ok_or_else(|| GeoError::Schema("status".into()))?;
    match status {
        "OK" => {
            let pano_id = v
                .get("pano_id")
                .and_then(Value::as_str)
                .ok_or_else(|| GeoError::Schema("pano_id".into()))?;
            Ok(Availability::Available {
                pano_id: pano_id.to_string(),
            })
        }
        "ZERO_RESULTS" => Ok(Availability::NoImagery),
        "REQUEST_DENIED" => Err(GeoError::Authorization(
            v.get("error_message")
                .and_then(Value::as_str)
                .unwrap_or("REQUEST_DENIED")
                .to_string(),
        )),
        other => Err(GeoError::ApiStatus(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Jpeg,
}

impl ImageFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Jpeg => "jpg",
        }
    }

    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(ImageFormat::Png)
        } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
            Some(ImageFormat::Jpeg)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreetViewImage {
    pub bytes: Vec<u8>,
    pub format: ImageFormat,
}

/// Fetches the street-view image. With `cache` set, a previously fetched
/// image for the same URL is served from disk without touching the transport,
/// and fresh bytes are stored verbatim.
pub fn fetch_streetview(
    transport: &impl Transport,
    req: &StreetViewRequest,
    cache: Option<&Path>,
) -> Result<StreetViewImage> {
    req.view.validate()?;
    let url = build_streetview_url(req);
    let cache_file = cache.map(|dir| dir.join(format!("{}.img", request_digest(Method::Get, &url))));
    if let Some(path) = &cache_file {
        match fs::read(path) {
            Ok(bytes) => {
                let format = ImageFormat::sniff(&bytes).ok_or_else(|| GeoError::Content {
                    content: format!("unrecognized bytes in cache file {}", path.display()),
                })?;
                return Ok(StreetViewImage { bytes, format });
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(GeoError::io(path, e)),
        }
    }

    let resp = transport.execute(Method::Get, &url, b"")?;
    expect_ok(&resp, &url)?;
    let content_type = resp.header("content-type").unwrap_or("").to_ascii_lowercase();
    let declared = match content_type.split(';').next().unwrap_or("").trim() {
        "image/png" => Some(ImageFormat::Png),
        "image/jpeg" | "image/jpg" => Some(ImageFormat::Jpeg),
        "" => None,
        other => {
            return Err(GeoError::Content {
                content: format!("content type {other}"),
            })
        }
    };
    let sniffed = ImageFormat::sniff(&resp.body);
    let format = match (declared, sniffed) {
        (Some(d), Some(s)) if d == s => d,
        (None, Some(s)) => s,
        (Some(d), _) => {
            return Err(GeoError::Content {
                content: format!("body that is not a valid {} image", d.extension()),
            })
        }
        (None, None) => {
            return Err(GeoError::Content {
                content: "an unrecognized body with no content type".into(),
            })
        }
    };

    if let (Some(dir), Some(path)) = (cache, &cache_file) {
        fs::create_dir_all(dir).map_err(|e| GeoError::io(dir, e))?;
        fs::write(path, &resp.body).map_err(|e| GeoError::io(path, e))?;
    }
    Ok(StreetViewImage {
        bytes: resp.body,
        format,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::MemoryTransport;

    fn req(lat: f64, lng: f64) -> StreetViewRequest {
        StreetViewRequest::new(
            GeoLocation::new(lat, lng, 10.0).unwrap(),
            ViewParams {
                size: (640, 320),
                heading: 90.0,
                fov: 90.0,
            },
            "K",
        )
        .unwrap()
    }

    #[test]
    fn url_is_exact() {
        assert_eq!(
            build_streetview_url(&req(12.9876, 77.5432)),
            "https://maps.googleapis.com/maps/api/streetview?size=640x320&location=12.987600,77.543200&heading=90&fov=90&key=K"
        );
        assert!(build_streetview_url(&req(0.0, 0.0)).contains("location=0.000000,0.000000&"));
        assert_eq!(build_streetview_url(&req(1.5, 2.5)), build_streetview_url(&req(1.5, 2.5)));
    }

    #[test]
    fn fractional_heading_uses_shortest_decimal() {
        let mut r = req(1.0, 2.0);
        r.view.heading = 12.5;
        r.view.fov = 0.1;
        assert!(build_streetview_url(&r).contains("&heading=12.5&fov=0.1&"));
    }

    #[test]
    fn ranges_are_enforced() {
        assert!(matches!(GeoLocation::new(91.0, 0.0, 1.0), Err(GeoError::Range(_))));
        assert!(matches!(GeoLocation::new(0.0, -180.5, 1.0), Err(GeoError::Range(_))));
        assert!(matches!(GeoLocation::new(0.0, 0.0, -1.0), Err(GeoError::Range(_))));
        let loc = GeoLocation::new(0.0, 0.0, 0.0).unwrap();
        for view in [
            ViewParams { size: (641, 10), ..Default::default() },
            ViewParams { heading: 360.0, ..Default::default() },
            ViewParams { fov: 0.0, ..Default::default() },
            ViewParams { fov: 120.5, ..Default::default() },
        ] {
            assert!(StreetViewRequest::new(loc, view, "k").is_err(), "{view:?}");
        }
        assert!(StreetViewRequest::new(loc, ViewParams { fov: 120.0, heading: 359.9, ..Default::default() }, "k").is_ok());
    }

    #[test]
    fn geolocate_parses_and_validates() {
        let url = geolocate_url("k");
        let t = MemoryTransport::new().route(
            Method::Post,
            &url,
            Response::ok(r#"{"location":{"lat":-33.86,"lng":151.20},"accuracy":20.0}"#),
        );
        assert_eq!(geolocate(&t, "k").unwrap(), GeoLocation { lat: -33.86, lng: 151.20, accuracy_m: 20.0 });

        let t = MemoryTransport::new().route(
            Method::Post,
            &url,
            Response::ok(r#"{"location":{"lat":91,"lng":0},"accuracy":1}"#),
        );
        assert!(matches!(geolocate(&t, "k"), Err(GeoError::Range(_))));

        let t = MemoryTransport::new().route(Method::Post, &url, Response::with_status(403, "denied"));
        assert!(matches!(geolocate(&t, "k"), Err(GeoError::Http { status: 403, .. })));

        let t = MemoryTransport::new().route(Method::Post, &url, Response::ok("{not json"));
        assert!(matches!(geolocate(&t, "k"), Err(GeoError::Parse(_))));

        let t = MemoryTransport::new().route(Method::Post, &url, Response::ok(r#"{"location":{"lat":1}}"#));
        assert!(matches!(geolocate(&t, "k"), Err(GeoError::Schema(f)) if f == "location.lng"));
    }

    #[test]
    fn metadata_statuses() {
        let r = req(1.0, 2.0);
        let url = metadata_url(&r);
        let with = |body: &str| MemoryTransport::new().route(Method::Get, &url, Response::ok(body.to_string()));
        assert_eq!(
            streetview_metadata(&with(r#"{"status":"OK","pano_id":"abc123"}"#), &r).unwrap(),
            Availability::Available { pano_id: "abc123".into() }
        );
        assert_eq!(
            streetview_metadata(&with(r#"{"status":"ZERO_RESULTS"}"#), &r).unwrap(),
            Availability::NoImagery
        );
        assert!(matches!(
            streetview_metadata(&with(r#"{"status":"REQUEST_DENIED"}"#), &r),
            Err(GeoError::Authorization(_))
        ));
        assert!(matches!(
            streetview_metadata(&with(r#"{"status":"OVER_QUERY_LIMIT"}"#), &r),
            Err(GeoError::ApiStatus(s)) if s == "OVER_QUERY_LIMIT"
        ));
    }

    #[test]
    fn fetch_checks_content_and_caches() {
        let r = req(1.0, 2.0);
        let url = build_streetview_url(&r);
        let png = b"\x89PNG\r\n\x1a\nrest".to_vec();
        let t = MemoryTransport::new().route(
            Method::Get,
            &url,
            Response::ok(png.clone()).with_header("Content-Type", "image/png"),
        );
        let dir = tempfile::tempdir().unwrap();
        let first = fetch_streetview(&t, &r, Some(dir.path())).unwrap();
        assert_eq!(first.format, ImageFormat::Png);
        let second = fetch_streetview(&t, &r, Some(dir.path())).unwrap();
        assert_eq!(first, second);
        assert_eq!(t.calls(), 1);

        let t = MemoryTransport::new().route(
            Method::Get,
            &url,
            Response::ok("<html>").with_header("Content-Type", "text/html"),
        );
        assert!(matches!(fetch_streetview(&t, &r, None), Err(GeoError::Content { .. })));

        let t = MemoryTransport::new().route(Method::Get, &url, Response::with_status(404, ""));
        assert!(matches!(fetch_streetview(&t, &r, None), Err(GeoError::Http { status: 404, .. })));
    }
}
