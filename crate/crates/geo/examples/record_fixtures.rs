//! Regenerates the bundled fixture sets under `fixtures/`.
//!
//! `ok/` covers a location with coverage and a synthetic 640x320 road image;
//! `zero_results/` covers a location without coverage. Both use the default
//! view parameters and the key `offline`.
//!
//!     cargo run -p laneseg-geo --example record_fixtures

use std::io::Cursor;
use std::path::Path;

use laneseg_core::data::synthetic_lane;
use laneseg_core::render::tensor_to_rgb;
use laneseg_core::Rng;
use laneseg_geo::api::geolocate_url;
use laneseg_geo::transport::write_fixture;
use laneseg_geo::{build_streetview_url, metadata_url, GeoLocation, Method, Response, StreetViewRequest, ViewParams};

const KEY: &str = "offline";

fn geolocation_body(lat: f64, lng: f64, accuracy: f64) -> String {
    format!(r#"{{"location":{{"lat":{lat},"lng":{lng}}},"accuracy":{accuracy}}}"#)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let json = |body: String| Response::ok(body).with_header("Content-Type", "application/json; charset=UTF-8");

    let dir = root.join("ok");
    let (lat, lng) = (-33.86, 151.2);
    write_fixture(&dir, Method::Post, &geolocate_url(KEY), &json(geolocation_body(lat, lng, 20.0)))?;
    let req = StreetViewRequest::new(GeoLocation::new(lat, lng, 20.0)?, ViewParams::default(), KEY)?;
    let meta = r#"{"copyright":"synthetic","date":"2024-01","location":{"lat":-33.86,"lng":151.2},"pano_id":"synthetic-pano-0001","status":"OK"}"#;
    write_fixture(&dir, Method::Get, &metadata_url(&req), &json(meta.to_string()))?;
    let (w, h) = req.view.size;
    let road = synthetic_lane(&mut Rng::new(11), (h as usize, w as usize))?;
    let mut png = Vec::new();
    tensor_to_rgb(&road.sample.image, 0)?.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)?;
    let image = Response::ok(png).with_header("Content-Type", "image/png");
    write_fixture(&dir, Method::Get, &build_streetview_url(&req), &image)?;

    let dir = root.join("zero_results");
    let (lat, lng) = (-48.876667, -123.393333);
    write_fixture(&dir, Method::Post, &geolocate_url(KEY), &json(geolocation_body(lat, lng, 1500.0)))?;
    let req = StreetViewRequest::new(GeoLocation::new(lat, lng, 1500.0)?, ViewParams::default(), KEY)?;
    write_fixture(&dir, Method::Get, &metadata_url(&req), &json(r#"{"status":"ZERO_RESULTS"}"#.to_string()))?;

    println!("fixtures written under {}", root.display());
    Ok(())
}
