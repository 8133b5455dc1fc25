//! Location to lane mask: geolocate, check coverage, fetch the street-view
//! image and segment it with a trained network.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use laneseg_core::data::{decode_rgb, resize_bilinear, BinaryMask};
use laneseg_core::render::{mask_to_gray, overlay, save_png};
use laneseg_core::{Network, Tensor4};

use crate::api::{
    fetch_streetview, geolocate, streetview_metadata, Availability, GeoLocation, StreetViewImage,
    StreetViewRequest, ViewParams,
};
use crate::error::GeoError;
use crate::transport::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Geolocate,
    Metadata,
    Fetch,
    Decode,
    Segment,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Geolocate => "geolocate",
            Stage::Metadata => "street-view metadata",
            Stage::Fetch => "street-view fetch",
            Stage::Decode => "image decode",
            Stage::Segment => "segmentation",
            Stage::Write => "output write",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: GeoError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<GeoError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub location: GeoLocation,
    pub pano_id: String,
    /// Bytes exactly as served.
    pub source: StreetViewImage,
    /// Source resized to the network input, `(1, 3, h, w)`.
    pub input: Tensor4,
    pub mask: BinaryMask,
    pub overlay: RgbImage,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Segmented(Box<Segmentation>),
    NoImagery { location: GeoLocation },
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions<'a> {
    pub view: ViewParams,
    pub cache_dir: Option<&'a Path>,
}

pub fn predict_at_current_location(
    transport: &impl Transport,
    api_key: &str,
    net: &Network,
    opts: &PipelineOptions<'_>,
) -> Result<Outcome, PipelineError> {
    let location = geolocate(transport, api_key).at(Stage::Geolocate)?;
    let req = StreetViewRequest::new(location, opts.view, api_key).at(Stage::Metadata)?;
    let pano_id = match streetview_metadata(transport, &req).at(Stage::Metadata)? {
        Availability::Available { pano_id } => pano_id,
        Availability::NoImagery => return Ok(Outcome::NoImagery { location }),
    };
    let source = fetch_streetview(transport, &req, opts.cache_dir).at(Stage::Fetch)?;
    let (_, h, w) = net.config().input_dims;
    let input = decode_rgb(&source.bytes, "street-view image")
        .and_then(|img| resize_bilinear(&img, (h, w)))
        .at(Stage::Decode)?;
    let (mask, overlay) = segment(net, &input).at(Stage::Segment)?;
    Ok(Outcome::Segmented(Box::new(Segmentation {
        location,
        pano_id,
        source,
        input,
        mask,
        overlay,
    })))
}

/// Mask and overlay for a single `(1, 3, h, w)` image at the network's dims.
pub fn segment(net: &Network, input: &Tensor4) -> laneseg_core::Result<(BinaryMask, RgbImage)> {
    let classes = net.predict(input)?;
    let mask = BinaryMask::from_class_map(&classes, 0);
    let tinted = overlay(input, &mask)?;
    Ok((mask, tinted))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub source: PathBuf,
    pub mask: PathBuf,
    pub overlay: PathBuf,
}

/// Writes `source.{png,jpg}`, `mask.png` and `overlay.png` into `dir`.
pub fn write_outputs(seg: &Segmentation, dir: &Path) -> Result<OutputPaths, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| GeoError::io(dir, e)).at(Stage::Write)?;
    let paths = OutputPaths {
        source: dir.join(format!("source.{}", seg.source.format.extension())),
        mask: dir.join("mask.png"),
        overlay: dir.join("overlay.png"),
    };
    fs::write(&paths.source, &seg.source.bytes)
        .map_err(|e| GeoError::io(&paths.source, e))
        .at(Stage::Write)?;
    save_png(&mask_to_gray(&seg.mask), &paths.mask).at(Stage::Write)?;
    save_png(&seg.overlay, &paths.overlay).at(Stage::Write)?;
    Ok(paths)
}
