//! Acquires a street-view image for the machine's current location and runs
//! a lane segmentation network on it.
//!
//! All HTTP goes through [`Transport`], so the whole pipeline can be replayed
//! offline from a directory of recorded responses ([`FixtureTransport`]).

pub mod api;
mod error;
pub mod pipeline;
pub mod transport;

pub use api::{
    build_streetview_url, fetch_streetview, geolocate, metadata_url, streetview_metadata, Availability,
    GeoLocation, StreetViewRequest, ViewParams,
};
pub use error::{redact, GeoError, Result};
pub use pipeline::{predict_at_current_location, write_outputs, Outcome, PipelineError, PipelineOptions, Stage};
#[cfg(feature = "live")]
pub use transport::LiveTransport;
pub use transport::{FixtureTransport, MemoryTransport, Method, NoNetwork, RecordingTransport, Response, Transport};
