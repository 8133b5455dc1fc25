use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum GeoError {
    #[error("HTTP {status} from {url}")]
    Http { status: u16, url: String },

    #[error("request to {url} failed: {message}")]
    Network { url: String, message: String },

    #[error("malformed response body: {0}")]
    Parse(String),

    #[error("response is missing required field {0}")]
    Schema(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("API key rejected: {0}")]
    Authorization(String),

    #[error("API returned status {0}")]
    ApiStatus(String),

    #[error("expected image content, got {content}")]
    Content { content: String },

    #[error("no fixture {key} for {method} {url}")]
    FixtureMissing {
        key: String,
        method: &'static str,
        url: String,
    },

    #[error("malformed fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },

    #[error("network contact attempted: {method} {url}")]
    NetworkContact { method: &'static str, url: String },

    #[error("live HTTP support was not compiled in")]
    LiveUnavailable,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] laneseg_core::Error),
}

pub type Result<T, E = GeoError> = std::result::Result<T, E>;

impl GeoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeoError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Replaces the value of any `key=` query parameter so keys never reach
/// logs or error messages.
pub fn redact(url: &str) -> String {
    let Some((base, query)) = url.split_once('?') else {
        return url.to_string();
    };
    let query: Vec<String> = query
        .split('&')
        .map(|kv| match kv.split_once('=') {
            Some(("key", _)) => "key=REDACTED".to_string(),
            _ => kv.to_string(),
        })
        .collect();
    format!("{base}?{}", query.join("&"))
}

#[cfg(test)]
mod tests {
    use super::redact;

    #[test]
    fn redacts_key_only() {
        assert_eq!(
            redact("https://x/y?size=1x1&key=SECRET&fov=90"),
            "https://x/y?size=1x1&key=REDACTED&fov=90"
        );
        assert_eq!(redact("https://x/y"), "https://x/y");
    }
}
