//! Generative-model service boundary: image/text embeddings, captioning, and
//! mask-conditioned image generation.
//!
//! [`MockBackend`] is a pure function of its inputs and seed and is what
//! tests and CI use. [`RemoteBackend`] speaks the `/v1` HTTP+JSON protocol
//! described in [`wire`].

mod mock;
mod remote;
pub mod wire;

pub use mock::MockBackend;
pub use remote::{RemoteBackend, Semaphore};

use std::io::Cursor;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::embeddings::EmbeddingVector;

pub const DEFAULT_DIMENSION: usize = 768;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error (HTTP {status}): {message}")]
    Remote { status: u16, message: String },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("image dimensions {got:?} do not match mask dimensions {expected:?}")]
    DimensionMismatch {
        expected: (u32, u32),
        got: (u32, u32),
    },
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Timeout | Self::Unavailable(_) => true,
            Self::Remote { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub dimension: usize,
    #[serde(default)]
    pub model_ids: Map<String, Value>,
}

/// The four model calls used by the augmentation pipeline.
pub trait Backend: Send + Sync {
    fn dimension(&self) -> usize;

    /// Upper bound on concurrent calls this backend accepts.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn info(&self) -> Result<BackendInfo, BackendError>;

    fn embed_image(&self, png: &[u8]) -> Result<EmbeddingVector, BackendError>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;

    fn caption_image(&self, png: &[u8], prompt: &str) -> Result<String, BackendError>;

    /// Returns PNG bytes with the same pixel dimensions as `mask_png`.
    fn generate_image(
        &self,
        mask_png: &[u8],
        caption: &str,
        seed: u64,
    ) -> Result<Vec<u8>, BackendError>;
}

/// Width and height from a PNG header without decoding pixels.
pub fn png_dimensions(bytes: &[u8]) -> Result<(u32, u32), BackendError> {
    if bytes.is_empty() {
        return Err(BackendError::EmptyInput("image"));
    }
    image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| BackendError::Decode(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendKind {
    Mock { seed: u64 },
    Remote { endpoint: String },
}

impl FromStr for BackendKind {
    type Err = String;

    /// `mock`, `mock:<seed>`, `remote:<url>`, or `remote` (URL from
    /// `SDAD_BACKEND_URL`).
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "mock" {
            return Ok(Self::Mock { seed: 0 });
        }
        if let Some(seed) = s.strip_prefix("mock:") {
            let seed = seed
                .parse()
                .map_err(|_| format!("bad mock seed '{seed}'"))?;
            return Ok(Self::Mock { seed });
        }
        if s == "remote" {
            let endpoint = std::env::var("SDAD_BACKEND_URL").map_err(|_| {
                "backend 'remote' needs SDAD_BACKEND_URL or remote:<url>".to_string()
            })?;
            return Ok(Self::Remote { endpoint });
        }
        if let Some(url) = s.strip_prefix("remote:") {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(format!("remote endpoint '{url}' must be an http(s) URL"));
            }
            return Ok(Self::Remote {
                endpoint: url.trim_end_matches('/').to_string(),
            });
        }
        Err(format!(
            "unknown backend '{s}' (expected mock or remote:<url>)"
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Embedding dimension; for remote backends `None` means ask `/v1/info`.
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    /// Sent verbatim as `Authorization: Bearer <token>`.
    #[serde(default, skip_serializing)]
    pub bearer_token: Option<String>,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            dimension: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retries: default_retries(),
            backoff_base_ms: default_backoff_ms(),
            bearer_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err("timeout_secs must be positive".into());
        }
        if self.dimension == Some(0) {
            return Err("dimension must be positive".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Construct the configured backend.
    pub fn connect(&self) -> Result<Box<dyn Backend>, BackendError> {
        self.validate().map_err(BackendError::Protocol)?;
        match &self.kind {
            BackendKind::Mock { seed } => Ok(Box::new(
                MockBackend::new(self.dimension.unwrap_or(DEFAULT_DIMENSION), *seed)
                    .with_max_in_flight(self.max_in_flight),
            )),
            BackendKind::Remote { .. } => Ok(Box::new(RemoteBackend::connect(self.clone())?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kinds() {
        assert_eq!(
            "mock".parse::<BackendKind>().unwrap(),
            BackendKind::Mock { seed: 0 }
        );
        assert_eq!(
            "mock:9".parse::<BackendKind>().unwrap(),
            BackendKind::Mock { seed: 9 }
        );
        assert_eq!(
            "remote:http://h:1/".parse::<BackendKind>().unwrap(),
            BackendKind::Remote {
                endpoint: "http://h:1".into()
            }
        );
        assert!("remote:ftp://x".parse::<BackendKind>().is_err());
        assert!("gpu".parse::<BackendKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::new(BackendKind::Mock { seed: 0 });
        c.validate().unwrap();
        c.max_in_flight = 0;
        assert!(c.validate().is_err());
        c.max_in_flight = 1;
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let r: Result<BackendConfig, _> =
            serde_json::from_str(r#"{"kind":{"kind":"mock","seed":1},"bogus":2}"#);
        assert!(r.is_err());
    }

    #[test]
    fn retryable_classification() {
        assert!(BackendError::Timeout.is_retryable());
        assert!(BackendError::Remote {
            status: 503,
            message: String::new()
        }
        .is_retryable());
        assert!(!BackendError::Remote {
            status: 400,
            message: String::new()
        }
        .is_retryable());
        assert!(!BackendError::Protocol(String::new()).is_retryable());
    }
}
