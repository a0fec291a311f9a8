use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, *};
use super::{png_dimensions, Backend, BackendConfig, BackendError, BackendInfo, BackendKind};
use crate::embeddings::EmbeddingVector;

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore lock");
        }
        *n -= 1;
        Permit(self)
    }

    pub fn available(&self) -> usize {
        *self.permits.lock().expect("semaphore lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

/// HTTP client for the `/v1` protocol.
///
/// Every call holds one of `max_in_flight` permits while on the wire, has a
/// per-request timeout, and is retried on transient failures with
/// exponential backoff. Retrying `generate` resends the identical request,
/// seed included.
pub struct RemoteBackend {
    endpoint: String,
    dimension: usize,
    config: BackendConfig,
    agent: ureq::Agent,
    gate: Semaphore,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("endpoint", &self.endpoint)
            .field("dimension", &self.dimension)
            .finish()
    }
}

impl RemoteBackend {
    /// Build the client; if no dimension is configured, ask `/v1/info`.
    pub fn connect(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::Protocol)?;
        let BackendKind::Remote { endpoint } = &config.kind else {
            return Err(BackendError::Protocol("not a remote backend config".into()));
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            dimension: config.dimension.unwrap_or(0),
            gate: Semaphore::new(config.max_in_flight),
            config,
            agent,
        };
        if client.dimension == 0 {
            let info = client.info()?;
            if info.dimension == 0 {
                return Err(BackendError::Protocol("server reports dimension 0".into()));
            }
            client.dimension = info.dimension;
        }
        Ok(client)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_once(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, BackendError> {
        let _permit = self.gate.acquire();
        let mut req = self
            .agent
            .post(&format!("{}{}", self.endpoint, path))
            .header("Content-Type", "application/json");
        if let Some(token) = &self.config.bearer_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(map_transport)?;
        if status >= 400 {
            let message = serde_json::from_slice::<ErrorResponse>(&bytes)
                .map(|e| e.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            return Err(BackendError::Remote { status, message });
        }
        Ok(bytes)
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Resp, BackendError> {
        let body = serde_json::to_vec(req).expect("wire types serialize");
        let mut attempt = 0;
        loop {
            match self.post_once(path, &body) {
                Ok(bytes) => {
                    return serde_json::from_slice(&bytes).map_err(|e| {
                        BackendError::Protocol(format!("{path}: malformed response: {e}"))
                    })
                }
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    let delay = self
                        .config
                        .backoff_base_ms
                        .saturating_mul(1 << attempt.min(16));
                    warn!("{path} failed ({e}); retry {} in {delay} ms", attempt + 1);
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(e) => {
                    debug!("{path} failed after {} attempt(s): {e}", attempt + 1);
                    return Err(e);
                }
            }
        }
    }

    fn check_embedding(&self, r: EmbeddingResponse) -> Result<EmbeddingVector, BackendError> {
        if r.embedding.len() != self.dimension {
            return Err(BackendError::Protocol(format!(
                "embedding has dimension {}, expected {}",
                r.embedding.len(),
                self.dimension
            )));
        }
        EmbeddingVector::new(r.embedding).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

fn map_transport(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout,
        ureq::Error::Io(io) => BackendError::Unavailable(io.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            BackendError::Unavailable(e.to_string())
        }
        other => BackendError::Protocol(other.to_string()),
    }
}

impl Backend for RemoteBackend {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn info(&self) -> Result<BackendInfo, BackendError> {
        self.call(wire::INFO, &InfoRequest {})
    }

    fn embed_image(&self, png: &[u8]) -> Result<EmbeddingVector, BackendError> {
        png_dimensions(png)?;
        let r = self.call(
            wire::EMBED_IMAGE,
            &EmbedImageRequest {
                image_png_b64: encode_b64(png),
            },
        )?;
        self.check_embedding(r)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyInput("text"));
        }
        let r = self.call(
            wire::EMBED_TEXT,
            &EmbedTextRequest {
                text: text.to_string(),
            },
        )?;
        self.check_embedding(r)
    }

    fn caption_image(&self, png: &[u8], prompt: &str) -> Result<String, BackendError> {
        png_dimensions(png)?;
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyInput("prompt"));
        }
        let r: CaptionResponse = self.call(
            wire::CAPTION,
            &CaptionRequest {
                image_png_b64: encode_b64(png),
                prompt: prompt.to_string(),
            },
        )?;
        if r.caption.trim().is_empty() {
            return Err(BackendError::Protocol("empty caption".into()));
        }
        Ok(r.caption)
    }

    fn generate_image(
        &self,
        mask_png: &[u8],
        caption: &str,
        seed: u64,
    ) -> Result<Vec<u8>, BackendError> {
        let expected = png_dimensions(mask_png)?;
        if caption.trim().is_empty() {
            return Err(BackendError::EmptyInput("caption"));
        }
        let r: ImageResponse = self.call(
            wire::GENERATE,
            &GenerateRequest {
                mask_png_b64: encode_b64(mask_png),
                caption: caption.to_string(),
                seed,
            },
        )?;
        let img = decode_b64(&r.image_png_b64)?;
        let got = png_dimensions(&img)?;
        if got != expected {
            return Err(BackendError::DimensionMismatch { expected, got });
        }
        Ok(img)
    }
}
