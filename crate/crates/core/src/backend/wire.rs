//! `/v1` HTTP+JSON protocol. All endpoints are `POST` with a JSON body;
//! images travel as standard base64 of PNG bytes.
//!
//! | path               | request                                   | response                      |
//! |--------------------|-------------------------------------------|-------------------------------|
//! | `/v1/embed_image`  | `{"image_png_b64"}`                       | `{"embedding": [f64; d]}`     |
//! | `/v1/embed_text`   | `{"text"}`                                | `{"embedding": [f64; d]}`     |
//! | `/v1/caption`      | `{"image_png_b64", "prompt"}`             | `{"caption"}`                 |
//! | `/v1/generate`     | `{"mask_png_b64", "caption", "seed"}`     | `{"image_png_b64"}`           |
//! | `/v1/info`         | `{}`                                      | `{"dimension", "model_ids"}`  |
//!
//! Failures are HTTP 4xx/5xx with `{"error": "..."}`.
//!
//! [`handle`] serves the protocol on top of any [`Backend`], which is how
//! the mock is exposed to cross-implementation tests.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendInfo};

pub const EMBED_IMAGE: &str = "/v1/embed_image";
pub const EMBED_TEXT: &str = "/v1/embed_text";
pub const CAPTION: &str = "/v1/caption";
pub const GENERATE: &str = "/v1/generate";
pub const INFO: &str = "/v1/info";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedImageRequest {
    pub image_png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedTextRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRequest {
    pub image_png_b64: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub mask_png_b64: String,
    pub caption: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoRequest {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image_png_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn decode_b64(s: &str) -> Result<Vec<u8>, BackendError> {
    B64.decode(s)
        .map_err(|e| BackendError::Protocol(format!("invalid base64: {e}")))
}

fn to_body<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("wire types serialize")
}

fn error_body(message: impl Into<String>) -> Vec<u8> {
    to_body(&ErrorResponse {
        error: message.into(),
    })
}

fn status_for(e: &BackendError) -> u16 {
    match e {
        BackendError::Decode(_) | BackendError::EmptyInput(_) => 400,
        BackendError::Timeout => 504,
        BackendError::Remote { status, .. } => *status,
        _ => 500,
    }
}

/// Serve one protocol request. Returns `(status, response body)`.
pub fn handle(backend: &dyn Backend, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
    fn parse<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, (u16, Vec<u8>)> {
        serde_json::from_slice(body).map_err(|e| (400, error_body(format!("bad request: {e}"))))
    }
    fn bytes(b64: &str) -> Result<Vec<u8>, (u16, Vec<u8>)> {
        decode_b64(b64).map_err(|e| (400, error_body(e.to_string())))
    }
    let run = || -> Result<Vec<u8>, (u16, Vec<u8>)> {
        let fail = |e: BackendError| (status_for(&e), error_body(e.to_string()));
        match path {
            EMBED_IMAGE => {
                let req: EmbedImageRequest = parse(body)?;
                let v = backend
                    .embed_image(&bytes(&req.image_png_b64)?)
                    .map_err(fail)?;
                Ok(to_body(&EmbeddingResponse {
                    embedding: v.into_inner(),
                }))
            }
            EMBED_TEXT => {
                let req: EmbedTextRequest = parse(body)?;
                let v = backend.embed_text(&req.text).map_err(fail)?;
                Ok(to_body(&EmbeddingResponse {
                    embedding: v.into_inner(),
                }))
            }
            CAPTION => {
                let req: CaptionRequest = parse(body)?;
                let c = backend
                    .caption_image(&bytes(&req.image_png_b64)?, &req.prompt)
                    .map_err(fail)?;
                Ok(to_body(&CaptionResponse { caption: c }))
            }
            GENERATE => {
                let req: GenerateRequest = parse(body)?;
                let img = backend
                    .generate_image(&bytes(&req.mask_png_b64)?, &req.caption, req.seed)
                    .map_err(fail)?;
                Ok(to_body(&ImageResponse {
                    image_png_b64: encode_b64(&img),
                }))
            }
            INFO => {
                let _: InfoRequest = parse(body)?;
                let info: BackendInfo = backend.info().map_err(fail)?;
                Ok(to_body(&info))
            }
            other => Err((404, error_body(format!("unknown endpoint {other}")))),
        }
    };
    match run() {
        Ok(b) => (200, b),
        Err(e) => e,
    }
}
