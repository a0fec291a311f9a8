//! Deterministic stand-in backend.
//!
//! Reproducible in any language from this description:
//!
//! * **embeddings** – `h = FNV-1a64(tag ‖ payload)` with tag `"embed_image:"`
//!   or `"embed_text:"` (payload = PNG bytes or UTF-8 text). A SplitMix64
//!   stream seeded with `h ^ seed` yields `d` doubles
//!   `((x >> 11) / 2^53) * 2 - 1`.
//! * **captions** – SplitMix64 seeded with
//!   `FNV-1a64(png) ^ mix64(FNV-1a64(prompt)) ^ seed` picks phrases from fixed
//!   word lists; the object list is copied from the prompt.
//! * **generation** – the mask is recolored pixel by pixel: a pixel with raw
//!   value `v` (gray value, or `r<<16|g<<8|b`) becomes the low three bytes
//!   (big-endian) of `mix64(FNV-1a64(caption) ^ mix64(seed) ^ v)`. Output is
//!   an 8-bit RGB PNG of the mask's size.

use std::collections::HashMap;
use std::io::Cursor;

use image::{DynamicImage, RgbImage};
use serde_json::{Map, Value};

use super::{png_dimensions, Backend, BackendError, BackendInfo};
use crate::embeddings::EmbeddingVector;
use crate::rng::{fnv1a64, fnv1a64_extend, mix64, SplitMix64};

const SCENE: [&str; 6] = ["wide", "narrow", "busy", "quiet", "open", "crowded"];
const BACKDROP: [&str; 5] = [
    "urban buildings",
    "roadside trees",
    "an open horizon",
    "parked vehicles",
    "distant hills",
];
const QUALITY: [&str; 5] = ["sharp", "slightly blurred", "grainy", "high", "moderate"];

#[derive(Debug, Clone)]
pub struct MockBackend {
    dimension: usize,
    seed: u64,
    max_in_flight: usize,
}

impl MockBackend {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            seed,
            max_in_flight: 4,
        }
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn embed(&self, tag: &[u8], payload: &[u8]) -> EmbeddingVector {
        let h = fnv1a64_extend(fnv1a64(tag), payload);
        let mut rng = SplitMix64::new(h ^ self.seed);
        let v = (0..self.dimension)
            .map(|_| rng.next_signed_unit())
            .collect();
        EmbeddingVector::new(v).expect("values in [-1, 1)")
    }
}

/// Objects listed between "objects - " and " - " in a captioning prompt.
fn objects_from_prompt(prompt: &str) -> Option<&str> {
    let start = prompt.find("objects - ")? + "objects - ".len();
    let len = prompt[start..].find(" - ")?;
    Some(&prompt[start..start + len]).filter(|s| !s.trim().is_empty())
}

impl Backend for MockBackend {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn info(&self) -> Result<BackendInfo, BackendError> {
        let mut model_ids = Map::new();
        model_ids.insert("embedder".into(), Value::from("mock-fnv1a-splitmix64"));
        model_ids.insert("captioner".into(), Value::from("mock-template"));
        model_ids.insert("generator".into(), Value::from("mock-recolor"));
        model_ids.insert("seed".into(), Value::from(self.seed));
        Ok(BackendInfo {
            dimension: self.dimension,
            model_ids,
        })
    }

    fn embed_image(&self, png: &[u8]) -> Result<EmbeddingVector, BackendError> {
        png_dimensions(png)?;
        Ok(self.embed(b"embed_image:", png))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyInput("text"));
        }
        Ok(self.embed(b"embed_text:", text.as_bytes()))
    }

    fn caption_image(&self, png: &[u8], prompt: &str) -> Result<String, BackendError> {
        png_dimensions(png)?;
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyInput("prompt"));
        }
        let mut rng = SplitMix64::new(fnv1a64(png) ^ mix64(fnv1a64(prompt.as_bytes())) ^ self.seed);
        let mut pick = |words: &[&'static str]| words[rng.next_below(words.len() as u64) as usize];
        let scene = pick(&SCENE);
        let backdrop = pick(&BACKDROP);
        let quality = pick(&QUALITY);
        let objects = objects_from_prompt(prompt).unwrap_or("several objects");
        Ok(format!(
            "A {scene} street scene showing {objects}. The background has {backdrop} and the image quality is {quality}."
        ))
    }

    fn generate_image(
        &self,
        mask_png: &[u8],
        caption: &str,
        seed: u64,
    ) -> Result<Vec<u8>, BackendError> {
        if caption.trim().is_empty() {
            return Err(BackendError::EmptyInput("caption"));
        }
        if mask_png.is_empty() {
            return Err(BackendError::EmptyInput("mask"));
        }
        let mask = image::load_from_memory_with_format(mask_png, image::ImageFormat::Png)
            .map_err(|e| BackendError::Decode(e.to_string()))?;
        let key = fnv1a64(caption.as_bytes()) ^ mix64(seed ^ self.seed);
        let (w, h) = (mask.width(), mask.height());
        let raw: Vec<u64> = match &mask {
            DynamicImage::ImageLuma8(g) => g.pixels().map(|p| u64::from(p[0])).collect(),
            DynamicImage::ImageLuma16(g) => g.pixels().map(|p| u64::from(p[0])).collect(),
            other => other
                .to_rgb8()
                .pixels()
                .map(|p| (u64::from(p[0]) << 16) | (u64::from(p[1]) << 8) | u64::from(p[2]))
                .collect(),
        };
        let mut colors: HashMap<u64, [u8; 3]> = HashMap::new();
        let mut out = RgbImage::new(w, h);
        for (px, v) in out.pixels_mut().zip(raw) {
            let c = *colors.entry(v).or_insert_with(|| {
                let x = mix64(key ^ v);
                [(x >> 16) as u8, (x >> 8) as u8, x as u8]
            });
            px.0 = c;
        }
        let mut buf = Cursor::new(Vec::new());
        out.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| BackendError::Decode(e.to_string()))?;
        Ok(buf.into_inner())
    }
}
