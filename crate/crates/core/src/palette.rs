//! Class palettes and semantic mask decoding.
//!
//! Two mask encodings are accepted: 8/16-bit single-channel PNGs whose
//! pixel value is the class id, and color PNGs whose RGB triple is looked
//! up in the palette.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("cannot decode mask: {0}")]
    Decode(String),
    #[error("mask has no pixels")]
    EmptyMask,
    #[error("pixel value {0} is not in the palette")]
    UnknownClassValue(String),
    #[error("palette: {0}")]
    Palette(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteClass {
    pub id: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
}

/// Dataset class palette. Class order in the file is the palette order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub classes: Vec<PaletteClass>,
}

impl Palette {
    pub fn new(classes: Vec<PaletteClass>) -> Result<Self, MaskError> {
        if classes.is_empty() {
            return Err(MaskError::Palette("no classes".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].iter().any(|o| o.id == c.id) {
                return Err(MaskError::Palette(format!("duplicate id {}", c.id)));
            }
            if classes[..i].iter().any(|o| o.name == c.name) {
                return Err(MaskError::Palette(format!("duplicate name '{}'", c.name)));
            }
            if c.color.is_some() && classes[..i].iter().any(|o| o.color == c.color) {
                return Err(MaskError::Palette(format!(
                    "duplicate color for '{}'",
                    c.name
                )));
            }
        }
        Ok(Self { classes })
    }

    pub fn from_names(names: &[&str]) -> Self {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| PaletteClass {
                    id: i as u32,
                    name: n.to_string(),
                    color: None,
                })
                .collect(),
        )
        .expect("distinct names")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MaskError> {
        let text = fs::read_to_string(path)?;
        let p: Palette =
            serde_json::from_str(&text).map_err(|e| MaskError::Palette(e.to_string()))?;
        Self::new(p.classes)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Palette position of class `id`.
    pub fn position(&self, id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    /// Largest class id plus one; confusion matrices are sized by this.
    pub fn id_span(&self) -> usize {
        self.classes
            .iter()
            .map(|c| c.id as usize + 1)
            .max()
            .unwrap_or(0)
    }
}

/// Decoded mask as a grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u32>,
}

impl MaskGrid {
    pub fn new(width: u32, height: u32, ids: Vec<u32>) -> Self {
        assert_eq!(ids.len(), width as usize * height as usize);
        Self { width, height, ids }
    }
}

/// Decode PNG mask bytes into class ids. Color masks need palette colors.
pub fn decode_mask(bytes: &[u8], palette: &Palette) -> Result<MaskGrid, MaskError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| MaskError::Decode(e.to_string()))?;
    let (width, height) = (img.width(), img.height());
    if width == 0 || height == 0 {
        return Err(MaskError::EmptyMask);
    }
    let ids = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(u32::from)
            .collect(),
        other => {
            let lookup: HashMap<[u8; 3], u32> = palette
                .classes
                .iter()
                .filter_map(|c| c.color.map(|rgb| (rgb, c.id)))
                .collect();
            if lookup.is_empty() {
                return Err(MaskError::Palette(
                    "color mask given but palette has no colors".into(),
                ));
            }
            other
                .to_rgb8()
                .pixels()
                .map(|p| {
                    lookup.get(&p.0).copied().ok_or_else(|| {
                        MaskError::UnknownClassValue(format!("rgb({},{},{})", p[0], p[1], p[2]))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(MaskGrid::new(width, height, ids))
}

pub fn read_mask(path: impl AsRef<Path>, palette: &Palette) -> Result<MaskGrid, MaskError> {
    decode_mask(&fs::read(path)?, palette)
}

/// Encode class ids as an 8-bit grayscale PNG. Ids must be < 256.
pub fn encode_id_mask(grid: &MaskGrid) -> Vec<u8> {
    let raw: Vec<u8> = grid
        .ids
        .iter()
        .map(|&id| u8::try_from(id).expect("id fits in 8 bits"))
        .collect();
    let img = image::GrayImage::from_raw(grid.width, grid.height, raw).expect("sized buffer");
    let mut out = io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encode");
    out.into_inner()
}
