//! Dataset model and the line-delimited JSON manifest format.
//!
//! A manifest file is one header object followed by one object per sample:
//!
//! ```text
//! {"version":1,"taxonomy":[{"name":"weather","values":[...]}, ...],"provenance":{...}}
//! {"id":"a","image_uri":"img/a.png","mask_uri":"mask/a.png","subgroup":[0,2],...}
//! ```
//!
//! Keys are written in a fixed order with no insignificant whitespace, so
//! saving the same manifest twice gives identical bytes. Relative URIs are
//! resolved against the directory containing the manifest file.

mod taxonomy;

pub use taxonomy::{
    enumerate_subgroups, Dimension, PhraseTemplate, Subgroup, SubgroupTaxonomy, TaxonomyError,
};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MANIFEST_VERSION: u64 = 1;
pub const TOOL_VERSION: &str = concat!("sdad ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field '{field}': {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: {source}")]
    Taxonomy {
        line: usize,
        #[source]
        source: TaxonomyError,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl ManifestError {
    fn schema(line: usize, field: &str, message: impl Into<String>) -> Self {
        Self::Schema {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Name of the offending field for schema errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Schema { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    SegmentationMask,
    /// Driving-policy targets; the URI is opaque and never parsed.
    Waypoints,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_uri: String,
    pub mask_uri: String,
    pub subgroup: Option<Subgroup>,
    /// Row index into the companion embedding store.
    pub embedding_ref: Option<u64>,
    pub origin: Origin,
    pub parent_id: Option<String>,
    pub annotation_kind: AnnotationKind,
}

impl SampleRecord {
    pub fn original(id: &str, image_uri: &str, mask_uri: &str) -> Self {
        Self {
            id: id.to_string(),
            image_uri: image_uri.to_string(),
            mask_uri: mask_uri.to_string(),
            subgroup: None,
            embedding_ref: None,
            origin: Origin::Original,
            parent_id: None,
            annotation_kind: AnnotationKind::SegmentationMask,
        }
    }

    pub fn is_original(&self) -> bool {
        self.origin == Origin::Original
    }
}

/// Where a manifest came from. Serialized with keys in declaration order;
/// `parameters` is a sorted map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub tool_version: String,
    #[serde(default)]
    pub parameters: Map<String, Value>,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            seed: None,
            tool_version: TOOL_VERSION.to_string(),
            parameters: Map::new(),
        }
    }
}

#[derive(Serialize)]
struct Header<'a> {
    version: u64,
    taxonomy: &'a SubgroupTaxonomy,
    provenance: &'a Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub taxonomy: SubgroupTaxonomy,
    pub samples: Vec<SampleRecord>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn new(taxonomy: SubgroupTaxonomy) -> Self {
        Self {
            taxonomy,
            samples: Vec::new(),
            provenance: Provenance::default(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn originals(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.is_original())
    }

    /// Check every record-level and cross-record invariant.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut by_id: HashMap<&str, &SampleRecord> = HashMap::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.id.is_empty() {
                return Err(ManifestError::Invariant("empty sample id".into()));
            }
            if by_id.insert(&s.id, s).is_some() {
                return Err(ManifestError::Invariant(format!("duplicate id '{}'", s.id)));
            }
            if let Some(sg) = &s.subgroup {
                self.taxonomy
                    .check(sg)
                    .map_err(|e| ManifestError::Invariant(format!("sample '{}': {e}", s.id)))?;
            }
        }
        for s in &self.samples {
            match (s.origin, &s.parent_id) {
                (Origin::Original, Some(_)) => {
                    return Err(ManifestError::Invariant(format!(
                        "original sample '{}' has a parent_id",
                        s.id
                    )))
                }
                (Origin::Synthetic, None) => {
                    return Err(ManifestError::Invariant(format!(
                        "synthetic sample '{}' has no parent_id",
                        s.id
                    )))
                }
                (Origin::Synthetic, Some(parent)) => {
                    let p = by_id.get(parent.as_str()).ok_or_else(|| {
                        ManifestError::Invariant(format!(
                            "synthetic sample '{}' references unknown parent '{parent}'",
                            s.id
                        ))
                    })?;
                    if p.mask_uri != s.mask_uri {
                        return Err(ManifestError::Invariant(format!(
                            "synthetic sample '{}' does not reuse its parent's mask",
                            s.id
                        )));
                    }
                }
                (Origin::Original, None) => {}
            }
        }
        Ok(())
    }

    /// Canonical serialized form: header line plus one line per sample, each
    /// terminated by '\n'.
    pub fn to_bytes(&self) -> Result<Vec<u8>, ManifestError> {
        self.validate()?;
        let mut out = Vec::new();
        let header = Header {
            version: MANIFEST_VERSION,
            taxonomy: &self.taxonomy,
            provenance: &self.provenance,
        };
        serde_json::to_writer(&mut out, &header).map_err(io::Error::from)?;
        out.push(b'\n');
        for s in &self.samples {
            serde_json::to_writer(&mut out, s).map_err(io::Error::from)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, ManifestError> {
        let mut lines = reader.lines().enumerate();
        let (taxonomy, provenance) = match lines.next() {
            Some((_, line)) => parse_header(&line?)?,
            None => return Err(ManifestError::schema(1, "version", "missing header line")),
        };
        let mut samples = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line?;
            let record = parse_sample(&line, line_no, &taxonomy)?;
            if !seen.insert(record.id.clone()) {
                return Err(ManifestError::schema(
                    line_no,
                    "id",
                    format!("duplicate id '{}'", record.id),
                ));
            }
            samples.push(record);
        }
        let m = Self {
            taxonomy,
            samples,
            provenance,
        };
        m.validate()?;
        Ok(m)
    }
}

fn parse_object(line: &str, line_no: usize) -> Result<Map<String, Value>, ManifestError> {
    match serde_json::from_str::<Value>(line) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(ManifestError::Parse {
            line: line_no,
            message: "expected a JSON object".into(),
        }),
        Err(e) => Err(ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        }),
    }
}

fn parse_header(line: &str) -> Result<(SubgroupTaxonomy, Provenance), ManifestError> {
    let obj = parse_object(line, 1)?;
    match obj.get("version").and_then(Value::as_u64) {
        Some(MANIFEST_VERSION) => {}
        Some(v) => {
            return Err(ManifestError::schema(
                1,
                "version",
                format!("unsupported version {v}"),
            ))
        }
        None => {
            return Err(ManifestError::schema(
                1,
                "version",
                "missing or not an integer",
            ))
        }
    }
    let dims_value = obj
        .get("taxonomy")
        .ok_or_else(|| ManifestError::schema(1, "taxonomy", "missing"))?;
    let dims: Vec<Dimension> = serde_json::from_value(dims_value.clone())
        .map_err(|e| ManifestError::schema(1, "taxonomy", e.to_string()))?;
    let taxonomy = SubgroupTaxonomy::new(dims)
        .map_err(|source| ManifestError::Taxonomy { line: 1, source })?;
    let provenance = match obj.get("provenance") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| ManifestError::schema(1, "provenance", e.to_string()))?,
        None => return Err(ManifestError::schema(1, "provenance", "missing")),
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "version" | "taxonomy" | "provenance"))
    {
        return Err(ManifestError::schema(1, extra, "unknown header field"));
    }
    Ok((taxonomy, provenance))
}

const SAMPLE_FIELDS: [&str; 8] = [
    "id",
    "image_uri",
    "mask_uri",
    "subgroup",
    "embedding_ref",
    "origin",
    "parent_id",
    "annotation_kind",
];

fn parse_sample(
    line: &str,
    line_no: usize,
    taxonomy: &SubgroupTaxonomy,
) -> Result<SampleRecord, ManifestError> {
    let obj = parse_object(line, line_no)?;
    if let Some(extra) = obj.keys().find(|k| !SAMPLE_FIELDS.contains(&k.as_str())) {
        return Err(ManifestError::schema(
            line_no,
            extra,
            "unknown sample field",
        ));
    }
    let text = |field: &str| -> Result<String, ManifestError> {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(Value::String(_)) => Err(ManifestError::schema(line_no, field, "empty string")),
            Some(_) => Err(ManifestError::schema(line_no, field, "expected a string")),
            None => Err(ManifestError::schema(line_no, field, "missing")),
        }
    };
    let nullable = |field: &str| obj.get(field).filter(|v| !v.is_null());

    let subgroup = match nullable("subgroup") {
        None => None,
        Some(v) => {
            let coords: Vec<usize> = serde_json::from_value(v.clone()).map_err(|_| {
                ManifestError::schema(line_no, "subgroup", "expected an array of indices or null")
            })?;
            let sg = Subgroup::new(coords);
            taxonomy
                .check(&sg)
                .map_err(|source| ManifestError::Taxonomy {
                    line: line_no,
                    source,
                })?;
            Some(sg)
        }
    };
    let embedding_ref = match nullable("embedding_ref") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            ManifestError::schema(line_no, "embedding_ref", "expected a row index or null")
        })?),
    };
    let origin = match obj.get("origin").and_then(Value::as_str) {
        Some("original") => Origin::Original,
        Some("synthetic") => Origin::Synthetic,
        _ => {
            return Err(ManifestError::schema(
                line_no,
                "origin",
                "expected \"original\" or \"synthetic\"",
            ))
        }
    };
    let parent_id = match nullable("parent_id") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            return Err(ManifestError::schema(
                line_no,
                "parent_id",
                "expected a string or null",
            ))
        }
    };
    match (origin, &parent_id) {
        (Origin::Synthetic, None) => {
            return Err(ManifestError::schema(
                line_no,
                "parent_id",
                "required for synthetic samples",
            ))
        }
        (Origin::Original, Some(_)) => {
            return Err(ManifestError::schema(
                line_no,
                "parent_id",
                "must be null for original samples",
            ))
        }
        _ => {}
    }
    let annotation_kind = match obj.get("annotation_kind").and_then(Value::as_str) {
        Some("segmentation_mask") => AnnotationKind::SegmentationMask,
        Some("waypoints") => AnnotationKind::Waypoints,
        _ => {
            return Err(ManifestError::schema(
                line_no,
                "annotation_kind",
                "expected \"segmentation_mask\" or \"waypoints\"",
            ))
        }
    };
    Ok(SampleRecord {
        id: text("id")?,
        image_uri: text("image_uri")?,
        mask_uri: text("mask_uri")?,
        subgroup,
        embedding_ref,
        origin,
        parent_id,
        annotation_kind,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let file = fs::File::open(path)?;
    DatasetManifest::from_reader(BufReader::new(file))
}

/// Validate, then write atomically (temp file + rename).
pub fn save_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let bytes = m.to_bytes()?;
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Resolve a manifest URI. `file://` prefixes are stripped; relative paths
/// are joined onto `base_dir`.
pub fn resolve_uri(base_dir: &Path, uri: &str) -> PathBuf {
    let raw = uri.strip_prefix("file://").unwrap_or(uri);
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Directory that relative URIs in the manifest at `manifest_path` resolve against.
pub fn manifest_base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
