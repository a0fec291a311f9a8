use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy has no dimensions")]
    NoDimensions,
    #[error("dimension '{0}' needs at least two values")]
    TooFewValues(String),
    #[error("dimension '{dimension}' repeats value '{value}'")]
    DuplicateValue { dimension: String, value: String },
    #[error("duplicate dimension name '{0}'")]
    DuplicateDimension(String),
    #[error("alias '{alias}' in dimension '{dimension}' points at unknown value '{target}'")]
    BadAlias {
        dimension: String,
        alias: String,
        target: String,
    },
    #[error("subgroup has {got} coordinates, taxonomy has {expected} dimensions")]
    Arity { expected: usize, got: usize },
    #[error("coordinate {index} out of range for dimension '{dimension}' ({len} values)")]
    OutOfRange {
        dimension: String,
        index: usize,
        len: usize,
    },
    #[error("cannot parse subgroup phrase '{0}'")]
    UnknownPhrase(String),
    #[error("template is missing placeholder '{{{0}}}'")]
    TemplatePlaceholder(String),
}

/// One labeled semantic axis, e.g. weather or time of day.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub values: Vec<String>,
    /// Alternative spellings accepted on ingestion, mapped to a canonical value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aliases: BTreeMap<String, String>,
}

impl Dimension {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn with_alias(mut self, alias: &str, canonical: &str) -> Self {
        self.aliases
            .insert(alias.to_string(), canonical.to_string());
        self
    }

    /// Resolve a value name (canonical or alias, case-insensitive) to its index.
    pub fn lookup(&self, name: &str) -> Option<usize> {
        let name = normalize_label(name);
        if let Some(i) = self.values.iter().position(|v| normalize_label(v) == name) {
            return Some(i);
        }
        self.aliases
            .iter()
            .find(|(alias, _)| normalize_label(alias) == name)
            .and_then(|(_, target)| self.values.iter().position(|v| v == target))
    }
}

/// Case-fold and collapse whitespace around '/' so "Dawn/Dusk" == "dawn / dusk".
fn normalize_label(s: &str) -> String {
    s.split('/')
        .map(|part| part.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("/")
        .to_lowercase()
}

/// A cell of the taxonomy cross-product: one value index per dimension.
///
/// Ordering is lexicographic over coordinates, which coincides with the
/// taxonomy enumeration order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Subgroup {
    coords: Vec<usize>,
}

impl Subgroup {
    pub fn new(coords: Vec<usize>) -> Self {
        Self { coords }
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }
}

impl fmt::Display for Subgroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords)
    }
}

/// The finite subgroup set as a cross-product of labeled dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct SubgroupTaxonomy {
    dimensions: Vec<Dimension>,
}

impl<'de> Deserialize<'de> for SubgroupTaxonomy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let dimensions = Vec::<Dimension>::deserialize(d)?;
        SubgroupTaxonomy::new(dimensions).map_err(serde::de::Error::custom)
    }
}

impl SubgroupTaxonomy {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self, TaxonomyError> {
        if dimensions.is_empty() {
            return Err(TaxonomyError::NoDimensions);
        }
        for (i, dim) in dimensions.iter().enumerate() {
            if dimensions[..i].iter().any(|d| d.name == dim.name) {
                return Err(TaxonomyError::DuplicateDimension(dim.name.clone()));
            }
            if dim.values.len() < 2 {
                return Err(TaxonomyError::TooFewValues(dim.name.clone()));
            }
            for (j, v) in dim.values.iter().enumerate() {
                if dim.values[..j]
                    .iter()
                    .any(|w| normalize_label(w) == normalize_label(v))
                {
                    return Err(TaxonomyError::DuplicateValue {
                        dimension: dim.name.clone(),
                        value: v.clone(),
                    });
                }
            }
            for (alias, target) in &dim.aliases {
                if !dim.values.contains(target) {
                    return Err(TaxonomyError::BadAlias {
                        dimension: dim.name.clone(),
                        alias: alias.clone(),
                        target: target.clone(),
                    });
                }
            }
        }
        Ok(Self { dimensions })
    }

    /// Weather × time-of-day taxonomy used by the driving datasets, in the
    /// row order of the per-subgroup result tables.
    pub fn weather_time() -> Self {
        let weather =
            Dimension::new("weather", &["Clear", "Cloudy", "Rain"]).with_alias("Rainy", "Rain");
        let time = Dimension::new("time_of_day", &["Day", "Dawn / Dusk", "Night"])
            .with_alias("Morning", "Day")
            .with_alias("Twilight", "Dawn / Dusk");
        Self::new(vec![weather, time]).expect("built-in taxonomy is valid")
    }

    pub fn dimensions(&self) -> &[Dimension] {
        &self.dimensions
    }

    /// |Z|, the product of dimension cardinalities.
    pub fn len(&self) -> usize {
        self.dimensions.iter().map(|d| d.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check(&self, sg: &Subgroup) -> Result<(), TaxonomyError> {
        if sg.coords.len() != self.dimensions.len() {
            return Err(TaxonomyError::Arity {
                expected: self.dimensions.len(),
                got: sg.coords.len(),
            });
        }
        for (dim, &index) in self.dimensions.iter().zip(&sg.coords) {
            if index >= dim.values.len() {
                return Err(TaxonomyError::OutOfRange {
                    dimension: dim.name.clone(),
                    index,
                    len: dim.values.len(),
                });
            }
        }
        Ok(())
    }

    /// Position of `sg` in enumeration order (mixed radix, first dimension
    /// most significant). `sg` must be valid for this taxonomy.
    pub fn index_of(&self, sg: &Subgroup) -> usize {
        self.dimensions
            .iter()
            .zip(&sg.coords)
            .fold(0, |acc, (dim, &c)| acc * dim.values.len() + c)
    }

    pub fn subgroup_at(&self, mut index: usize) -> Subgroup {
        let mut coords = vec![0; self.dimensions.len()];
        for (slot, dim) in coords.iter_mut().zip(&self.dimensions).rev() {
            *slot = index % dim.values.len();
            index /= dim.values.len();
        }
        Subgroup::new(coords)
    }

    pub fn enumerate(&self) -> Vec<Subgroup> {
        (0..self.len()).map(|i| self.subgroup_at(i)).collect()
    }

    pub fn values_of<'a>(&'a self, sg: &Subgroup) -> impl Iterator<Item = &'a str> + 'a {
        let coords = sg.coords.clone();
        self.dimensions
            .iter()
            .zip(coords)
            .map(|(d, c)| d.values[c].as_str())
    }

    /// Stable report key, e.g. "Cloudy, Night".
    pub fn phrase(&self, sg: &Subgroup) -> String {
        self.values_of(sg).collect::<Vec<_>>().join(", ")
    }

    /// Inverse of [`phrase`](Self::phrase); also accepts aliases and loose
    /// spacing ("Clear, Dawn/Dusk", "rainy, morning").
    pub fn parse_phrase(&self, phrase: &str) -> Result<Subgroup, TaxonomyError> {
        let parts: Vec<&str> = phrase.split(',').map(str::trim).collect();
        if parts.len() != self.dimensions.len() {
            return Err(TaxonomyError::UnknownPhrase(phrase.to_string()));
        }
        let coords = self
            .dimensions
            .iter()
            .zip(parts)
            .map(|(dim, part)| {
                dim.lookup(part)
                    .ok_or_else(|| TaxonomyError::UnknownPhrase(phrase.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Subgroup::new(coords))
    }

    /// All surface forms (canonical values and aliases) of every dimension.
    pub fn vocabulary(&self) -> Vec<&str> {
        self.dimensions
            .iter()
            .flat_map(|d| {
                d.values
                    .iter()
                    .map(String::as_str)
                    .chain(d.aliases.keys().map(String::as_str))
            })
            .collect()
    }
}

/// Free-function form of [`SubgroupTaxonomy::enumerate`].
pub fn enumerate_subgroups(taxonomy: &SubgroupTaxonomy) -> Vec<Subgroup> {
    taxonomy.enumerate()
}

/// Text template with `{dimension_name}` placeholders, rendered with
/// lowercase values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhraseTemplate(pub String);

impl PhraseTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Every dimension must appear, otherwise rendering is not injective.
    pub fn check(&self, taxonomy: &SubgroupTaxonomy) -> Result<(), TaxonomyError> {
        for dim in taxonomy.dimensions() {
            if !self.0.contains(&format!("{{{}}}", dim.name)) {
                return Err(TaxonomyError::TemplatePlaceholder(dim.name.clone()));
            }
        }
        Ok(())
    }

    pub fn render(&self, taxonomy: &SubgroupTaxonomy, sg: &Subgroup) -> String {
        let mut out = self.0.clone();
        for (dim, value) in taxonomy.dimensions().iter().zip(taxonomy.values_of(sg)) {
            out = out.replace(&format!("{{{}}}", dim.name), &value.to_lowercase());
        }
        out
    }

    /// `preferred` if it covers every dimension, else a generic template
    /// listing all dimensions in order.
    pub fn for_taxonomy(
        preferred: &str,
        fallback_prefix: &str,
        taxonomy: &SubgroupTaxonomy,
    ) -> Self {
        let t = Self::new(preferred);
        if t.check(taxonomy).is_ok() {
            return t;
        }
        let slots = taxonomy
            .dimensions()
            .iter()
            .map(|d| format!("{{{}}}", d.name))
            .collect::<Vec<_>>()
            .join(", ");
        Self(format!("{fallback_prefix} {slots} conditions"))
    }
}
