//! Zero-shot subgroup assignment and subgroup distribution analysis.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::embeddings::{l2_normalize, EmbeddingError, EmbeddingStore, EmbeddingVector};
use crate::manifest::{resolve_uri, DatasetManifest, PhraseTemplate, Subgroup, SubgroupTaxonomy};

pub const DEFAULT_BANK_TEMPLATE: &str = "A photo taken in {weather} weather at {time_of_day} time";

#[derive(Debug, Error)]
pub enum SubgroupError {
    #[error("dimension mismatch: bank has {bank}, image has {image}")]
    DimensionMismatch { bank: usize, image: usize },
    #[error("subgroup text bank is empty")]
    EmptyBank,
    #[error("text bank does not cover subgroup {0}")]
    IncompleteBank(String),
    #[error("sample '{0}' has neither a subgroup label nor an embedding")]
    MissingEmbedding(String),
    #[error("sample '{0}' has no subgroup label")]
    UnlabeledSample(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Raw inner product between text and image embeddings.
    #[default]
    Dot,
    /// L2-normalize both sides first.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub subgroup: Subgroup,
    pub text: String,
    pub embedding: EmbeddingVector,
}

/// Text embeddings for every subgroup, in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTextBank {
    pub template: String,
    #[serde(default)]
    pub similarity: Similarity,
    pub entries: Vec<BankEntry>,
}

impl SubgroupTextBank {
    /// Validate against `taxonomy`: one entry per subgroup, in order, equal dimensions.
    pub fn new(
        taxonomy: &SubgroupTaxonomy,
        template: String,
        similarity: Similarity,
        mut entries: Vec<BankEntry>,
    ) -> Result<Self, SubgroupError> {
        if entries.is_empty() {
            return Err(SubgroupError::EmptyBank);
        }
        entries.sort_by(|a, b| a.subgroup.cmp(&b.subgroup));
        let all = taxonomy.enumerate();
        if entries.len() != all.len() {
            let missing = all
                .iter()
                .find(|sg| !entries.iter().any(|e| &e.subgroup == *sg))
                .map(|sg| taxonomy.phrase(sg))
                .unwrap_or_else(|| "(extra entries)".into());
            return Err(SubgroupError::IncompleteBank(missing));
        }
        for (e, sg) in entries.iter().zip(&all) {
            if &e.subgroup != sg {
                return Err(SubgroupError::IncompleteBank(taxonomy.phrase(sg)));
            }
        }
        let d = entries[0].embedding.dimension();
        if let Some(e) = entries.iter().find(|e| e.embedding.dimension() != d) {
            return Err(SubgroupError::DimensionMismatch {
                bank: d,
                image: e.embedding.dimension(),
            });
        }
        Ok(Self {
            template,
            similarity,
            entries,
        })
    }

    /// Embed the rendered prompt of every subgroup with `backend`.
    pub fn build(
        taxonomy: &SubgroupTaxonomy,
        template: Option<&str>,
        similarity: Similarity,
        backend: &dyn Backend,
    ) -> Result<Self, SubgroupError> {
        let tpl = match template {
            Some(t) => PhraseTemplate::new(t),
            None => {
                PhraseTemplate::for_taxonomy(DEFAULT_BANK_TEMPLATE, "A photo taken in", taxonomy)
            }
        };
        let entries = taxonomy
            .enumerate()
            .into_iter()
            .map(|sg| {
                let text = tpl.render(taxonomy, &sg);
                let embedding = backend.embed_text(&text)?;
                Ok(BankEntry {
                    subgroup: sg,
                    text,
                    embedding,
                })
            })
            .collect::<Result<Vec<_>, SubgroupError>>()?;
        Self::new(taxonomy, tpl.0, similarity, entries)
    }

    pub fn dimension(&self) -> usize {
        self.entries.first().map_or(0, |e| e.embedding.dimension())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("bank serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Result of scoring one image against the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub subgroup: Subgroup,
    pub scores: BTreeMap<Subgroup, f64>,
}

/// Pick the subgroup whose text embedding has the largest similarity with
/// `img`. Ties go to the earliest subgroup in enumeration order.
pub fn identify_subgroup(
    img: &EmbeddingVector,
    bank: &SubgroupTextBank,
) -> Result<Identification, SubgroupError> {
    if bank.entries.is_empty() {
        return Err(SubgroupError::EmptyBank);
    }
    if img.dimension() != bank.dimension() {
        return Err(SubgroupError::DimensionMismatch {
            bank: bank.dimension(),
            image: img.dimension(),
        });
    }
    let img = match bank.similarity {
        Similarity::Dot => img.clone(),
        Similarity::Cosine => l2_normalize(img)?,
    };
    let mut scores = BTreeMap::new();
    let mut best: Option<(usize, f64)> = None;
    for (i, entry) in bank.entries.iter().enumerate() {
        let score = match bank.similarity {
            Similarity::Dot => entry.embedding.dot(&img)?,
            Similarity::Cosine => l2_normalize(&entry.embedding)?.dot(&img)?,
        };
        // strict '>' keeps the first maximum
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
        scores.insert(entry.subgroup.clone(), score);
    }
    let (i, _) = best.expect("non-empty bank");
    Ok(Identification {
        subgroup: bank.entries[i].subgroup.clone(),
        scores,
    })
}

/// Assign a subgroup to every sample, reading embeddings from `store`.
///
/// Existing labels are kept unless `overwrite` is set. The provenance
/// records the bank hash and similarity.
pub fn label_dataset(
    m: &DatasetManifest,
    store: Option<&EmbeddingStore>,
    bank: &SubgroupTextBank,
    overwrite: bool,
) -> Result<DatasetManifest, SubgroupError> {
    label_impl(m, store, None, bank, overwrite)
}

/// Like [`label_dataset`], but samples without an `embedding_ref` are
/// embedded by `backend` from their image file (relative URIs resolve
/// against `base_dir`).
pub fn label_dataset_with_backend(
    m: &DatasetManifest,
    store: Option<&EmbeddingStore>,
    backend: &dyn Backend,
    base_dir: &Path,
    bank: &SubgroupTextBank,
    overwrite: bool,
) -> Result<DatasetManifest, SubgroupError> {
    label_impl(m, store, Some((backend, base_dir)), bank, overwrite)
}

fn label_impl(
    m: &DatasetManifest,
    store: Option<&EmbeddingStore>,
    backend: Option<(&dyn Backend, &Path)>,
    bank: &SubgroupTextBank,
    overwrite: bool,
) -> Result<DatasetManifest, SubgroupError> {
    use rayon::prelude::*;

    let labels = m
        .samples
        .par_iter()
        .map(|s| {
            if let (Some(sg), false) = (&s.subgroup, overwrite) {
                return Ok(sg.clone());
            }
            let v = match (s.embedding_ref, store, backend) {
                (Some(row), Some(store), _) => store.get_row(row)?,
                (None, _, Some((b, base))) => {
                    let path = resolve_uri(base, &s.image_uri);
                    let png = std::fs::read(&path).map_err(|e| {
                        SubgroupError::MissingEmbedding(format!(
                            "{}: {}: {e}",
                            s.id,
                            path.display()
                        ))
                    })?;
                    b.embed_image(&png)?
                }
                _ => {
                    return match (&s.subgroup, s.embedding_ref) {
                        (Some(sg), None) => Ok(sg.clone()),
                        _ => Err(SubgroupError::MissingEmbedding(s.id.clone())),
                    }
                }
            };
            Ok(identify_subgroup(&v, bank)?.subgroup)
        })
        .collect::<Result<Vec<_>, SubgroupError>>()?;

    let mut out = m.clone();
    let mut changed = false;
    for (s, sg) in out.samples.iter_mut().zip(labels) {
        if s.subgroup.as_ref() != Some(&sg) {
            changed = true;
            s.subgroup = Some(sg);
        }
    }
    if changed {
        let p = &mut out.provenance.parameters;
        p.insert("bank_hash".into(), bank.content_hash().into());
        p.insert("bank_template".into(), bank.template.clone().into());
        p.insert(
            "bank_similarity".into(),
            serde_json::to_value(bank.similarity).expect("enum serializes"),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupDistribution {
    pub counts: BTreeMap<Subgroup, u64>,
    pub fractions: BTreeMap<Subgroup, f64>,
}

impl SubgroupDistribution {
    /// Build from counts; every subgroup of `taxonomy` gets an entry.
    pub fn from_counts(taxonomy: &SubgroupTaxonomy, counts: &BTreeMap<Subgroup, u64>) -> Self {
        let all = taxonomy.enumerate();
        let total: u64 = all
            .iter()
            .map(|sg| counts.get(sg).copied().unwrap_or(0))
            .sum();
        let mut c = BTreeMap::new();
        let mut f = BTreeMap::new();
        for sg in all {
            let n = counts.get(&sg).copied().unwrap_or(0);
            let frac = if total == 0 {
                0.0
            } else {
                n as f64 / total as f64
            };
            c.insert(sg.clone(), n);
            f.insert(sg, frac);
        }
        Self {
            counts: c,
            fractions: f,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Shannon entropy (nats) of the fractions.
    pub fn entropy(&self) -> f64 {
        self.fractions
            .values()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

pub fn compute_distribution(m: &DatasetManifest) -> Result<SubgroupDistribution, SubgroupError> {
    let mut counts = BTreeMap::new();
    for s in &m.samples {
        let sg = s
            .subgroup
            .as_ref()
            .ok_or_else(|| SubgroupError::UnlabeledSample(s.id.clone()))?;
        *counts.entry(sg.clone()).or_insert(0) += 1;
    }
    Ok(SubgroupDistribution::from_counts(&m.taxonomy, &counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnderrepresentedPolicy {
    /// Fraction below 1/|Z|.
    BelowUniform,
    BelowThreshold(f64),
}

impl std::str::FromStr for UnderrepresentedPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "below_uniform" {
            return Ok(Self::BelowUniform);
        }
        if let Some(t) = s.strip_prefix("below_threshold=") {
            let tau: f64 = t.parse().map_err(|_| format!("bad threshold '{t}'"))?;
            if !(0.0..=1.0).contains(&tau) {
                return Err(format!("threshold {tau} outside [0, 1]"));
            }
            return Ok(Self::BelowThreshold(tau));
        }
        Err(format!(
            "unknown policy '{s}' (expected below_uniform or below_threshold=<tau>)"
        ))
    }
}

/// Subgroups under the policy's cutoff, ascending by fraction, ties in
/// enumeration order.
pub fn underrepresented(d: &SubgroupDistribution, policy: UnderrepresentedPolicy) -> Vec<Subgroup> {
    let cutoff = match policy {
        UnderrepresentedPolicy::BelowUniform => 1.0 / d.fractions.len().max(1) as f64,
        UnderrepresentedPolicy::BelowThreshold(t) => t,
    };
    let mut out: Vec<(&Subgroup, f64)> = d
        .fractions
        .iter()
        .filter(|(_, &f)| f < cutoff)
        .map(|(sg, &f)| (sg, f))
        .collect();
    // stable sort keeps enumeration order among equal fractions
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out.into_iter().map(|(sg, _)| sg.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Dimension, SampleRecord};
    use crate::rng::SplitMix64;

    fn basis(d: usize, i: usize) -> EmbeddingVector {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        EmbeddingVector::new(v).unwrap()
    }

    fn basis_bank(t: &SubgroupTaxonomy) -> SubgroupTextBank {
        let n = t.len();
        let entries = t
            .enumerate()
            .into_iter()
            .enumerate()
            .map(|(i, sg)| BankEntry {
                text: t.phrase(&sg),
                subgroup: sg,
                embedding: basis(n, i),
            })
            .collect();
        SubgroupTextBank::new(t, "x".into(), Similarity::Dot, entries).unwrap()
    }

    fn three_way() -> SubgroupTaxonomy {
        SubgroupTaxonomy::new(vec![Dimension::new("k", &["a", "b", "c"])]).unwrap()
    }

    #[test]
    fn orthonormal_bank_picks_matching_axis() {
        let t = SubgroupTaxonomy::weather_time();
        let bank = basis_bank(&t);
        let id = identify_subgroup(&basis(9, 4), &bank).unwrap();
        assert_eq!(t.index_of(&id.subgroup), 4);
        assert_eq!(id.scores.len(), 9);
    }

    #[test]
    fn ties_go_to_first_subgroup() {
        let t = SubgroupTaxonomy::weather_time();
        let entries = t
            .enumerate()
            .into_iter()
            .map(|sg| BankEntry {
                text: String::new(),
                subgroup: sg,
                embedding: EmbeddingVector::new(vec![1.0, 1.0]).unwrap(),
            })
            .collect();
        let bank = SubgroupTextBank::new(&t, "x".into(), Similarity::Dot, entries).unwrap();
        let id = identify_subgroup(&EmbeddingVector::new(vec![0.3, -0.1]).unwrap(), &bank).unwrap();
        assert_eq!(id.subgroup, t.subgroup_at(0));
    }

    #[test]
    fn dimension_mismatch() {
        let t = SubgroupTaxonomy::weather_time();
        let bank = basis_bank(&t);
        assert!(matches!(
            identify_subgroup(&basis(3, 0), &bank),
            Err(SubgroupError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn incomplete_bank_rejected() {
        let t = three_way();
        let entries = vec![BankEntry {
            subgroup: t.subgroup_at(0),
            text: String::new(),
            embedding: basis(2, 0),
        }];
        assert!(matches!(
            SubgroupTextBank::new(&t, "x".into(), Similarity::Dot, entries),
            Err(SubgroupError::IncompleteBank(_))
        ));
        assert!(matches!(
            SubgroupTextBank::new(&t, "x".into(), Similarity::Dot, vec![]),
            Err(SubgroupError::EmptyBank)
        ));
    }

    #[test]
    fn cosine_changes_scores_not_basis_choice() {
        let t = SubgroupTaxonomy::weather_time();
        let mut bank = basis_bank(&t);
        bank.similarity = Similarity::Cosine;
        let id = identify_subgroup(&basis(9, 7).scaled(5.0), &bank).unwrap();
        assert_eq!(t.index_of(&id.subgroup), 7);
        assert!((id.scores[&id.subgroup] - 1.0).abs() < 1e-12);
    }

    fn labeled(n: usize, sg: &Subgroup) -> DatasetManifest {
        let mut m = DatasetManifest::new(SubgroupTaxonomy::weather_time());
        for i in 0..n {
            let mut s = SampleRecord::original(&format!("s{i}"), "i", "m");
            s.subgroup = Some(sg.clone());
            m.samples.push(s);
        }
        m
    }

    #[test]
    fn label_noop_when_all_labeled() {
        let t = SubgroupTaxonomy::weather_time();
        let m = labeled(5, &t.subgroup_at(3));
        let out = label_dataset(&m, None, &basis_bank(&t), false).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn label_missing_embedding() {
        let t = SubgroupTaxonomy::weather_time();
        let mut m = labeled(1, &t.subgroup_at(0));
        m.samples[0].subgroup = None;
        assert!(matches!(
            label_dataset(&m, None, &basis_bank(&t), false),
            Err(SubgroupError::MissingEmbedding(id)) if id == "s0"
        ));
    }

    #[test]
    fn label_clustered_fixture_ten_per_subgroup() {
        use crate::embeddings::StoreWriter;
        let t = SubgroupTaxonomy::weather_time();
        let mut rng = SplitMix64::new(1);
        let mut w = StoreWriter::new(9);
        let mut m = DatasetManifest::new(t.clone());
        for i in 0..90 {
            let axis = i % 9;
            let v: Vec<f64> = (0..9)
                .map(|k| {
                    if k == axis {
                        1.0
                    } else {
                        0.1 * rng.next_signed_unit()
                    }
                })
                .collect();
            let row = w.push(&v).unwrap();
            let mut s = SampleRecord::original(&format!("s{i}"), "i", "m");
            s.embedding_ref = Some(row);
            m.samples.push(s);
        }
        let store = w.finish().unwrap();
        let out = label_dataset(&m, Some(&store), &basis_bank(&t), false).unwrap();
        let d = compute_distribution(&out).unwrap();
        assert!(d.counts.values().all(|&c| c == 10));
        for (i, s) in out.samples.iter().enumerate() {
            assert_eq!(t.index_of(s.subgroup.as_ref().unwrap()), i % 9);
        }
        assert!(out.provenance.parameters.contains_key("bank_hash"));
    }

    #[test]
    fn distribution_single_subgroup() {
        let t = SubgroupTaxonomy::weather_time();
        let sg = t.parse_phrase("Clear, Day").unwrap();
        let d = compute_distribution(&labeled(10, &sg)).unwrap();
        assert_eq!(d.fractions[&sg], 1.0);
        assert_eq!(d.fractions.values().filter(|&&f| f == 0.0).count(), 8);
        assert_eq!(d.counts.len(), 9);
    }

    #[test]
    fn distribution_sixty_five_thirty_five() {
        let t = SubgroupTaxonomy::weather_time();
        let a = t.subgroup_at(0);
        let b = t.subgroup_at(3);
        let mut m = labeled(65, &a);
        for s in labeled(35, &b).samples {
            let mut s = s;
            s.id = format!("b{}", s.id);
            m.samples.push(s);
        }
        let d = compute_distribution(&m).unwrap();
        // counting oracle
        let na = m
            .samples
            .iter()
            .filter(|s| s.subgroup.as_ref() == Some(&a))
            .count();
        assert_eq!(d.fractions[&a], na as f64 / 100.0);
        assert_eq!(d.fractions[&a], 0.65);
        assert_eq!(d.fractions[&b], 0.35);
        assert!((d.fractions.values().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn distribution_empty_and_unlabeled() {
        let m = DatasetManifest::new(SubgroupTaxonomy::weather_time());
        let d = compute_distribution(&m).unwrap();
        assert!(d.counts.values().all(|&c| c == 0));
        assert!(d.fractions.values().all(|&f| f == 0.0));
        let mut m = labeled(1, &SubgroupTaxonomy::weather_time().subgroup_at(0));
        m.samples[0].subgroup = None;
        assert!(matches!(
            compute_distribution(&m),
            Err(SubgroupError::UnlabeledSample(_))
        ));
    }

    #[test]
    fn underrepresented_policies() {
        let t = three_way();
        let counts = |v: [u64; 3]| t.enumerate().into_iter().zip(v).collect::<BTreeMap<_, _>>();
        let uniform = SubgroupDistribution::from_counts(&t, &counts([5, 5, 5]));
        assert!(underrepresented(&uniform, UnderrepresentedPolicy::BelowUniform).is_empty());

        let skewed = SubgroupDistribution::from_counts(&t, &counts([8, 1, 1]));
        assert_eq!(
            underrepresented(&skewed, UnderrepresentedPolicy::BelowUniform),
            vec![t.subgroup_at(1), t.subgroup_at(2)]
        );
        assert!(underrepresented(&skewed, UnderrepresentedPolicy::BelowThreshold(0.0)).is_empty());

        let mixed = SubgroupDistribution::from_counts(&t, &counts([1, 6, 3]));
        assert_eq!(
            underrepresented(&mixed, UnderrepresentedPolicy::BelowThreshold(0.5)),
            vec![t.subgroup_at(0), t.subgroup_at(2)]
        );
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "below_threshold=0.05"
                .parse::<UnderrepresentedPolicy>()
                .unwrap(),
            UnderrepresentedPolicy::BelowThreshold(0.05)
        );
        assert!("below_threshold=2"
            .parse::<UnderrepresentedPolicy>()
            .is_err());
        assert!("sometimes".parse::<UnderrepresentedPolicy>().is_err());
    }
}
