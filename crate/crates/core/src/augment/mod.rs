//! Synthetic data augmentation.
//!
//! Each of `n_synth` jobs samples an original (x, y), identifies its
//! subgroup z, captions x with subgroup terms scrubbed, picks a target z*,
//! appends the z* style sentence to the caption, and generates a new image
//! conditioned on the unchanged mask y. The synthetic sample reuses y as its
//! annotation.
//!
//! Every job draws from its own SplitMix64 stream derived from the plan seed
//! and the job index, in a fixed order: source sample, target subgroup
//! (uniform policy only), generation seed. Results therefore do not depend
//! on scheduling, and finished jobs can be skipped on a rerun.

mod balance;
mod journal;

pub use balance::balance_targets;
pub use journal::{journal_path, read_journal, JournalWriter, JOURNAL_FILE};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{png_dimensions, Backend, BackendError};
use crate::caption::{
    build_vlm_prompt, classes_in_grid, scrub_subgroup_terms, CaptionCache, CaptionError,
    CaptionStyle,
};
use crate::embeddings::EmbeddingStore;
use crate::manifest::{
    resolve_uri, DatasetManifest, ManifestError, Origin, SampleRecord, Subgroup, SubgroupTaxonomy,
};
use crate::palette::{decode_mask, MaskError, Palette};
use crate::rng::SplitMix64;
use crate::subgroup::{
    hex_digest, identify_subgroup, SubgroupDistribution, SubgroupError, SubgroupTextBank,
};

pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    /// z* uniform over every subgroup except the source's.
    #[default]
    UniformExcludingSource,
    /// Targets allocated by [`balance_targets`]; sources drawn uniformly
    /// among originals outside the target subgroup.
    BalanceToUniform,
}

/// Where the conditioning mask for generation comes from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// The sample's own `mask_uri`.
    #[default]
    DatasetMask,
    /// `<dir>/<sample id>.png`, produced by an external segmentation model.
    ExternalSegmenter { dir: PathBuf },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPlan {
    pub n_synth: u64,
    pub seed: u64,
    #[serde(default)]
    pub target_policy: TargetPolicy,
    /// Reuse base captions per (sample, prompt). Off re-captions every job.
    #[serde(default = "default_true")]
    pub caption_cache: bool,
    #[serde(default)]
    pub mask_source: MaskSource,
}

impl AugmentationPlan {
    pub fn new(n_synth: u64, seed: u64) -> Self {
        Self {
            n_synth,
            seed,
            target_policy: TargetPolicy::default(),
            caption_cache: true,
            mask_source: MaskSource::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AugmentError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AugmentError::Plan(e.to_string()))
    }
}

/// One completed job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub job_index: u64,
    pub source_id: String,
    pub source_subgroup: Subgroup,
    pub target_subgroup: Subgroup,
    pub styled_caption: String,
    pub generate_seed: u64,
    pub image_uri: String,
    pub image_sha256: String,
    pub wall_time_ms: u64,
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Invariant(String),
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("dataset has no original samples")]
    EmptyDataset,
    #[error("taxonomy has a single subgroup; no target can differ from the source")]
    SingletonTaxonomy,
    #[error("no original sample outside subgroup '{0}' to draw from")]
    NoSource(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("labeling sample '{sample}': {source}")]
    Label {
        sample: String,
        source: SubgroupError,
    },
    #[error("job {index}: {source}")]
    Job { index: u64, source: JobError },
    #[error("journal: {0}")]
    Journal(String),
    #[error("post-condition violated: {0}")]
    Invariant(String),
}

impl AugmentError {
    /// True when the failure came from the generative backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Self::Job {
                source: JobError::Backend(_),
                ..
            } | Self::Label {
                source: SubgroupError::Backend(_),
                ..
            }
        )
    }
}

/// Draw one original sample uniformly.
pub fn sample_source<'a>(
    m: &'a DatasetManifest,
    rng: &mut SplitMix64,
) -> Result<&'a SampleRecord, AugmentError> {
    let originals: Vec<&SampleRecord> = m.originals().collect();
    if originals.is_empty() {
        return Err(AugmentError::EmptyDataset);
    }
    Ok(originals[rng.next_below(originals.len() as u64) as usize])
}

/// Draw z* uniformly from the subgroups other than `z`.
pub fn sample_target_subgroup(
    z: &Subgroup,
    t: &SubgroupTaxonomy,
    rng: &mut SplitMix64,
) -> Result<Subgroup, AugmentError> {
    let n = t.len();
    if n < 2 {
        return Err(AugmentError::SingletonTaxonomy);
    }
    let zi = t.index_of(z);
    let k = rng.next_below(n as u64 - 1) as usize;
    Ok(t.subgroup_at(if k >= zi { k + 1 } else { k }))
}

/// File locations and optional inputs for [`augment_dataset`].
#[derive(Debug, Clone, Copy)]
pub struct AugmentPaths<'a> {
    /// Directory that relative URIs in the input manifest resolve against.
    pub input_dir: &'a Path,
    /// Receives `images/`, `journal.jsonl`; synthetic image URIs are relative to it.
    pub out_dir: &'a Path,
    pub palette: &'a Palette,
    /// Precomputed image embeddings for unlabeled samples with an `embedding_ref`.
    pub store: Option<&'a EmbeddingStore>,
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    /// D_aug: the input manifest followed by synthetic samples in job order.
    pub manifest: DatasetManifest,
    /// One record per job, in job order.
    pub records: Vec<AugmentationRecord>,
    /// Jobs taken from an existing journal instead of being rerun.
    pub resumed: usize,
}

pub fn synthetic_id(parent_id: &str, job_index: u64) -> String {
    format!("{parent_id}#syn{job_index}")
}

pub fn synthetic_image_uri(job_index: u64) -> String {
    format!("{IMAGES_DIR}/{job_index}.png")
}

fn read_file(path: &Path) -> Result<Vec<u8>, JobError> {
    fs::read(path).map_err(|source| JobError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Subgroup of every original, in manifest order.
fn label_originals(
    originals: &[&SampleRecord],
    backend: &dyn Backend,
    bank: &SubgroupTextBank,
    paths: &AugmentPaths<'_>,
) -> Result<Vec<Subgroup>, AugmentError> {
    originals
        .par_iter()
        .map(|s| {
            let label_err = |source: SubgroupError| AugmentError::Label {
                sample: s.id.clone(),
                source,
            };
            if let Some(sg) = &s.subgroup {
                return Ok(sg.clone());
            }
            let v = match (s.embedding_ref, paths.store) {
                (Some(row), Some(store)) => store.get_row(row).map_err(|e| label_err(e.into()))?,
                _ => {
                    let path = resolve_uri(paths.input_dir, &s.image_uri);
                    let png = fs::read(&path)?;
                    backend.embed_image(&png).map_err(|e| label_err(e.into()))?
                }
            };
            Ok(identify_subgroup(&v, bank).map_err(label_err)?.subgroup)
        })
        .collect()
}

/// How a job picks its source and target.
enum Targets {
    Uniform,
    /// Per-job target index and, per target index, the eligible sources.
    Balanced {
        by_job: Vec<usize>,
        sources: BTreeMap<usize, Vec<usize>>,
    },
}

fn plan_targets(
    plan: &AugmentationPlan,
    taxonomy: &SubgroupTaxonomy,
    labels: &[Subgroup],
) -> Result<Targets, AugmentError> {
    if plan.target_policy == TargetPolicy::UniformExcludingSource {
        return Ok(Targets::Uniform);
    }
    let mut counts = BTreeMap::new();
    for sg in labels {
        *counts.entry(sg.clone()).or_insert(0u64) += 1;
    }
    let d = SubgroupDistribution::from_counts(taxonomy, &counts);
    let alloc = balance_targets(&d, plan.n_synth);
    let mut by_job = Vec::with_capacity(plan.n_synth as usize);
    let mut sources = BTreeMap::new();
    for (sg, n) in alloc {
        if n == 0 {
            continue;
        }
        let ti = taxonomy.index_of(&sg);
        let eligible: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != sg).collect();
        if eligible.is_empty() {
            return Err(AugmentError::NoSource(taxonomy.phrase(&sg)));
        }
        sources.insert(ti, eligible);
        by_job.extend(std::iter::repeat_n(ti, n as usize));
    }
    Ok(Targets::Balanced { by_job, sources })
}

/// Everything a job needs, shared across worker threads.
struct JobContext<'a> {
    plan: &'a AugmentationPlan,
    taxonomy: &'a SubgroupTaxonomy,
    originals: &'a [&'a SampleRecord],
    labels: &'a [Subgroup],
    targets: &'a Targets,
    backend: &'a dyn Backend,
    paths: &'a AugmentPaths<'a>,
    style: CaptionStyle,
    cache: CaptionCache,
    journal: &'a JournalWriter,
}

impl JobContext<'_> {
    /// Source index, target, and generation seed for job `j`.
    fn draws(&self, j: u64) -> (usize, Subgroup, u64) {
        let mut rng = SplitMix64::for_job(self.plan.seed, j);
        let (src, target) = match self.targets {
            Targets::Uniform => {
                let src = rng.next_below(self.originals.len() as u64) as usize;
                let t = sample_target_subgroup(&self.labels[src], self.taxonomy, &mut rng)
                    .expect("taxonomy size checked");
                (src, t)
            }
            Targets::Balanced { by_job, sources } => {
                let ti = by_job[j as usize];
                let eligible = &sources[&ti];
                let src = eligible[rng.next_below(eligible.len() as u64) as usize];
                (src, self.taxonomy.subgroup_at(ti))
            }
        };
        (src, target, rng.next_u64())
    }

    fn mask_path(&self, s: &SampleRecord) -> PathBuf {
        match &self.plan.mask_source {
            MaskSource::DatasetMask => resolve_uri(self.paths.input_dir, &s.mask_uri),
            MaskSource::ExternalSegmenter { dir } => dir.join(format!("{}.png", s.id)),
        }
    }

    fn run(&self, j: u64) -> Result<AugmentationRecord, JobError> {
        let started = Instant::now();
        let (src, target, generate_seed) = self.draws(j);
        let s = self.originals[src];
        let z = &self.labels[src];

        let mask_png = read_file(&self.mask_path(s))?;
        let grid = decode_mask(&mask_png, self.paths.palette)?;
        let prompt = build_vlm_prompt(&classes_in_grid(&grid, self.paths.palette)?, self.taxonomy)?;

        let cached = if self.plan.caption_cache {
            self.cache.get(&s.id, &prompt)
        } else {
            None
        };
        let base = match cached {
            Some(c) => c,
            None => {
                let image = read_file(&resolve_uri(self.paths.input_dir, &s.image_uri))?;
                let c = self.backend.caption_image(&image, &prompt)?;
                if self.plan.caption_cache {
                    self.cache.insert(&s.id, &prompt, c.clone());
                }
                c
            }
        };
        let scrubbed = scrub_subgroup_terms(&base, self.taxonomy);
        let styled = self.style.compose(&scrubbed, self.taxonomy, &target)?;

        let out = self
            .backend
            .generate_image(&mask_png, &styled, generate_seed)?;
        let dims = png_dimensions(&out)?;
        if dims != (grid.width, grid.height) {
            return Err(JobError::Invariant(format!(
                "generated image is {}x{}, mask is {}x{}",
                dims.0, dims.1, grid.width, grid.height
            )));
        }
        let image_uri = synthetic_image_uri(j);
        let path = self.paths.out_dir.join(&image_uri);
        let tmp = path.with_extension("png.tmp");
        let io_err = |source| JobError::Io {
            path: path.clone(),
            source,
        };
        fs::write(&tmp, &out).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;

        let record = AugmentationRecord {
            job_index: j,
            source_id: s.id.clone(),
            source_subgroup: z.clone(),
            target_subgroup: target,
            styled_caption: styled,
            generate_seed,
            image_uri,
            image_sha256: hex_digest(&out),
            wall_time_ms: started.elapsed().as_millis() as u64,
        };
        self.journal.append(&record).map_err(|e| match e {
            AugmentError::Io(source) => JobError::Io {
                path: journal_path(self.paths.out_dir),
                source,
            },
            other => JobError::Invariant(other.to_string()),
        })?;
        Ok(record)
    }
}

/// Identifies everything that determines the outputs of a run.
fn plan_hash(
    m: &DatasetManifest,
    plan: &AugmentationPlan,
    bank: &SubgroupTextBank,
    backend_info: &Value,
) -> Result<String, AugmentError> {
    let key = json!({
        "manifest_sha256": hex_digest(&m.to_bytes()?),
        "plan": plan,
        "bank_hash": bank.content_hash(),
        "backend": backend_info,
    });
    Ok(hex_digest(
        &serde_json::to_vec(&key).expect("json value serializes"),
    ))
}

/// Keep journal records whose image file is intact and whose job index is in range.
fn verified_records(
    records: BTreeMap<u64, AugmentationRecord>,
    n_synth: u64,
    out_dir: &Path,
) -> BTreeMap<u64, AugmentationRecord> {
    records
        .into_iter()
        .filter(|(j, r)| {
            *j < n_synth
                && fs::read(out_dir.join(&r.image_uri))
                    .map(|b| hex_digest(&b) == r.image_sha256)
                    .unwrap_or(false)
        })
        .collect()
}

fn check_outcome(
    m: &DatasetManifest,
    plan: &AugmentationPlan,
    records: &[AugmentationRecord],
) -> Result<(), AugmentError> {
    let fail = |msg: String| Err(AugmentError::Invariant(msg));
    if records.len() as u64 != plan.n_synth {
        return fail(format!(
            "{} records for {} jobs",
            records.len(),
            plan.n_synth
        ));
    }
    for (j, r) in records.iter().enumerate() {
        if r.job_index != j as u64 {
            return fail(format!("job {j} missing"));
        }
        if r.source_subgroup == r.target_subgroup {
            return fail(format!("job {j}: target equals source subgroup"));
        }
        if m.get(&r.source_id).is_none_or(|s| !s.is_original()) {
            return fail(format!(
                "job {j}: source '{}' is not an original",
                r.source_id
            ));
        }
    }
    Ok(())
}

/// Run the augmentation plan and return D_aug.
///
/// Jobs already present in `<out>/journal.jsonl` for the same plan, with an
/// intact image file, are not rerun. Parallelism is capped at the backend's
/// `max_in_flight`.
pub fn augment_dataset(
    m: &DatasetManifest,
    plan: &AugmentationPlan,
    backend: &dyn Backend,
    bank: &SubgroupTextBank,
    paths: &AugmentPaths<'_>,
) -> Result<AugmentOutcome, AugmentError> {
    m.validate()?;
    if plan.n_synth == 0 {
        return Ok(AugmentOutcome {
            manifest: m.clone(),
            records: Vec::new(),
            resumed: 0,
        });
    }
    let originals: Vec<&SampleRecord> = m.originals().collect();
    if originals.is_empty() {
        return Err(AugmentError::EmptyDataset);
    }
    if m.taxonomy.len() < 2 {
        return Err(AugmentError::SingletonTaxonomy);
    }
    if let MaskSource::ExternalSegmenter { dir } = &plan.mask_source {
        if !dir.is_dir() {
            return Err(AugmentError::Plan(format!(
                "mask directory {} not found",
                dir.display()
            )));
        }
    }
    for s in &originals {
        let id = synthetic_id(&s.id, 0);
        let prefix = &id[..id.len() - 1];
        if m.samples.iter().any(|x| x.id.starts_with(prefix)) {
            return Err(AugmentError::Invariant(format!(
                "sample ids starting with '{prefix}' would collide with synthetic ids"
            )));
        }
    }

    let info = backend.info().map_err(|e| AugmentError::Job {
        index: 0,
        source: e.into(),
    })?;
    let backend_info = serde_json::to_value(&info).expect("info serializes");
    let hash = plan_hash(m, plan, bank, &backend_info)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(backend.max_in_flight().max(1))
        .build()
        .map_err(|e| AugmentError::Plan(format!("thread pool: {e}")))?;

    let labels = pool.install(|| label_originals(&originals, backend, bank, paths))?;
    let targets = plan_targets(plan, &m.taxonomy, &labels)?;

    fs::create_dir_all(paths.out_dir.join(IMAGES_DIR))?;
    let jpath = journal_path(paths.out_dir);
    let done = verified_records(read_journal(&jpath, &hash)?, plan.n_synth, paths.out_dir);
    let resumed = done.len();
    let journal = JournalWriter::open(&jpath, &hash)?;
    log::info!(
        "augment: {} jobs, {} already journaled, {} workers",
        plan.n_synth,
        resumed,
        pool.current_num_threads()
    );

    let ctx = JobContext {
        plan,
        taxonomy: &m.taxonomy,
        originals: &originals,
        labels: &labels,
        targets: &targets,
        backend,
        paths,
        style: CaptionStyle::for_taxonomy(&m.taxonomy),
        cache: CaptionCache::new(),
        journal: &journal,
    };
    let pending: Vec<u64> = (0..plan.n_synth)
        .filter(|j| !done.contains_key(j))
        .collect();
    let fresh: Vec<AugmentationRecord> = pool.install(|| {
        pending
            .par_iter()
            .map(|&j| {
                ctx.run(j)
                    .map_err(|source| AugmentError::Job { index: j, source })
            })
            .collect::<Result<_, _>>()
    })?;

    let mut all = done;
    all.extend(fresh.into_iter().map(|r| (r.job_index, r)));
    let records: Vec<AugmentationRecord> = all.into_values().collect();
    check_outcome(m, plan, &records)?;

    let mut out = m.clone();
    for r in &records {
        let parent = m.get(&r.source_id).expect("checked");
        out.samples.push(SampleRecord {
            id: synthetic_id(&parent.id, r.job_index),
            image_uri: r.image_uri.clone(),
            mask_uri: parent.mask_uri.clone(),
            subgroup: Some(r.target_subgroup.clone()),
            embedding_ref: None,
            origin: Origin::Synthetic,
            parent_id: Some(parent.id.clone()),
            annotation_kind: parent.annotation_kind,
        });
    }
    out.provenance.seed = Some(plan.seed);
    out.provenance.parameters.insert(
        "augmentation".into(),
        json!({
            "plan": plan,
            "plan_hash": hash,
            "bank_hash": bank.content_hash(),
            "backend": backend_info,
        }),
    );
    out.validate()?;
    Ok(AugmentOutcome {
        manifest: out,
        records,
        resumed,
    })
}
