//! The `sdad` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 backend failure.
//! With `--json` every command prints one JSON document on stdout:
//! `{"command", "result", "provenance"}` on success, `{"command", "error"}`
//! on failure. Schemas live in `crates/core/schemas/`.

mod config;

pub use config::{interpolate, MetricOptions, RunConfig};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::augment::{augment_dataset, AugmentPaths, AugmentationPlan};
use crate::backend::{Backend, BackendConfig, BackendKind};
use crate::caption::{
    build_vlm_prompt, extract_classes, scrub_subgroup_terms, CaptionBundle, CaptionStyle,
};
use crate::embeddings::{open_store, EmbeddingStore};
use crate::manifest::{
    load_manifest, manifest_base_dir, resolve_uri, save_manifest, DatasetManifest, ManifestError,
    Subgroup, SubgroupTaxonomy, TOOL_VERSION,
};
use crate::metrics::{
    aggregate_driving, frechet_distance, load_route_log, mf1, miou, ConfusionMatrix, EmptyClass,
    FeatureStats, PenaltyTable,
};
use crate::palette::{read_mask, Palette};
use crate::report::{load_report_input, render_subgroup_report, ReportFormat};
use crate::subgroup::{
    compute_distribution, identify_subgroup, label_dataset, label_dataset_with_backend,
    underrepresented, Similarity, SubgroupDistribution, SubgroupTextBank, UnderrepresentedPolicy,
};

#[derive(Debug, Parser)]
#[command(
    name = "sdad",
    version,
    about = "Subgroup-targeted synthetic data augmentation and evaluation"
)]
struct Cli {
    /// Print a machine-readable JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// JSON run configuration; `${VAR}` is expanded from the environment.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a manifest against the schema and its invariants.
    Validate(ValidateArgs),
    /// Label samples and report the subgroup distribution.
    Analyze(AnalyzeArgs),
    /// Generate synthetic samples and write the augmented manifest.
    Augment(AugmentArgs),
    /// Show the caption bundle (prompt, caption, styled caption) for one sample.
    Caption(CaptionArgs),
    /// Fréchet distance between two feature stores.
    EvalFd(EvalFdArgs),
    /// mIoU / mF1 over paired mask directories.
    EvalSeg(EvalSegArgs),
    /// Route completion, infraction score and driving score.
    EvalDrive(EvalDriveArgs),
    /// Render per-subgroup tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also require every image and mask file to exist.
    #[arg(long)]
    check_files: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SimilarityArg {
    Dot,
    Cosine,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Dot => Similarity::Dot,
            SimilarityArg::Cosine => Similarity::Cosine,
        }
    }
}

#[derive(Debug, Args)]
struct BackendArgs {
    /// mock, mock:<seed>, remote:<url>, or remote (uses SDAD_BACKEND_URL).
    #[arg(long)]
    backend: Option<String>,
    /// Embedding dimension for the mock backend.
    #[arg(long)]
    dimension: Option<usize>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Precomputed subgroup text bank (JSON).
    #[arg(long)]
    bank: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Embedding store holding rows referenced by `embedding_ref`.
    #[arg(long)]
    store: Option<PathBuf>,
    /// below_uniform or below_threshold=<tau>.
    #[arg(long, default_value = "below_uniform")]
    policy: String,
    #[arg(long, value_enum)]
    similarity: Option<SimilarityArg>,
    /// Bank prompt template with one placeholder per dimension.
    #[arg(long)]
    template: Option<String>,
    /// Re-label samples that already carry a subgroup.
    #[arg(long)]
    overwrite: bool,
    /// Write the labeled manifest here.
    #[arg(long)]
    write_manifest: Option<PathBuf>,
    /// Write the text bank used for labeling here.
    #[arg(long)]
    save_bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Augmentation plan (JSON).
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Class palette (JSON); needed to list the objects in each mask.
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    n_synth: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target_policy: Option<String>,
    /// Caption every job afresh instead of reusing per-sample captions.
    #[arg(long)]
    no_caption_cache: bool,
}

#[derive(Debug, Args)]
struct CaptionArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Sample id.
    #[arg(long)]
    sample: String,
    #[arg(long)]
    palette: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Target subgroup phrase, e.g. "Rain, Night"; adds the styled caption.
    #[arg(long)]
    target: Option<String>,
    /// Text bank for samples without a subgroup label.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalFdArgs {
    #[arg(long)]
    features_a: PathBuf,
    #[arg(long)]
    features_b: PathBuf,
    /// Also compute FD per subgroup; needs --manifest-a and --manifest-b.
    #[arg(long)]
    per_subgroup: bool,
    #[arg(long)]
    manifest_a: Option<PathBuf>,
    #[arg(long)]
    manifest_b: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalSegArgs {
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    palette: Option<PathBuf>,
    /// Pixel value skipped in both masks.
    #[arg(long)]
    ignore_label: Option<u32>,
    /// Count classes absent from both masks as NaN instead of skipping them.
    #[arg(long)]
    include_empty_as_nan: bool,
    /// Manifest whose sample ids match mask file stems, for per-subgroup scores.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalDriveArgs {
    /// Route log, one JSON object per line.
    #[arg(long)]
    routes: PathBuf,
    /// Penalty table JSON `{kind: factor}`; default leaderboard factors otherwise.
    #[arg(long)]
    penalties: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Baseline values shown side by side with a delta column.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    format: String,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Decimal places in text tables.
    #[arg(long, default_value_t = 2)]
    precision: usize,
}

/// A failed command: exit code and message.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn backend(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Self::invalid(e.to_string())
    }
}

type CmdResult = Result<Outcome, Failure>;

/// A successful command: JSON result, text rendering, effective config.
struct Outcome {
    result: Value,
    text: String,
    config: RunConfig,
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::invalid(format!("missing --{flag} (or set it in --config)")))
}

fn load_taxonomy(path: Option<&Path>) -> Result<SubgroupTaxonomy, Failure> {
    match path {
        None => Ok(SubgroupTaxonomy::weather_time()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Failure::invalid(format!("taxonomy {}: {e}", p.display())))
        }
    }
}

fn load_palette(path: &Path) -> Result<Palette, Failure> {
    Palette::load(path).map_err(|e| Failure::invalid(format!("palette {}: {e}", path.display())))
}

fn load_store(path: &Path) -> Result<EmbeddingStore, Failure> {
    open_store(path).map_err(|e| Failure::invalid(format!("store {}: {e}", path.display())))
}

fn load_bank(path: &Path, taxonomy: &SubgroupTaxonomy) -> Result<SubgroupTextBank, Failure> {
    let bad = |e: String| Failure::invalid(format!("bank {}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let raw: SubgroupTextBank = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    SubgroupTextBank::new(taxonomy, raw.template, raw.similarity, raw.entries)
        .map_err(|e| bad(e.to_string()))
}

/// Backend config from flags over the config file, if either names one.
fn backend_config(args: &BackendArgs, cfg: &RunConfig) -> Result<Option<BackendConfig>, Failure> {
    let mut bc = cfg.backend.clone();
    if let Some(spec) = &args.backend {
        let kind: BackendKind = spec.parse().map_err(Failure::invalid)?;
        match &mut bc {
            Some(c) => c.kind = kind,
            None => bc = Some(BackendConfig::new(kind)),
        }
    }
    if let (Some(c), Some(d)) = (&mut bc, args.dimension) {
        c.dimension = Some(d);
    }
    if let Some(c) = &bc {
        c.validate().map_err(Failure::invalid)?;
    }
    Ok(bc)
}

fn connect(bc: &BackendConfig) -> Result<Box<dyn Backend>, Failure> {
    bc.connect()
        .map_err(|e| Failure::backend(format!("backend: {e}")))
}

fn distribution_json(t: &SubgroupTaxonomy, d: &SubgroupDistribution) -> Value {
    Value::Array(
        d.counts
            .iter()
            .map(|(sg, n)| {
                json!({"subgroup": t.phrase(sg), "count": n, "fraction": d.fractions[sg]})
            })
            .collect(),
    )
}

fn distribution_text(t: &SubgroupTaxonomy, d: &SubgroupDistribution) -> String {
    let width = d
        .counts
        .keys()
        .map(|sg| t.phrase(sg).len())
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    for (sg, n) in &d.counts {
        let _ = writeln!(
            s,
            "{:<width$}  {n:>6}  {:>6.2}%",
            t.phrase(sg),
            d.fractions[sg] * 100.0
        );
    }
    s
}

fn cmd_validate(a: &ValidateArgs, mut cfg: RunConfig) -> CmdResult {
    let path = require(a.manifest.clone().or(cfg.manifest.clone()), "manifest")?;
    let m = load_manifest(&path)?;
    if a.check_files {
        let base = manifest_base_dir(&path);
        for s in &m.samples {
            for uri in [&s.image_uri, &s.mask_uri] {
                let p = resolve_uri(&base, uri);
                if !p.is_file() {
                    return Err(Failure::invalid(format!(
                        "sample '{}': file {} not found",
                        s.id,
                        p.display()
                    )));
                }
            }
        }
    }
    let originals = m.originals().count();
    let labeled = m.samples.iter().filter(|s| s.subgroup.is_some()).count();
    cfg.manifest = Some(path.clone());
    Ok(Outcome {
        result: json!({
            "valid": true,
            "samples": m.samples.len(),
            "original": originals,
            "synthetic": m.samples.len() - originals,
            "labeled": labeled,
        }),
        text: format!(
            "{}: valid ({} samples, {} original, {} synthetic, {} labeled)\n",
            path.display(),
            m.samples.len(),
            originals,
            m.samples.len() - originals,
            labeled
        ),
        config: cfg,
    })
}

fn cmd_analyze(a: &AnalyzeArgs, mut cfg: RunConfig) -> CmdResult {
    let path = require(a.manifest.clone().or(cfg.manifest.clone()), "manifest")?;
    let policy: UnderrepresentedPolicy = a.policy.parse().map_err(Failure::invalid)?;
    let m = load_manifest(&path)?;
    let needs_labels = a.overwrite || m.samples.iter().any(|s| s.subgroup.is_none());
    let store_path = a.store.clone().or(cfg.store.clone());
    let bank_path = a.bank.clone().or(cfg.bank.clone());
    let bc = backend_config(&a.backend, &cfg)?;
    let backend = match &bc {
        Some(c) if needs_labels || a.save_bank.is_some() => Some(connect(c)?),
        _ => None,
    };

    let mut bank_hash = Value::Null;
    let labeled = if needs_labels {
        let bank = match (&bank_path, &backend) {
            (Some(p), _) => load_bank(p, &m.taxonomy)?,
            (None, Some(b)) => SubgroupTextBank::build(
                &m.taxonomy,
                a.template.as_deref(),
                a.similarity.map(Similarity::from).unwrap_or_default(),
                b.as_ref(),
            )
            .map_err(|e| Failure::backend(e.to_string()))?,
            (None, None) => {
                return Err(Failure::invalid(
                    "manifest has unlabeled samples; pass --bank or --backend",
                ))
            }
        };
        let bank = match a.similarity {
            Some(s) => SubgroupTextBank {
                similarity: s.into(),
                ..bank
            },
            None => bank,
        };
        if let Some(p) = &a.save_bank {
            let bytes = serde_json::to_vec_pretty(&bank).expect("bank serializes");
            fs::write(p, bytes).map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?;
        }
        bank_hash = bank.content_hash().into();
        let store = store_path.as_deref().map(load_store).transpose()?;
        let base = manifest_base_dir(&path);
        let r = match &backend {
            Some(b) => label_dataset_with_backend(
                &m,
                store.as_ref(),
                b.as_ref(),
                &base,
                &bank,
                a.overwrite,
            ),
            None => label_dataset(&m, store.as_ref(), &bank, a.overwrite),
        };
        r.map_err(|e| match e {
            crate::subgroup::SubgroupError::Backend(b) => Failure::backend(b.to_string()),
            other => Failure::invalid(other.to_string()),
        })?
    } else {
        m.clone()
    };
    if let Some(p) = &a.write_manifest {
        save_manifest(&labeled, p)?;
    }

    let t = &labeled.taxonomy;
    let d = compute_distribution(&labeled).map_err(|e| Failure::invalid(e.to_string()))?;
    let under: Vec<String> = underrepresented(&d, policy)
        .iter()
        .map(|sg| t.phrase(sg))
        .collect();
    let changed = labeled
        .samples
        .iter()
        .zip(&m.samples)
        .filter(|(x, y)| x.subgroup != y.subgroup)
        .count();

    let mut text = distribution_text(t, &d);
    let _ = writeln!(
        text,
        "entropy: {:.4} nats (max {:.4})",
        d.entropy(),
        (t.len() as f64).ln()
    );
    let _ = writeln!(
        text,
        "under-represented ({}): {}",
        a.policy,
        under.join("; ")
    );

    cfg.manifest = Some(path);
    cfg.bank = bank_path;
    cfg.store = store_path;
    cfg.backend = bc;
    Ok(Outcome {
        result: json!({
            "samples": labeled.samples.len(),
            "labeled_now": changed,
            "distribution": distribution_json(t, &d),
            "entropy": d.entropy(),
            "policy": a.policy,
            "underrepresented": under,
            "bank_hash": bank_hash,
        }),
        text,
        config: cfg,
    })
}

/// Make relative URIs absolute so the manifest can live in another directory.
fn rebase_uris(m: &mut DatasetManifest, base: &Path) {
    for s in &mut m.samples {
        for uri in [&mut s.image_uri, &mut s.mask_uri] {
            let raw = uri.strip_prefix("file://").unwrap_or(uri);
            if Path::new(raw).is_relative() {
                *uri = resolve_uri(base, uri).to_string_lossy().into_owned();
            }
        }
    }
}

fn cmd_augment(a: &AugmentArgs, mut cfg: RunConfig) -> CmdResult {
    let path = require(a.manifest.clone().or(cfg.manifest.clone()), "manifest")?;
    let out = require(a.out.clone().or(cfg.out_dir.clone()), "out")?;
    let palette_path = require(a.palette.clone().or(cfg.palette.clone()), "palette")?;
    let mut plan = match (&a.plan, &cfg.plan) {
        (Some(p), _) => {
            AugmentationPlan::load(p).map_err(|e| Failure::invalid(format!("plan: {e}")))?
        }
        (None, Some(p)) => p.clone(),
        (None, None) => {
            AugmentationPlan::new(require(a.n_synth, "n-synth")?, require(a.seed, "seed")?)
        }
    };
    if let Some(n) = a.n_synth {
        plan.n_synth = n;
    }
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(p) = &a.target_policy {
        plan.target_policy = serde_json::from_value(Value::String(p.clone()))
            .map_err(|_| Failure::invalid(format!("unknown target policy '{p}'")))?;
    }
    if a.no_caption_cache {
        plan.caption_cache = false;
    }
    let bc = require(backend_config(&a.backend, &cfg)?, "backend")?;

    let mut m = load_manifest(&path)?;
    let palette = load_palette(&palette_path)?;
    let store_path = a.store.clone().or(cfg.store.clone());
    let store = store_path.as_deref().map(load_store).transpose()?;
    let bank_path = a.bank.clone().or(cfg.bank.clone());
    let bank_file = bank_path
        .as_deref()
        .map(|p| load_bank(p, &m.taxonomy))
        .transpose()?;

    fs::create_dir_all(&out).map_err(|e| Failure::invalid(format!("{}: {e}", out.display())))?;
    let input_dir =
        fs::canonicalize(manifest_base_dir(&path)).map_err(|e| Failure::invalid(e.to_string()))?;
    let out_abs = fs::canonicalize(&out).map_err(|e| Failure::invalid(e.to_string()))?;
    if input_dir != out_abs {
        rebase_uris(&mut m, &input_dir);
    }

    let backend = connect(&bc)?;
    let bank = match bank_file {
        Some(b) => b,
        None => SubgroupTextBank::build(&m.taxonomy, None, Similarity::Dot, backend.as_ref())
            .map_err(|e| Failure::backend(e.to_string()))?,
    };
    let paths = AugmentPaths {
        input_dir: &input_dir,
        out_dir: &out,
        palette: &palette,
        store: store.as_ref(),
    };
    let outcome = augment_dataset(&m, &plan, backend.as_ref(), &bank, &paths).map_err(|e| {
        if e.is_backend() {
            Failure::backend(e.to_string())
        } else {
            Failure::invalid(e.to_string())
        }
    })?;

    let out_manifest = out.join("manifest.jsonl");
    let bytes = outcome.manifest.to_bytes()?;
    save_manifest(&outcome.manifest, &out_manifest)?;
    let t = &outcome.manifest.taxonomy;
    let mut targets: BTreeMap<Subgroup, u64> =
        t.enumerate().into_iter().map(|sg| (sg, 0)).collect();
    for r in &outcome.records {
        *targets.get_mut(&r.target_subgroup).expect("valid subgroup") += 1;
    }
    let final_dist = compute_distribution(&outcome.manifest).ok();
    let manifest_sha = crate::subgroup::hex_digest(&bytes);

    let mut text = format!(
        "wrote {} synthetic samples ({} resumed) to {}\nmanifest: {} (sha256 {manifest_sha})\n",
        outcome.records.len(),
        outcome.resumed,
        out.display(),
        out_manifest.display()
    );
    if let Some(d) = &final_dist {
        text.push_str(&distribution_text(t, d));
    }

    cfg.manifest = Some(path);
    cfg.out_dir = Some(out.clone());
    cfg.palette = Some(palette_path);
    cfg.bank = bank_path;
    cfg.store = store_path;
    cfg.backend = Some(bc);
    cfg.plan = Some(plan.clone());
    Ok(Outcome {
        result: json!({
            "n_synth": plan.n_synth,
            "resumed": outcome.resumed,
            "manifest": out_manifest,
            "manifest_sha256": manifest_sha,
            "targets": targets.iter().map(|(sg, n)| json!({"subgroup": t.phrase(sg), "count": n})).collect::<Vec<_>>(),
            "distribution": final_dist.as_ref().map(|d| distribution_json(t, d)),
        }),
        text,
        config: cfg,
    })
}

fn cmd_caption(a: &CaptionArgs, mut cfg: RunConfig) -> CmdResult {
    let path = require(a.manifest.clone().or(cfg.manifest.clone()), "manifest")?;
    let palette_path = require(a.palette.clone().or(cfg.palette.clone()), "palette")?;
    let bc = require(backend_config(&a.backend, &cfg)?, "backend")?;
    let m = load_manifest(&path)?;
    let t = &m.taxonomy;
    let s = m.get(&a.sample).ok_or_else(|| {
        Failure::invalid(format!("no sample '{}' in {}", a.sample, path.display()))
    })?;
    let target = a
        .target
        .as_deref()
        .map(|p| {
            t.parse_phrase(p)
                .map_err(|e| Failure::invalid(e.to_string()))
        })
        .transpose()?;
    let palette = load_palette(&palette_path)?;
    let base = manifest_base_dir(&path);
    let backend = connect(&bc)?;
    let backend_err = |e: crate::backend::BackendError| Failure::backend(format!("backend: {e}"));

    let source = match &s.subgroup {
        Some(sg) => sg.clone(),
        None => {
            let bank_path = a.bank.clone().or(cfg.bank.clone());
            let bank = match &bank_path {
                Some(p) => load_bank(p, t)?,
                None => SubgroupTextBank::build(t, None, Similarity::Dot, backend.as_ref())
                    .map_err(|e| Failure::backend(e.to_string()))?,
            };
            let store_path = a.store.clone().or(cfg.store.clone());
            let v = match (s.embedding_ref, store_path) {
                (Some(row), Some(p)) => load_store(&p)?
                    .get_row(row)
                    .map_err(|e| Failure::invalid(format!("sample '{}': {e}", s.id)))?,
                _ => {
                    let img = resolve_uri(&base, &s.image_uri);
                    let png = fs::read(&img)
                        .map_err(|e| Failure::invalid(format!("{}: {e}", img.display())))?;
                    backend.embed_image(&png).map_err(backend_err)?
                }
            };
            identify_subgroup(&v, &bank)
                .map_err(|e| Failure::invalid(e.to_string()))?
                .subgroup
        }
    };

    let mask = resolve_uri(&base, &s.mask_uri);
    let classes = extract_classes(&mask, &palette)
        .map_err(|e| Failure::invalid(format!("{}: {e}", mask.display())))?;
    let prompt = build_vlm_prompt(&classes, t).map_err(|e| Failure::invalid(e.to_string()))?;
    let img = resolve_uri(&base, &s.image_uri);
    let png = fs::read(&img).map_err(|e| Failure::invalid(format!("{}: {e}", img.display())))?;
    let raw = backend.caption_image(&png, &prompt).map_err(backend_err)?;
    let base_caption = scrub_subgroup_terms(&raw, t);
    let styled_caption = target
        .as_ref()
        .map(|z| CaptionStyle::for_taxonomy(t).compose(&base_caption, t, z))
        .transpose()
        .map_err(|e| Failure::invalid(e.to_string()))?;
    let bundle = CaptionBundle {
        prompt,
        base_caption,
        styled_caption,
        source_subgroup: source,
        target_subgroup: target,
    };
    let result = serde_json::to_value(&bundle).expect("bundle serializes");
    let mut text = serde_json::to_string_pretty(&result).expect("json");
    text.push('\n');
    cfg.manifest = Some(path);
    cfg.palette = Some(palette_path);
    cfg.backend = Some(bc);
    Ok(Outcome {
        result,
        text,
        config: cfg,
    })
}

/// Stats per subgroup from the rows a manifest points at.
fn stats_by_subgroup(
    m: &DatasetManifest,
    store: &EmbeddingStore,
) -> Result<BTreeMap<Subgroup, FeatureStats>, Failure> {
    let mut out: BTreeMap<Subgroup, FeatureStats> = BTreeMap::new();
    for s in &m.samples {
        let (Some(sg), Some(row)) = (&s.subgroup, s.embedding_ref) else {
            continue;
        };
        let v = store
            .get_row(row)
            .map_err(|e| Failure::invalid(format!("sample '{}': {e}", s.id)))?;
        out.entry(sg.clone())
            .or_insert_with(|| FeatureStats::new(store.dimension()))
            .push(v.as_slice())
            .map_err(|e| Failure::invalid(e.to_string()))?;
    }
    Ok(out)
}

fn cmd_eval_fd(a: &EvalFdArgs, cfg: RunConfig) -> CmdResult {
    let sa = load_store(&a.features_a)?;
    let sb = load_store(&a.features_b)?;
    let (fa, fb) = rayon::join(
        || FeatureStats::from_store(&sa),
        || FeatureStats::from_store(&sb),
    );
    let fd = frechet_distance(&fa, &fb).map_err(|e| Failure::invalid(e.to_string()))?;
    let mut text = format!(
        "FD: {fd:.4} (n_a = {}, n_b = {}, d = {})\n",
        fa.count(),
        fb.count(),
        fa.dimension()
    );
    let mut per = Value::Null;
    if a.per_subgroup {
        let ma = load_manifest(require(a.manifest_a.as_ref(), "manifest-a")?)?;
        let mb = load_manifest(require(a.manifest_b.as_ref(), "manifest-b")?)?;
        let ga = stats_by_subgroup(&ma, &sa)?;
        let gb = stats_by_subgroup(&mb, &sb)?;
        let t = &ma.taxonomy;
        let mut rows = Vec::new();
        for sg in t.enumerate() {
            let (x, y) = (ga.get(&sg), gb.get(&sg));
            let count = |s: Option<&FeatureStats>| s.map_or(0, FeatureStats::count);
            let v = match (x, y) {
                (Some(x), Some(y)) => frechet_distance(x, y).ok(),
                _ => None,
            };
            let shown = v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                text,
                "{:<20} {shown:>12}  ({} / {})",
                t.phrase(&sg),
                count(x),
                count(y)
            );
            rows.push(json!({
                "subgroup": t.phrase(&sg),
                "fd": v,
                "count_a": count(x),
                "count_b": count(y),
            }));
        }
        per = Value::Array(rows);
    }
    Ok(Outcome {
        result: json!({
            "fd": fd,
            "dimension": fa.dimension(),
            "count_a": fa.count(),
            "count_b": fb.count(),
            "per_subgroup": per,
        }),
        text,
        config: cfg,
    })
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let rd = fs::read_dir(dir).map_err(|e| Failure::invalid(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

fn seg_scores(cm: &ConfusionMatrix, policy: EmptyClass) -> (Option<f64>, Option<f64>) {
    (miou(cm, policy).ok(), mf1(cm, policy).ok())
}

fn cmd_eval_seg(a: &EvalSegArgs, mut cfg: RunConfig) -> CmdResult {
    let opts = cfg.metrics.clone().unwrap_or_default();
    let palette_path = require(a.palette.clone().or(cfg.palette.clone()), "palette")?;
    let palette = load_palette(&palette_path)?;
    let ignore = a.ignore_label.or(opts.ignore_label);
    let policy = if a.include_empty_as_nan {
        EmptyClass::Nan
    } else {
        opts.empty_class.unwrap_or_default()
    };
    let gts = list_pngs(&a.gt_dir)?;
    if gts.is_empty() {
        return Err(Failure::invalid(format!(
            "no PNG masks in {}",
            a.gt_dir.display()
        )));
    }
    let k = palette.id_span();
    let per_image: Vec<(String, ConfusionMatrix)> = gts
        .par_iter()
        .map(|gt| {
            let name = gt.file_name().expect("file");
            let pred = a.pred_dir.join(name);
            let load = |p: &Path| {
                read_mask(p, &palette)
                    .map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))
            };
            let (g, p) = (load(gt)?, load(&pred)?);
            if (g.width, g.height) != (p.width, p.height) {
                return Err(Failure::invalid(format!(
                    "{}: prediction size differs",
                    name.to_string_lossy()
                )));
            }
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(&g.ids, &p.ids, ignore)
                .map_err(|e| Failure::invalid(format!("{}: {e}", name.to_string_lossy())))?;
            let stem = gt.file_stem().expect("stem").to_string_lossy().into_owned();
            Ok((stem, cm))
        })
        .collect::<Result<_, _>>()?;
    let pooled = per_image
        .iter()
        .try_fold(ConfusionMatrix::new(k), |acc, (_, cm)| acc.merge(cm))
        .map_err(|e| Failure::invalid(e.to_string()))?;
    let (mi, mf) = seg_scores(&pooled, policy);
    let (Some(mi), Some(mf)) = (mi, mf) else {
        return Err(Failure::invalid(
            "every class is empty (all pixels ignored?)",
        ));
    };
    let iou = pooled.per_class_iou();
    let f1 = pooled.per_class_f1();
    let classes: Vec<Value> = palette
        .classes
        .iter()
        .map(|c| json!({"id": c.id, "name": c.name, "iou": iou[c.id as usize], "f1": f1[c.id as usize]}))
        .collect();
    let mut text = format!(
        "images: {}\nmIoU: {:.4}\nmF1:  {:.4}\n(pooled over all pixels, empty classes: {})\n",
        per_image.len(),
        mi,
        mf,
        if policy == EmptyClass::Nan {
            "nan"
        } else {
            "excluded"
        }
    );

    let mut per = Value::Null;
    if let Some(mp) = a.manifest.clone().or(cfg.manifest.clone()) {
        let m = load_manifest(&mp)?;
        let mut groups: BTreeMap<Subgroup, (usize, ConfusionMatrix)> = BTreeMap::new();
        for (stem, cm) in &per_image {
            let Some(sg) = m.get(stem).and_then(|s| s.subgroup.clone()) else {
                continue;
            };
            let e = groups
                .entry(sg)
                .or_insert_with(|| (0, ConfusionMatrix::new(k)));
            e.0 += 1;
            e.1 = e.1.merge(cm).expect("same size");
        }
        let t = &m.taxonomy;
        let rows: Vec<Value> = t
            .enumerate()
            .iter()
            .map(|sg| {
                let (n, scores) = groups
                    .get(sg)
                    .map_or((0, (None, None)), |(n, cm)| (*n, seg_scores(cm, policy)));
                let _ = writeln!(
                    text,
                    "{:<20} {:>8} {:>8}  ({n} images)",
                    t.phrase(sg),
                    scores.0.map_or("n/a".into(), |v| format!("{v:.4}")),
                    scores.1.map_or("n/a".into(), |v| format!("{v:.4}")),
                );
                json!({"subgroup": t.phrase(sg), "images": n, "miou": scores.0, "mf1": scores.1})
            })
            .collect();
        per = Value::Array(rows);
        cfg.manifest = Some(mp);
    }
    cfg.palette = Some(palette_path);
    cfg.metrics = Some(MetricOptions {
        ignore_label: ignore,
        empty_class: Some(policy),
        penalties: opts.penalties,
    });
    Ok(Outcome {
        result: json!({
            "images": per_image.len(),
            "miou": mi,
            "mf1": mf,
            "overall": "pooled",
            "empty_class": policy,
            "classes": classes,
            "confusion": pooled.rows(),
            "per_subgroup": per,
        }),
        text,
        config: cfg,
    })
}

fn cmd_eval_drive(a: &EvalDriveArgs, mut cfg: RunConfig) -> CmdResult {
    let mut opts = cfg.metrics.clone().unwrap_or_default();
    let pen_path = a.penalties.clone().or(opts.penalties.clone());
    let penalties = match &pen_path {
        Some(p) => {
            PenaltyTable::load(p).map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?
        }
        None => PenaltyTable::default(),
    };
    let tax_path = a.taxonomy.clone().or(cfg.taxonomy.clone());
    let t = load_taxonomy(tax_path.as_deref())?;
    let routes = load_route_log(&a.routes, &penalties, Some(&t))
        .map_err(|e| Failure::invalid(format!("{}: {e}", a.routes.display())))?;
    let s = aggregate_driving(&routes).map_err(|e| Failure::invalid(e.to_string()))?;
    let mut text = format!(
        "routes: {}\nRC / IS / DS: {}\n",
        s.overall.routes,
        s.overall.render()
    );
    let per: Vec<Value> = s
        .per_subgroup
        .iter()
        .map(|(sg, m)| {
            let _ = writeln!(text, "{:<20} {}  ({} routes)", t.phrase(sg), m.render(), m.routes);
            json!({"subgroup": t.phrase(sg), "routes": m.routes, "rc": m.rc, "is": m.is, "ds": m.ds, "rendered": m.render()})
        })
        .collect();
    opts.penalties = pen_path;
    cfg.metrics = Some(opts);
    cfg.taxonomy = tax_path;
    Ok(Outcome {
        result: json!({
            "routes": s.overall.routes,
            "rc": s.overall.rc,
            "is": s.overall.is,
            "ds": s.overall.ds,
            "rendered": s.overall.render(),
            "per_subgroup": per,
        }),
        text,
        config: cfg,
    })
}

fn cmd_report(a: &ReportArgs, json_mode: bool, mut cfg: RunConfig) -> CmdResult {
    let format: ReportFormat = a.format.parse().map_err(Failure::invalid)?;
    let tax_path = a.taxonomy.clone().or(cfg.taxonomy.clone());
    let t = load_taxonomy(tax_path.as_deref())?;
    let baseline = a
        .baseline
        .as_ref()
        .map(|p| load_report_input(&t, p).map_err(|e| Failure::invalid(e.to_string())))
        .transpose()?;
    let mut texts = Vec::new();
    let mut docs = Vec::new();
    for p in &a.inputs {
        let mut r = load_report_input(&t, p).map_err(|e| Failure::invalid(e.to_string()))?;
        r.precision = a.precision;
        if let Some(b) = &baseline {
            r.baseline = Some(b.values.clone());
        }
        let err = |e: crate::report::ReportError| Failure::invalid(format!("{}: {e}", p.display()));
        let as_json = render_subgroup_report(&t, &r, ReportFormat::Json).map_err(err)?;
        docs.push(serde_json::from_slice::<Value>(&as_json).expect("rendered json parses"));
        if !json_mode {
            let bytes = render_subgroup_report(&t, &r, format).map_err(err)?;
            texts.push(String::from_utf8(bytes).expect("utf-8"));
        }
    }
    let text = match format {
        ReportFormat::Json => {
            let v = if docs.len() == 1 {
                docs[0].clone()
            } else {
                Value::Array(docs.clone())
            };
            let mut s = serde_json::to_string_pretty(&v).expect("json");
            s.push('\n');
            s
        }
        _ => texts.join("\n"),
    };
    cfg.taxonomy = tax_path;
    Ok(Outcome {
        result: json!({ "reports": docs }),
        text,
        config: cfg,
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate(_) => "validate",
        Command::Analyze(_) => "analyze",
        Command::Augment(_) => "augment",
        Command::Caption(_) => "caption",
        Command::EvalFd(_) => "eval-fd",
        Command::EvalSeg(_) => "eval-seg",
        Command::EvalDrive(_) => "eval-drive",
        Command::Report(_) => "report",
    }
}

fn apply_log_level(cfg: &RunConfig) {
    if std::env::var_os("SDAD_LOG").is_some() {
        return;
    }
    if let Some(level) = cfg
        .log_level
        .as_deref()
        .and_then(|l| l.parse::<log::LevelFilter>().ok())
    {
        log::set_max_level(level);
    }
}

fn write_json(out: &mut dyn Write, v: &Value) {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    let _ = out.write_all(s.as_bytes());
}

/// Run the CLI on `args` (including the program name). Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(shown.as_bytes());
                    0
                }
                _ => {
                    let _ = err.write_all(shown.as_bytes());
                    1
                }
            };
        }
    };
    let name = command_name(&cli.command);
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::invalid),
        None => Ok(RunConfig::default()),
    };
    let result = cfg.and_then(|cfg| {
        apply_log_level(&cfg);
        match &cli.command {
            Command::Validate(a) => cmd_validate(a, cfg),
            Command::Analyze(a) => cmd_analyze(a, cfg),
            Command::Augment(a) => cmd_augment(a, cfg),
            Command::Caption(a) => cmd_caption(a, cfg),
            Command::EvalFd(a) => cmd_eval_fd(a, cfg),
            Command::EvalSeg(a) => cmd_eval_seg(a, cfg),
            Command::EvalDrive(a) => cmd_eval_drive(a, cfg),
            Command::Report(a) => cmd_report(a, cli.json, cfg),
        }
    });
    match result {
        Ok(o) => {
            if cli.json {
                write_json(
                    out,
                    &json!({
                        "command": name,
                        "result": o.result,
                        "provenance": {"tool_version": TOOL_VERSION, "config": o.config},
                    }),
                );
            } else {
                let _ = out.write_all(o.text.as_bytes());
            }
            0
        }
        Err(f) => {
            let _ = writeln!(err, "sdad {name}: {}", f.message);
            if cli.json {
                write_json(
                    out,
                    &json!({"command": name, "error": {"code": f.code, "message": f.message}}),
                );
            }
            f.code
        }
    }
}

/// Entry point for the binary: logging from `SDAD_LOG`, real stdio.
pub fn main_with_env() -> i32 {
    let mut b = env_logger::Builder::new();
    match std::env::var("SDAD_LOG") {
        Ok(spec) => {
            b.parse_filters(&spec);
        }
        Err(_) => {
            b.filter_level(log::LevelFilter::Warn);
        }
    }
    let _ = b.try_init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
