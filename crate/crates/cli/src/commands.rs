use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::Utc;
use clap::{Parser, Subcommand};
use log::{error, info, warn};
use rayon::prelude::*;

use diffuforge_core::backend::{generate, Backend, RemoteBackend, RemoteOptions, SyntheticBackend};
use diffuforge_core::codec;
use diffuforge_core::dataset::{
    render_overlay, write_atomic, write_coco, write_semantic_masks, write_yolo, ClassRegistry,
    DatasetLayout, DatasetRecord, FailureRecord, LabelMode, Manifest, COCO_FILE, MASKS_DIR,
    OVERLAYS_DIR, YOLO_DIR,
};
use diffuforge_core::labeler::{label_heatmaps, LabelingParams};
use diffuforge_core::supervised::{ingest_predictions, merge_labels, ImageIndex, MergeMode, MergePolicy};
use diffuforge_core::{normalize_heatmap, FloatRaster, Heatmap, LabeledInstance};

use crate::config::{load_config, BackendKind, Job, LoadedConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "diffuforge", version, about = "Synthetic labeled image datasets from prompt templates")]
pub struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset root; overrides the configured output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List the prompts the templates expand to.
    Expand {
        /// Print only; do not write prompts.jsonl.
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate images and heatmaps into the dataset root.
    Generate,
    /// Attach instances to every record.
    Label {
        /// unsupervised, supervised or hybrid.
        #[arg(long, default_value = "unsupervised")]
        mode: String,
        /// External prediction file (supervised and hybrid modes).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write annotation files.
    Export {
        /// Comma-separated subset of coco, yolo, masks.
        #[arg(long, value_delimiter = ',', default_value = "coco,yolo,masks")]
        formats: Vec<String>,
    },
    /// Render label overlays.
    Visualize {
        /// Skip the heatmap tint.
        #[arg(long)]
        no_heatmap: bool,
    },
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Expand { dry_run } => cmd_expand(cli, *dry_run),
        Command::Generate => cmd_generate(cli),
        Command::Label { mode, predictions } => cmd_label(cli, mode, predictions.as_deref()),
        Command::Export { formats } => cmd_export(cli, formats),
        Command::Visualize { no_heatmap } => cmd_visualize(cli, !no_heatmap),
    }
}

fn load(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::validation("--config is required for this command"))?;
    load_config(path).map_err(CliError::Validation)
}

/// Dataset root for commands that only need the manifest.
fn dataset_root(cli: &Cli) -> Result<PathBuf, CliError> {
    match (&cli.out, &cli.config) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(_)) => Ok(load(cli)?.output_root(None)),
        (None, None) => Err(CliError::validation("either --out or --config is required")),
    }
}

pub fn cmd_expand(cli: &Cli, dry_run: bool) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let prompts = loaded.expand().map_err(CliError::Validation)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut jsonl = String::new();
    for p in prompts.iter().flatten() {
        let bindings = serde_json::to_string(&p.bindings).expect("bindings serialize");
        writeln!(out, "{}\t{}\t{}", p.template_id, bindings, p.text).context("writing to stdout")?;
        jsonl.push_str(&serde_json::to_string(p).expect("prompt serializes"));
        jsonl.push('\n');
    }
    if !dry_run {
        let path = loaded.output_root(cli.out.as_deref()).join("prompts.jsonl");
        write_atomic(&path, jsonl.as_bytes())?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn build_backend(loaded: &LoadedConfig) -> Result<Box<dyn Backend>, CliError> {
    let b = &loaded.config.backend;
    Ok(match b.kind {
        BackendKind::Synthetic => Box::new(SyntheticBackend::new()),
        BackendKind::Remote => {
            let endpoint = b.endpoint.as_deref().expect("validated");
            let options = RemoteOptions {
                timeout_s: b.timeout_s,
                concurrency: b.concurrency,
            };
            Box::new(RemoteBackend::new(endpoint, options).context("building HTTP client")?)
        }
    })
}

fn run_job(backend: &dyn Backend, layout: &DatasetLayout, job: &Job) -> Result<DatasetRecord, FailureRecord> {
    let req = &job.request;
    let fail = |error: String| {
        error!(
            "template_id={} seed={} image_id={} failed: {error}",
            req.prompt.template_id, req.seed, job.image_id
        );
        FailureRecord {
            image_id: job.image_id.clone(),
            template_id: req.prompt.template_id.clone(),
            seed: req.seed,
            error,
        }
    };
    info!(
        "template_id={} seed={} image_id={} generating \"{}\"",
        req.prompt.template_id, req.seed, job.image_id, req.prompt.text
    );
    let result = generate(backend, req).map_err(|e| fail(e.to_string()))?;
    let record = layout
        .write_generation(&job.image_id, &result)
        .map_err(|e| fail(e.to_string()))?;
    info!(
        "template_id={} seed={} image_id={} done",
        req.prompt.template_id, req.seed, job.image_id
    );
    Ok(record)
}

pub fn cmd_generate(cli: &Cli) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let jobs = loaded.jobs().map_err(CliError::Validation)?;
    let root = loaded.output_root(cli.out.as_deref());
    let layout = DatasetLayout::new(&root);
    let backend = build_backend(&loaded)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(loaded.config.backend.concurrency)
        .build()
        .context("starting worker pool")?;
    info!("generating {} images into {}", jobs.len(), root.display());
    let outcomes: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(backend.as_ref(), &layout, job))
            .collect()
    });
    let (mut records, mut failures) = (Vec::new(), Vec::new());
    for o in outcomes {
        match o {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    let total = jobs.len();
    let dataset_id = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let manifest = Manifest {
        dataset_id,
        created_at: Utc::now(),
        config_digest: loaded.digest.clone(),
        backend_id: backend.backend_id().to_string(),
        labeling: loaded.config.labeling.params.clone(),
        merge_policy: loaded.config.labeling.merge,
        label_mode: None,
        records,
        failures,
    };
    layout.write_manifest(&manifest)?;
    let failed = manifest.failures.len();
    info!("{} of {total} images generated", total - failed);
    match failed {
        0 => Ok(()),
        f if f == total => Err(CliError::Backend {
            total,
            last: manifest.failures.last().map(|f| f.error.clone()).unwrap_or_default(),
        }),
        f => Err(CliError::Partial { failed: f, total }),
    }
}

pub fn parse_mode(mode: &str) -> Result<LabelMode, CliError> {
    match mode {
        "unsupervised" => Ok(LabelMode::Unsupervised),
        "supervised" => Ok(LabelMode::Supervised),
        "hybrid" => Ok(LabelMode::Hybrid),
        other => Err(CliError::validation(format!(
            "unknown label mode '{other}' (expected unsupervised, supervised or hybrid)"
        ))),
    }
}

fn label_record(
    layout: &DatasetLayout,
    record: &DatasetRecord,
    params: &LabelingParams,
) -> Result<Vec<LabeledInstance>, CliError> {
    let maps = record
        .heatmaps
        .iter()
        .map(|(token, rel)| {
            layout
                .read_heatmap(rel)
                .map(|h| (token.as_str(), h))
                .map_err(|e| {
                    CliError::validation(format!("record {}: missing heatmap for '{token}': {e}", record.image_id))
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(label_heatmaps(maps.iter().map(|(t, h)| (*t, h)), params))
}

pub fn cmd_label(cli: &Cli, mode: &str, predictions: Option<&Path>) -> Result<(), CliError> {
    let mode = parse_mode(mode)?;
    let layout = DatasetLayout::new(dataset_root(cli)?);
    let mut manifest = layout.read_manifest()?;
    let supervised: BTreeMap<String, Vec<LabeledInstance>> = match (mode, predictions) {
        (LabelMode::Unsupervised, Some(_)) => {
            return Err(CliError::validation("--predictions is only valid with --mode supervised or hybrid"))
        }
        (LabelMode::Unsupervised, None) => BTreeMap::new(),
        (_, None) => return Err(CliError::validation("--predictions is required for supervised and hybrid modes")),
        (_, Some(path)) => {
            let index: ImageIndex = manifest
                .records
                .iter()
                .map(|r| (r.image_id.clone(), (r.width, r.height)))
                .collect();
            let preds = ingest_predictions(path, &index, manifest.merge_policy.confidence_floor)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            let mut by_image: BTreeMap<String, Vec<LabeledInstance>> = BTreeMap::new();
            for p in preds {
                by_image
                    .entry(p.image_id)
                    .or_default()
                    .extend(p.instances.iter().map(|i| i.to_labeled()));
            }
            if by_image.values().all(Vec::is_empty) {
                warn!("{} holds no predictions at or above the confidence floor", path.display());
            }
            by_image
        }
    };
    let policy = MergePolicy {
        mode: MergeMode::PreferSupervised,
        ..manifest.merge_policy
    };
    let params = manifest.labeling.clone();
    let labeled: Vec<Vec<LabeledInstance>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let sup = supervised.get(&r.image_id).cloned().unwrap_or_default();
            let out = match mode {
                LabelMode::Supervised => sup,
                LabelMode::Unsupervised => label_record(&layout, r, &params)?,
                LabelMode::Hybrid => merge_labels(&label_record(&layout, r, &params)?, &sup, &policy),
            };
            info!(
                "template_id={} seed={} image_id={} labeled {} instances",
                r.provenance.template_id,
                r.provenance.seed,
                r.image_id,
                out.len()
            );
            Ok(out)
        })
        .collect::<Result<_, CliError>>()?;
    for (r, instances) in manifest.records.iter_mut().zip(labeled) {
        r.instances = instances;
    }
    manifest.label_mode = Some(mode);
    layout.write_manifest(&manifest)?;
    Ok(())
}

fn labeled_manifest(layout: &DatasetLayout) -> Result<Manifest, CliError> {
    let m = layout.read_manifest()?;
    if m.label_mode.is_none() {
        return Err(CliError::validation("dataset is not labeled yet; run `label` first"));
    }
    Ok(m)
}

pub fn cmd_export(cli: &Cli, formats: &[String]) -> Result<(), CliError> {
    let unknown: Vec<String> = formats
        .iter()
        .filter(|f| !matches!(f.as_str(), "coco" | "yolo" | "masks"))
        .map(|f| format!("unknown export format '{f}' (expected coco, yolo or masks)"))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::Validation(unknown));
    }
    let layout = DatasetLayout::new(dataset_root(cli)?);
    let m = labeled_manifest(&layout)?;
    let registry = ClassRegistry::from_records(&m.records);
    for f in formats {
        match f.as_str() {
            "coco" => {
                write_coco(&m.records, &registry, &layout.resolve(COCO_FILE))?;
            }
            "yolo" => write_yolo(&m.records, &registry, &layout.resolve(YOLO_DIR))?,
            "masks" => write_semantic_masks(&m.records, &registry, &layout.resolve(MASKS_DIR))?,
            _ => unreachable!("checked above"),
        }
        info!("exported {f}");
    }
    Ok(())
}

/// Pixel-wise maximum of a record's heatmaps.
fn combined_heatmap(layout: &DatasetLayout, record: &DatasetRecord) -> Result<Option<Heatmap>, CliError> {
    let mut acc: Option<Vec<f32>> = None;
    for rel in record.heatmaps.values() {
        let h = layout.read_heatmap(rel)?;
        match &mut acc {
            None => acc = Some(h.values().to_vec()),
            Some(a) => a.iter_mut().zip(h.values()).for_each(|(a, &v)| *a = a.max(v)),
        }
    }
    Ok(match acc {
        Some(values) => {
            let raster = FloatRaster::new(record.width, record.height, values).context("heatmap size")?;
            Some(normalize_heatmap(&raster).context("heatmap values")?)
        }
        None => None,
    })
}

pub fn cmd_visualize(cli: &Cli, with_heatmap: bool) -> Result<(), CliError> {
    let layout = DatasetLayout::new(dataset_root(cli)?);
    let m = labeled_manifest(&layout)?;
    m.records.par_iter().try_for_each(|r| -> Result<(), CliError> {
        let image = layout.read_image(r)?;
        let heat = if with_heatmap { combined_heatmap(&layout, r)? } else { None };
        let overlay = render_overlay(&image, &r.instances, heat.as_ref());
        let path = layout.resolve(OVERLAYS_DIR).join(format!("{}.png", r.image_id));
        let png = codec::encode_rgb_png(&overlay).context("encoding overlay")?;
        write_atomic(&path, &png)?;
        Ok(())
    })?;
    info!("rendered {} overlays", m.records.len());
    Ok(())
}
