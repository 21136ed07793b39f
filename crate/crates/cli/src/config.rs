//! Pipeline configuration document.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use diffuforge_core::backend::{
    GenerationRequest, InversionToken, TaskKind, DEFAULT_GUIDANCE, DEFAULT_STEPS,
};
use diffuforge_core::backend::remote::{DEFAULT_CONCURRENCY, DEFAULT_TIMEOUT_S};
use diffuforge_core::codec;
use diffuforge_core::labeler::LabelingParams;
use diffuforge_core::supervised::MergePolicy;
use diffuforge_core::templating::{
    expand_all, parse_template, sample, ExpandedPrompt, PromptTemplate, TemplateEntry,
};
use diffuforge_core::{BinaryMask, ImageRaster};
use serde::{Deserialize, Serialize};

pub const ENDPOINT_ENV: &str = "DIFFUFORGE_ENDPOINT";
pub const DEFAULT_OUTPUT: &str = "dataset";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_S
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            endpoint: None,
            concurrency: DEFAULT_CONCURRENCY,
            timeout_s: DEFAULT_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionTokenConfig {
    pub token: String,
    pub embedding: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default = "default_side")]
    pub width: u32,
    #[serde(default = "default_side")]
    pub height: u32,
    #[serde(default = "default_steps")]
    pub steps: u32,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    #[serde(default)]
    pub strength: Option<f64>,
    #[serde(default)]
    pub init_image: Option<PathBuf>,
    #[serde(default)]
    pub mask_image: Option<PathBuf>,
    #[serde(default)]
    pub inversion_tokens: Vec<InversionTokenConfig>,
}

fn default_task() -> TaskKind {
    TaskKind::TextToImage
}

fn default_side() -> u32 {
    512
}

fn default_steps() -> u32 {
    DEFAULT_STEPS
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            task: default_task(),
            width: default_side(),
            height: default_side(),
            steps: default_steps(),
            guidance: default_guidance(),
            strength: None,
            init_image: None,
            mask_image: None,
            inversion_tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LabelingConfig {
    #[serde(flatten)]
    pub params: LabelingParams,
    #[serde(default)]
    pub merge: MergePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub templates: Vec<TemplateEntry>,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// A configuration that passed validation, with relative paths resolved
/// against the configuration file's directory.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub templates: Vec<PromptTemplate>,
    pub digest: String,
    pub base_dir: PathBuf,
}

/// One planned generation.
#[derive(Debug, Clone)]
pub struct Job {
    pub image_id: String,
    pub request: GenerationRequest,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Reads and validates a configuration, reporting every problem at once.
pub fn load_config(path: &Path) -> Result<LoadedConfig, Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let digest = diffuforge_core::dataset::config_digest(&value);
    let mut config: PipelineConfig =
        serde_json::from_value(value).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    if let Ok(endpoint) = std::env::var(ENDPOINT_ENV) {
        if !endpoint.is_empty() {
            config.backend.endpoint = Some(endpoint);
        }
    }
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let templates = validate(&config, &base_dir)?;
    Ok(LoadedConfig {
        config,
        templates,
        digest,
        base_dir,
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Semantic checks beyond the document shape.
pub fn validate(config: &PipelineConfig, base_dir: &Path) -> Result<Vec<PromptTemplate>, Vec<String>> {
    let mut errors = Vec::new();
    let mut templates = Vec::new();
    let mut ids = HashSet::new();
    if config.templates.is_empty() {
        errors.push("templates: at least one template is required".to_string());
    }
    for entry in &config.templates {
        if !valid_id(&entry.id) {
            errors.push(format!(
                "template '{}': id must be non-empty and use only letters, digits, '_' or '-'",
                entry.id
            ));
        }
        if !ids.insert(entry.id.as_str()) {
            errors.push(format!("template '{}': duplicate id", entry.id));
        }
        match parse_template(entry) {
            Ok(t) => templates.push(t),
            Err(e) => errors.extend(e.0.iter().map(ToString::to_string)),
        }
    }

    let b = &config.backend;
    if b.concurrency == 0 {
        errors.push("backend.concurrency must be at least 1".into());
    }
    if b.timeout_s == 0 {
        errors.push("backend.timeout_s must be at least 1".into());
    }
    if b.kind == BackendKind::Remote && b.endpoint.as_deref().is_none_or(str::is_empty) {
        errors.push(format!("backend.endpoint is required for the remote backend (or set {ENDPOINT_ENV})"));
    }

    let g = &config.generation;
    if g.width == 0 || g.height == 0 || !g.width.is_multiple_of(8) || !g.height.is_multiple_of(8) {
        errors.push(format!(
            "generation: width and height must be positive multiples of 8, got {}x{}",
            g.width, g.height
        ));
    }
    if g.steps == 0 {
        errors.push("generation.steps must be at least 1".into());
    }
    if !(g.guidance.is_finite() && g.guidance > 0.0) {
        errors.push(format!("generation.guidance must be positive, got {}", g.guidance));
    }
    let needs_init = g.task != TaskKind::TextToImage;
    match (&g.init_image, needs_init) {
        (None, true) => errors.push(format!("generation.init_image is required for {}", g.task)),
        (Some(_), false) => errors.push("generation.init_image is only valid for image_to_image and inpaint".into()),
        (Some(p), true) if !resolve(base_dir, p).is_file() => {
            errors.push(format!("generation.init_image: {} does not exist", p.display()))
        }
        _ => {}
    }
    match (&g.mask_image, g.task == TaskKind::Inpaint) {
        (None, true) => errors.push("generation.mask_image is required for inpaint".into()),
        (Some(_), false) => errors.push("generation.mask_image is only valid for inpaint".into()),
        (Some(p), true) if !resolve(base_dir, p).is_file() => {
            errors.push(format!("generation.mask_image: {} does not exist", p.display()))
        }
        _ => {}
    }
    match (g.strength, needs_init) {
        (Some(s), true) if !(0.0..=1.0).contains(&s) => {
            errors.push(format!("generation.strength must be in [0, 1], got {s}"))
        }
        (Some(_), false) => errors.push("generation.strength is only valid for image_to_image and inpaint".into()),
        _ => {}
    }
    for (i, t) in g.inversion_tokens.iter().enumerate() {
        if t.token.trim().is_empty() {
            errors.push(format!("generation.inversion_tokens[{i}]: token is empty"));
        }
        if !resolve(base_dir, &t.embedding).is_file() {
            errors.push(format!(
                "generation.inversion_tokens[{i}]: embedding {} does not exist",
                t.embedding.display()
            ));
        }
    }

    let l = &config.labeling;
    if !(0.0..1.0).contains(&l.params.min_area_fraction) {
        errors.push(format!(
            "labeling.min_area_fraction must be in [0, 1), got {}",
            l.params.min_area_fraction
        ));
    }
    if let Err(e) = l.merge.validate() {
        errors.push(format!("labeling.merge: {e}"));
    }

    if errors.is_empty() {
        Ok(templates)
    } else {
        Err(errors)
    }
}

impl LoadedConfig {
    /// Every template's prompts: full expansion, or a seeded sample when
    /// the entry sets `count`.
    pub fn expand(&self) -> Result<Vec<Vec<ExpandedPrompt>>, Vec<String>> {
        let mut errors = Vec::new();
        let mut out = Vec::new();
        for (entry, t) in self.config.templates.iter().zip(&self.templates) {
            let r = match entry.count {
                Some(n) => sample(t, n as usize, entry.seed.unwrap_or(0)),
                None => expand_all(t),
            };
            match r {
                Ok(p) => out.push(p),
                Err(e) => errors.push(e.to_string()),
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors)
        }
    }

    pub fn output_root(&self, cli_out: Option<&Path>) -> PathBuf {
        match (cli_out, &self.config.output) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => resolve(&self.base_dir, p),
            (None, None) => PathBuf::from(DEFAULT_OUTPUT),
        }
    }

    /// Generation requests in template order; the image id is
    /// `<template_id>_<index>` and the seed is the template seed plus index.
    pub fn jobs(&self) -> Result<Vec<Job>, Vec<String>> {
        let prompts = self.expand()?;
        let g = &self.config.generation;
        let init_image = match &g.init_image {
            Some(p) => Some(load_image(&resolve(&self.base_dir, p)).map_err(|e| vec![e])?),
            None => None,
        };
        let mask_image = match &g.mask_image {
            Some(p) => Some(load_mask(&resolve(&self.base_dir, p)).map_err(|e| vec![e])?),
            None => None,
        };
        let inversion_tokens: Vec<InversionToken> = g
            .inversion_tokens
            .iter()
            .map(|t| InversionToken {
                token: t.token.clone(),
                embedding_ref: resolve(&self.base_dir, &t.embedding),
            })
            .collect();
        let mut jobs = Vec::new();
        for (entry, prompts) in self.config.templates.iter().zip(prompts) {
            let base_seed = entry.seed.unwrap_or(0);
            for (i, prompt) in prompts.into_iter().enumerate() {
                let request = GenerationRequest {
                    task: g.task,
                    prompt,
                    seed: base_seed.wrapping_add(i as u64),
                    width: g.width,
                    height: g.height,
                    steps: g.steps,
                    guidance: g.guidance,
                    init_image: init_image.clone(),
                    mask_image: mask_image.clone(),
                    strength: if g.task == TaskKind::TextToImage {
                        None
                    } else {
                        Some(g.strength.unwrap_or(0.75))
                    },
                    inversion_tokens: inversion_tokens.clone(),
                };
                jobs.push(Job {
                    image_id: format!("{}_{i:05}", entry.id),
                    request,
                });
            }
        }
        let errors: Vec<String> = jobs
            .iter()
            .filter_map(|j| j.request.validate().err().map(|e| format!("{}: {e}", j.image_id)))
            .collect();
        if errors.is_empty() {
            Ok(jobs)
        } else {
            Err(errors)
        }
    }
}

fn load_image(path: &Path) -> Result<ImageRaster, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    codec::decode_rgb_png(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_mask(path: &Path) -> Result<BinaryMask, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    codec::decode_mask_png(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}
