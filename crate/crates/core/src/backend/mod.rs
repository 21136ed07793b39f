//! Generation contract shared by every diffusion backend.
//!
//! A backend turns a [`GenerationRequest`] into an image plus one heatmap per
//! token of interest. [`generate`] wraps any backend with the request
//! precondition check and the result postcondition check, so callers see the
//! same guarantees regardless of where the pixels come from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Heatmap, ImageRaster};
use crate::templating::ExpandedPrompt;

pub mod remote;
pub mod synthetic;
pub mod wire;

pub use remote::{RemoteBackend, RemoteOptions};
pub use synthetic::{SyntheticBackend, SyntheticObject};

pub const DEFAULT_STEPS: u32 = 30;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TextToImage,
    ImageToImage,
    Inpaint,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::TextToImage => "text_to_image",
            TaskKind::ImageToImage => "image_to_image",
            TaskKind::Inpaint => "inpaint",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A learned-embedding "word" forwarded opaquely to the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InversionToken {
    pub token: String,
    pub embedding_ref: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub task: TaskKind,
    pub prompt: ExpandedPrompt,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub guidance: f64,
    pub init_image: Option<ImageRaster>,
    pub mask_image: Option<BinaryMask>,
    pub strength: Option<f64>,
    pub inversion_tokens: Vec<InversionToken>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RequestError {
    #[error("width and height must be positive multiples of 8, got {width}x{height}")]
    Dimensions { width: u32, height: u32 },
    #[error("steps must be positive")]
    Steps,
    #[error("guidance must be positive and finite, got {0}")]
    Guidance(f64),
    #[error("{task} requires an init_image")]
    MissingInitImage { task: TaskKind },
    #[error("inpaint requires a mask_image")]
    MissingMask,
    #[error("{task} does not take {field}")]
    UnexpectedField { task: TaskKind, field: &'static str },
    #[error("{task} requires strength in [0, 1], got {value:?}")]
    Strength { task: TaskKind, value: Option<f64> },
    #[error("{field} is {actual_w}x{actual_h}, request is {width}x{height}")]
    InputDimensions {
        field: &'static str,
        actual_w: u32,
        actual_h: u32,
        width: u32,
        height: u32,
    },
    #[error("inversion token at index {0} is empty")]
    EmptyInversionToken(usize),
}

impl GenerationRequest {
    /// Text-to-image request with protocol-default steps and guidance.
    pub fn text_to_image(prompt: ExpandedPrompt, seed: u64, width: u32, height: u32) -> Self {
        Self {
            task: TaskKind::TextToImage,
            prompt,
            seed,
            width,
            height,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            init_image: None,
            mask_image: None,
            strength: None,
            inversion_tokens: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RequestError> {
        let (width, height) = (self.width, self.height);
        if width == 0 || height == 0 || width % 8 != 0 || height % 8 != 0 {
            return Err(RequestError::Dimensions { width, height });
        }
        if self.steps == 0 {
            return Err(RequestError::Steps);
        }
        if !(self.guidance.is_finite() && self.guidance > 0.0) {
            return Err(RequestError::Guidance(self.guidance));
        }
        let task = self.task;
        match task {
            TaskKind::TextToImage => {
                if self.init_image.is_some() {
                    return Err(RequestError::UnexpectedField {
                        task,
                        field: "init_image",
                    });
                }
                if self.mask_image.is_some() {
                    return Err(RequestError::UnexpectedField {
                        task,
                        field: "mask_image",
                    });
                }
                if self.strength.is_some() {
                    return Err(RequestError::UnexpectedField {
                        task,
                        field: "strength",
                    });
                }
            }
            TaskKind::ImageToImage | TaskKind::Inpaint => {
                let init = self
                    .init_image
                    .as_ref()
                    .ok_or(RequestError::MissingInitImage { task })?;
                if (init.width(), init.height()) != (width, height) {
                    return Err(RequestError::InputDimensions {
                        field: "init_image",
                        actual_w: init.width(),
                        actual_h: init.height(),
                        width,
                        height,
                    });
                }
                match self.strength {
                    Some(s) if (0.0..=1.0).contains(&s) => {}
                    value => return Err(RequestError::Strength { task, value }),
                }
                if task == TaskKind::Inpaint {
                    let mask = self.mask_image.as_ref().ok_or(RequestError::MissingMask)?;
                    if (mask.width(), mask.height()) != (width, height) {
                        return Err(RequestError::InputDimensions {
                            field: "mask_image",
                            actual_w: mask.width(),
                            actual_h: mask.height(),
                            width,
                            height,
                        });
                    }
                } else if self.mask_image.is_some() {
                    return Err(RequestError::UnexpectedField {
                        task,
                        field: "mask_image",
                    });
                }
            }
        }
        if let Some(i) = self.inversion_tokens.iter().position(|t| t.token.is_empty()) {
            return Err(RequestError::EmptyInversionToken(i));
        }
        Ok(())
    }

    /// Tokens of interest without repeats, in first-seen order.
    pub fn unique_tokens(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.prompt
            .tokens_of_interest
            .iter()
            .map(String::as_str)
            .filter(|t| seen.insert(*t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub image: ImageRaster,
    pub heatmaps: BTreeMap<String, Heatmap>,
    pub echo: GenerationRequest,
    pub backend_id: String,
    /// Ground-truth geometry; only the synthetic backend fills this in.
    pub ground_truth: Option<Vec<SyntheticObject>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendErrorKind {
    #[error("invalid request: {0}")]
    InvalidRequest(#[from] RequestError),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("request timed out after {0} s")]
    Timeout(u64),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("protocol violation in {field}: {detail}")]
    Protocol { field: String, detail: String },
    #[error("protocol violation: no heatmap for requested token '{0}'")]
    MissingHeatmap(String),
    #[error("dimension mismatch: {what} is {actual_w}x{actual_h}, expected {expected_w}x{expected_h}")]
    DimensionMismatch {
        what: String,
        actual_w: u32,
        actual_h: u32,
        expected_w: u32,
        expected_h: u32,
    },
    #[error("cannot read embedding for inversion token '{token}': {detail}")]
    Embedding { token: String, detail: String },
}

/// A backend failure tagged with the originating template and seed.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("[template_id={template_id} seed={seed}] {kind}")]
pub struct BackendError {
    pub template_id: String,
    pub seed: u64,
    pub kind: BackendErrorKind,
}

impl BackendError {
    pub fn new(req: &GenerationRequest, kind: impl Into<BackendErrorKind>) -> Self {
        Self {
            template_id: req.prompt.template_id.clone(),
            seed: req.seed,
            kind: kind.into(),
        }
    }

    /// Transport-level failures (as opposed to malformed or rejected requests).
    pub fn is_transport(&self) -> bool {
        matches!(
            self.kind,
            BackendErrorKind::Unavailable(_) | BackendErrorKind::Timeout(_)
        )
    }
}

pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Produces a result for an already-validated request.
    fn dispatch(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

/// Validates the request, dispatches it and checks the result contract.
pub fn generate(
    backend: &dyn Backend,
    request: &GenerationRequest,
) -> Result<GenerationResult, BackendError> {
    request
        .validate()
        .map_err(|e| BackendError::new(request, e))?;
    let result = backend.dispatch(request)?;
    check_result(request, &result)?;
    Ok(result)
}

fn check_result(req: &GenerationRequest, result: &GenerationResult) -> Result<(), BackendError> {
    let mismatch = |what: String, w: u32, h: u32, ew: u32, eh: u32| {
        BackendError::new(
            req,
            BackendErrorKind::DimensionMismatch {
                what,
                actual_w: w,
                actual_h: h,
                expected_w: ew,
                expected_h: eh,
            },
        )
    };
    let (iw, ih) = (result.image.width(), result.image.height());
    if (iw, ih) != (req.width, req.height) {
        return Err(mismatch("image".into(), iw, ih, req.width, req.height));
    }
    for token in req.unique_tokens() {
        let h = result.heatmaps.get(token).ok_or_else(|| {
            BackendError::new(req, BackendErrorKind::MissingHeatmap(token.to_string()))
        })?;
        if (h.width(), h.height()) != (iw, ih) {
            return Err(mismatch(
                format!("heatmap '{token}'"),
                h.width(),
                h.height(),
                iw,
                ih,
            ));
        }
    }
    Ok(())
}
