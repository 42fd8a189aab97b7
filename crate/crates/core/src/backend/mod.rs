//! Edit/classify backends.
//!
//! The engine never sees pixels. An image is an opaque id; an edit turns one
//! id into another; classification maps an id to per-label values. Backends
//! must be deterministic: the same `(image, semantics, params)` always yields
//! an edit that classifies identically.

pub mod conformance;
pub mod protocol;
pub mod remote;
pub mod server;
pub mod synthetic;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Guidance, Semantic};

pub use protocol::{ErrorCode, Handshake, PROTOCOL_VERSION};
pub use remote::{connect_remote_backend, RemoteConfig};
pub use server::{serve, ServerHandle};
pub use synthetic::{make_synthetic_backend, SyntheticBackend, SyntheticWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageOrigin {
    Original,
    Edited,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub domain: String,
    pub origin: ImageOrigin,
    pub parent_id: Option<String>,
}

impl ImageRef {
    pub fn original(id: impl Into<String>, domain: impl Into<String>) -> Self {
        ImageRef { id: id.into(), domain: domain.into(), origin: ImageOrigin::Original, parent_id: None }
    }
}

/// Number of diffusion steps skipped by default when editing.
pub const DEFAULT_SKIPPED_STEPS: u32 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    /// Fraction of the image an edit may touch, in `[0, 1]`.
    pub edit_threshold: f64,
    pub skipped_steps: u32,
    pub seed: u64,
}

impl EditParams {
    pub fn new(edit_threshold: f64, seed: u64) -> Result<Self, BackendError> {
        let p = EditParams { edit_threshold, skipped_steps: DEFAULT_SKIPPED_STEPS, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=1.0).contains(&self.edit_threshold) {
            return Err(BackendError::InvalidParams(format!(
                "edit_threshold {} outside [0, 1]",
                self.edit_threshold
            )));
        }
        Ok(())
    }

    /// Short stable digest used in cache keys and edited-image ids.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.edit_threshold.to_bits().to_le_bytes());
        h.update(self.skipped_steps.to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSpace {
    Logit,
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub class_labels: Vec<String>,
    pub values: Vec<f64>,
    pub value_space: ValueSpace,
}

impl ClassifierOutput {
    pub fn validate(&self) -> Result<(), String> {
        if self.class_labels.len() != self.values.len() {
            return Err(format!("{} labels but {} values", self.class_labels.len(), self.values.len()));
        }
        if self.value_space == ValueSpace::Probability {
            if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(format!("probability {v} outside [0, 1]"));
            }
            let sum: f64 = self.values.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(format!("probabilities sum to {sum}"));
            }
        }
        Ok(())
    }

    pub fn value_for(&self, label: &str) -> Option<f64> {
        self.class_labels.iter().position(|l| l == label).map(|i| self.values[i])
    }
}

/// One semantic as it crosses the wire: only what the editor needs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticEdit {
    pub prompt_fragment: String,
    pub guidance: Guidance,
}

impl From<&Semantic> for SemanticEdit {
    fn from(s: &Semantic) -> Self {
        SemanticEdit { prompt_fragment: s.prompt_fragment.clone(), guidance: s.guidance }
    }
}

impl SemanticEdit {
    pub fn add(prompt_fragment: impl Into<String>) -> Self {
        SemanticEdit { prompt_fragment: prompt_fragment.into(), guidance: Guidance::Add }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend rejected request ({code}): {message}")]
    Protocol { code: ErrorCode, message: String },
    #[error("unknown class label {label:?}; valid labels: {}", valid.join(", "))]
    UnknownLabel { label: String, valid: Vec<String> },
    #[error("transport error after {attempts} attempt(s) (retry budget {retry_budget}): {message}")]
    Transport { message: String, attempts: u32, retry_budget: u32 },
    #[error("incompatible backend: expected protocol {expected:?}, server speaks {found:?}")]
    Incompatible { expected: String, found: String },
    #[error("invalid synthetic world: {0}")]
    InvalidWorld(String),
    #[error("invalid edit parameters: {0}")]
    InvalidParams(String),
}

impl BackendError {
    pub fn protocol(code: ErrorCode, message: impl Into<String>) -> Self {
        BackendError::Protocol { code, message: message.into() }
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            BackendError::Protocol { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// The two operations every backend provides, addressed by image id.
pub trait Backend: Send + Sync {
    fn handshake(&self) -> Result<Handshake, BackendError>;

    /// Applies `semantics` in order and returns the id of the edited image.
    fn edit(&self, image_id: &str, semantics: &[SemanticEdit], params: &EditParams) -> Result<String, BackendError>;

    fn classify(&self, image_id: &str) -> Result<ClassifierOutput, BackendError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub edit: u64,
    pub classify: u64,
}

/// A connected backend plus its handshake and exact call telemetry.
#[derive(Clone)]
pub struct BackendSession {
    backend: Arc<dyn Backend>,
    info: Handshake,
    counters: Arc<Counters>,
}

#[derive(Default)]
struct Counters {
    edit: AtomicU64,
    classify: AtomicU64,
}

impl fmt::Debug for BackendSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSession").field("info", &self.info).field("calls", &self.calls()).finish()
    }
}

impl BackendSession {
    /// Performs the handshake and checks the protocol version.
    pub fn open(backend: Arc<dyn Backend>) -> Result<Self, BackendError> {
        let info = backend.handshake()?;
        if info.protocol != PROTOCOL_VERSION {
            return Err(BackendError::Incompatible { expected: PROTOCOL_VERSION.into(), found: info.protocol });
        }
        Ok(BackendSession { backend, info, counters: Arc::default() })
    }

    /// The raw backend, bypassing validation and telemetry.
    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn info(&self) -> &Handshake {
        &self.info
    }

    pub fn labels(&self) -> &[String] {
        &self.info.labels
    }

    pub fn value_space(&self) -> ValueSpace {
        self.info.value_space
    }

    pub fn calls(&self) -> CallCounts {
        CallCounts {
            edit: self.counters.edit.load(Ordering::SeqCst),
            classify: self.counters.classify.load(Ordering::SeqCst),
        }
    }

    pub fn edit(&self, image: &ImageRef, semantics: &[SemanticEdit], params: &EditParams) -> Result<ImageRef, BackendError> {
        params.validate()?;
        self.counters.edit.fetch_add(1, Ordering::SeqCst);
        let id = self.backend.edit(&image.id, semantics, params)?;
        Ok(ImageRef { id, domain: image.domain.clone(), origin: ImageOrigin::Edited, parent_id: Some(image.id.clone()) })
    }

    pub fn check_label(&self, target_class: &str) -> Result<(), BackendError> {
        if self.info.labels.iter().any(|l| l == target_class) {
            Ok(())
        } else {
            Err(BackendError::UnknownLabel { label: target_class.into(), valid: self.info.labels.clone() })
        }
    }

    pub fn classify(&self, image: &ImageRef, target_class: &str) -> Result<ClassifierOutput, BackendError> {
        self.check_label(target_class)?;
        self.counters.classify.fetch_add(1, Ordering::SeqCst);
        let out = self.backend.classify(&image.id)?;
        out.validate().map_err(|m| BackendError::protocol(ErrorCode::Internal, m))?;
        Ok(out)
    }
}
