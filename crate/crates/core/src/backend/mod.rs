//! Model backend protocol.
//!
//! Every model call in the pipeline goes through one of five narrow traits
//! whose request/response types mirror the JSON wire protocol:
//!
//! | endpoint           | request                              | response            |
//! |--------------------|--------------------------------------|---------------------|
//! | `POST /v1/embed`   | `{texts?, image_b64?}`               | `{vectors}`         |
//! | `POST /v1/chat`    | `{messages, temperature, seed?}`     | `{text}`            |
//! | `POST /v1/caption` | `{image_b64, box?, temperature?, seed?}` | `{text}`        |
//! | `POST /v1/vqa`     | `{image_b64, question}`              | `{answer}`          |
//! | `POST /v1/score`   | `{payload}`                          | `{score}`           |
//!
//! HTTP clients live in a separate crate; [`mock`] provides deterministic
//! in-process implementations.

pub mod mock;
mod retry;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::BoxGeometry;

pub use retry::{RetryPolicy, Retrying};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("backend rejected the request: {0}")]
    Invalid(String),
    #[error("giving up after {attempts} attempt(s): {last}")]
    Exhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }

    /// Number of attempts made before this error surfaced.
    pub fn attempts(&self) -> u32 {
        match self {
            BackendError::Exhausted { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_b64: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoxGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub image_b64: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError>;
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait CaptionBackend: Send + Sync {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, BackendError>;
}

pub trait VqaBackend: Send + Sync {
    fn vqa(&self, req: &VqaRequest) -> Result<VqaResponse, BackendError>;
}

pub trait ScoreBackend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
}

macro_rules! forward_arc {
    ($trait:ident, $method:ident, $req:ty, $resp:ty) => {
        impl<T: $trait + ?Sized> $trait for Arc<T> {
            fn $method(&self, req: &$req) -> Result<$resp, BackendError> {
                (**self).$method(req)
            }
        }
        impl<T: $trait + ?Sized> $trait for &T {
            fn $method(&self, req: &$req) -> Result<$resp, BackendError> {
                (**self).$method(req)
            }
        }
    };
}

forward_arc!(EmbedBackend, embed, EmbedRequest, EmbedResponse);
forward_arc!(ChatBackend, chat, ChatRequest, ChatResponse);
forward_arc!(CaptionBackend, caption, CaptionRequest, CaptionResponse);
forward_arc!(VqaBackend, vqa, VqaRequest, VqaResponse);
forward_arc!(ScoreBackend, score, ScoreRequest, ScoreResponse);

/// The set of model endpoints a pipeline run talks to.
#[derive(Clone)]
pub struct Backends {
    pub embed: Arc<dyn EmbedBackend>,
    pub chat: Arc<dyn ChatBackend>,
    pub caption: Arc<dyn CaptionBackend>,
    pub vqa: Arc<dyn VqaBackend>,
    pub score: Option<Arc<dyn ScoreBackend>>,
}

impl Backends {
    /// Every endpoint served by one deterministic mock.
    pub fn mock(mock: mock::MockBackend) -> Self {
        let m = Arc::new(mock);
        Self {
            embed: m.clone(),
            chat: m.clone(),
            caption: m.clone(),
            vqa: m.clone(),
            score: Some(m),
        }
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends").finish_non_exhaustive()
    }
}
