//! Annotation service: rating and pairwise tasks over a JSON API, persisted
//! in a run store and aggregated into critic labels and verdicts.

pub mod http;
pub mod service;
pub mod simulate;
pub mod task;

use std::net::SocketAddr;
use std::sync::Arc;

pub use http::router;
pub use service::{AnnotationService, ExportSummary, ServiceConfig, ServiceError, TaskView};
pub use task::*;

/// Version tag carried by every API response.
pub const SCHEMA_VERSION: u32 = 1;

/// Run the API on a background thread.
pub fn serve(service: Arc<AnnotationService>, addr: SocketAddr) -> std::io::Result<qarsmith_backend::ServerHandle> {
    qarsmith_backend::serve_in_background(router(service), addr)
}
