//! HTTP transport for the model backend protocol.
//!
//! [`HttpBackend`] is a blocking JSON client implementing every backend
//! trait from `qarsmith_core::backend`; wrap it in
//! [`Retrying`](qarsmith_core::backend::Retrying) for bounded retries.
//! [`server`] exposes any in-process backend set over the same protocol.

pub mod client;
pub mod server;

pub use client::HttpBackend;
pub use server::{router, serve_in_background, ServerHandle};
