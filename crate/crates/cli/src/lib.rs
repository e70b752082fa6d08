//! Command-line lifecycle and HTTP service for the schaladb engine.
//!
//! `schaladb start` launches a daemon that hosts the data nodes, the connectors
//! and the HTTP API. Later verbs (`setup`, `run`, `query`, `steer`,
//! `shutdown`) talk to that daemon over HTTP, so state survives between
//! invocations. `bench` runs experiments in-process.

pub mod client;
pub mod config;
pub mod engine;
pub mod http;

pub use client::{ApiClient, ClientError};
pub use engine::{EngineError, EngineHandle, EngineOptions, EngineState};
pub use http::HttpService;
