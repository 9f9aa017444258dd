//! Job service for maskguide: a persistent job store, a bounded worker pool
//! and the HTTP/SSE API used by the mask-drawing UI.

pub mod config;
pub mod error;
pub mod http;
pub mod service;
pub mod store;

pub use config::ServiceConfig;
pub use error::{Result, ServiceError};
pub use service::{JobView, SelectRequest, Service, Submitted, VocabView};
pub use store::{EventKind, JobEvent, JobRecord, JobStore};
