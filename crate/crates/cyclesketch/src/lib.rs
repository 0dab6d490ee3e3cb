//! File formats, command line and HTTP service around
//! [`cyclesketch_core`].
//!
//! - [`checkpoint`]: bit-exact model files.
//! - [`formats`]: sketch, camera, plane, target and config files.
//! - [`pipeline`]: project, train, rollout, evaluate and field export in
//!   surface-plane units, shared by the CLI and the service.
//! - [`cli`]: the `cyclesketch` command.
//! - [`service`]: the HTTP API used by the sketch studio.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod formats;
pub mod hexfloat;
pub mod pipeline;
pub mod service;

pub use checkpoint::{load_model, save_model, ModelCheckpoint};
pub use error::{AppError, AppResult};
