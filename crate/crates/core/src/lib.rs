pub mod affinity;
pub mod bench;
pub mod bh;
pub mod data;
pub mod error;
pub mod init;
pub mod kernels;
pub mod knn;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod plot;

pub use error::{GdrError, Result};
