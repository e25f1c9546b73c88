//! Mutual graph learning for camouflaged object detection.
//!
//! Two task branches (camouflaged-region segmentation and object-aware edge
//! extraction) exchange information through soft-clustered semantic graphs
//! and an edge-supportive k-NN graph convolution. Everything down to the
//! autodiff engine is implemented here on dense CPU tensors.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ecgr;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod network;
pub mod pnm;
pub mod rigr;
pub mod synth;
pub mod train;

pub use error::{CheckpointError, MglError, Result};
