//! Two-stream facial depression-severity estimation: face detection and
//! alignment, corpus handling, augmentation, a convolutional regressor with
//! its optimizers and training loop, and video-level evaluation with
//! score fusion.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod detect;
pub mod error;
pub mod evalfuse;
pub mod fixture;
pub mod geom;
pub mod image;
pub mod net;
pub mod optim;
pub mod tensorfile;
pub mod trainer;

pub use error::{Error, Result};
