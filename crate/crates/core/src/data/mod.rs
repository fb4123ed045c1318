//! On-disk formats: scenes, images, checkpoints, run configuration and layout.

pub mod checkpoint;
pub mod images;
pub mod run;
pub mod scene;
pub mod synthetic;
