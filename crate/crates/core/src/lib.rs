//! Multi-view masked-autoencoder pretraining over point clouds.
//!
//! A scene is a colored point cloud inside the `[-1, 1]^3` workspace cube.
//! It is splatted into five orthographic 10-channel virtual views, cut into
//! patch tokens, partially masked, and fed to a transformer encoder that
//! learns to reconstruct the hidden content. The pretrained encoder is then
//! finetuned with a small action decoder on a toy reaching task.

pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod model;
pub mod patches;
pub mod pointcloud;
pub mod renderer;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/scenes.md")]
    pub struct Scenes;
    #[doc = include_str!("../../../book/src/rendering.md")]
    pub struct Rendering;
    #[doc = include_str!("../../../book/src/masking.md")]
    pub struct Masking;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
