pub mod aae;
pub mod autodiff;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/gaussians.md")]
    pub struct Gaussians;
    #[doc = include_str!("../../../book/src/models.md")]
    pub struct Models;
    #[doc = include_str!("../../../book/src/detection.md")]
    pub struct Detection;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub struct Reproducibility;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
