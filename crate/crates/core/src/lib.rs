//! Semi-supervised temporal language grounding.
//!
//! Regression- and proposal-based grounding models trained teacher-student
//! style on a mix of labeled and unlabeled video-sentence pairs, with pseudo
//! labels, sequential perturbations and margin-based contrastive losses.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod perturb;
pub mod proposal;
pub mod pseudo;
pub mod regression;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
