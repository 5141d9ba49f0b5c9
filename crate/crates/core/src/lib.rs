//! Open-vocabulary temporal action localization on pre-extracted feature streams.
//!
//! The crate is layered bottom-up: [`tensor`] provides reverse-mode
//! differentiation, [`model`] builds the modality-mixer detector on top of it,
//! [`losses`] and [`training`] fit it, and [`inference`] plus [`evaluation`]
//! turn head outputs into scored segments and split-aware mAP.

mod binio;
mod parallel;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod inference;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod textbank;
pub mod training;

pub use error::{Error, Result};
