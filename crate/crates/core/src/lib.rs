//! Text-guided image manipulation.
//!
//! A multi-stage generator edits an input image so that it matches a
//! caption. Text features drive generation, while regional image features
//! enter every stage through an affine fusion `h * W(v) + b(v)`. A detail
//! correction network then refines the last stage with word attention and
//! shallow image features. Training, evaluation (including the
//! manipulative-precision score `(1 - diff) * sim`) and a procedural
//! captioned-shapes corpus are all included.

pub mod acm;
pub mod attention;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
