#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod linear_models;
pub mod margin_metric;
pub mod pipelines;

pub use error::{Error, Result};
