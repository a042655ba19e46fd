//! Multi-stage spatio-temporal aggregation transformer (MSTAT) for
//! video person re-identification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod augment;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod proxy;
pub mod retrieval;
pub mod sta;

pub use error::{MstatError, Result};
