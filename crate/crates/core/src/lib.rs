#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod backward;
pub mod experiment;
pub mod error;
pub mod grid;
pub mod lq;
pub mod model;
pub mod noise;
pub mod quadrature;
pub mod regression;
pub mod resolvent;
pub mod smp;
pub mod special;

pub use error::{Error, Result};
