#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod domains;
pub mod exit;
pub mod noise;
pub mod pde;
pub mod scalar;
pub mod stats;

pub use scalar::Scalar;

pub type Field = pde::SpectralField<f64>;
pub type Model = pde::ChafeeInfante<f64>;
pub type Params = pde::ModelParams<f64>;
