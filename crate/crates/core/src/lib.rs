//! Block-wise sparse training through a masked sum of Kronecker products,
//! `W = Σᵢ (S ⊙ Aᵢ) ⊗ Bᵢ`.
//!
//! The crate is organised bottom-up: dense matrices and the reshaping maps
//! ([`matrix`], [`blocks`]), the factored layer ([`kron`]), layer stacks
//! ([`network`]), exact FLOP accounting ([`flops`]), trainers ([`train`]),
//! one-shot pattern selection ([`select`]), the parameter-minimising shape
//! search ([`shape`]), datasets ([`data`]) and on-disk formats ([`io`]).

pub mod arith;
pub mod blocks;
pub mod data;
pub mod error;
pub mod flops;
pub mod io;
pub mod kron;
pub mod matrix;
pub mod network;
pub mod select;
pub mod shape;
pub mod train;

pub use arith::{Arith, FlopCounter, Plain};
pub use error::{Error, Result};
pub use kron::{count_params, KronFactor, KronShape};
pub use matrix::Matrix;
pub use network::{Activation, LayerKind, LayerSpec, LossKind, Network};
