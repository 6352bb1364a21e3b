//! Compact neural models of 3D face surfaces and verification over their
//! weights.
//!
//! A face scan is normalized and registered ([`cloud`], [`registration`]),
//! compressed into a small tanh network mapping `(x, y)` to depth
//! ([`facemodel`], [`lmtrain`]), and the flattened network weights are
//! compared by a Siamese embedding ([`siamese`]). [`gallery`] keeps enrolled
//! models on disk.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod facemodel;
pub mod gallery;
mod kdtree;
pub mod lmtrain;
pub mod registration;
pub mod siamese;
pub mod synth;
