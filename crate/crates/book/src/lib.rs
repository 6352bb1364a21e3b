//! Compiles and runs every Rust listing of the guide as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/clouds.md")]
pub mod clouds {}

#[doc = include_str!("../../../book/src/registration.md")]
pub mod registration {}

#[doc = include_str!("../../../book/src/face-models.md")]
pub mod face_models {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/augmentation.md")]
pub mod augmentation {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}

#[doc = include_str!("../../../book/src/gallery.md")]
pub mod gallery {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/acceptance.md")]
pub mod acceptance {}
