//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.

use neuroface::cloud::CloudError;
use neuroface::facemodel::ModelError;
use neuroface::gallery::GalleryError;
use neuroface::lmtrain::TrainError;
use neuroface::registration::RegistrationError;
use neuroface::siamese::SiameseError;

use crate::config::ConfigError;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERICAL: u8 = 3;

/// Failures raised by the commands themselves rather than by a library.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::InvalidGrid(_) | ModelError::TooManyAugmentations { .. } => USAGE,
        _ => DATA,
    }
}

fn siamese_code(e: &SiameseError) -> u8 {
    match e {
        SiameseError::InvalidConfig(_) | SiameseError::InfeasiblePairs(_) => USAGE,
        SiameseError::Model(m) => model_code(m),
        _ => DATA,
    }
}

/// Code for the outermost error in the chain that this crate knows about.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return USAGE;
        }
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => USAGE,
                Failure::Numerical(_) => NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::InvalidConfig(_) => USAGE,
                TrainError::Factorization { .. } => NUMERICAL,
                TrainError::Model(m) => model_code(m),
                TrainError::Report(_) => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<RegistrationError>() {
            return match e {
                RegistrationError::InvalidConfig(_) => USAGE,
                RegistrationError::Degenerate
                | RegistrationError::TooFewPairs(_)
                | RegistrationError::NotARotation(_) => NUMERICAL,
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if let Some(e) = cause.downcast_ref::<SiameseError>() {
            return siamese_code(e);
        }
        if let Some(e) = cause.downcast_ref::<GalleryError>() {
            return match e {
                GalleryError::InvalidIdentity(_) => USAGE,
                GalleryError::Siamese(s) => siamese_code(s),
                _ => DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<CloudError>() {
            return match e {
                CloudError::InvalidNoise(_) => USAGE,
                _ => DATA,
            };
        }
    }
    DATA
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
pub fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
