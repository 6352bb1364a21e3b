//! On-disk store of enrolled identities and probe matching.
//!
//! Layout under the gallery root:
//!
//! ```text
//! index.txt                 one tab-separated record per stored model
//! <identity>/<hash>.nf3d    face-model files
//! .lock                     present while a writer holds the gallery
//! ```
//!
//! Index records are `identity, relative path, unix timestamp, source point
//! count, final training mse, sha256 of the model file`. Model files and the
//! index are written to a temporary name and renamed into place, so a reader
//! never sees a record whose file is missing.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::facemodel::{FaceModel, FlatWeights, ModelError};
use crate::siamese::{energy, Identity, SiameseError, SiameseNet};

pub const INDEX_FILE: &str = "index.txt";
const LOCK_FILE: &str = ".lock";
const INDEX_HEADER: &str = "#nf3d-gallery v1";

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("gallery: cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gallery: invalid identity label {0:?}")]
    InvalidIdentity(String),
    #[error("gallery: model has {model} hidden units, gallery stores {gallery}")]
    HiddenMismatch { gallery: usize, model: usize },
    #[error("gallery: model {hash} is already enrolled as {identity:?}")]
    DuplicateModel { identity: String, hash: String },
    #[error("gallery: {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("gallery: no enrolled identities in {0}")]
    Empty(PathBuf),
    #[error("gallery: {path} line {line}: {reason}")]
    CorruptIndex { path: PathBuf, line: usize, reason: String },
    #[error("gallery: {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Siamese(#[from] SiameseError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GalleryError + '_ {
    move |source| GalleryError::Io { path: path.to_path_buf(), source }
}

/// Provenance recorded with each enrolled model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnrollMeta {
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub point_count: usize,
    pub final_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    /// Relative to the gallery root, `/`-separated.
    pub path: String,
    pub meta: EnrollMeta,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub identity: String,
    pub models: Vec<ModelRecord>,
}

/// The parsed index of a gallery directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    root: PathBuf,
    entries: Vec<GalleryEntry>,
}

fn check_identity(identity: &str) -> Result<(), GalleryError> {
    let bad = identity.is_empty()
        || identity == "."
        || identity == ".."
        || identity.starts_with('.')
        || identity.chars().any(|c| c.is_control() || c == '/' || c == '\\' || c == '\t');
    if bad {
        return Err(GalleryError::InvalidIdentity(identity.to_string()));
    }
    Ok(())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` next to `path` and renames over it.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), GalleryError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Exclusive writer lock, released on drop.
struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(root: &Path) -> Result<Self, GalleryError> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(GalleryError::Locked(root.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

impl Gallery {
    /// Reads the index of `root`; a directory without one is an empty
    /// gallery.
    pub fn open(root: &Path) -> Result<Self, GalleryError> {
        let index = root.join(INDEX_FILE);
        let text = match fs::read_to_string(&index) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(&index)(e)),
        };
        let mut entries: Vec<GalleryEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let corrupt = |reason: String| GalleryError::CorruptIndex { path: index.clone(), line: n + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(corrupt(format!("{} fields, expected 6", fields.len())));
            }
            let parse_err = |what: &str, v: &str| corrupt(format!("bad {what} {v:?}"));
            let meta = EnrollMeta {
                timestamp: fields[2].parse().map_err(|_| parse_err("timestamp", fields[2]))?,
                point_count: fields[3].parse().map_err(|_| parse_err("point count", fields[3]))?,
                final_mse: fields[4].parse().map_err(|_| parse_err("mse", fields[4]))?,
            };
            check_identity(fields[0]).map_err(|_| parse_err("identity", fields[0]))?;
            let record = ModelRecord { path: fields[1].to_string(), meta, sha256: fields[5].to_string() };
            match entries.iter_mut().find(|e| e.identity == fields[0]) {
                Some(e) => e.models.push(record),
                None => entries.push(GalleryEntry { identity: fields[0].to_string(), models: vec![record] }),
            }
        }
        entries.sort_by(|a, b| a.identity.cmp(&b.identity));
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Entries sorted by identity label.
    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn model_count(&self) -> usize {
        self.entries.iter().map(|e| e.models.len()).sum()
    }

    fn index_text(&self) -> String {
        let mut out = format!("{INDEX_HEADER}\n");
        for e in &self.entries {
            for m in &e.models {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    e.identity, m.path, m.meta.timestamp, m.meta.point_count, m.meta.final_mse, m.sha256
                ));
            }
        }
        out
    }

    /// Loads one stored model.
    pub fn load_model(&self, record: &ModelRecord) -> Result<FaceModel, GalleryError> {
        let path = self.root.join(&record.path);
        FaceModel::load(&path).map_err(|source| GalleryError::Model { path, source })
    }

    /// Every stored model, grouped by identity in label order.
    pub fn load_all(&self) -> Result<Vec<(String, Vec<FaceModel>)>, GalleryError> {
        self.entries
            .par_iter()
            .map(|e| {
                let models = e.models.iter().map(|m| self.load_model(m)).collect::<Result<_, _>>()?;
                Ok((e.identity.clone(), models))
            })
            .collect()
    }

    /// The stored models as flattened weights, ready for pair generation.
    pub fn identities(&self) -> Result<Vec<Identity>, GalleryError> {
        Ok(self
            .load_all()?
            .into_iter()
            .map(|(label, models)| Identity { label, models: models.iter().map(FaceModel::flatten).collect() })
            .collect())
    }

    /// Hidden-unit count shared by the stored models, read from the first
    /// model file.
    pub fn hidden_count(&self) -> Result<Option<usize>, GalleryError> {
        match self.entries.first().and_then(|e| e.models.first()) {
            Some(record) => Ok(Some(self.load_model(record)?.hidden_count())),
            None => Ok(None),
        }
    }
}

/// Stores `model` under `identity` and records it in the index.
pub fn enroll(
    gallery_dir: &Path,
    identity: &str,
    model: &FaceModel,
    meta: EnrollMeta,
) -> Result<GalleryEntry, GalleryError> {
    check_identity(identity)?;
    fs::create_dir_all(gallery_dir).map_err(io_err(gallery_dir))?;
    let _lock = LockGuard::acquire(gallery_dir)?;
    let mut gallery = Gallery::open(gallery_dir)?;
    if let Some(m) = gallery.hidden_count()? {
        if m != model.hidden_count() {
            return Err(GalleryError::HiddenMismatch { gallery: m, model: model.hidden_count() });
        }
    }
    let bytes = model.to_bytes();
    let sha256 = hex_digest(&bytes);
    for e in &gallery.entries {
        if e.models.iter().any(|m| m.sha256 == sha256) {
            return Err(GalleryError::DuplicateModel { identity: e.identity.clone(), hash: sha256 });
        }
    }

    let dir = gallery_dir.join(identity);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let file_name = format!("{}.nf3d", &sha256[..16]);
    write_atomic(&dir.join(&file_name), &bytes)?;
    let record = ModelRecord { path: format!("{identity}/{file_name}"), meta, sha256 };
    match gallery.entries.iter_mut().find(|e| e.identity == identity) {
        Some(e) => e.models.push(record),
        None => {
            gallery.entries.push(GalleryEntry { identity: identity.to_string(), models: vec![record] });
            gallery.entries.sort_by(|a, b| a.identity.cmp(&b.identity));
        }
    }
    write_atomic(&gallery_dir.join(INDEX_FILE), gallery.index_text().as_bytes())?;
    Ok(gallery.entries.into_iter().find(|e| e.identity == identity).expect("entry just added"))
}

/// Identities ranked by the smallest energy between the probe and any of
/// their stored models, ascending, ties broken by label. At most `top_k`
/// results.
pub fn match_probe(
    gallery_dir: &Path,
    probe: &FaceModel,
    net: &SiameseNet,
    top_k: usize,
) -> Result<Vec<(String, f64)>, GalleryError> {
    let gallery = Gallery::open(gallery_dir)?;
    if gallery.is_empty() {
        return Err(GalleryError::Empty(gallery_dir.to_path_buf()));
    }
    let stored = gallery.load_all()?;
    let probe_embedding = net.embed(&probe.flatten())?;
    let mut ranked = stored
        .par_iter()
        .map(|(label, models)| {
            let mut best = f64::INFINITY;
            for m in models {
                let flat: FlatWeights = m.flatten();
                best = best.min(energy(&probe_embedding, &net.embed(&flat)?)?);
            }
            Ok((label.clone(), best))
        })
        .collect::<Result<Vec<_>, SiameseError>>()?;
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    Ok(ranked)
}
