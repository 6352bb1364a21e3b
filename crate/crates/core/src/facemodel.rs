//! The face model: a 2→M→1 tanh network mapping `(x, y)` to depth `z`.
//!
//! ```text
//! n_j = wx_j·x + wy_j·y + b_j
//! z̄   = tanh( Σ_j wo_j·tanh(n_j) + b_o )
//! ```
//!
//! Each hidden unit contributes one row `(wx, wy, b, wo)` to the parameter
//! matrix; flattening concatenates the rows and appends the shared output
//! bias, giving `4M + 1` numbers. Reordering rows leaves the function intact,
//! which is what [`permute_augment`] exploits.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::PointCloud;

pub const MODEL_MAGIC: [u8; 4] = *b"NF3D";
pub const MODEL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("facemodel: hidden layer needs at least one unit")]
    NoHiddenUnits,
    #[error("facemodel: flat vector has {len} values, expected 4*{hidden}+1")]
    FlatLength { len: usize, hidden: usize },
    #[error("facemodel: weight {index} is not finite")]
    NonFinite { index: usize },
    #[error("facemodel: {0:?} is not a permutation of 0..{1}")]
    InvalidPermutation(Vec<usize>, usize),
    #[error("facemodel: {requested} augmentations requested but only {available} orderings exist")]
    TooManyAugmentations { requested: usize, available: u128 },
    #[error("facemodel: invalid grid: {0}")]
    InvalidGrid(String),
    #[error("facemodel: bad magic {0:?}, not a face model file")]
    BadMagic([u8; 4]),
    #[error("facemodel: unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("facemodel: file truncated: {expected} bytes expected, {found} present")]
    Truncated { expected: usize, found: usize },
    #[error("facemodel: header declares {hidden} hidden units but payload holds {found} bytes")]
    PayloadMismatch { hidden: usize, found: usize },
    #[error("facemodel: cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One row of the parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenUnit {
    pub wx: f64,
    pub wy: f64,
    pub bias: f64,
    pub out: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    units: Vec<HiddenUnit>,
    output_bias: f64,
}

impl FaceModel {
    pub fn new(units: Vec<HiddenUnit>, output_bias: f64) -> Result<Self, ModelError> {
        if units.is_empty() {
            return Err(ModelError::NoHiddenUnits);
        }
        let model = Self { units, output_bias };
        if let Some(index) = model.flatten().values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        Ok(model)
    }

    pub fn zeros(hidden: usize) -> Result<Self, ModelError> {
        let unit = HiddenUnit { wx: 0.0, wy: 0.0, bias: 0.0, out: 0.0 };
        Self::new(vec![unit; hidden], 0.0)
    }

    pub fn hidden_count(&self) -> usize {
        self.units.len()
    }

    pub fn param_count(&self) -> usize {
        param_count(self.units.len())
    }

    pub fn units(&self) -> &[HiddenUnit] {
        &self.units
    }

    pub fn output_bias(&self) -> f64 {
        self.output_bias
    }

    /// Output pre-activation `n_f`.
    #[inline]
    pub(crate) fn pre_activation(&self, x: f64, y: f64) -> f64 {
        self.units.iter().map(|u| u.out * (u.wx * x + u.wy * y + u.bias).tanh()).sum::<f64>() + self.output_bias
    }

    pub fn forward(&self, x: f64, y: f64) -> f64 {
        self.pre_activation(x, y).tanh()
    }

    /// Predicted depth at each point's `(x, y)`, in point order.
    pub fn predict(&self, points: &[Point3<f64>]) -> Vec<f64> {
        points.par_iter().map(|p| self.forward(p.x, p.y)).collect()
    }

    /// Mean squared depth error over the cloud.
    pub fn mse(&self, cloud: &PointCloud) -> f64 {
        let sse: f64 =
            self.predict(cloud.points()).iter().zip(cloud.points()).map(|(z_hat, p)| (z_hat - p.z).powi(2)).sum();
        sse / cloud.len() as f64
    }

    pub fn flatten(&self) -> FlatWeights {
        let mut values = Vec::with_capacity(self.param_count());
        for u in &self.units {
            values.extend_from_slice(&[u.wx, u.wy, u.bias, u.out]);
        }
        values.push(self.output_bias);
        FlatWeights { values, hidden_count: self.units.len() }
    }

    pub fn unflatten(flat: &FlatWeights) -> Result<Self, ModelError> {
        Self::from_values(&flat.values)
    }

    /// Inverse of [`FaceModel::flatten`] from a bare slice; `M` is inferred.
    pub fn from_values(values: &[f64]) -> Result<Self, ModelError> {
        if values.len() < 5 || !(values.len() - 1).is_multiple_of(4) {
            return Err(ModelError::FlatLength { len: values.len(), hidden: values.len().saturating_sub(1) / 4 });
        }
        let units = values[..values.len() - 1]
            .chunks_exact(4)
            .map(|r| HiddenUnit { wx: r[0], wy: r[1], bias: r[2], out: r[3] })
            .collect();
        Self::new(units, values[values.len() - 1])
    }

    /// The model with every weight rounded to `f32`, i.e. what a save/load
    /// round trip yields.
    pub fn quantized(&self) -> Self {
        let values: Vec<f64> = self.flatten().values.iter().map(|&v| v as f32 as f64).collect();
        Self::from_values(&values).expect("f32 rounding keeps finite weights finite")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.hidden_count();
        let mut out = Vec::with_capacity(HEADER_LEN + payload_len(m));
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&[0u8; 6]);
        for v in self.flatten().values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < HEADER_LEN {
            return Err(ModelError::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MODEL_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let hidden = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        if hidden == 0 {
            return Err(ModelError::NoHiddenUnits);
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = payload_len(hidden);
        if payload.len() < expected {
            return Err(ModelError::Truncated { expected: HEADER_LEN + expected, found: bytes.len() });
        }
        if payload.len() > expected {
            return Err(ModelError::PayloadMismatch { hidden, found: payload.len() });
        }
        let values: Vec<f64> =
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Self::from_values(&values)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// `4M + 1`.
pub const fn param_count(hidden: usize) -> usize {
    4 * hidden + 1
}

/// Bytes of weight data in a serialized model with `hidden` units.
pub const fn payload_len(hidden: usize) -> usize {
    param_count(hidden) * 4
}

/// Size ratio of a raw cloud stored as three `f64` per point to the model
/// payload.
pub fn compression_factor(raw_points: usize, hidden: usize) -> f64 {
    (raw_points * 3 * 8) as f64 / payload_len(hidden) as f64
}

/// The flattened parameter vector used as a verification feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatWeights {
    pub values: Vec<f64>,
    pub hidden_count: usize,
}

impl FlatWeights {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        let model = FaceModel::from_values(&values)?;
        Ok(Self { hidden_count: model.hidden_count(), values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &FlatWeights) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A reordering of hidden units: unit `j` moves to slot `mapping[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self, ModelError> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &j in &mapping {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(ModelError::InvalidPermutation(mapping, n));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self { mapping: (0..n).collect() }
    }

    /// Exchanges units `a` and `b`.
    pub fn swap(n: usize, a: usize, b: usize) -> Result<Self, ModelError> {
        let mut mapping: Vec<usize> = (0..n).collect();
        if a >= n || b >= n {
            return Err(ModelError::InvalidPermutation(vec![a, b], n));
        }
        mapping.swap(a, b);
        Ok(Self { mapping })
    }

    pub fn random(n: usize, rng: &mut impl rand::Rng) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &j)| i == j)
    }
}

/// Moves row `j` of the parameter matrix to row `perm[j]`; the output bias
/// is shared by every reordering.
pub fn permute_augment(model: &FaceModel, perm: &Permutation) -> Result<FaceModel, ModelError> {
    let m = model.hidden_count();
    if perm.len() != m {
        return Err(ModelError::InvalidPermutation(perm.mapping.clone(), m));
    }
    let mut units = model.units.clone();
    for (j, &target) in perm.mapping.iter().enumerate() {
        units[target] = model.units[j];
    }
    Ok(FaceModel { units, output_bias: model.output_bias })
}

/// `n!`, saturating at `u128::MAX`.
pub(crate) fn factorial(n: usize) -> u128 {
    (1..=n as u128).try_fold(1u128, |acc, k| acc.checked_mul(k)).unwrap_or(u128::MAX)
}

/// `count` flattened reorderings of `model` under distinct random
/// permutations. The identity may be among them.
pub fn random_augmentations(model: &FaceModel, count: usize, seed: u64) -> Result<Vec<FlatWeights>, ModelError> {
    random_permutations(model.hidden_count(), count, seed, false)?
        .iter()
        .map(|p| permute_augment(model, p).map(|m| m.flatten()))
        .collect()
}

/// Distinct seeded permutations of `n` items, optionally excluding the
/// identity.
pub(crate) fn random_permutations(
    n: usize,
    count: usize,
    seed: u64,
    skip_identity: bool,
) -> Result<Vec<Permutation>, ModelError> {
    let available = factorial(n) - u128::from(skip_identity);
    if count as u128 > available {
        return Err(ModelError::TooManyAugmentations { requested: count, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p = Permutation::random(n, &mut rng);
        if skip_identity && p.is_identity() {
            continue;
        }
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    Ok(out)
}

/// A regular `nx × ny` sampling grid inside the unit square `[-1, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(n: usize) -> Self {
        Self { x_min: -1.0, x_max: 1.0, y_min: -1.0, y_max: 1.0, nx: n, ny: n }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidGrid(msg));
        if self.nx == 0 || self.ny == 0 {
            return bad(format!("{}x{} has no nodes", self.nx, self.ny));
        }
        for (lo, hi, axis) in [(self.x_min, self.x_max, 'x'), (self.y_min, self.y_max, 'y')] {
            if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) {
                return bad(format!("{axis} range [{lo}, {hi}] leaves [-1, 1]"));
            }
            if lo > hi {
                return bad(format!("{axis} range [{lo}, {hi}] is reversed"));
            }
        }
        Ok(())
    }

    fn axis(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
    }

    /// Grid nodes, row by row (`y` outer, `x` inner).
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        Self::axis(self.y_min, self.y_max, self.ny)
            .flat_map(|y| Self::axis(self.x_min, self.x_max, self.nx).map(move |x| (x, y)))
            .collect()
    }
}

/// Evaluates the model on a grid, regenerating a cloud at any density.
pub fn resample(model: &FaceModel, grid: &GridSpec) -> Result<PointCloud, ModelError> {
    grid.validate()?;
    let points = grid.nodes().into_par_iter().map(|(x, y)| Point3::new(x, y, model.forward(x, y))).collect();
    Ok(PointCloud::new(points).expect("validated grid is nonempty"))
}
