//! Rigid registration: closed-form least-squares alignment of corresponding
//! points and the iterative closest point (ICP) loop built on it.

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{centroid, PointCloud};
use crate::kdtree::{dist2, KdTree};

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("registration: point lists differ in length ({moving} moving vs {fixed} static)")]
    LengthMismatch { moving: usize, fixed: usize },
    #[error("registration: need at least 3 point pairs, got {0}")]
    TooFewPairs(usize),
    #[error("registration: points are collinear or coincident; rotation is undetermined")]
    Degenerate,
    #[error("registration: probe cloud carries no landmarks")]
    MissingLandmarks,
    #[error("registration: {probe} probe landmarks vs {reference} reference landmarks")]
    LandmarkCountMismatch { probe: usize, reference: usize },
    #[error("registration: {0} is not a proper rotation")]
    NotARotation(String),
    #[error("registration: invalid ICP configuration: {0}")]
    InvalidConfig(&'static str),
}

/// `p -> R p + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Checks `RᵀR = I` and `det R = 1` to within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, RegistrationError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 || !translation.iter().all(|v| v.is_finite()) {
            return Err(RegistrationError::NotARotation(format!("{rotation}")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self { rotation: *rot.matrix(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Angle of `self⁻¹ ∘ other`'s rotation, in radians.
    pub fn rotation_error(&self, other: &RigidTransform) -> f64 {
        RigidTransform { rotation: self.rotation.transpose() * other.rotation, translation: Vector3::zeros() }.angle()
    }
}

/// Least-squares rigid transform taking `moving[i]` onto `fixed[i]`
/// (Kabsch: SVD of the cross-covariance with a reflection fix).
pub fn solve_rigid(moving: &[Point3<f64>], fixed: &[Point3<f64>]) -> Result<RigidTransform, RegistrationError> {
    if moving.len() != fixed.len() {
        return Err(RegistrationError::LengthMismatch { moving: moving.len(), fixed: fixed.len() });
    }
    if moving.len() < 3 {
        return Err(RegistrationError::TooFewPairs(moving.len()));
    }
    let cm = centroid(moving);
    let cs = centroid(fixed);
    let mut h = Matrix3::zeros();
    for (m, s) in moving.iter().zip(fixed) {
        h += (m - cm) * (s - cs).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(RegistrationError::Degenerate),
    };
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    // rank < 2 leaves a free rotation about the line through the points
    if sv[0] <= f64::MIN_POSITIVE || sv[1] <= 1e-12 * sv[0] {
        return Err(RegistrationError::Degenerate);
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cs.coords - rotation * cm.coords;
    Ok(RigidTransform { rotation, translation })
}

pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    cloud.with_points(cloud.points().iter().map(|p| transform.apply(p)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the mean squared residual improves by less than this.
    pub residual_tolerance: f64,
    /// Fraction of moving points used for matching, chosen once per run.
    pub sample_fraction: f64,
    /// Pairs farther apart than this are dropped.
    pub rejection_distance: Option<f64>,
    pub seed: u64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iterations: 50, residual_tolerance: 1e-6, sample_fraction: 1.0, rejection_distance: None, seed: 0 }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations == 0 {
            return Err(RegistrationError::InvalidConfig("max_iterations must be >= 1"));
        }
        if !(self.residual_tolerance > 0.0) {
            return Err(RegistrationError::InvalidConfig("residual_tolerance must be positive"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(RegistrationError::InvalidConfig("sample_fraction must lie in (0, 1]"));
        }
        if let Some(d) = self.rejection_distance {
            if !(d > 0.0) {
                return Err(RegistrationError::InvalidConfig("rejection_distance must be positive"));
            }
        }
        Ok(())
    }

    /// Ascending indices of the moving points that take part in matching.
    fn sample_indices(&self, n: usize) -> Vec<usize> {
        if self.sample_fraction >= 1.0 {
            return (0..n).collect();
        }
        let k = ((n as f64 * self.sample_fraction).round() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// One matched pair: moving index, static index, Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub moving: usize,
    pub fixed: usize,
    pub distance: f64,
}

fn match_points(
    moving: &[Point3<f64>],
    sampled: &[usize],
    tree: &KdTree<'_>,
    rejection: Option<f64>,
) -> Vec<Correspondence> {
    sampled
        .par_iter()
        .filter_map(|&i| {
            let (j, d2) = tree.nearest(&moving[i])?;
            let distance = d2.sqrt();
            match rejection {
                Some(limit) if distance > limit => None,
                _ => Some(Correspondence { moving: i, fixed: j, distance }),
            }
        })
        .collect()
}

/// Exact nearest static point for each sampled moving point, in ascending
/// moving-index order.
pub fn nearest_correspondences(moving: &PointCloud, fixed: &PointCloud, config: &IcpConfig) -> Vec<Correspondence> {
    let tree = KdTree::new(fixed.points());
    let sampled = config.sample_indices(moving.len());
    match_points(moving.points(), &sampled, &tree, config.rejection_distance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations_used: usize,
    /// Mean squared distance over the surviving pairs after the last update.
    pub final_residual: f64,
    /// Residual at the start (index 0) and after every iteration.
    pub residual_history: Vec<f64>,
}

/// Aligns `moving` onto `fixed`, starting from `initial`.
pub fn icp(
    moving: &PointCloud,
    fixed: &PointCloud,
    initial: &RigidTransform,
    config: &IcpConfig,
) -> Result<IcpResult, RegistrationError> {
    config.validate()?;
    if moving.len() < 3 || fixed.len() < 3 {
        return Err(RegistrationError::TooFewPairs(moving.len().min(fixed.len())));
    }
    let tree = KdTree::new(fixed.points());
    let sampled = config.sample_indices(moving.len());
    let mut transform = *initial;
    let mut current: Vec<Point3<f64>> = moving.points().iter().map(|p| initial.apply(p)).collect();

    let initial_pairs = match_points(&current, &sampled, &tree, config.rejection_distance);
    let mut previous = mean_square(&initial_pairs);
    let mut history = vec![previous];
    let mut iterations = 0;
    let mut residual = previous;

    for it in 1..=config.max_iterations {
        let pairs = match_points(&current, &sampled, &tree, config.rejection_distance);
        if pairs.len() < 3 {
            return Err(RegistrationError::TooFewPairs(pairs.len()));
        }
        let src: Vec<Point3<f64>> = pairs.iter().map(|c| current[c.moving]).collect();
        let dst: Vec<Point3<f64>> = pairs.iter().map(|c| fixed.points()[c.fixed]).collect();
        // already coincident: an SVD would only add rounding noise
        let step =
            if pairs.iter().all(|c| c.distance == 0.0) { RigidTransform::identity() } else { solve_rigid(&src, &dst)? };
        transform = step.after(&transform);
        for p in current.iter_mut() {
            *p = step.apply(p);
        }
        residual = src.iter().zip(&dst).map(|(m, s)| dist2(&step.apply(m), s)).sum::<f64>() / src.len() as f64;
        history.push(residual);
        iterations = it;
        if previous - residual < config.residual_tolerance {
            break;
        }
        previous = residual;
    }

    Ok(IcpResult { transform, iterations_used: iterations, final_residual: residual, residual_history: history })
}

fn mean_square(pairs: &[Correspondence]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|c| c.distance * c.distance).sum::<f64>() / pairs.len() as f64
}

/// Rigidly moves the whole probe so its landmarks best match `reference`.
pub fn register_landmarks(
    probe: &PointCloud,
    reference: &[Point3<f64>],
) -> Result<(PointCloud, RigidTransform), RegistrationError> {
    let landmarks = probe.landmark_points().ok_or(RegistrationError::MissingLandmarks)?;
    if landmarks.len() != reference.len() {
        return Err(RegistrationError::LandmarkCountMismatch { probe: landmarks.len(), reference: reference.len() });
    }
    let transform = solve_rigid(&landmarks, reference)?;
    Ok((apply_transform(probe, &transform), transform))
}
