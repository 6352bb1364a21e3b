//! Point clouds, the XYZ text format, and canonical normalization into the
//! `[-1, 1]^3` cube.
//!
//! Clouds are plain ASCII: one point per line as three whitespace-separated
//! reals, with `#` comment lines and blank lines ignored. Landmarks live in a
//! separate file holding one zero-based point index per line.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("cloud: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cloud: {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("cloud: landmark index {index} out of range for {count} points")]
    LandmarkOutOfRange { index: usize, count: usize },
    #[error("cloud: a cloud needs at least one point")]
    Empty,
    #[error("cloud: normalization scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("cloud: noise level must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
}

/// An ordered set of 3D samples with optional landmark indices into it.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    landmarks: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::Empty);
        }
        Ok(Self { points, landmarks: None })
    }

    pub fn from_xyz(points: impl IntoIterator<Item = [f64; 3]>) -> Result<Self, CloudError> {
        Self::new(points.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect())
    }

    /// Attaches landmark indices, checking each against the point count.
    pub fn with_landmarks(mut self, landmarks: Vec<usize>) -> Result<Self, CloudError> {
        let count = self.points.len();
        if let Some(&index) = landmarks.iter().find(|&&i| i >= count) {
            return Err(CloudError::LandmarkOutOfRange { index, count });
        }
        self.landmarks = Some(landmarks);
        Ok(self)
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn landmark_indices(&self) -> Option<&[usize]> {
        self.landmarks.as_deref()
    }

    /// Landmark coordinates in landmark order.
    pub fn landmark_points(&self) -> Option<Vec<Point3<f64>>> {
        self.landmarks.as_ref().map(|idx| idx.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> Point3<f64> {
        centroid(&self.points)
    }

    /// Builds a cloud with the same landmarks from transformed points.
    /// `points` must have the same length as `self`.
    pub(crate) fn with_points(&self, points: Vec<Point3<f64>>) -> Self {
        debug_assert_eq!(points.len(), self.points.len());
        Self { points, landmarks: self.landmarks.clone() }
    }
}

pub(crate) fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

/// The affine map applied by [`normalize`]: `p' = (p - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub centroid: Point3<f64>,
    pub scale: f64,
}

impl NormalizationParams {
    pub fn identity() -> Self {
        Self { centroid: Point3::origin(), scale: 1.0 }
    }
}

/// Centers the cloud on its centroid and divides by the largest absolute
/// centered coordinate over all axes, so the result fits the `[-1, 1]` cube
/// with its proportions intact. A cloud whose points all coincide maps to the
/// origin with scale 1.
pub fn normalize(cloud: &PointCloud) -> (PointCloud, NormalizationParams) {
    let c = cloud.centroid();
    let centered: Vec<Point3<f64>> = cloud.points.iter().map(|p| Point3::from(p - c)).collect();
    let max_abs = centered.iter().map(|p| p.coords.amax()).fold(0.0_f64, f64::max);
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let points = centered.into_iter().map(|p| Point3::from(p.coords / scale)).collect();
    (cloud.with_points(points), NormalizationParams { centroid: c, scale })
}

/// Inverse of [`normalize`]: `p = p' * scale + centroid`.
pub fn denormalize(cloud: &PointCloud, params: &NormalizationParams) -> Result<PointCloud, CloudError> {
    if !(params.scale > 0.0) {
        return Err(CloudError::NonPositiveScale(params.scale));
    }
    let points = cloud.points.iter().map(|p| Point3::from(p.coords * params.scale + params.centroid.coords)).collect();
    Ok(cloud.with_points(points))
}

fn read(path: &Path) -> Result<String, CloudError> {
    fs::read_to_string(path).map_err(|source| CloudError::Io { path: path.to_path_buf(), source })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses XYZ text. `path` is only used in error messages.
pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Point3<f64>>, CloudError> {
    let parse_err = |line, reason: String| CloudError::Parse { path: path.to_path_buf(), line, reason };
    let mut points = Vec::new();
    for (line, content) in data_lines(text) {
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(line, format!("expected 3 values, found {}", fields.len())));
        }
        let mut xyz = [0.0; 3];
        for (slot, field) in xyz.iter_mut().zip(&fields) {
            let v: f64 = field.parse().map_err(|_| parse_err(line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value {field:?}")));
            }
            *slot = v;
        }
        points.push(Point3::from(xyz));
    }
    Ok(points)
}

pub fn parse_landmarks(text: &str, path: &Path) -> Result<Vec<usize>, CloudError> {
    data_lines(text)
        .map(|(line, content)| {
            content.parse().map_err(|_| CloudError::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("not a landmark index: {content:?}"),
            })
        })
        .collect()
}

/// Reads an XYZ file and, when given, its landmark index file.
pub fn load_cloud(path: &Path, landmark_path: Option<&Path>) -> Result<PointCloud, CloudError> {
    let points = parse_xyz(&read(path)?, path)?;
    let cloud = PointCloud::new(points)?;
    match landmark_path {
        Some(lp) => cloud.with_landmarks(parse_landmarks(&read(lp)?, lp)?),
        None => Ok(cloud),
    }
}

/// Reads a bare list of points, e.g. a reference landmark set.
pub fn load_points(path: &Path) -> Result<Vec<Point3<f64>>, CloudError> {
    parse_xyz(&read(path)?, path)
}

pub fn format_xyz(points: &[Point3<f64>]) -> String {
    let mut out = String::with_capacity(points.len() * 32);
    for p in points {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    out
}

/// Writes points as XYZ text. Values use the shortest round-tripping form.
pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), CloudError> {
    fs::write(path, format_xyz(cloud.points())).map_err(|source| CloudError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_xyz(pts.iter().copied()).unwrap()
    }

    fn assert_close(a: &PointCloud, b: &PointCloud, tol: f64) {
        assert_eq!(a.len(), b.len());
        for (p, q) in a.points().iter().zip(b.points()) {
            assert!((p - q).amax() <= tol, "{p} vs {q}");
        }
    }

    #[test]
    fn parses_points_in_order() {
        let pts = parse_xyz("0 0 0\n1 1 1\n", Path::new("t.xyz")).unwrap();
        assert_eq!(pts, vec![Point3::origin(), Point3::new(1.0, 1.0, 1.0)]);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let pts = parse_xyz("# header\n\n1 2 3\n  # indented\n", Path::new("t")).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn nan_reports_line_number() {
        let err = parse_xyz("0 0 nan\n", Path::new("t.xyz")).unwrap_err();
        match err {
            CloudError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other}"),
        }
        let err = parse_xyz("0 0 0\n1 2\n", Path::new("t.xyz")).unwrap_err();
        assert!(matches!(err, CloudError::Parse { line: 2, .. }));
    }

    #[test]
    fn landmarks_keep_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let xyz = dir.path().join("c.xyz");
        let lm = dir.path().join("c.lm");
        fs::write(&xyz, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
        fs::write(&lm, "2\n0\n").unwrap();
        let c = load_cloud(&xyz, Some(&lm)).unwrap();
        assert_eq!(c.landmark_indices(), Some(&[2, 0][..]));

        fs::write(&lm, "3\n").unwrap();
        assert!(matches!(load_cloud(&xyz, Some(&lm)), Err(CloudError::LandmarkOutOfRange { index: 3, count: 3 })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_cloud(Path::new("/nonexistent/cloud.xyz"), None).unwrap_err();
        assert!(matches!(err, CloudError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/cloud.xyz"));
    }

    #[test]
    fn normalize_two_points() {
        let (n, params) = normalize(&cloud(&[[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]));
        assert_eq!(params.centroid, Point3::new(2.0, 2.0, 2.0));
        assert_eq!(params.scale, 1.0);
        assert_close(&n, &cloud(&[[-1.0, 0.0, 1.0], [1.0, 0.0, -1.0]]), 1e-12);
    }

    #[test]
    fn normalize_single_point() {
        let (n, params) = normalize(&cloud(&[[5.0, 5.0, 5.0]]));
        assert_eq!(params.scale, 1.0);
        assert_eq!(n.points()[0], Point3::origin());
    }

    #[test]
    fn normalized_input_is_a_fixed_point() {
        let c = cloud(&[[-1.0, 0.0, 1.0], [1.0, 0.0, -1.0]]);
        let (n, params) = normalize(&c);
        assert_eq!(params, NormalizationParams::identity());
        assert_eq!(n, c);
    }

    #[test]
    fn denormalize_examples() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        let params = NormalizationParams { centroid: Point3::new(2.0, 2.0, 2.0), scale: 3.0 };
        assert_eq!(denormalize(&c, &params).unwrap().points()[0], Point3::new(2.0, 2.0, 2.0));
        assert_eq!(denormalize(&c, &NormalizationParams::identity()).unwrap(), c);
        let bad = NormalizationParams { scale: 0.0, ..params };
        assert!(matches!(denormalize(&c, &bad), Err(CloudError::NonPositiveScale(_))));
    }

    #[test]
    fn xyz_text_round_trips() {
        let c = cloud(&[[0.1, -2.5e-7, 3.0], [1.0 / 3.0, 2.0, -0.0]]);
        let back = parse_xyz(&format_xyz(c.points()), Path::new("t")).unwrap();
        assert_eq!(back, c.points());
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 2..40)
            .prop_map(|pts| PointCloud::from_xyz(pts).unwrap())
    }

    proptest! {
        #[test]
        fn normalized_cloud_is_centered_and_bounded(c in arb_cloud()) {
            let (n, params) = normalize(&c);
            prop_assert!(params.scale > 0.0);
            prop_assert!(n.centroid().coords.amax() <= 1e-9);
            let max = n.points().iter().map(|p| p.coords.amax()).fold(0.0, f64::max);
            prop_assert!(max <= 1.0);
            prop_assert!(max == 0.0 || (max - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn denormalize_inverts_normalize(c in arb_cloud()) {
            let (n, params) = normalize(&c);
            let back = denormalize(&n, &params).unwrap();
            for (p, q) in back.points().iter().zip(c.points()) {
                prop_assert!((p - q).amax() <= 1e-9);
            }
        }

        #[test]
        fn normalize_is_idempotent(c in arb_cloud()) {
            let (once, _) = normalize(&c);
            let (twice, _) = normalize(&once);
            for (p, q) in once.points().iter().zip(twice.points()) {
                prop_assert!((p - q).amax() <= 1e-9);
            }
        }
    }
}
