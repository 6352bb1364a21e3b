use nalgebra::{Point3, Vector3};
use tempfile::tempdir;

use neuroface::cloud::{self, PointCloud};
use neuroface::facemodel::{resample, FaceModel, GridSpec};
use neuroface::gallery::{self, EnrollMeta, Gallery};
use neuroface::lmtrain::{train_lm, LmConfig, StopReason};
use neuroface::registration::{apply_transform, icp, register_landmarks, IcpConfig, RigidTransform};
use neuroface::siamese::{generate_pairs, load_pairs, save_pairs, PairSpec, SiameseNet};
use neuroface::synth::BumpSurface;

fn small_fit() -> LmConfig {
    LmConfig { hidden_count: 20, max_epochs: 40, ..LmConfig::default() }
}

#[test]
fn misaligned_scan_is_registered_then_fitted() {
    let surface = BumpSurface::random(3, 5);
    let canonical = surface.sample(1500, 0.0, 5).unwrap();
    let landmarks = vec![0, 100, 400, 900, 1400];
    let reference: Vec<Point3<f64>> = landmarks.iter().map(|&i| canonical.points()[i]).collect();

    let motion = RigidTransform::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 0.4, Vector3::new(0.1, -0.05, 0.2));
    let scan = apply_transform(&canonical, &motion).with_landmarks(landmarks).unwrap();

    let (aligned, t) = register_landmarks(&scan, &reference).unwrap();
    assert!(t.rotation_error(&motion.inverse()) < 1e-9);
    let refined = icp(&aligned, &canonical, &RigidTransform::identity(), &IcpConfig::default()).unwrap();
    assert!(refined.final_residual < 1e-12);

    let (model, report) = train_lm(&aligned, &small_fit()).unwrap();
    assert!(matches!(report.stop_reason, StopReason::TargetMse | StopReason::MaxEpochs));
    assert!(model.mse(&canonical) < 1e-3, "mse {}", model.mse(&canonical));
}

#[test]
fn normalize_fit_denormalize_round_trip() {
    let raw = PointCloud::from_xyz(
        BumpSurface::benchmark()
            .sample(2000, 0.0, 2)
            .unwrap()
            .points()
            .iter()
            .map(|p| [40.0 * p.x + 7.0, 40.0 * p.y - 3.0, 40.0 * p.z + 100.0]),
    )
    .unwrap();
    let (unit, params) = cloud::normalize(&raw);
    let (model, _) = train_lm(&unit, &small_fit()).unwrap();
    let fitted =
        PointCloud::new(unit.points().iter().map(|p| Point3::new(p.x, p.y, model.forward(p.x, p.y))).collect())
            .unwrap();
    let back = cloud::denormalize(&fitted, &params).unwrap();
    let worst_xy = back
        .points()
        .iter()
        .zip(raw.points())
        .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()))
        .fold(0.0, f64::max);
    assert!(worst_xy < 1e-9);
    // depth errors scale with the normalization factor and nothing else
    let raw_rmse = (back.points().iter().zip(raw.points()).map(|(a, b)| (a.z - b.z).powi(2)).sum::<f64>()
        / raw.len() as f64)
        .sqrt();
    let unit_rmse = model.mse(&unit).sqrt();
    assert!((raw_rmse - params.scale * unit_rmse).abs() < 1e-9 * raw_rmse.max(1.0));
}

#[test]
fn saved_model_regenerates_denser_cloud() {
    let dir = tempdir().unwrap();
    let truth = |x: f64, y: f64| 0.25 * (x * x + y * y);
    let side = 30;
    let grid = GridSpec::square(side);
    let train = PointCloud::from_xyz(grid.nodes().into_iter().map(|(x, y)| [x, y, truth(x, y)])).unwrap();
    let (model, report) = train_lm(&train, &small_fit()).unwrap();

    let path = dir.path().join("m.nf3d");
    model.save(&path).unwrap();
    let loaded = FaceModel::load(&path).unwrap();

    let dense = resample(&loaded, &GridSpec::square(4 * side)).unwrap();
    assert_eq!(dense.len(), 16 * side * side);
    let mse = dense.points().iter().map(|p| (p.z - truth(p.x, p.y)).powi(2)).sum::<f64>() / dense.len() as f64;
    // the f32 file adds a little on top of the fit itself
    assert!(mse <= 2.0 * report.final_mse + 1e-9, "dense {mse} vs training {}", report.final_mse);
}

#[test]
fn gallery_feeds_pair_generation_and_matching() {
    let dir = tempdir().unwrap();
    let cfg = LmConfig { hidden_count: 8, max_epochs: 10, ..LmConfig::default() };
    for id in 0..3u64 {
        let surface = BumpSurface::random(3, 50 + id);
        for k in 0..2 {
            let cloud = surface.sample(300, 0.005, 10 * id + k).unwrap();
            let (model, report) = train_lm(&cloud, &cfg).unwrap();
            let meta =
                EnrollMeta { timestamp: 1_700_000_000 + k, point_count: report.samples, final_mse: report.final_mse };
            gallery::enroll(dir.path(), &format!("person{id}"), &model, meta).unwrap();
        }
    }
    let g = Gallery::open(dir.path()).unwrap();
    assert_eq!(g.model_count(), 6);
    assert_eq!(g.hidden_count().unwrap(), Some(8));

    let ids = g.identities().unwrap();
    let pairs = generate_pairs(&ids, &PairSpec { positives: 6, negatives: 6, augment_per_model: 1, seed: 3 }).unwrap();
    let path = dir.path().join("pairs.npar");
    save_pairs(&path, &pairs).unwrap();
    assert_eq!(load_pairs(&path).unwrap(), pairs);

    // a stored model is its own best match
    let net = SiameseNet::new(&[33, 8, 4], 1).unwrap();
    let probe = g.load_model(&g.entries()[1].models[0]).unwrap();
    let ranked = gallery::match_probe(dir.path(), &probe, &net, 1).unwrap();
    assert_eq!(ranked, vec![("person1".to_string(), 0.0)]);
}
