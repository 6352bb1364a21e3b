use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::{tempdir, TempDir};

use neuroface::cloud::save_cloud;
use neuroface::facemodel::FaceModel;
use neuroface::lmtrain::TrainReport;
use neuroface::synth::BumpSurface;

fn nf3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nf3d")).args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace_with_bump(points: usize) -> TempDir {
    let dir = tempdir().unwrap();
    save_cloud(&BumpSurface::benchmark().sample(points, 0.005, 1).unwrap(), &dir.path().join("bump.xyz")).unwrap();
    dir
}

#[test]
fn fit_reaches_target_on_benchmark() {
    let dir = workspace_with_bump(5000);
    let out = nf3d(dir.path(), &["fit", "bump.xyz", "-o", "bump.nf3d", "--lm-hidden-count", "50"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("stop=target_mse"), "{}", stdout(&out));
    let report = TrainReport::from_text(&fs::read_to_string(dir.path().join("bump.report")).unwrap()).unwrap();
    assert!(report.final_mse < 2e-4);
    assert_eq!(report.samples, 5000);
    assert_eq!(FaceModel::load(&dir.path().join("bump.nf3d")).unwrap().hidden_count(), 50);
}

#[test]
fn fit_with_fixed_seed_is_byte_identical() {
    let dir = workspace_with_bump(800);
    for name in ["a.nf3d", "b.nf3d"] {
        let out = nf3d(
            dir.path(),
            &["fit", "bump.xyz", "-o", name, "--seed", "9", "--lm-hidden-count", "12", "--lm-max-epochs", "15"],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.nf3d"), read("b.nf3d"));
    assert_eq!(read("a.report"), read("b.report"));
}

#[test]
fn batch_fit_writes_one_model_per_cloud() {
    let dir = tempdir().unwrap();
    let clouds = dir.path().join("clouds");
    fs::create_dir(&clouds).unwrap();
    for k in 0..3 {
        let c = BumpSurface::random(3, k).sample(300, 0.0, k).unwrap();
        save_cloud(&c, &clouds.join(format!("c{k}.xyz"))).unwrap();
    }
    let out = nf3d(
        dir.path(),
        &["fit", "clouds", "-o", "models", "--raw", "--jobs", "2", "--lm-hidden-count", "6", "--lm-max-epochs", "5"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for k in 0..3 {
        assert!(dir.path().join(format!("models/c{k}.nf3d")).exists());
        assert!(dir.path().join(format!("models/c{k}.report")).exists());
    }
}

#[test]
fn missing_landmark_file_is_named() {
    let dir = workspace_with_bump(200);
    fs::write(dir.path().join("ref.xyz"), "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    let out = nf3d(dir.path(), &["fit", "bump.xyz", "-o", "m.nf3d", "--reference", "ref.xyz"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bump.lm"), "{}", stderr(&out));
}

#[test]
fn reconstruct_grids() {
    let dir = tempdir().unwrap();
    FaceModel::zeros(4).unwrap().save(&dir.path().join("zero.nf3d")).unwrap();

    let out = nf3d(
        dir.path(),
        &["reconstruct", "zero.nf3d", "-o", "one.xyz", "--nx", "1", "--ny", "1", "--x-min", "0.25", "--y-min", "-0.5"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("one.xyz")).unwrap();
    assert_eq!(text.lines().count(), 1);
    let values: Vec<f64> = text.split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values, [0.25, -0.5, 0.0]);

    let out = nf3d(dir.path(), &["reconstruct", "zero.nf3d", "-o", "dense.xyz", "--nx", "7", "--ny", "5"]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(dir.path().join("dense.xyz")).unwrap();
    assert_eq!(text.lines().count(), 35);
    assert!(text.lines().all(|l| l.split_whitespace().nth(2).unwrap().parse::<f64>().unwrap().abs() < 1e-3));

    let out = nf3d(dir.path(), &["reconstruct", "zero.nf3d", "-o", "bad.xyz", "--x-min", "0.5", "--x-max", "-0.5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("reversed"), "{}", stderr(&out));
}

#[test]
fn verify_identical_models_is_same_with_zero_score() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    neuroface::lmtrain::init_weights(10, 1).unwrap().save(&d.join("m.nf3d")).unwrap();
    neuroface::siamese::SiameseNet::new(&[41, 8, 4], 2).unwrap().save(&d.join("net.nsia")).unwrap();
    let out = nf3d(d, &["verify", "--net", "net.nsia", "m.nf3d", "m.nf3d", "--threshold", "0.5"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "same 0");
}

#[test]
fn match_on_empty_gallery_fails_clearly() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("gallery")).unwrap();
    neuroface::lmtrain::init_weights(10, 1).unwrap().save(&d.join("m.nf3d")).unwrap();
    neuroface::siamese::SiameseNet::new(&[41, 8, 4], 2).unwrap().save(&d.join("net.nsia")).unwrap();
    let out = nf3d(d, &["match", "--gallery", "gallery", "--net", "net.nsia", "m.nf3d"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no enrolled identities"), "{}", stderr(&out));
}

#[test]
fn enroll_pairs_train_eval_match() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    for id in 0..3u64 {
        for k in 0..2u64 {
            let stem = format!("p{id}_{k}");
            save_cloud(
                &BumpSurface::random(3, id).sample(300, 0.005, 10 * id + k).unwrap(),
                &d.join(format!("{stem}.xyz")),
            )
            .unwrap();
            let out = nf3d(
                d,
                &[
                    "fit",
                    &format!("{stem}.xyz"),
                    "-o",
                    &format!("{stem}.nf3d"),
                    "--raw",
                    "--lm-hidden-count",
                    "8",
                    "--lm-max-epochs",
                    "10",
                ],
            );
            assert_eq!(code(&out), 0, "{}", stderr(&out));
            let out = nf3d(
                d,
                &[
                    "enroll",
                    "--gallery",
                    "g",
                    "--identity",
                    &format!("person{id}"),
                    &format!("{stem}.nf3d"),
                    "--report",
                    &format!("{stem}.report"),
                    "--timestamp",
                    "1",
                ],
            );
            assert_eq!(code(&out), 0, "{}", stderr(&out));
        }
    }
    let index = fs::read_to_string(d.join("g/index.txt")).unwrap();
    assert!(index.lines().skip(1).all(|l| l.split('\t').nth(3) == Some("300")), "{index}");

    let out = nf3d(
        d,
        &["pairs", "--gallery", "g", "--positives", "20", "--negatives", "20", "--augment", "2", "-o", "pairs.npar"],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = nf3d(
        d,
        &[
            "train-verifier",
            "pairs.npar",
            "-o",
            "net.nsia",
            "--siamese-layers",
            "16,4",
            "--siamese-epochs",
            "3",
            "--holdout-out",
            "holdout.npar",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = nf3d(d, &["eval", "--net", "net.nsia", "holdout.npar", "-o", "roc.csv"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(d.join("roc.csv")).unwrap();
    assert!(csv.starts_with("threshold,fpr,tpr,precision,recall\n"));
    assert!(csv.contains("# auc="));

    let out = nf3d(d, &["match", "--gallery", "g", "--net", "net.nsia", "p1_0.nf3d", "--top-k", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("person1\t"), "{lines:?}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = workspace_with_bump(300);
    let d = dir.path();
    fs::write(d.join("run.cfg"), "lm.hidden_count = 5\nlm.max_epochs = 3\n").unwrap();
    let out = nf3d(d, &["--config", "run.cfg", "fit", "bump.xyz", "-o", "m.nf3d", "--lm-hidden-count", "7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(FaceModel::load(&d.join("m.nf3d")).unwrap().hidden_count(), 7);
    assert!(stdout(&out).contains("epochs=3"), "{}", stdout(&out));

    fs::write(d.join("bad.cfg"), "lm.nonsense = 1\n").unwrap();
    let out = nf3d(d, &["--config", "bad.cfg", "fit", "bump.xyz", "-o", "m.nf3d"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lm.nonsense"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempdir().unwrap();
    assert_eq!(code(&nf3d(dir.path(), &["fit"])), 1);
    assert_eq!(code(&nf3d(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&nf3d(dir.path(), &["--help"])), 0);
}
