use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rayon::prelude::*;

use neuroface::cloud::{self, PointCloud};
use neuroface::facemodel::{random_augmentations, resample, FaceModel, GridSpec};
use neuroface::gallery::{self, EnrollMeta, Gallery};
use neuroface::lmtrain::{train_lm, StopReason, TrainReport};
use neuroface::registration::{apply_transform, icp, register_landmarks, RigidTransform};
use neuroface::siamese::{
    eval_roc, generate_pairs, load_pairs, save_pairs, split_pairs, train_siamese, verify, PairSpec, SiameseNet,
};

use crate::args::*;
use crate::config::CliConfig;
use crate::exit::Failure;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Loads, normalizes and optionally registers a cloud. Returns the cloud
/// and the total rigid motion applied after normalization.
fn prepare_cloud(
    input: &Path,
    reg: &RegistrationInput,
    cfg: &CliConfig,
    normalize: bool,
) -> Result<(PointCloud, RigidTransform)> {
    let landmarks = match (&reg.reference, &reg.landmarks) {
        (Some(_), Some(l)) => Some(l.clone()),
        (Some(_), None) => Some(with_extension(input, "lm")),
        (None, Some(_)) => {
            return Err(Failure::Usage("--landmarks needs --reference".into()).into());
        }
        (None, None) => None,
    };
    let mut cloud = cloud::load_cloud(input, landmarks.as_deref())?;
    if normalize {
        cloud = cloud::normalize(&cloud).0;
    }
    let mut motion = RigidTransform::identity();
    if let Some(reference) = &reg.reference {
        let points = cloud::load_points(reference)?;
        let (moved, t) = register_landmarks(&cloud, &points)?;
        info!("{}: landmark alignment rotates by {:.4} rad", input.display(), t.angle());
        cloud = moved;
        motion = t;
    }
    if let Some(surface) = &reg.icp {
        let fixed = cloud::load_cloud(surface, None)?;
        let result = icp(&cloud, &fixed, &RigidTransform::identity(), &cfg.icp)?;
        info!("{}: icp {} iterations, residual {:e}", input.display(), result.iterations_used, result.final_residual);
        cloud = apply_transform(&cloud, &result.transform);
        motion = result.transform.after(&motion);
    }
    Ok((cloud, motion))
}

fn summary(report: &TrainReport) -> String {
    format!(
        "final_mse={:e} epochs={} stop={} samples={}",
        report.final_mse, report.epochs_used, report.stop_reason, report.samples
    )
}

fn fit_one(input: &Path, output: &Path, report_path: &Path, args: &FitArgs, cfg: &CliConfig) -> Result<TrainReport> {
    let (cloud, _) = prepare_cloud(input, &args.registration, cfg, !args.raw)?;
    let (model, report) = train_lm(&cloud, &cfg.lm)?;
    model.save(output)?;
    write_file(report_path, report.to_text())?;
    match report.stop_reason {
        StopReason::TargetMse | StopReason::MaxEpochs => Ok(report),
        reason => Err(Failure::Numerical(format!(
            "{}: training stalled ({reason}) at mse {:e}; model written anyway",
            input.display(),
            report.final_mse
        ))
        .into()),
    }
}

pub fn fit(args: &FitArgs, cfg: &CliConfig) -> Result<()> {
    if !args.input.is_dir() {
        let report_path = args.report.clone().unwrap_or_else(|| with_extension(&args.output, "report"));
        let report = fit_one(&args.input, &args.output, &report_path, args, cfg)?;
        println!("{} {}", args.output.display(), summary(&report));
        return Ok(());
    }
    if args.report.is_some() || args.registration.landmarks.is_some() {
        bail!(Failure::Usage(
            "batch mode derives report and landmark paths per cloud; drop --report/--landmarks".into()
        ));
    }
    if args.jobs == 0 {
        bail!(Failure::Usage("--jobs must be at least 1".into()));
    }
    let mut inputs: Vec<PathBuf> = fs::read_dir(&args.input)
        .with_context(|| format!("cannot list {}", args.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        bail!("no .xyz files in {}", args.input.display());
    }
    fs::create_dir_all(&args.output).with_context(|| format!("cannot create {}", args.output.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let results: Vec<(PathBuf, Result<TrainReport>)> = pool.install(|| {
        inputs
            .par_iter()
            .map(|input| {
                let stem = input.file_stem().unwrap_or_default();
                let out = args.output.join(stem).with_extension("nf3d");
                let rep = args.output.join(stem).with_extension("report");
                (out.clone(), fit_one(input, &out, &rep, args, cfg))
            })
            .collect()
    });
    let mut first_error = None;
    let mut failed = 0;
    for (out, r) in results {
        match r {
            Ok(report) => println!("{} {}", out.display(), summary(&report)),
            Err(e) => {
                failed += 1;
                warn!("{}: {}", out.display(), crate::exit::describe(&e));
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e.context(format!("{failed} of {} fits failed", inputs.len()))),
        None => Ok(()),
    }
}

pub fn reconstruct(args: &ReconstructArgs) -> Result<()> {
    let model = FaceModel::load(&args.model)?;
    let grid = GridSpec {
        x_min: args.x_min,
        x_max: args.x_max,
        y_min: args.y_min,
        y_max: args.y_max,
        nx: args.nx,
        ny: args.ny,
    };
    let cloud = resample(&model, &grid)?;
    cloud::save_cloud(&cloud, &args.output)?;
    println!("{} {} points", args.output.display(), cloud.len());
    Ok(())
}

fn format_transform(t: &RigidTransform) -> String {
    let r = t.rotation();
    let v = t.translation();
    let mut out = String::new();
    for i in 0..3 {
        out.push_str(&format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], v[i]));
    }
    out
}

pub fn register(args: &RegisterArgs, cfg: &CliConfig) -> Result<()> {
    if args.registration.reference.is_none() && args.registration.icp.is_none() {
        bail!(Failure::Usage("register needs --reference and/or --icp".into()));
    }
    let (cloud, motion) = prepare_cloud(&args.input, &args.registration, cfg, !args.raw)?;
    cloud::save_cloud(&cloud, &args.output)?;
    print!("{}", format_transform(&motion));
    Ok(())
}

pub fn augment(args: &AugmentArgs, cfg: &CliConfig) -> Result<()> {
    let model = FaceModel::load(&args.model)?;
    let variants = random_augmentations(&model, args.count, cfg.lm.seed)?;
    fs::create_dir_all(&args.output).with_context(|| format!("cannot create {}", args.output.display()))?;
    let stem = args.model.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    for (k, flat) in variants.iter().enumerate() {
        let path = args.output.join(format!("{stem}-aug{k:04}.nf3d"));
        FaceModel::unflatten(flat)?.save(&path)?;
    }
    println!("{} models in {}", variants.len(), args.output.display());
    Ok(())
}

pub fn pairs(args: &PairsArgs, cfg: &CliConfig) -> Result<()> {
    let identities = Gallery::open(&args.gallery)?.identities()?;
    let spec = PairSpec {
        positives: args.positives,
        negatives: args.negatives,
        augment_per_model: args.augment,
        seed: cfg.siamese.seed,
    };
    let pairs = generate_pairs(&identities, &spec)?;
    save_pairs(&args.output, &pairs)?;
    println!("{} pairs from {} identities", pairs.len(), identities.len());
    Ok(())
}

pub fn train_verifier(args: &TrainVerifierArgs, cfg: &CliConfig) -> Result<()> {
    let all = load_pairs(&args.pairs)?;
    let (train, holdout) = split_pairs(&all, args.train_fraction, cfg.siamese.seed)?;
    if train.is_empty() {
        bail!(Failure::Usage("no pairs left for training".into()));
    }
    let (mut net, history) = train_siamese(&train, &cfg.siamese)?;
    let train_eval = eval_roc(&net, &train)?;
    net.threshold = train_eval.threshold;
    net.save(&args.output)?;
    if let Some(path) = &args.history {
        let text: String = history.iter().map(|l| format!("{l}\n")).collect();
        write_file(path, text)?;
    }
    if let Some(path) = &args.holdout_out {
        save_pairs(path, &holdout)?;
    }
    println!(
        "{} threshold={} train_accuracy={} train_auc={} train_pairs={} holdout_pairs={}",
        args.output.display(),
        net.threshold,
        train_eval.accuracy,
        train_eval.auc,
        train.len(),
        holdout.len()
    );
    if holdout.iter().any(|p| p.same) && holdout.iter().any(|p| !p.same) {
        let h = eval_roc(&net, &holdout)?;
        let acc = neuroface::siamese::accuracy_at(&neuroface::siamese::pair_scores(&net, &holdout)?, net.threshold);
        println!("holdout accuracy={acc} auc={}", h.auc);
    }
    Ok(())
}

pub fn verify_cmd(args: &VerifyArgs) -> Result<()> {
    let net = SiameseNet::load(&args.net)?;
    let a = FaceModel::load(&args.first)?.flatten();
    let b = FaceModel::load(&args.second)?.flatten();
    let threshold = args.threshold.unwrap_or(net.threshold);
    let (same, score) = verify(&net, &a, &b, threshold)?;
    println!("{} {score}", if same { "same" } else { "different" });
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let net = SiameseNet::load(&args.net)?;
    let pairs = load_pairs(&args.pairs)?;
    let report = eval_roc(&net, &pairs)?;
    write_file(&args.output, report.to_csv())?;
    println!(
        "auc={} accuracy={} threshold={} positives={} negatives={}",
        report.auc, report.accuracy, report.threshold, report.positives, report.negatives
    );
    Ok(())
}

pub fn enroll(args: &EnrollArgs) -> Result<()> {
    let model = FaceModel::load(&args.model)?;
    let (point_count, final_mse) = match &args.report {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let report = TrainReport::from_text(&text).with_context(|| path.display().to_string())?;
            (report.samples, report.final_mse)
        }
        None => (0, f64::NAN),
    };
    let timestamp = match args.timestamp {
        Some(t) => t,
        None => SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs(),
    };
    let meta = EnrollMeta { timestamp, point_count, final_mse };
    let entry = gallery::enroll(&args.gallery, &args.identity, &model, meta)?;
    println!("{} now has {} model(s)", entry.identity, entry.models.len());
    Ok(())
}

pub fn match_cmd(args: &MatchArgs) -> Result<()> {
    let net = SiameseNet::load(&args.net)?;
    let probe = FaceModel::load(&args.probe)?;
    let ranked = gallery::match_probe(&args.gallery, &probe, &net, args.top_k)?;
    let mut out = std::io::stdout().lock();
    for (label, score) in ranked {
        writeln!(out, "{label}\t{score}")?;
    }
    Ok(())
}
