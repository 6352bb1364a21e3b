//! Levenberg–Marquardt fitting of a [`FaceModel`] to a cloud.
//!
//! Residuals are `e_i = z_i − z̄_i` and the Jacobian is `J = ∂e/∂W`, filled
//! row by row with back-propagated sensitivities: the output sensitivity is
//! `−(1 − z̄²)` and each hidden unit's is `(1 − h_j²)·wo_j` times that. `J` is
//! never held whole; `JᵀJ` and `Jᵀe` are accumulated batch by batch.
//!
//! Each epoch solves `(JᵀJ + μI)ΔW = −Jᵀe` by Cholesky factorization. A step
//! that lowers the squared error is kept and `μ` shrinks by `β`; otherwise
//! the weights stay put, `μ` grows by `β`, and the solve is retried.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::facemodel::{param_count, FaceModel, HiddenUnit, ModelError};

/// Targets are kept this far inside the open range of `tanh`.
pub const TARGET_MARGIN: f64 = 1e-6;
const MU_FLOOR: f64 = 1e-20;
/// Upper bound on the bytes spent on per-lane partial sums.
const PARTIAL_BUDGET: usize = 64 << 20;
const MAX_LANES: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("lmtrain: invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("lmtrain: damped normal matrix is not positive definite (mu = {mu})")]
    Factorization { mu: f64 },
    #[error("lmtrain: {0}")]
    Model(#[from] ModelError),
    #[error("lmtrain: cannot parse report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub hidden_count: usize,
    pub target_mse: f64,
    pub max_epochs: usize,
    pub mu_initial: f64,
    pub beta: f64,
    pub mu_max: f64,
    /// Stop when `‖Jᵀe‖∞` falls below this.
    pub gradient_min: f64,
    pub seed: u64,
    /// Rows of `J` materialized at once.
    pub batch_size: usize,
    /// Rejected solves allowed within one epoch.
    pub max_retries: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            hidden_count: 500,
            target_mse: 2e-4,
            max_epochs: 1000,
            mu_initial: 1e-3,
            beta: 10.0,
            mu_max: 1e10,
            gradient_min: 1e-7,
            seed: 0,
            batch_size: 256,
            max_retries: 50,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.hidden_count == 0 {
            return bad("hidden_count must be >= 1");
        }
        if !(self.target_mse > 0.0) {
            return bad("target_mse must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(self.mu_initial > 0.0 && self.mu_initial < self.mu_max) {
            return bad("need 0 < mu_initial < mu_max");
        }
        if !(self.beta > 1.0) {
            return bad("beta must exceed 1");
        }
        if !(self.gradient_min > 0.0) {
            return bad("gradient_min must be positive");
        }
        if self.batch_size == 0 || self.max_retries == 0 {
            return bad("batch_size and max_retries must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    TargetMse,
    MaxEpochs,
    MuMax,
    GradientMin,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::TargetMse => "target_mse",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::MuMax => "mu_max",
            StopReason::GradientMin => "gradient_min",
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StopReason {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "target_mse" => StopReason::TargetMse,
            "max_epochs" => StopReason::MaxEpochs,
            "mu_max" => StopReason::MuMax,
            "gradient_min" => StopReason::GradientMin,
            other => return Err(TrainError::Report(format!("unknown stop reason {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Points in the training cloud.
    pub samples: usize,
    pub final_mse: f64,
    pub epochs_used: usize,
    pub stop_reason: StopReason,
    /// MSE before training, then after each accepted step.
    pub mse_history: Vec<f64>,
    pub rejected_steps: usize,
    pub mu_final: f64,
    pub mu_min: f64,
    pub mu_peak: f64,
}

impl TrainReport {
    /// `key: value` lines; the history goes last as one comma-separated line.
    pub fn to_text(&self) -> String {
        let history: Vec<String> = self.mse_history.iter().map(|v| v.to_string()).collect();
        format!(
            "samples: {}\nfinal_mse: {}\nepochs_used: {}\nstop_reason: {}\nrejected_steps: {}\nmu_final: {}\nmu_min: {}\nmu_peak: {}\nmse_history: {}\n",
            self.samples,
            self.final_mse,
            self.epochs_used,
            self.stop_reason,
            self.rejected_steps,
            self.mu_final,
            self.mu_min,
            self.mu_peak,
            history.join(","),
        )
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(':').ok_or_else(|| TrainError::Report(format!("no ':' in {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        fn get<T: FromStr>(fields: &std::collections::HashMap<&str, &str>, key: &str) -> Result<T, TrainError> {
            fields
                .get(key)
                .ok_or_else(|| TrainError::Report(format!("missing {key}")))?
                .parse()
                .map_err(|_| TrainError::Report(format!("bad value for {key}")))
        }
        let history = fields.get("mse_history").ok_or_else(|| TrainError::Report("missing mse_history".into()))?;
        let mse_history = history
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| TrainError::Report(format!("bad history value {s:?}"))))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            samples: get(&fields, "samples")?,
            final_mse: get(&fields, "final_mse")?,
            epochs_used: get(&fields, "epochs_used")?,
            stop_reason: fields
                .get("stop_reason")
                .ok_or_else(|| TrainError::Report("missing stop_reason".into()))?
                .parse()?,
            rejected_steps: get(&fields, "rejected_steps")?,
            mu_final: get(&fields, "mu_final")?,
            mu_min: get(&fields, "mu_min")?,
            mu_peak: get(&fields, "mu_peak")?,
            mse_history,
        })
    }
}

/// Gauss–Newton pieces accumulated over a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub jtj: DMatrix<f64>,
    pub jte: DVector<f64>,
    /// `Σ e²`.
    pub sse: f64,
    pub samples: usize,
}

impl NormalEquations {
    fn zeros(params: usize) -> Self {
        Self { jtj: DMatrix::zeros(params, params), jte: DVector::zeros(params), sse: 0.0, samples: 0 }
    }

    fn add(&mut self, other: &NormalEquations) {
        self.jtj += &other.jtj;
        self.jte += &other.jte;
        self.sse += other.sse;
        self.samples += other.samples;
    }

    pub fn mse(&self) -> f64 {
        self.sse / self.samples as f64
    }

    pub fn gradient_inf_norm(&self) -> f64 {
        self.jte.amax()
    }
}

/// Residual and Jacobian row for one sample, written into `row`.
#[inline]
fn jacobian_row(model: &FaceModel, x: f64, y: f64, z: f64, row: &mut [f64]) -> f64 {
    let units = model.units();
    let mut weighted = 0.0;
    for (j, u) in units.iter().enumerate() {
        let h = (u.wx * x + u.wy * y + u.bias).tanh();
        row[4 * j + 3] = h;
        weighted += u.out * h;
    }
    // same summation order as `FaceModel::forward`
    let a = (weighted + model.output_bias()).tanh();
    let out_sens = -(1.0 - a * a);
    for (j, u) in units.iter().enumerate() {
        let h = row[4 * j + 3];
        let hidden_sens = (1.0 - h * h) * u.out * out_sens;
        row[4 * j] = hidden_sens * x;
        row[4 * j + 1] = hidden_sens * y;
        row[4 * j + 2] = hidden_sens;
        row[4 * j + 3] = out_sens * h;
    }
    row[4 * units.len()] = out_sens;
    z - a
}

fn accumulate_batches(model: &FaceModel, points: &[Point3<f64>], batch_size: usize) -> NormalEquations {
    let p = model.param_count();
    let mut acc = NormalEquations::zeros(p);
    let mut jb = DMatrix::zeros(batch_size.min(points.len()).max(1), p);
    let mut row = vec![0.0; p];
    for batch in points.chunks(batch_size) {
        if jb.nrows() != batch.len() {
            jb = DMatrix::zeros(batch.len(), p);
        }
        let mut eb = DVector::zeros(batch.len());
        for (r, pt) in batch.iter().enumerate() {
            let e = jacobian_row(model, pt.x, pt.y, pt.z, &mut row);
            eb[r] = e;
            for (c, v) in row.iter().enumerate() {
                jb[(r, c)] = *v;
            }
        }
        acc.jtj.gemm_tr(1.0, &jb, &jb, 1.0);
        acc.jte.gemv_tr(1.0, &jb, &eb, 1.0);
        acc.sse += eb.norm_squared();
        acc.samples += batch.len();
    }
    acc
}

/// Number of independent partial sums; depends only on the problem size so
/// the reduction order is the same on any thread count.
fn lane_count(params: usize, batches: usize) -> usize {
    let per_lane = params * params * 8;
    (PARTIAL_BUDGET / per_lane.max(1)).clamp(1, MAX_LANES).min(batches.max(1))
}

/// `JᵀJ`, `Jᵀe` and `Σe²` over the cloud, holding at most `batch_size` rows
/// of `J` per worker.
pub fn accumulate_normal_equations(model: &FaceModel, cloud: &PointCloud, batch_size: usize) -> NormalEquations {
    let batch_size = batch_size.max(1);
    let points = cloud.points();
    let p = model.param_count();
    let batches = points.len().div_ceil(batch_size);
    let lanes = lane_count(p, batches);
    let per_lane = batches.div_ceil(lanes) * batch_size;
    let partials: Vec<NormalEquations> =
        points.par_chunks(per_lane).map(|chunk| accumulate_batches(model, chunk, batch_size)).collect();
    let mut total = NormalEquations::zeros(p);
    for part in &partials {
        total.add(part);
    }
    total.jtj.fill_upper_triangle_with_lower_triangle();
    total
}

/// `Jᵀe` and `Σe²` without forming `JᵀJ`.
pub fn gradient(model: &FaceModel, cloud: &PointCloud) -> (Vec<f64>, f64) {
    let p = model.param_count();
    let chunk = cloud.len().div_ceil(MAX_LANES).max(1);
    let partials: Vec<(Vec<f64>, f64)> = cloud
        .points()
        .par_chunks(chunk)
        .map(|pts| {
            let mut g = vec![0.0; p];
            let mut row = vec![0.0; p];
            let mut sse = 0.0;
            for pt in pts {
                let e = jacobian_row(model, pt.x, pt.y, pt.z, &mut row);
                sse += e * e;
                for (gi, ri) in g.iter_mut().zip(&row) {
                    *gi += ri * e;
                }
            }
            (g, sse)
        })
        .collect();
    let mut g = vec![0.0; p];
    let mut sse = 0.0;
    for (pg, ps) in partials {
        for (a, b) in g.iter_mut().zip(&pg) {
            *a += b;
        }
        sse += ps;
    }
    (g, sse)
}

/// Candidate weights `W + ΔW` with `(JᵀJ + μI)ΔW = −Jᵀe`.
pub fn lm_step(model: &FaceModel, neq: &NormalEquations, mu: f64) -> Result<FaceModel, TrainError> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(TrainError::InvalidConfig(format!("mu must be non-negative, got {mu}")));
    }
    let mut damped = neq.jtj.clone();
    for i in 0..damped.nrows() {
        damped[(i, i)] += mu;
    }
    let chol = Cholesky::new(damped).ok_or(TrainError::Factorization { mu })?;
    let delta = -chol.solve(&neq.jte);
    let values: Vec<f64> = model.flatten().values.iter().zip(delta.iter()).map(|(w, d)| w + d).collect();
    // an ill-conditioned solve can overflow; the caller treats it like a failed factorization
    FaceModel::from_values(&values).map_err(|_| TrainError::Factorization { mu })
}

/// Uniform in `±1/√fan_in` per layer: fan-in 2 for the hidden units, `M` for
/// the output.
pub fn init_weights(hidden: usize, seed: u64) -> Result<FaceModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden_bound = 1.0 / 2f64.sqrt();
    let out_bound = 1.0 / (hidden as f64).sqrt();
    let mut units: Vec<HiddenUnit> = (0..hidden)
        .map(|_| HiddenUnit {
            wx: rng.gen_range(-hidden_bound..=hidden_bound),
            wy: rng.gen_range(-hidden_bound..=hidden_bound),
            bias: rng.gen_range(-hidden_bound..=hidden_bound),
            out: 0.0,
        })
        .collect();
    for u in units.iter_mut() {
        u.out = rng.gen_range(-out_bound..=out_bound);
    }
    let bias = rng.gen_range(-out_bound..=out_bound);
    FaceModel::new(units, bias)
}

/// Copy of the cloud with depths pulled inside `(−1, 1)`.
pub fn clamp_targets(cloud: &PointCloud) -> PointCloud {
    let lim = 1.0 - TARGET_MARGIN;
    let points = cloud.points().iter().map(|p| Point3::new(p.x, p.y, p.z.clamp(-lim, lim))).collect();
    cloud.with_points(points)
}

fn warn_if_underdetermined(cloud: &PointCloud, hidden: usize) {
    if cloud.len() < param_count(hidden) {
        log::warn!("fitting {} parameters to only {} points", param_count(hidden), cloud.len());
    }
}

/// Fits a fresh model to a normalized cloud.
pub fn train_lm(cloud: &PointCloud, config: &LmConfig) -> Result<(FaceModel, TrainReport), TrainError> {
    config.validate()?;
    let model = init_weights(config.hidden_count, config.seed)?;
    train_lm_from(model, cloud, config)
}

/// As [`train_lm`], starting from the given weights.
pub fn train_lm_from(
    mut model: FaceModel,
    cloud: &PointCloud,
    config: &LmConfig,
) -> Result<(FaceModel, TrainReport), TrainError> {
    config.validate()?;
    warn_if_underdetermined(cloud, model.hidden_count());
    let cloud = clamp_targets(cloud);
    let mut neq = accumulate_normal_equations(&model, &cloud, config.batch_size);
    let mut mse = neq.mse();
    let mut history = vec![mse];
    let mut mu = config.mu_initial;
    let (mut mu_min, mut mu_peak) = (mu, mu);
    let mut rejected = 0;
    let mut epochs = 0;

    let stop_reason = 'train: loop {
        if mse < config.target_mse {
            break StopReason::TargetMse;
        }
        if neq.gradient_inf_norm() < config.gradient_min {
            break StopReason::GradientMin;
        }
        if epochs == config.max_epochs {
            break StopReason::MaxEpochs;
        }
        epochs += 1;

        let mut accepted = None;
        for _ in 0..config.max_retries {
            if let Ok(candidate) = lm_step(&model, &neq, mu) {
                let candidate_mse = candidate.mse(&cloud);
                if candidate_mse < mse {
                    accepted = Some(candidate);
                    mu = (mu / config.beta).max(MU_FLOOR);
                    mu_min = mu_min.min(mu);
                    break;
                }
            }
            rejected += 1;
            if mu * config.beta > config.mu_max {
                break 'train StopReason::MuMax;
            }
            mu *= config.beta;
            mu_peak = mu_peak.max(mu);
        }
        if let Some(candidate) = accepted {
            model = candidate;
            neq = accumulate_normal_equations(&model, &cloud, config.batch_size);
            mse = neq.mse();
            history.push(mse);
        }
    };

    Ok((
        model,
        TrainReport {
            samples: cloud.len(),
            final_mse: mse,
            epochs_used: epochs,
            stop_reason,
            mse_history: history,
            rejected_steps: rejected,
            mu_final: mu,
            mu_min,
            mu_peak,
        },
    ))
}

/// Full-batch gradient descent on the MSE; a convergence baseline for LM.
#[derive(Debug, Clone, PartialEq)]
pub struct GdConfig {
    pub hidden_count: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop early once the MSE drops below this.
    pub target_mse: Option<f64>,
}

pub fn train_gd(cloud: &PointCloud, config: &GdConfig) -> Result<(FaceModel, TrainReport), TrainError> {
    if !(config.learning_rate > 0.0) {
        return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
    }
    if config.epochs == 0 || config.hidden_count == 0 {
        return Err(TrainError::InvalidConfig("epochs and hidden_count must be >= 1".into()));
    }
    warn_if_underdetermined(cloud, config.hidden_count);
    let cloud = clamp_targets(cloud);
    let n = cloud.len() as f64;
    let mut model = init_weights(config.hidden_count, config.seed)?;
    let (mut grad, mut sse) = gradient(&model, &cloud);
    let mut history = vec![sse / n];
    let mut epochs = 0;
    let stop_reason = loop {
        if config.target_mse.is_some_and(|t| sse / n < t) {
            break StopReason::TargetMse;
        }
        if epochs == config.epochs {
            break StopReason::MaxEpochs;
        }
        epochs += 1;
        // d(MSE)/dW = (2/N)·Jᵀe
        let step = 2.0 * config.learning_rate / n;
        let values: Vec<f64> = model.flatten().values.iter().zip(&grad).map(|(w, g)| w - step * g).collect();
        model = FaceModel::from_values(&values)?;
        (grad, sse) = gradient(&model, &cloud);
        history.push(sse / n);
    };
    Ok((
        model,
        TrainReport {
            samples: cloud.len(),
            final_mse: sse / n,
            epochs_used: epochs,
            stop_reason,
            mse_history: history,
            rejected_steps: 0,
            mu_final: 0.0,
            mu_min: 0.0,
            mu_peak: 0.0,
        },
    ))
}
