use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{CliConfig, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "nf3d", version, about = "Neural 3D face models: fit, register, verify and match")]
pub struct Cli {
    /// key=value configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seeds every randomized component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// One flag per configuration key.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_hidden_count: Option<usize>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_target_mse: Option<f64>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_max_epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_mu_initial: Option<f64>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_beta: Option<f64>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_mu_max: Option<f64>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_gradient_min: Option<f64>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_seed: Option<u64>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "LM training")]
    pub lm_max_retries: Option<usize>,

    #[arg(long, global = true, help_heading = "ICP")]
    pub icp_max_iterations: Option<usize>,
    #[arg(long, global = true, help_heading = "ICP")]
    pub icp_residual_tolerance: Option<f64>,
    #[arg(long, global = true, help_heading = "ICP")]
    pub icp_sample_fraction: Option<f64>,
    #[arg(long, global = true, help_heading = "ICP")]
    pub icp_rejection_distance: Option<f64>,
    #[arg(long, global = true, help_heading = "ICP")]
    pub icp_seed: Option<u64>,

    #[arg(long, global = true, help_heading = "Siamese")]
    pub siamese_q: Option<f64>,
    #[arg(long, global = true, help_heading = "Siamese")]
    pub siamese_learning_rate: Option<f64>,
    #[arg(long, global = true, help_heading = "Siamese")]
    pub siamese_epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "Siamese")]
    pub siamese_batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Siamese")]
    pub siamese_seed: Option<u64>,
    /// Comma-separated sizes after the input layer.
    #[arg(long, global = true, help_heading = "Siamese", value_delimiter = ',')]
    pub siamese_layers: Option<Vec<usize>>,
}

macro_rules! apply {
    ($o:expr, $cfg:expr, $($flag:ident => $($field:ident).+),* $(,)?) => {
        $( if let Some(v) = $o.$flag.clone() { $cfg.$($field).+ = v; } )*
    };
}

impl Cli {
    /// Defaults, then the config file, then `--seed`, then per-key flags.
    pub fn resolve_config(&self) -> Result<CliConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => CliConfig::from_file(path)?,
            None => CliConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        let o = &self.overrides;
        apply!(o, cfg,
            lm_hidden_count => lm.hidden_count,
            lm_target_mse => lm.target_mse,
            lm_max_epochs => lm.max_epochs,
            lm_mu_initial => lm.mu_initial,
            lm_beta => lm.beta,
            lm_mu_max => lm.mu_max,
            lm_gradient_min => lm.gradient_min,
            lm_seed => lm.seed,
            lm_batch_size => lm.batch_size,
            lm_max_retries => lm.max_retries,
            icp_max_iterations => icp.max_iterations,
            icp_residual_tolerance => icp.residual_tolerance,
            icp_sample_fraction => icp.sample_fraction,
            icp_seed => icp.seed,
            siamese_q => siamese.q,
            siamese_learning_rate => siamese.learning_rate,
            siamese_epochs => siamese.epochs,
            siamese_batch_size => siamese.batch_size,
            siamese_seed => siamese.seed,
            siamese_layers => siamese.layers,
        );
        if let Some(d) = o.icp_rejection_distance {
            cfg.icp.rejection_distance = Some(d);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a face model to a cloud, or to every .xyz file in a directory.
    Fit(FitArgs),
    /// Sample a fitted model on a regular grid.
    Reconstruct(ReconstructArgs),
    /// Rigidly align a cloud by its landmarks, optionally refined by ICP.
    Register(RegisterArgs),
    /// Write row-permuted copies of a model.
    Augment(AugmentArgs),
    /// Generate labeled training pairs from a gallery.
    Pairs(PairsArgs),
    /// Train the Siamese verifier on a pair file.
    TrainVerifier(TrainVerifierArgs),
    /// Decide whether two models show the same face.
    Verify(VerifyArgs),
    /// ROC and precision-recall sweep of a verifier over a pair file.
    Eval(EvalArgs),
    /// Add a model to a gallery.
    Enroll(EnrollArgs),
    /// Rank gallery identities against a probe model.
    Match(MatchArgs),
}

#[derive(Debug, Args)]
pub struct RegistrationInput {
    /// Reference landmark points (XYZ). Enables landmark registration.
    #[arg(long, value_name = "FILE")]
    pub reference: Option<PathBuf>,
    /// Landmark indices of the input cloud [default: input with extension .lm]
    #[arg(long, value_name = "FILE")]
    pub landmarks: Option<PathBuf>,
    /// Reference surface (XYZ) for ICP refinement after landmark alignment.
    #[arg(long, value_name = "FILE")]
    pub icp: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input cloud (XYZ) or a directory of clouds.
    pub input: PathBuf,
    /// Output model file, or output directory in batch mode.
    #[arg(short, long)]
    pub output: PathBuf,
    /// Training report path [default: output with extension .report]
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub registration: RegistrationInput,
    /// Skip normalization; for clouds already in the canonical frame.
    #[arg(long)]
    pub raw: bool,
    /// Concurrent fits in batch mode.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub model: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub nx: usize,
    #[arg(long, default_value_t = 100)]
    pub ny: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub x_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub x_max: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    pub y_min: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub y_max: f64,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub registration: RegistrationInput,
    /// Skip normalization into the unit cube before aligning.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Directory for the permuted models.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub positives: usize,
    #[arg(long)]
    pub negatives: usize,
    /// Permuted variants added per stored model.
    #[arg(long, default_value_t = 0)]
    pub augment: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainVerifierArgs {
    pub pairs: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Share of pairs used for training; the rest is held out.
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    /// Where to write the held-out pairs.
    #[arg(long, value_name = "FILE")]
    pub holdout_out: Option<PathBuf>,
    /// Per-epoch mean loss, one value per line.
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub net: PathBuf,
    pub first: PathBuf,
    pub second: PathBuf,
    /// Decision threshold [default: the one stored in the network]
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub net: PathBuf,
    pub pairs: PathBuf,
    /// ROC/PR table as CSV.
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnrollArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub identity: String,
    pub model: PathBuf,
    /// Training report of the model, for the enrollment metadata.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Enrollment time in Unix seconds [default: now]
    #[arg(long)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub net: PathBuf,
    pub probe: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}
