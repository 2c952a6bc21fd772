//! The `marrowcast` command line: phantom generation, preprocessing,
//! training, inference, leave-one-out evaluation and reporting.

pub mod commands;
pub mod config;
pub mod provenance;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use marrowcast_core::{Error, ErrorClass};

pub use config::{EvalConfig, Profile, RunConfig};

/// Exit status of a successful run.
pub const EXIT_OK: i32 = 0;

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{failed} of {total} folds failed; first failure ({kind}): {message}")]
    FoldsFailed {
        failed: usize,
        total: usize,
        kind: String,
        class: String,
        message: String,
    },
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => exit_code(e.class()),
            CliError::FoldsFailed { class, .. } => match class.as_str() {
                "usage" => 1,
                "numerical" => 3,
                _ => 2,
            },
        }
    }

    pub fn kind(&self) -> &str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
            CliError::FoldsFailed { .. } => "fold_failed",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// The one-line diagnostic written to stderr for every failure.
pub fn diagnostic(kind: &str, code: i32, msg: &str) -> String {
    let quoted = serde_json::to_string(msg).expect("strings serialize");
    format!("error kind={kind} code={code} msg={quoted}")
}

#[derive(Debug, Parser)]
#[command(name = "marrowcast", version, about = "Bone segmentation and lesion-risk cascade on longitudinal volumes")]
pub struct Cli {
    /// Worker threads for folds and cases; 1 is the deterministic reference.
    #[arg(long, global = true, env = "MARROWCAST_JOBS")]
    pub jobs: Option<usize>,
    /// Progress on stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// RunConfig JSON; defaults to the desk_scale profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets `reference_mode`.
    #[arg(long)]
    pub reference: bool,
    /// Overrides one config field, e.g. `--set bonenet.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom cohort as NIfTI files plus manifest.json.
    PhantomGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bias-correct, normalize and align every case of a cohort.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bone net on every case of a cohort.
    TrainBone {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the lesion net on bone-region patches of a cohort.
    TrainLesion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bone-net checkpoint; required when `cascade.bone_source` is `bonenet`.
        #[arg(long)]
        bonenet: Option<PathBuf>,
    },
    /// Risk map for one baseline volume.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        bonenet: PathBuf,
        #[arg(long)]
        lesionnet: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the bone probability volume.
        #[arg(long)]
        bone_out: Option<PathBuf>,
        /// Use the input as is, without bias correction and normalization.
        #[arg(long)]
        no_preprocess: bool,
    },
    /// Leave-one-out cross-validation end to end, with report.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Cohort directory; without it a phantom cohort is generated from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to `output_dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render report.md and ROC plots from an evaluation directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings shared by every command.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    pub jobs: usize,
    pub verbose: bool,
}

impl ConfigArgs {
    /// Loads the config (or the desk_scale defaults) with flag overrides.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut overrides = self
            .set
            .iter()
            .map(|s| config::parse_override(s))
            .collect::<marrowcast_core::Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.into()));
        }
        if self.reference {
            overrides.push(("reference_mode".into(), true.into()));
        }
        let config = match &self.config {
            Some(path) => RunConfig::load(path, &overrides)?,
            None => RunConfig::from_value(serde_json::json!({"profile": "desk_scale"}), &overrides)?,
        };
        Ok(config)
    }
}

fn context(cli: &Cli, reference: bool) -> CliResult<Context> {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::Usage("--jobs must be >= 1".into())),
        Some(n) => n,
        None => 1,
    };
    Ok(Context {
        jobs: if reference { 1 } else { jobs },
        verbose: cli.verbose,
    })
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let reference = |c: &RunConfig| c.reference_mode;
    match &cli.command {
        Command::PhantomGen { cfg, out } => {
            let config = cfg.resolve()?;
            commands::phantom_gen(&config, out, context(&cli, reference(&config))?)
        }
        Command::Preprocess { cfg, data, out } => {
            let config = cfg.resolve()?;
            commands::preprocess(&config, data, out, context(&cli, reference(&config))?)
        }
        Command::TrainBone { cfg, data, out } => {
            let config = cfg.resolve()?;
            commands::train_bone(&config, data, out, context(&cli, reference(&config))?)
        }
        Command::TrainLesion { cfg, data, out, bonenet } => {
            let config = cfg.resolve()?;
            commands::train_lesion(&config, data, out, bonenet.as_deref(), context(&cli, reference(&config))?)
        }
        Command::Predict {
            cfg,
            input,
            bonenet,
            lesionnet,
            out,
            bone_out,
            no_preprocess,
        } => {
            let config = cfg.resolve()?;
            let request = commands::PredictRequest {
                input,
                bonenet,
                lesionnet,
                out,
                bone_out: bone_out.as_deref(),
                preprocess: !no_preprocess,
                patch_size_from_net: cfg.config.is_none(),
            };
            commands::predict(&config, &request, context(&cli, reference(&config))?)
        }
        Command::Evaluate { cfg, data, out } => {
            let config = cfg.resolve()?;
            let out = out.clone().unwrap_or_else(|| config.output_dir.clone());
            commands::evaluate(&config, data.as_deref(), &out, context(&cli, reference(&config))?)
        }
        Command::Report { input, out } => commands::report(input, out.as_deref()),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Errors go to stderr as one diagnostic line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            let msg = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", diagnostic("usage", 1, msg));
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", diagnostic(e.kind(), e.code(), &e.to_string()));
            e.code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagnostic_is_one_line() {
        let d = diagnostic("format", 2, "bad \"magic\"\nsecond line");
        assert_eq!(d, r#"error kind=format code=2 msg="bad \"magic\"\nsecond line""#);
        assert_eq!(d.lines().count(), 1);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(CliError::Core(Error::Config("x".into())).code(), 1);
        assert_eq!(CliError::Core(Error::Format("x".into())).code(), 2);
        assert_eq!(CliError::Core(Error::NonFiniteLoss { batch: 0, loss: f64::NAN }).code(), 3);
        assert_eq!(CliError::Usage("x".into()).code(), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
