//! Run configuration and the `abnn` subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_blobs, BlobParams, BlobSpec, DatasetBundle};
use crate::error::{AbnnError, Result};
use crate::evaluation::{build_report, histogram_csv, ordered_curve_csv, score_bundle, EvalOptions, MetricsReport};
use crate::model::{AbnnModel, Checkpoint, ModelConfig};
use crate::numerics::Rng;
use crate::theory::{verify_all, CheckResult, VerifyConfig};
use crate::training::{build_model, log_to_csv, train, TrainerConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_THEORY: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub width: usize,
    pub blocks: usize,
    pub init_sigma: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 3,
            init_sigma: 0.25,
        }
    }
}

/// Everything one run needs. Relative paths resolve against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: BlobParams,
    pub n_per_class: usize,
    pub data_seed: u64,
    pub model: ModelOptions,
    pub trainer: TrainerConfig,
    pub eval: EvalOptions,
    pub verify: VerifyConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Metric reports merged by `report`.
    pub reports: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: BlobParams::default(),
            n_per_class: 500,
            data_seed: 0,
            model: ModelOptions::default(),
            trainer: TrainerConfig::default(),
            eval: EvalOptions::default(),
            verify: VerifyConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            reports: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| AbnnError::Config(format!("invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.classes < 2 {
            return Err(AbnnError::Config(format!(
                "data.classes: K ≥ 2 required, got {}",
                self.data.classes
            )));
        }
        if !(self.data.ood_noise_std > 0.0) {
            return Err(AbnnError::Config(format!(
                "data.ood_noise_std must be positive, got {}",
                self.data.ood_noise_std
            )));
        }
        if self.n_per_class == 0 {
            return Err(AbnnError::Config("n_per_class must be ≥ 1".into()));
        }
        self.trainer.validate().map_err(|e| match e {
            AbnnError::Config(m) => AbnnError::Config(format!("trainer.{m}")),
            other => other,
        })?;
        if self.eval.n_samples_eval == 0 {
            return Err(AbnnError::Config("eval.n_samples_eval must be ≥ 1".into()));
        }
        if !(0.0..0.5).contains(&self.eval.trim) {
            return Err(AbnnError::Config(format!(
                "eval.trim must lie in [0, 0.5), got {}",
                self.eval.trim
            )));
        }
        self.verify.validate()?;
        self.model_config(self.data.dim).validate()
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            width: self.model.width,
            blocks: self.model.blocks,
            classes: self.data.classes,
            init_sigma: self.model.init_sigma,
            bayesian: self.trainer.mode.is_bayesian(),
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.out_dir);
        if let Some(c) = self.checkpoint.as_mut() {
            fix(c);
        }
        for r in &mut self.reports {
            fix(r);
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }
}

/// Dataset generated from the config, identical to what `gen-data` writes.
pub fn generate(cfg: &RunConfig) -> Result<DatasetBundle> {
    let spec = BlobSpec::standard(&cfg.data, &mut Rng::new(cfg.data_seed).derive(0))?;
    gen_blobs(&spec, cfg.n_per_class, cfg.data_seed)
}

/// Trains on a raw bundle; the returned checkpoint carries the standardizer.
pub fn train_bundle(cfg: &RunConfig, raw: &DatasetBundle) -> Result<(AbnnModel, Checkpoint, String)> {
    let (bundle, st) = raw.standardized()?;
    let mut model = build_model(cfg.model_config(raw.dim()), &cfg.trainer)?;
    let log = train(&mut model, &bundle, &cfg.trainer)?;
    let ckpt = model.to_checkpoint(Some(&st));
    Ok((model, ckpt, log_to_csv(&log)))
}

/// Scores and metrics of a checkpoint on a raw bundle.
pub fn eval_bundle(cfg: &RunConfig, ckpt: &Checkpoint, raw: &DatasetBundle) -> Result<(MetricsReport, String, String)> {
    let mut model = AbnnModel::from_checkpoint(ckpt)?;
    if model.config.input_dim != raw.dim() {
        return Err(AbnnError::Checkpoint(format!(
            "checkpoint expects {} input features, data has {}",
            model.config.input_dim,
            raw.dim()
        )));
    }
    let bundle = match &ckpt.config.standardizer {
        Some(st) => raw.with_standardizer(st)?,
        None => raw.clone(),
    };
    let scored = score_bundle(&mut model, &bundle, &cfg.eval)?;
    let config = serde_json::to_value(cfg)?;
    let report = build_report(&scored, &cfg.eval, cfg.trainer.mode.as_str(), cfg.trainer.seed, config)?;
    Ok((report, ordered_curve_csv(&scored), histogram_csv(&scored, 20)))
}

/// Comparison table: one row per report.
pub fn report_table(reports: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(
        "source,mode,seed,alpha,id_accuracy,full_auroc,full_tnr_at_tpr95,full_detection_accuracy,\
         full_aupr_in,full_aupr_out,semi_auroc,semi_tnr_at_tpr95,misclassification_auroc,cluster_accuracy\n",
    );
    for (src, r) in reports {
        let alpha = r
            .config
            .pointer("/trainer/alpha")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::NAN);
        let mis = r.misclassification.auroc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{src},{},{},{alpha},{},{},{},{},{},{},{},{},{mis},{}\n",
            r.mode,
            r.seed,
            r.id_accuracy,
            r.id_vs_full.auroc,
            r.id_vs_full.tnr_at_tpr95,
            r.id_vs_full.detection_accuracy,
            r.id_vs_full.aupr_in,
            r.id_vs_full.aupr_out,
            r.id_vs_semi.auroc,
            r.id_vs_semi.tnr_at_tpr95,
            r.cluster.accuracy,
        ));
    }
    out
}

#[derive(Debug, Parser)]
#[command(
    name = "abnn",
    version,
    about = "Attachment-structured Bayesian networks: data, training, evaluation and checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path, overriding the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (gen-data: dataset directory; report: CSV file).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic ID / semi-OOD / full-OOD bundle.
    GenData(CommonArgs),
    /// Train a model and write its checkpoint and per-epoch log.
    Train(CommonArgs),
    /// Evaluate a checkpoint and write metrics plus figure CSVs.
    Eval(CommonArgs),
    /// Run the numerical theory checks.
    Verify(CommonArgs),
    /// Merge metric reports into one comparison CSV.
    Report(CommonArgs),
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| AbnnError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let mut cfg = RunConfig::from_json(&text)?;
            cfg.resolve(path.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(c) = &args.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn run_command(command: &Command) -> Result<i32> {
    match command {
        Command::GenData(args) => {
            let cfg = load_config(args)?;
            let dir = args.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            generate(&cfg)?.save(&dir)?;
            eprintln!("wrote dataset to {}", dir.display());
            Ok(EXIT_OK)
        }
        Command::Train(args) => {
            let mut cfg = load_config(args)?;
            if let Some(out) = &args.out {
                cfg.out_dir = out.clone();
            }
            let raw = DatasetBundle::load(&cfg.data_dir)?;
            let (_, ckpt, log) = train_bundle(&cfg, &raw)?;
            let path = cfg.checkpoint_path();
            write(&path, &ckpt.to_json()?)?;
            write(&cfg.out_dir.join("train_log.csv"), &log)?;
            eprintln!("wrote checkpoint to {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Eval(args) => {
            let mut cfg = load_config(args)?;
            if let Some(out) = &args.out {
                cfg.out_dir = out.clone();
            }
            let ckpt = Checkpoint::from_json(&fs::read_to_string(cfg.checkpoint_path())?)?;
            let raw = DatasetBundle::load(&cfg.data_dir)?;
            let (report, curve, hist) = eval_bundle(&cfg, &ckpt, &raw)?;
            write(&cfg.out_dir.join("metrics.json"), &pretty(&report)?)?;
            write(&cfg.out_dir.join("ordered_uncertainty.csv"), &curve)?;
            write(&cfg.out_dir.join("histogram.csv"), &hist)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(EXIT_OK)
        }
        Command::Verify(args) => {
            let cfg = load_config(args)?;
            let checks: Vec<CheckResult> = verify_all(&cfg.verify)?;
            let text = pretty(&checks)?;
            if let Some(out) = &args.out {
                write(&out.join("verify.json"), &text)?;
            }
            print!("{text}");
            for c in &checks {
                eprintln!(
                    "{} {} (statistic {}, bound {})",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.check_name,
                    c.statistic,
                    c.bound
                );
            }
            Ok(if checks.iter().all(|c| c.pass) {
                EXIT_OK
            } else {
                EXIT_THEORY
            })
        }
        Command::Report(args) => {
            let cfg = load_config(args)?;
            if cfg.reports.is_empty() {
                return Err(AbnnError::Config("reports: list at least one metrics JSON".into()));
            }
            let mut rows = Vec::new();
            for path in &cfg.reports {
                let r: MetricsReport = serde_json::from_str(&fs::read_to_string(path)?)?;
                rows.push((path.display().to_string(), r));
            }
            let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("report.csv"));
            write(&out, &report_table(&rows))?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run_command(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                AbnnError::Config(_) => EXIT_VALIDATION,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
