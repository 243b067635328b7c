//! Flag and config-file merging, dataset path resolution.
//!
//! Precedence, highest first: command-line flag, environment (cache
//! directory only), config file, built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;
use tsadv_core::nn::OptimizerKind;
use tsadv_core::pipeline::PipelineConfig;
use tsadv_core::{AttackMode, TeacherKind};

use crate::DataArgs;

#[derive(Args, Debug, Default)]
pub struct PipelineArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub teacher: Option<TeacherKind>,
    #[arg(long)]
    pub mode: Option<AttackMode>,
    /// Skip z-normalization.
    #[arg(long)]
    pub no_normalize: bool,
    /// Start the DTW recurrence from zero instead of the first cell cost.
    #[arg(long)]
    pub literal_origin: bool,
    /// Count adversaries against clean predictions instead of labels.
    #[arg(long)]
    pub unlabeled: bool,
    /// Target class index.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated reconstruction weights.
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    /// Distillation temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Temperature at which the student is read during the attack.
    #[arg(long)]
    pub surrogate_temperature: Option<f64>,
    #[arg(long)]
    pub teacher_epochs: Option<usize>,
    #[arg(long)]
    pub student_epochs: Option<usize>,
    #[arg(long)]
    pub generator_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Run directory; every artifact is written below it.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Distance-tensor cache; defaults to `<output>/cache`.
    #[arg(long, env = "TSADV_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(format!("unknown optimizer {other:?} (adam | sgd)")),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub dataset: Option<String>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    pub pipeline: Option<PipelineConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn merge(self, data: DataArgs, args: &PipelineArgs) -> Result<(DataArgs, PipelineConfig)> {
        let d = self.data;
        let data = DataArgs {
            data_dir: data.data_dir.or(d.dir),
            dataset: data.dataset.or(d.dataset),
            train: data.train.or(d.train),
            test: data.test.or(d.test),
            holdout: data.holdout.or(d.holdout),
        };
        let mut cfg = self.pipeline.unwrap_or_default();
        apply(&mut cfg, args);
        cfg.validate()?;
        Ok((data, cfg))
    }
}

fn apply(cfg: &mut PipelineConfig, a: &PipelineArgs) {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        seed,
        teacher,
        mode,
        target,
        alpha,
        betas,
        temperature,
        teacher_epochs,
        student_epochs,
        generator_epochs,
        batch_size,
        learning_rate,
        optimizer,
        output
    );
    if a.gamma.is_some() {
        cfg.gamma = a.gamma;
    }
    if a.surrogate_temperature.is_some() {
        cfg.surrogate_temperature = a.surrogate_temperature;
    }
    if a.cache_dir.is_some() {
        cfg.cache_dir = a.cache_dir.clone();
    }
    if a.no_normalize {
        cfg.normalize = false;
    }
    if a.literal_origin {
        cfg.literal_origin = true;
    }
    if a.unlabeled {
        cfg.unlabeled = true;
    }
}

fn archive_file(dir: &Path, name: &str, split: &str) -> Option<PathBuf> {
    let file = format!("{name}_{split}.ts");
    [dir.join(name).join(&file), dir.join(&file)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Train, attack and optional holdout paths. Explicit paths win over names
/// resolved under the data directory; every returned path exists.
pub fn resolve(data: &DataArgs) -> Result<(PathBuf, PathBuf, Option<PathBuf>)> {
    let named = |split: &str| -> Option<PathBuf> {
        let (dir, name) = (data.data_dir.as_deref()?, data.dataset.as_deref()?);
        archive_file(dir, name, split)
    };
    let describe = || match (&data.data_dir, &data.dataset) {
        (Some(d), Some(n)) => format!(" under {} for dataset {n}", d.display()),
        _ => String::new(),
    };
    let train = data
        .train
        .clone()
        .or_else(|| named("TRAIN"))
        .with_context(|| {
            format!(
                "no training file: pass --train or --data-dir with --dataset{}",
                describe()
            )
        })?;
    let test = data
        .test
        .clone()
        .or_else(|| named("TEST"))
        .with_context(|| {
            format!(
                "no attack file: pass --test or --data-dir with --dataset{}",
                describe()
            )
        })?;
    let holdout = data.holdout.clone().or_else(|| named("HOLDOUT"));
    for p in [Some(&train), Some(&test), holdout.as_ref()]
        .into_iter()
        .flatten()
    {
        if !p.is_file() {
            bail!("{} does not exist", p.display());
        }
    }
    Ok((train, test, holdout))
}
