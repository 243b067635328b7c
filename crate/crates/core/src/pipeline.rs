//! End-to-end orchestration: teacher training, the split-and-relabel
//! protocol, distillation, the β sweep, evaluation and run directories.
//!
//! The archive's TRAIN file fits the attacked model. Its TEST file is the
//! attack set, split into a generator half and an evaluation half. An
//! optional third file is a held-out set the generator never sees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{generate, grid_search, AttackConfig, Surrogate};
use crate::data::{
    read_ts_file, serialize_ts, stratified_split, LabeledDataset, NormStats, Predictor,
    SplitManifest, SplitSpec,
};
use crate::distill::{distill, DistillConfig, FidelityReport, DEFAULT_TEMPERATURE};
use crate::dtw::{DistanceTensor, DtwOptions};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_runs, emit_report, format_beta, AttackReport, Comparison, EvaluatedOn, ReportContext,
    ReportDocument, RunReports,
};
use crate::nn::{
    build, train_supervised, ArchitectureKind, ArchitectureSpec, Checkpoint, Network,
    OptimizerKind, TrainConfig,
};
use crate::rng;
use crate::teacher::{AttackMode, DtwTeacher, Teacher, TeacherKind};

pub const CACHE_DIR_ENV: &str = "TSADV_CACHE_DIR";

/// Every knob of a run. Field names double as CLI flags and config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub teacher: TeacherKind,
    pub mode: AttackMode,
    pub normalize: bool,
    pub literal_origin: bool,
    /// Count adversaries against the clean prediction instead of the label.
    pub unlabeled: bool,
    pub target: usize,
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub temperature: f64,
    /// Distillation gating; the mode's default when absent.
    pub gamma: Option<f64>,
    /// Softmax temperature at which a distilled student is read during the
    /// attack; `temperature` when absent. The FCN teacher is always read at 1.
    pub surrogate_temperature: Option<f64>,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub generator_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub output: PathBuf,
    /// Distance-tensor cache; `<output>/cache` when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let attack = AttackConfig::new(AttackMode::WhiteBox, TeacherKind::Fcn, 0);
        PipelineConfig {
            seed: 0,
            teacher: TeacherKind::Fcn,
            mode: AttackMode::WhiteBox,
            normalize: true,
            literal_origin: false,
            unlabeled: false,
            target: attack.target,
            alpha: attack.alpha,
            betas: attack.betas,
            temperature: DEFAULT_TEMPERATURE,
            gamma: None,
            surrogate_temperature: None,
            teacher_epochs: TrainConfig::teacher(0).epochs,
            student_epochs: TrainConfig::student(0).epochs,
            generator_epochs: TrainConfig::generator(0).epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            output: PathBuf::from("runs/default"),
            cache_dir: None,
        }
    }
}

/// Seeds for each stochastic stage, derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub teacher: u64,
    pub split: u64,
    pub student: u64,
    pub generator: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::invalid(format!("gamma must lie in [0, 1], got {g}")));
            }
        }
        if let Some(t) = self.surrogate_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!(
                    "surrogate temperature must be positive, got {t}"
                )));
            }
        }
        self.train_config(1, 0).validate()?;
        let mut probe = self.attack_config();
        probe.target = 0;
        probe.validate(2)
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            teacher: rng::derive_seed(self.seed, "teacher"),
            split: rng::derive_seed(self.seed, "split"),
            student: rng::derive_seed(self.seed, "student"),
            generator: rng::derive_seed(self.seed, "generator"),
        }
    }

    fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed,
        }
    }

    pub fn teacher_train(&self) -> TrainConfig {
        self.train_config(self.teacher_epochs, self.seeds().teacher)
    }

    pub fn distill_config(&self) -> DistillConfig {
        let mut c = DistillConfig::for_mode(self.mode, self.seeds().student);
        c.temperature = self.temperature;
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        c.train = self.train_config(self.student_epochs, self.seeds().student);
        c
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            target: self.target,
            alpha: self.alpha,
            betas: self.betas.clone(),
            mode: self.mode,
            model: self.teacher,
            train: self.train_config(self.generator_epochs, self.seeds().generator),
        }
    }

    pub fn dtw_options(&self) -> DtwOptions {
        DtwOptions {
            literal_origin: self.literal_origin,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.output.join("cache"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Raw datasets for one run.
#[derive(Clone, Debug)]
pub struct Inputs {
    pub name: String,
    pub train: LabeledDataset,
    pub attack: LabeledDataset,
    pub holdout: Option<LabeledDataset>,
}

impl Inputs {
    pub fn new(
        train: LabeledDataset,
        attack: LabeledDataset,
        holdout: Option<LabeledDataset>,
    ) -> Result<Self> {
        for other in std::iter::once(&attack).chain(holdout.as_ref()) {
            if other.class_names() != train.class_names() {
                return Err(Error::invalid(format!(
                    "class labels differ between files: {:?} vs {:?}",
                    train.class_names(),
                    other.class_names()
                )));
            }
            if other.channels() != train.channels() || other.max_len() != train.max_len() {
                return Err(Error::shape(
                    "dataset files",
                    &[train.channels(), train.max_len()],
                    &[other.channels(), other.max_len()],
                ));
            }
        }
        Ok(Inputs {
            name: train.name().to_string(),
            train,
            attack,
            holdout,
        })
    }

    /// Reads the files, padding every set to the longest series across them.
    pub fn load(train: &Path, attack: &Path, holdout: Option<&Path>) -> Result<Self> {
        let read = |p: &Path| read_ts_file(p).map_err(Error::in_stage("reading dataset"));
        let (train, attack) = (read(train)?, read(attack)?);
        let holdout = holdout.map(read).transpose()?;
        let len = [Some(&train), Some(&attack), holdout.as_ref()]
            .into_iter()
            .flatten()
            .map(LabeledDataset::max_len)
            .max()
            .unwrap_or(0);
        let pad = |d: LabeledDataset| -> Result<LabeledDataset> {
            if d.max_len() == len {
                return Ok(d);
            }
            let samples = d
                .samples()
                .iter()
                .map(|s| s.padded(len))
                .collect::<Result<Vec<_>>>()?;
            Ok(d.with_samples(samples))
        };
        Inputs::new(pad(train)?, pad(attack)?, holdout.map(pad).transpose()?)
    }

    pub fn content_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert(
            "train".into(),
            sha256_hex(serialize_ts(&self.train).as_bytes()),
        );
        out.insert(
            "attack".into(),
            sha256_hex(serialize_ts(&self.attack).as_bytes()),
        );
        if let Some(h) = &self.holdout {
            out.insert("holdout".into(), sha256_hex(serialize_ts(h).as_bytes()));
        }
        out
    }
}

/// Inputs after normalization with statistics of the teacher's training set.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: LabeledDataset,
    pub attack: LabeledDataset,
    pub holdout: Option<LabeledDataset>,
    pub stats: Option<NormStats>,
}

pub fn prepare(inputs: &Inputs, normalize: bool) -> Result<Prepared> {
    if !normalize {
        return Ok(Prepared {
            train: inputs.train.clone(),
            attack: inputs.attack.clone(),
            holdout: inputs.holdout.clone(),
            stats: None,
        });
    }
    let stats = NormStats::fit(&inputs.train)?;
    Ok(Prepared {
        train: stats.apply(&inputs.train)?,
        attack: stats.apply(&inputs.attack)?,
        holdout: inputs
            .holdout
            .as_ref()
            .map(|h| stats.apply(h))
            .transpose()?,
        stats: Some(stats),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub kind: TeacherKind,
    pub key: String,
    pub train_accuracy: f64,
    pub attack_accuracy: f64,
    pub cache_hit: bool,
    pub distance_cache: Option<PathBuf>,
    pub checksum: Option<String>,
}

pub struct TeacherArtifact {
    pub teacher: Teacher,
    /// Clean predictions on the full attack set.
    pub attack_predictions: Vec<usize>,
    pub summary: TeacherSummary,
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    crate::distill::agreement(pred, truth)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| Error::file(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

fn teacher_key(cfg: &PipelineConfig, data: &Prepared) -> String {
    let mut h = Sha256::new();
    h.update(serialize_ts(&data.train));
    h.update([0u8]);
    h.update(serialize_ts(&data.attack));
    h.update([0u8]);
    match cfg.teacher {
        TeacherKind::Dtw => h.update(format!("dtw literal_origin={}", cfg.literal_origin)),
        TeacherKind::Fcn => h.update(format!("fcn {:?}", cfg.teacher_train())),
    }
    hex::encode(h.finalize())
}

/// Fits the attacked model, or reuses a prior fit: FCN weights from the
/// output directory, DTW distances from the cache directory.
pub fn train_teacher(cfg: &PipelineConfig, data: &Prepared) -> Result<TeacherArtifact> {
    let stage = Error::in_stage("training teacher");
    create_dir(&cfg.output).map_err(Error::in_stage("training teacher"))?;
    let key = teacher_key(cfg, data);
    match cfg.teacher {
        TeacherKind::Fcn => fcn_teacher(cfg, data, key).map_err(stage),
        TeacherKind::Dtw => dtw_teacher(cfg, data, key).map_err(stage),
    }
}

fn fcn_teacher(cfg: &PipelineConfig, data: &Prepared, key: String) -> Result<TeacherArtifact> {
    let spec = ArchitectureSpec::new(
        ArchitectureKind::Fcn,
        data.train.channels(),
        data.train.max_len(),
        data.train.class_count(),
    );
    let ckpt_path = cfg.output.join("teacher.ckpt");
    let summary_path = cfg.output.join("teacher.json");
    let previous: Option<TeacherSummary> = std::fs::read_to_string(&summary_path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let (net, cache_hit) = match previous {
        Some(p) if p.key == key && ckpt_path.exists() => {
            log::info!("reusing teacher checkpoint {}", ckpt_path.display());
            (
                Network::from_checkpoint(&Checkpoint::load(&ckpt_path)?, Some(spec))?,
                true,
            )
        }
        _ => {
            let mut net = build(
                spec,
                &mut rng::seeded(rng::derive_seed(cfg.seeds().teacher, "init")),
            )?;
            let curve = train_supervised(&mut net, &data.train, &cfg.teacher_train())?;
            net.to_checkpoint().save(&ckpt_path)?;
            write_text(&cfg.output.join("teacher_loss.csv"), &curve.to_csv())?;
            (net, false)
        }
    };
    let train_accuracy = accuracy(&net.predict(data.train.samples())?, data.train.labels());
    let attack_predictions = net.predict(data.attack.samples())?;
    let summary = TeacherSummary {
        kind: TeacherKind::Fcn,
        key,
        train_accuracy,
        attack_accuracy: accuracy(&attack_predictions, data.attack.labels()),
        cache_hit,
        distance_cache: None,
        checksum: Some(format!("{:016x}", net.checksum())),
    };
    write_json(&summary_path, &summary)?;
    Ok(TeacherArtifact {
        teacher: Teacher::fcn(net)?,
        attack_predictions,
        summary,
    })
}

fn dtw_teacher(cfg: &PipelineConfig, data: &Prepared, key: String) -> Result<TeacherArtifact> {
    let teacher = DtwTeacher::new(data.train.clone(), cfg.dtw_options())?;
    let cache = cfg.cache_dir();
    create_dir(&cache)?;
    let path = cache.join(format!("{key}.dist"));
    let expected = [data.attack.len(), data.train.len(), data.train.channels()];
    let cached = DistanceTensor::load(&path)
        .ok()
        .filter(|v| v.shape() == expected);
    let cache_hit = cached.is_some();
    let v = match cached {
        Some(v) => {
            log::info!("distance tensor cache hit {}", path.display());
            v
        }
        None => {
            log::info!("computing distance tensor {:?}", expected);
            let v = teacher.distances(data.attack.samples())?;
            v.save(&path)?;
            v
        }
    };
    let attack_predictions = teacher.soft_from(&v)?.predictions;
    let train_accuracy = accuracy(
        &teacher.soft(data.train.samples())?.predictions,
        data.train.labels(),
    );
    let summary = TeacherSummary {
        kind: TeacherKind::Dtw,
        key,
        train_accuracy,
        attack_accuracy: accuracy(&attack_predictions, data.attack.labels()),
        cache_hit,
        distance_cache: Some(path),
        checksum: None,
    };
    write_json(&cfg.output.join("teacher.json"), &summary)?;
    Ok(TeacherArtifact {
        teacher: Teacher::Dtw(teacher),
        attack_predictions,
        summary,
    })
}

/// How the attack reached the teacher, recorded for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Route {
    /// `teacher-fcn` or `student-lenet5`.
    pub surrogate: String,
    /// `logits` (white-box) or `labels` (black-box).
    pub teacher_signal: String,
    pub relabeled: bool,
    pub surrogate_temperature: f64,
}

pub fn route(mode: AttackMode, kind: TeacherKind, student_temperature: f64) -> Route {
    let uses_student = !(mode == AttackMode::WhiteBox && kind == TeacherKind::Fcn);
    Route {
        surrogate: if uses_student {
            "student-lenet5"
        } else {
            "teacher-fcn"
        }
        .into(),
        teacher_signal: match (mode, uses_student) {
            (_, false) => "none",
            (AttackMode::WhiteBox, true) => "logits",
            (AttackMode::BlackBox, true) => "labels",
        }
        .into(),
        relabeled: mode == AttackMode::BlackBox,
        surrogate_temperature: if uses_student {
            student_temperature
        } else {
            1.0
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub beta: f64,
    pub status: String,
    pub checksum: Option<String>,
    pub checksum_after_test: Option<String>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub dataset: String,
    pub config: PipelineConfig,
    pub seeds: StageSeeds,
    pub inputs: BTreeMap<String, String>,
    pub normalization: Option<NormStats>,
    pub route: Route,
    pub teacher: TeacherSummary,
    pub split: SplitManifest,
    pub fidelity: Option<FidelityReport>,
    pub generators: Vec<GeneratorRecord>,
    pub holdout: String,
}

pub struct AttackRun {
    pub reports: Vec<AttackReport>,
    pub manifest: RunManifest,
}

fn beta_tag(beta: f64) -> String {
    format!("b{}", format_beta(beta))
}

/// Runs the whole protocol and writes the run directory.
pub fn run_attack(cfg: &PipelineConfig, inputs: &Inputs) -> Result<AttackRun> {
    cfg.validate()?;
    let data = prepare(inputs, cfg.normalize).map_err(Error::in_stage("normalizing"))?;
    let classes = data.train.class_count();
    let attack_cfg = cfg.attack_config();
    attack_cfg.validate(classes)?;
    let artifact = train_teacher(cfg, &data)?;
    let seeds = cfg.seeds();

    let split = stratified_split(&data.attack, SplitSpec::halves(seeds.split))
        .map_err(Error::in_stage("splitting"))?;
    write_json(&cfg.output.join("split.json"), &split.manifest)?;
    let (mut d_train, mut d_eval) = (split.first, split.second);
    if cfg.mode == AttackMode::BlackBox {
        let pick = |idx: &[usize]| {
            idx.iter()
                .map(|&i| artifact.attack_predictions[i])
                .collect::<Vec<_>>()
        };
        d_train = d_train.with_predicted_labels(pick(&split.manifest.first))?;
        d_eval = d_eval.with_predicted_labels(pick(&split.manifest.second))?;
    }

    let route = route(
        cfg.mode,
        cfg.teacher,
        cfg.surrogate_temperature.unwrap_or(cfg.temperature),
    );
    let mut fidelity = None;
    let surrogate_net = if attack_cfg.uses_student() {
        let spec = ArchitectureSpec::new(
            ArchitectureKind::Lenet5,
            data.train.channels(),
            data.train.max_len(),
            classes,
        );
        let mut student = build(
            spec,
            &mut rng::seeded(rng::derive_seed(seeds.student, "init")),
        )
        .map_err(Error::in_stage("distilling student"))?;
        let (curve, report) = distill(
            &artifact.teacher,
            &mut student,
            &d_train,
            &d_eval,
            &cfg.distill_config(),
        )
        .map_err(Error::in_stage("distilling student"))?;
        student
            .to_checkpoint()
            .save(cfg.output.join("student.ckpt"))?;
        write_text(&cfg.output.join("student_loss.csv"), &curve.to_csv())?;
        write_json(&cfg.output.join("distill.json"), &report)?;
        fidelity = Some(report);
        student
    } else {
        artifact
            .teacher
            .network()
            .expect("white-box FCN teacher")
            .clone()
    };

    let surrogate = Surrogate::new(&surrogate_net, route.surrogate_temperature)?;
    let grid = grid_search(surrogate, &d_train, &attack_cfg)
        .map_err(Error::in_stage("training generators"))?;
    let mut reports = Vec::new();
    let mut generators = Vec::new();
    let holdout_note = match &data.holdout {
        Some(h) => format!("evaluated on {} held-out samples", h.len()),
        None => "absent: no held-out file supplied, test rows skipped".to_string(),
    };
    for point in grid {
        let tag = beta_tag(point.beta);
        let (gen, curve) = match point.outcome {
            Ok(v) => v,
            Err(e) => {
                generators.push(GeneratorRecord {
                    beta: point.beta,
                    status: format!("failed: {e}"),
                    checksum: None,
                    checksum_after_test: None,
                    final_loss: None,
                });
                continue;
            }
        };
        gen.to_checkpoint()
            .save(cfg.output.join(format!("generator_{tag}.ckpt")))?;
        write_text(
            &cfg.output.join(format!("generator_{tag}_loss.csv")),
            &curve.to_csv(),
        )?;
        let checksum = gen.checksum();
        let ctx = |on| ReportContext {
            dataset: &inputs.name,
            mode: cfg.mode,
            model: cfg.teacher,
            beta: point.beta,
            target: cfg.target,
            evaluated_on: on,
            unlabeled: cfg.unlabeled,
        };
        let eval = generate(
            &gen,
            surrogate,
            &artifact.teacher,
            d_eval.samples(),
            cfg.target,
        )
        .map_err(Error::in_stage("generating adversaries"))?;
        eval.save(&cfg.output, &format!("batch_eval_{tag}"))?;
        reports.push(AttackReport::from_batch(
            &ctx(EvaluatedOn::Eval),
            &eval,
            d_eval.ground_truth(),
        )?);
        let mut after = None;
        if let Some(h) = &data.holdout {
            let test = generate(&gen, surrogate, &artifact.teacher, h.samples(), cfg.target)
                .map_err(Error::in_stage("generating adversaries"))?;
            if gen.checksum() != checksum {
                return Err(Error::invalid(
                    "generator weights changed during held-out generation",
                ));
            }
            test.save(&cfg.output, &format!("batch_test_{tag}"))?;
            reports.push(AttackReport::from_batch(
                &ctx(EvaluatedOn::Test),
                &test,
                h.labels(),
            )?);
            after = Some(format!("{:016x}", gen.checksum()));
        }
        generators.push(GeneratorRecord {
            beta: point.beta,
            status: "ok".into(),
            checksum: Some(format!("{checksum:016x}")),
            checksum_after_test: after,
            final_loss: curve.last(),
        });
    }
    if reports.is_empty() {
        return Err(Error::Stage {
            stage: "training generators",
            source: Box::new(Error::invalid("every beta in the grid failed")),
        });
    }
    emit_report(&cfg.output, "report", &reports, &[])?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: inputs.name.clone(),
        config: cfg.clone(),
        seeds,
        inputs: inputs.content_hashes(),
        normalization: data.stats.clone(),
        route,
        teacher: artifact.summary,
        split: split.manifest,
        fidelity,
        generators,
        holdout: holdout_note,
    };
    write_json(&cfg.output.join("manifest.json"), &manifest)?;
    Ok(AttackRun { reports, manifest })
}

/// Result of combining run directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub document: ReportDocument,
    pub notices: Vec<String>,
}

fn run_label(m: &RunManifest) -> String {
    format!("{} {}", m.config.mode, m.config.teacher)
}

/// Merges run directories by attack configuration and compares every pair
/// of configurations over their shared datasets.
pub fn combine_reports(run_dirs: &[PathBuf], output: &Path) -> Result<CombinedReport> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("no run directories given"));
    }
    let mut groups: Vec<RunReports> = Vec::new();
    for dir in run_dirs {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))
        };
        let manifest: RunManifest = serde_json::from_str(&read("manifest.json")?)?;
        let doc: ReportDocument = serde_json::from_str(&read("report.json")?)?;
        let label = run_label(&manifest);
        match groups.iter_mut().find(|g| g.label == label) {
            Some(g) => {
                if let Some(dup) = doc
                    .reports
                    .iter()
                    .find(|r| g.reports.iter().any(|o| o.dataset == r.dataset))
                {
                    return Err(Error::invalid(format!(
                        "{label} has two runs for dataset {:?}",
                        dup.dataset
                    )));
                }
                g.reports.extend(doc.reports)
            }
            None => groups.push(RunReports {
                label,
                reports: doc.reports,
            }),
        }
    }
    let mut notices = Vec::new();
    let mut comparisons: Vec<Comparison> = Vec::new();
    if groups.len() < 2 {
        notices.push("only one attack configuration; signed-rank comparisons skipped".to_string());
    } else {
        comparisons.extend(compare_runs(&groups, EvaluatedOn::Eval)?);
        let all_test = groups.iter().all(|g| {
            g.reports
                .iter()
                .any(|r| r.evaluated_on == EvaluatedOn::Test)
        });
        if all_test {
            for mut c in compare_runs(&groups, EvaluatedOn::Test)? {
                c.metric = format!("{} (test)", c.metric);
                comparisons.push(c);
            }
        } else {
            notices
                .push("held-out rows missing from some runs; test comparisons skipped".to_string());
        }
    }
    create_dir(output)?;
    let reports: Vec<AttackReport> = groups.into_iter().flat_map(|g| g.reports).collect();
    emit_report(output, "combined", &reports, &comparisons)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "first",
        "second",
        "metric",
        "n",
        "statistic",
        "p_value",
        "note",
    ])?;
    for c in &comparisons {
        let r = c.result;
        w.write_record([
            c.first.clone(),
            c.second.clone(),
            c.metric.clone(),
            r.map_or_else(String::new, |r| r.n.to_string()),
            r.map_or_else(String::new, |r| r.statistic.to_string()),
            r.map_or_else(String::new, |r| format!("{:.6}", r.p_value)),
            c.note.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_text(
        &output.join("comparisons.csv"),
        &String::from_utf8(bytes).expect("UTF-8"),
    )?;
    Ok(CombinedReport {
        document: ReportDocument {
            reports,
            comparisons,
        },
        notices,
    })
}
