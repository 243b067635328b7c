//! Teacher-to-student transfer under white-box and black-box restrictions.

use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, LabeledDataset, MultivariateSeries, Predictor};
use crate::error::{Error, Result};
use crate::nn::{fit, one_hot, ArchitectureKind, LossCurve, Mode, Network, TrainConfig};
use crate::teacher::{AttackMode, Teacher, TeacherKind};
use crate::tensor::graph::softmax_row;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub temperature: f64,
    pub gamma: f64,
    pub mode: AttackMode,
    pub train: TrainConfig,
}

impl DistillConfig {
    /// τ = 10 and γ = 0.5 for white-box, γ = 1 for black-box.
    pub fn for_mode(mode: AttackMode, seed: u64) -> Self {
        DistillConfig {
            temperature: DEFAULT_TEMPERATURE,
            gamma: match mode {
                AttackMode::WhiteBox => 0.5,
                AttackMode::BlackBox => 1.0,
            },
            mode,
            train: TrainConfig::student(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        self.train.validate()
    }
}

/// `exp(z_i / T) / Σ_j exp(z_j / T)`.
pub fn temperature_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("temperature_softmax"));
    }
    Ok(softmax_row(z, temperature))
}

/// What the attacker observes from the teacher.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSignal {
    Logits(Vec<Vec<f64>>),
    Probabilities(Vec<Vec<f64>>),
    Labels(Vec<usize>),
}

impl TeacherSignal {
    /// Queries the teacher with only the access `mode` permits.
    pub fn observe(
        teacher: &Teacher,
        samples: &[MultivariateSeries],
        mode: AttackMode,
    ) -> Result<Self> {
        Ok(match mode {
            AttackMode::WhiteBox => TeacherSignal::Logits(teacher.logits(samples)?),
            AttackMode::BlackBox => TeacherSignal::Labels(teacher.predict(samples)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            TeacherSignal::Logits(v) | TeacherSignal::Probabilities(v) => v.len(),
            TeacherSignal::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Target distributions for the distillation term, `[N, C]`. White-box
    /// signals are softened at `temperature`; black-box labels become one-hot
    /// rows used as they are.
    pub fn targets(&self, mode: AttackMode, temperature: f64, classes: usize) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = match (mode, self) {
            (AttackMode::BlackBox, TeacherSignal::Labels(labels)) => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                    return Err(Error::invalid(format!(
                        "label {bad} out of range for {classes} classes"
                    )));
                }
                return one_hot(labels, classes);
            }
            (AttackMode::BlackBox, _) => return Err(Error::BlackBoxRestriction),
            (AttackMode::WhiteBox, TeacherSignal::Labels(_)) => {
                return Err(Error::invalid(
                    "white-box distillation needs teacher logits or probabilities",
                ))
            }
            (AttackMode::WhiteBox, TeacherSignal::Logits(z)) => z
                .iter()
                .map(|row| temperature_softmax(row, temperature))
                .collect::<Result<_>>()?,
            (AttackMode::WhiteBox, TeacherSignal::Probabilities(p)) => p
                .iter()
                .map(|row| {
                    if row.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                        return Err(Error::invalid(
                            "teacher probabilities must be strictly positive",
                        ));
                    }
                    let logs: Vec<f64> = row.iter().map(|v| v.ln()).collect();
                    temperature_softmax(&logs, temperature)
                })
                .collect::<Result<_>>()?,
        };
        if let Some(row) = rows.iter().find(|r| r.len() != classes) {
            return Err(Error::shape("teacher signal", &[classes], &[row.len()]));
        }
        Tensor::new(vec![rows.len(), classes], rows.concat())
    }
}

/// `γ·H(target, σ(z_s; τ)) + (1 − γ)·H(y, σ(z_s; 1))`, batch-averaged.
pub fn transfer_loss(
    g: &mut Graph,
    student_logits: Var,
    targets: &Tensor,
    hard_labels: &[usize],
    temperature: f64,
    gamma: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let classes = g.shape(student_logits).last().copied().unwrap_or(0);
    if hard_labels.len() != targets.shape()[0] || hard_labels.iter().any(|&l| l >= classes) {
        return Err(Error::invalid("hard labels do not match the student batch"));
    }
    let distillation = g.soft_cross_entropy(student_logits, targets, temperature)?;
    if gamma == 1.0 {
        return Ok(distillation);
    }
    let student = g.soft_cross_entropy(student_logits, &one_hot(hard_labels, classes)?, 1.0)?;
    if gamma == 0.0 {
        return Ok(student);
    }
    let a = g.scale(distillation, gamma)?;
    let b = g.scale(student, 1.0 - gamma)?;
    g.add(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FidelityReport {
    pub teacher_kind: TeacherKind,
    pub mode: AttackMode,
    pub gamma: f64,
    pub temperature: f64,
    pub agreement_train: f64,
    pub agreement_eval: f64,
}

pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Trains `student` on `d_train` to mimic `teacher`, then measures how often
/// the two agree on `d_train` and `d_eval`. In black-box mode `d_train` must
/// already carry the teacher's predicted labels.
pub fn distill(
    teacher: &Teacher,
    student: &mut Network,
    d_train: &LabeledDataset,
    d_eval: &LabeledDataset,
    config: &DistillConfig,
) -> Result<(LossCurve, FidelityReport)> {
    config.validate()?;
    if student.spec().kind != ArchitectureKind::Lenet5
        && student.spec().kind != ArchitectureKind::Fcn
    {
        return Err(Error::invalid("the student must be a classifier"));
    }
    let classes = student.spec().classes;
    if teacher.class_count() != classes {
        return Err(Error::invalid(format!(
            "teacher has {} classes, student {classes}",
            teacher.class_count()
        )));
    }
    if config.mode == AttackMode::BlackBox && !d_train.is_relabeled() {
        return Err(Error::invalid(
            "black-box distillation needs a dataset relabeled by the teacher",
        ));
    }
    let signal = TeacherSignal::observe(teacher, d_train.samples(), config.mode)?;
    let targets = signal.targets(config.mode, config.temperature, classes)?;
    let samples = d_train.samples();
    let labels = d_train.labels();
    let curve = fit(
        student,
        d_train.len(),
        &config.train,
        |g, net, bound, batch| {
            let chunk: Vec<_> = batch.iter().map(|&i| samples[i].clone()).collect();
            let x = g.constant(batch_tensor(&chunk)?);
            let z = net.logits(g, bound, x, Mode::Train)?;
            let rows: Vec<f64> = batch
                .iter()
                .flat_map(|&i| {
                    targets.data()[i * classes..(i + 1) * classes]
                        .iter()
                        .copied()
                })
                .collect();
            let t = Tensor::new(vec![batch.len(), classes], rows)?;
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            transfer_loss(g, z, &t, &ys, config.temperature, config.gamma)
        },
    )?;
    let report = fidelity(teacher, student, d_train, d_eval, config)?;
    Ok((curve, report))
}

pub fn fidelity(
    teacher: &Teacher,
    student: &Network,
    d_train: &LabeledDataset,
    d_eval: &LabeledDataset,
    config: &DistillConfig,
) -> Result<FidelityReport> {
    let agree = |ds: &LabeledDataset| -> Result<f64> {
        Ok(agreement(
            &teacher.predict(ds.samples())?,
            &student.predict(ds.samples())?,
        ))
    };
    Ok(FidelityReport {
        teacher_kind: teacher.kind(),
        mode: config.mode,
        gamma: config.gamma,
        temperature: config.temperature,
        agreement_train: agree(d_train)?,
        agreement_eval: agree(d_eval)?,
    })
}
