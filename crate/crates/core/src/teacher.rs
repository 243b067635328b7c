//! The attacked classifier, either a trained FCN or 1-NN DTW over a
//! reference set.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, MultivariateSeries, Predictor};
use crate::dtw::{distance_tensor, soft_1nn, DistanceTensor, DtwOptions, SoftNeighbors};
use crate::error::{Error, Result};
use crate::nn::{ArchitectureKind, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    WhiteBox,
    BlackBox,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::WhiteBox => "white-box",
            AttackMode::BlackBox => "black-box",
        }
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white-box" | "whitebox" | "white" => Ok(AttackMode::WhiteBox),
            "black-box" | "blackbox" | "black" => Ok(AttackMode::BlackBox),
            _ => Err(Error::invalid(format!("unknown attack mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Dtw,
    Fcn,
}

impl TeacherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::Dtw => "dtw",
            TeacherKind::Fcn => "fcn",
        }
    }
}

impl std::fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dtw" | "1nn-dtw" => Ok(TeacherKind::Dtw),
            "fcn" => Ok(TeacherKind::Fcn),
            _ => Err(Error::invalid(format!("unknown teacher kind {s:?}"))),
        }
    }
}

/// 1-NN DTW against a fixed labelled reference set.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwTeacher {
    reference: LabeledDataset,
    options: DtwOptions,
}

impl DtwTeacher {
    pub fn new(reference: LabeledDataset, options: DtwOptions) -> Result<Self> {
        let counts = reference.class_counts();
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::MissingClass { class });
        }
        Ok(DtwTeacher { reference, options })
    }

    pub fn reference(&self) -> &LabeledDataset {
        &self.reference
    }

    pub fn options(&self) -> DtwOptions {
        self.options
    }

    pub fn distances(&self, samples: &[MultivariateSeries]) -> Result<DistanceTensor> {
        distance_tensor(samples, self.reference.samples(), self.options)
    }

    /// Soft-1NN output for a precomputed `samples × reference` tensor.
    pub fn soft_from(&self, v: &DistanceTensor) -> Result<SoftNeighbors> {
        soft_1nn(v, self.reference.labels(), self.reference.class_count())
    }

    pub fn soft(&self, samples: &[MultivariateSeries]) -> Result<SoftNeighbors> {
        self.soft_from(&self.distances(samples)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Teacher {
    Fcn(Network),
    Dtw(DtwTeacher),
}

impl Teacher {
    pub fn fcn(network: Network) -> Result<Self> {
        if network.spec().kind != ArchitectureKind::Fcn {
            return Err(Error::invalid(format!(
                "expected an FCN teacher, got {:?}",
                network.spec().kind
            )));
        }
        Ok(Teacher::Fcn(network))
    }

    pub fn kind(&self) -> TeacherKind {
        match self {
            Teacher::Fcn(_) => TeacherKind::Fcn,
            Teacher::Dtw(_) => TeacherKind::Dtw,
        }
    }

    /// Class scores whose softmax is the teacher's probability output: the
    /// FCN's logits, or the Soft-1NN per-class scores.
    pub fn logits(&self, samples: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>> {
        match self {
            Teacher::Fcn(net) => net.predict_logits(samples),
            Teacher::Dtw(t) => Ok(t.soft(samples)?.logits),
        }
    }

    pub fn network(&self) -> Option<&Network> {
        match self {
            Teacher::Fcn(net) => Some(net),
            Teacher::Dtw(_) => None,
        }
    }
}

impl Predictor for Teacher {
    fn class_count(&self) -> usize {
        match self {
            Teacher::Fcn(net) => net.spec().classes,
            Teacher::Dtw(t) => t.reference.class_count(),
        }
    }

    fn predict(&self, samples: &[MultivariateSeries]) -> Result<Vec<usize>> {
        match self {
            Teacher::Fcn(net) => net.predict(samples),
            Teacher::Dtw(t) => Ok(t.soft(samples)?.predictions),
        }
    }
}
