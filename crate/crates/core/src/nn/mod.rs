//! The three fixed architectures: the multivariate FCN classifier, the
//! LeNet-5 style student and the GATN perturbation generator.
//!
//! All convolutions run along time with channels as input depth.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use train::fit;
pub use train::one_hot;
pub use train::{train_supervised, Adam, LossCurve, OptimizerKind, TrainConfig};

use crate::data::{batch_tensor, MultivariateSeries, Predictor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const FCN_FILTERS: [usize; 3] = [128, 256, 128];
pub const FCN_KERNELS: [usize; 3] = [8, 5, 3];
pub const LENET_FILTERS: [usize; 2] = [6, 16];
pub const LENET_UNITS: [usize; 2] = [120, 84];
pub const LENET_KERNEL: usize = 5;
pub const GENERATOR_FILTERS: usize = 32;
pub const GENERATOR_KERNEL: usize = 5;
/// Bound on the generator's per-step perturbation.
pub const PERTURBATION_SCALE: f64 = 1.0;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

/// Inference batches are evaluated in chunks of this many samples.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    Fcn,
    Lenet5,
    GatnGenerator,
}

impl ArchitectureKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ArchitectureKind::Fcn => 1,
            ArchitectureKind::Lenet5 => 2,
            ArchitectureKind::GatnGenerator => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ArchitectureKind::Fcn),
            2 => Some(ArchitectureKind::Lenet5),
            3 => Some(ArchitectureKind::GatnGenerator),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchitectureKind,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
}

impl ArchitectureSpec {
    pub fn new(kind: ArchitectureKind, channels: usize, length: usize, classes: usize) -> Self {
        ArchitectureSpec {
            kind,
            channels,
            length,
            classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 {
            return Err(Error::invalid(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        if self.classes < 2 {
            return Err(Error::invalid(format!(
                "architecture needs at least 2 classes: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: u64,
    pub final_loss: f64,
    pub notes: BTreeMap<String, String>,
}

/// A network with its trainable parameters and non-trainable buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    pub metadata: TrainingMetadata,
}

/// Output length of a valid convolution of width `k` followed by a width-2
/// max-pool, or `None` if nothing survives.
fn conv_pool(len: usize, k: usize) -> Option<usize> {
    len.checked_sub(k).map(|v| (v + 1) / 2).filter(|&v| v > 0)
}

fn lenet_time_steps(len: usize, k: usize) -> Option<usize> {
    conv_pool(len, k).and_then(|l| conv_pool(l, k))
}

/// Largest kernel width in `2..=5` for which the student stack leaves at
/// least one time step.
pub fn student_kernel_width(length: usize) -> Result<usize> {
    (2..=LENET_KERNEL)
        .rev()
        .find(|&k| lenet_time_steps(length, k).is_some())
        .ok_or(Error::SeriesTooShort {
            length,
            minimum: (1..)
                .find(|&l| lenet_time_steps(l, 2).is_some())
                .expect("finite"),
        })
}

fn conv_param(name: &str, cout: usize, cin: usize, k: usize, rng: &mut Rng) -> [NamedTensor; 2] {
    [
        NamedTensor::new(
            format!("{name}.weight"),
            Tensor::he_uniform(&[cout, cin, k], cin * k, rng),
        ),
        NamedTensor::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
    ]
}

fn dense_param(name: &str, fout: usize, fin: usize, rng: &mut Rng) -> [NamedTensor; 2] {
    [
        NamedTensor::new(
            format!("{name}.weight"),
            Tensor::he_uniform(&[fout, fin], fin, rng),
        ),
        NamedTensor::new(format!("{name}.bias"), Tensor::zeros(&[fout])),
    ]
}

/// Three conv → batch-norm → ReLU blocks (kernels 8, 5, 3 with 128, 256, 128
/// filters, same padding), global average pooling and a dense head.
pub fn build_fcn(spec: ArchitectureSpec, rng: &mut Rng) -> Result<Network> {
    spec.validate()?;
    if spec.kind != ArchitectureKind::Fcn {
        return Err(Error::invalid(format!(
            "build_fcn called with {:?}",
            spec.kind
        )));
    }
    let widest = FCN_KERNELS.iter().max().copied().unwrap_or(0);
    if spec.length < widest {
        return Err(Error::SeriesTooShort {
            length: spec.length,
            minimum: widest,
        });
    }
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut cin = spec.channels;
    for (i, (&filters, &k)) in FCN_FILTERS.iter().zip(&FCN_KERNELS).enumerate() {
        params.extend(conv_param(&format!("conv{}", i + 1), filters, cin, k, rng));
        params.push(NamedTensor::new(
            format!("bn{}.gamma", i + 1),
            Tensor::full(&[filters], 1.0),
        ));
        params.push(NamedTensor::new(
            format!("bn{}.beta", i + 1),
            Tensor::zeros(&[filters]),
        ));
        buffers.push(NamedTensor::new(
            format!("bn{}.running_mean", i + 1),
            Tensor::zeros(&[filters]),
        ));
        buffers.push(NamedTensor::new(
            format!("bn{}.running_var", i + 1),
            Tensor::full(&[filters], 1.0),
        ));
        cin = filters;
    }
    params.extend(dense_param("head", spec.classes, cin, rng));
    Ok(Network {
        spec,
        params,
        buffers,
        metadata: TrainingMetadata::default(),
    })
}

/// Conv(6) → max-pool → Conv(16) → max-pool → dense 120 → dense 84 → dense C,
/// with ReLU after every hidden layer. Kernel width is 5, reduced for series
/// too short to survive two width-5 convolutions (recorded in the notes).
pub fn build_lenet5_student(spec: ArchitectureSpec, rng: &mut Rng) -> Result<Network> {
    spec.validate()?;
    if spec.kind != ArchitectureKind::Lenet5 {
        return Err(Error::invalid(format!(
            "build_lenet5_student called with {:?}",
            spec.kind
        )));
    }
    let k = student_kernel_width(spec.length)?;
    let steps = lenet_time_steps(spec.length, k).expect("width chosen to fit");
    let mut params = Vec::new();
    params.extend(conv_param("conv1", LENET_FILTERS[0], spec.channels, k, rng));
    params.extend(conv_param(
        "conv2",
        LENET_FILTERS[1],
        LENET_FILTERS[0],
        k,
        rng,
    ));
    params.extend(dense_param(
        "fc1",
        LENET_UNITS[0],
        LENET_FILTERS[1] * steps,
        rng,
    ));
    params.extend(dense_param("fc2", LENET_UNITS[1], LENET_UNITS[0], rng));
    params.extend(dense_param("fc3", spec.classes, LENET_UNITS[1], rng));
    let mut metadata = TrainingMetadata::default();
    if k != LENET_KERNEL {
        metadata.notes.insert(
            "student.kernel_width".into(),
            format!("{k} (series length {})", spec.length),
        );
    }
    Ok(Network {
        spec,
        params,
        buffers: Vec::new(),
        metadata,
    })
}

/// Two width-5 conv + ReLU blocks over `[x, x̃]` stacked on the channel axis,
/// then a width-1 conv back to the input channels. Output is
/// `x + PERTURBATION_SCALE * tanh(·)`, masked to the valid positions.
pub fn build_gatn_generator(spec: ArchitectureSpec, rng: &mut Rng) -> Result<Network> {
    spec.validate()?;
    if spec.kind != ArchitectureKind::GatnGenerator {
        return Err(Error::invalid(format!(
            "build_gatn_generator called with {:?}",
            spec.kind
        )));
    }
    let mut params = Vec::new();
    params.extend(conv_param(
        "conv1",
        GENERATOR_FILTERS,
        2 * spec.channels,
        GENERATOR_KERNEL,
        rng,
    ));
    params.extend(conv_param(
        "conv2",
        GENERATOR_FILTERS,
        GENERATOR_FILTERS,
        GENERATOR_KERNEL,
        rng,
    ));
    params.extend(conv_param("out", spec.channels, GENERATOR_FILTERS, 1, rng));
    Ok(Network {
        spec,
        params,
        buffers: Vec::new(),
        metadata: TrainingMetadata::default(),
    })
}

pub fn build(spec: ArchitectureSpec, rng: &mut Rng) -> Result<Network> {
    match spec.kind {
        ArchitectureKind::Fcn => build_fcn(spec, rng),
        ArchitectureKind::Lenet5 => build_lenet5_student(spec, rng),
        ArchitectureKind::GatnGenerator => build_gatn_generator(spec, rng),
    }
}

/// Same-padding split for a kernel of width `k`: `(left, right)`.
fn same_pad(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k / 2)
}

impl Network {
    pub fn spec(&self) -> ArchitectureSpec {
        self.spec
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub(crate) fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    fn buffer(&self, name: &str) -> &[f64] {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.tensor.data())
            .expect("buffer exists for architecture")
    }

    /// Checksum over every parameter and buffer, in order.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::tensor::Fnv::default();
        for t in self.params.iter().chain(&self.buffers) {
            h.write(t.tensor.checksum());
        }
        h.finish()
    }

    /// Records every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), trainable))
            .collect()
    }

    fn var(&self, bound: &[Var], name: &str) -> Var {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .expect("parameter exists for architecture");
        bound[idx]
    }

    fn check_input(&self, g: &Graph, x: Var, channels: usize) -> Result<()> {
        match *g.shape(x) {
            [_, c, l] if c == channels && l == self.spec.length => Ok(()),
            ref s => Err(Error::shape(
                "network input",
                s,
                &[0, channels, self.spec.length],
            )),
        }
    }

    /// Pre-softmax class scores for a `[N, C, L]` input.
    pub fn logits(&self, g: &mut Graph, bound: &[Var], x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g, x, self.spec.channels)?;
        let v = |name: &str| self.var(bound, name);
        match self.spec.kind {
            ArchitectureKind::Fcn => {
                let mut h = x;
                for (i, &k) in FCN_KERNELS.iter().enumerate() {
                    let (l, r) = same_pad(k);
                    let n = i + 1;
                    h = g.conv1d(
                        h,
                        v(&format!("conv{n}.weight")),
                        Some(v(&format!("conv{n}.bias"))),
                        l,
                        r,
                    )?;
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((
                            self.buffer(&format!("bn{n}.running_mean")),
                            self.buffer(&format!("bn{n}.running_var")),
                        )),
                    };
                    h = g.batch_norm(
                        h,
                        v(&format!("bn{n}.gamma")),
                        v(&format!("bn{n}.beta")),
                        running,
                    )?;
                    h = g.relu(h)?;
                }
                let pooled = g.global_avg_pool(h)?;
                g.dense(pooled, v("head.weight"), v("head.bias"))
            }
            ArchitectureKind::Lenet5 => {
                let mut h = g.conv1d(x, v("conv1.weight"), Some(v("conv1.bias")), 0, 0)?;
                h = g.relu(h)?;
                h = g.max_pool(h)?;
                h = g.conv1d(h, v("conv2.weight"), Some(v("conv2.bias")), 0, 0)?;
                h = g.relu(h)?;
                h = g.max_pool(h)?;
                let shape = g.shape(h).to_vec();
                h = g.reshape(h, vec![shape[0], shape[1] * shape[2]])?;
                h = g.dense(h, v("fc1.weight"), v("fc1.bias"))?;
                h = g.relu(h)?;
                h = g.dense(h, v("fc2.weight"), v("fc2.bias"))?;
                h = g.relu(h)?;
                g.dense(h, v("fc3.weight"), v("fc3.bias"))
            }
            ArchitectureKind::GatnGenerator => Err(Error::invalid("the generator has no logits")),
        }
    }

    /// `x̂ = x + mask ⊙ scale·tanh(net([x, x̃]))`.
    pub fn perturb(
        &self,
        g: &mut Graph,
        bound: &[Var],
        x: Var,
        x_tilde: Var,
        mask: Var,
    ) -> Result<Var> {
        if self.spec.kind != ArchitectureKind::GatnGenerator {
            return Err(Error::invalid(format!(
                "{:?} is not a generator",
                self.spec.kind
            )));
        }
        self.check_input(g, x, self.spec.channels)?;
        if g.shape(x) != g.shape(x_tilde) {
            return Err(Error::shape("generator", g.shape(x), g.shape(x_tilde)));
        }
        if g.shape(x) != g.shape(mask) {
            return Err(Error::shape("generator", g.shape(x), g.shape(mask)));
        }
        let v = |name: &str| self.var(bound, name);
        let (l, r) = same_pad(GENERATOR_KERNEL);
        let stacked = g.concat_channels(x, x_tilde)?;
        let mut h = g.conv1d(stacked, v("conv1.weight"), Some(v("conv1.bias")), l, r)?;
        h = g.relu(h)?;
        h = g.conv1d(h, v("conv2.weight"), Some(v("conv2.bias")), l, r)?;
        h = g.relu(h)?;
        h = g.conv1d(h, v("out.weight"), Some(v("out.bias")), 0, 0)?;
        h = g.tanh(h)?;
        h = g.scale(h, PERTURBATION_SCALE)?;
        let delta = g.mul(h, mask)?;
        g.add(x, delta)
    }

    /// Folds training-mode batch statistics into the running buffers,
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub(crate) fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)]) {
        if stats.is_empty() {
            return;
        }
        for (i, (mean, var)) in stats.iter().enumerate() {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let name = format!("bn{}.{suffix}", i + 1);
                let buf = self
                    .buffers
                    .iter_mut()
                    .find(|b| b.name == name)
                    .expect("one running buffer per batch norm");
                for (r, b) in buf.tensor.data_mut().iter_mut().zip(batch) {
                    *r = BATCH_NORM_MOMENTUM * *r + (1.0 - BATCH_NORM_MOMENTUM) * b;
                }
            }
        }
    }

    fn eval_chunks<T>(
        &self,
        samples: &[MultivariateSeries],
        mut per_chunk: impl FnMut(&Graph, Var, &mut Vec<T>),
    ) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let x = g.constant(batch_tensor(chunk)?);
            let z = self.logits(&mut g, &bound, x, Mode::Eval)?;
            per_chunk(&g, z, &mut out);
        }
        Ok(out)
    }

    /// Inference-mode logits per sample.
    pub fn predict_logits(&self, samples: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>> {
        let c = self.spec.classes;
        self.eval_chunks(samples, |g, z, out| {
            out.extend(g.data(z).chunks(c).map(<[f64]>::to_vec))
        })
    }

    pub fn predict_proba(&self, samples: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .predict_logits(samples)?
            .iter()
            .map(|z| crate::tensor::graph::softmax_row(z, 1.0))
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            architecture: Some(self.spec),
            metadata: self.metadata.clone(),
            tensors: self.params.iter().chain(&self.buffers).cloned().collect(),
        }
    }

    /// Rebuilds a network, checking every tensor against the architecture.
    /// With `expected`, the checkpoint is validated against that
    /// architecture instead of the one it declares.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<ArchitectureSpec>) -> Result<Self> {
        let spec = expected
            .or(ckpt.architecture)
            .ok_or_else(|| Error::CorruptContainer("checkpoint carries no architecture".into()))?;
        let mut template = build(spec, &mut crate::rng::seeded(0))?;
        let mut slots = template
            .params
            .iter_mut()
            .chain(template.buffers.iter_mut())
            .collect::<Vec<_>>();
        if let Some(extra) = ckpt
            .tensors
            .iter()
            .find(|t| !slots.iter().any(|s| s.name == t.name))
        {
            return Err(Error::CheckpointShape {
                name: extra.name.clone(),
                expected: vec![],
                found: extra.tensor.shape().to_vec(),
            });
        }
        for slot in slots.iter_mut() {
            let stored = ckpt
                .tensors
                .iter()
                .find(|t| t.name == slot.name)
                .ok_or_else(|| Error::CheckpointShape {
                    name: slot.name.clone(),
                    expected: slot.tensor.shape().to_vec(),
                    found: vec![],
                })?;
            if stored.tensor.shape() != slot.tensor.shape() {
                return Err(Error::CheckpointShape {
                    name: slot.name.clone(),
                    expected: slot.tensor.shape().to_vec(),
                    found: stored.tensor.shape().to_vec(),
                });
            }
            slot.tensor = stored.tensor.clone();
        }
        template.metadata = ckpt.metadata.clone();
        Ok(template)
    }
}

impl Predictor for Network {
    fn class_count(&self) -> usize {
        self.spec.classes
    }

    fn predict(&self, samples: &[MultivariateSeries]) -> Result<Vec<usize>> {
        Ok(self
            .predict_logits(samples)?
            .iter()
            .map(|z| crate::dtw::argmax(z))
            .collect())
    }
}

/// Gradient of `softmax(z / temperature)[target]` with respect to the
/// input, per sample, with batch norm in inference mode.
pub fn input_gradient(
    model: &Network,
    x: &Tensor,
    target: usize,
    temperature: f64,
) -> Result<Tensor> {
    if target >= model.spec.classes {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} classes",
            model.spec.classes
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let input = g.param(x.clone());
    let z = model.logits(&mut g, &bound, input, Mode::Eval)?;
    let z = if temperature == 1.0 {
        z
    } else {
        g.scale(z, 1.0 / temperature)?
    };
    let p = g.softmax(z)?;
    let pt = g.select_class(p, target)?;
    let total = g.sum(pt)?;
    g.backward(total)?;
    let grad = g.grad(input).expect("input requires grad").to_vec();
    Tensor::new(x.shape().to_vec(), grad)
}
