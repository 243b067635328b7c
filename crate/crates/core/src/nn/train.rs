use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Mode, NamedTensor, Network};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    fn with_epochs(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed,
        }
    }

    pub fn teacher(seed: u64) -> Self {
        Self::with_epochs(200, seed)
    }

    pub fn student(seed: u64) -> Self {
        Self::with_epochs(500, seed)
    }

    pub fn generator(seed: u64) -> Self {
        Self::with_epochs(1000, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "batch size and learning rate must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub epoch_means: Vec<f64>,
}

impl LossCurve {
    pub fn last(&self) -> Option<f64> {
        self.epoch_means.last().copied()
    }

    /// `epoch,mean_loss` rows, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, l) in self.epoch_means.iter().enumerate() {
            out.push_str(&format!("{},{l:?}\n", i + 1));
        }
        out
    }
}

/// Adaptive moment estimation with the usual defaults
/// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8). Plain SGD when configured so.
#[derive(Clone, Debug)]
pub struct Adam {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[NamedTensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Adam {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [NamedTensor], grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let w = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => w.iter_mut().zip(g).for_each(|(w, g)| *w -= self.lr * g),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..w.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Minibatch loop shared by every trainer. `loss` records a forward pass for
/// the given sample indices and returns the scalar to minimize.
pub(crate) fn fit<F>(
    model: &mut Network,
    samples: usize,
    config: &TrainConfig,
    mut loss: F,
) -> Result<LossCurve>
where
    F: FnMut(&mut Graph, &Network, &[Var], &[usize]) -> Result<Var>,
{
    config.validate()?;
    let mut curve = LossCurve::default();
    if samples == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut rng = rng::seeded(config.seed);
    let mut opt = Adam::new(config.optimizer, config.learning_rate, model.params());
    let mut order: Vec<usize> = (0..samples).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged { epoch },
                other => other,
            };
            let l = loss(&mut g, model, &bound, batch).map_err(diverged)?;
            let value = g.data(l)[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            g.backward(l).map_err(diverged)?;
            let grads: Vec<Vec<f64>> = bound
                .iter()
                .zip(model.params())
                .map(|(v, p)| {
                    g.grad(*v)
                        .map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec)
                })
                .collect();
            let stats = g.training_batch_stats();
            opt.step(model.params_mut(), &grads);
            model.update_running_stats(&stats);
            total += value * batch.len() as f64;
        }
        curve.epoch_means.push(total / samples as f64);
    }
    model.metadata.seed = config.seed;
    model.metadata.epochs += config.epochs as u64;
    if let Some(l) = curve.last() {
        model.metadata.final_loss = l;
    }
    Ok(curve)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Cross-entropy training on the dataset's labels.
pub fn train_supervised(
    model: &mut Network,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<LossCurve> {
    let spec = model.spec();
    if dataset.class_count() != spec.classes {
        return Err(Error::invalid(format!(
            "model has {} classes, dataset {}",
            spec.classes,
            dataset.class_count()
        )));
    }
    if dataset.channels() != spec.channels || dataset.max_len() != spec.length {
        return Err(Error::shape(
            "train_supervised",
            &[spec.channels, spec.length],
            &[dataset.channels(), dataset.max_len()],
        ));
    }
    let samples = dataset.samples();
    let labels = dataset.labels();
    fit(model, dataset.len(), config, |g, net, bound, batch| {
        let chunk: Vec<_> = batch.iter().map(|&i| samples[i].clone()).collect();
        let x = g.constant(crate::data::batch_tensor(&chunk)?);
        let z = net.logits(g, bound, x, Mode::Train)?;
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        g.soft_cross_entropy(z, &one_hot(&ys, spec.classes)?, 1.0)
    })
}
