//! Gradient adversarial transformation network: target reranking, the
//! generator objective, training, generation and the β sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batch_mask, batch_tensor, LabeledDataset, MultivariateSeries, Predictor};
use crate::error::{Error, Result};
use crate::nn::{
    build, fit, input_gradient, ArchitectureKind, ArchitectureSpec, Checkpoint, LossCurve, Mode,
    NamedTensor, Network, TrainConfig, EVAL_CHUNK,
};
use crate::rng;
use crate::teacher::{AttackMode, TeacherKind};
use crate::tensor::graph::softmax_row;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_BETAS: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target: usize,
    pub alpha: f64,
    pub betas: Vec<f64>,
    pub mode: AttackMode,
    pub model: TeacherKind,
    pub train: TrainConfig,
}

impl AttackConfig {
    pub fn new(mode: AttackMode, model: TeacherKind, seed: u64) -> Self {
        AttackConfig {
            target: 0,
            alpha: DEFAULT_ALPHA,
            betas: DEFAULT_BETAS.to_vec(),
            mode,
            model,
            train: TrainConfig::generator(seed),
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must exceed 1, got {}",
                self.alpha
            )));
        }
        if self.betas.is_empty() {
            return Err(Error::invalid("the beta grid is empty"));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::invalid(format!(
                "every beta must be positive, got {b}"
            )));
        }
        if self.target >= classes {
            return Err(Error::invalid(format!(
                "target class {} out of range for {classes} classes",
                self.target
            )));
        }
        self.train.validate()
    }

    /// The network the generator is trained against: the attacked FCN itself
    /// for white-box FCN attacks, the distilled student otherwise.
    pub fn uses_student(&self) -> bool {
        !(self.mode == AttackMode::WhiteBox && self.model == TeacherKind::Fcn)
    }
}

/// Scales entry `t` to `alpha * max(y)` and renormalizes by the sum.
pub fn rerank(y: &[f64], target: usize, alpha: f64) -> Result<Vec<f64>> {
    if target >= y.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} classes",
            y.len()
        )));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must exceed 1, got {alpha}")));
    }
    if y.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("rerank input is not a probability vector"));
    }
    let max = y.iter().copied().fold(0.0, f64::max);
    let mut r = y.to_vec();
    r[target] = alpha * max;
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("rerank input sums to zero"));
    }
    r.iter_mut().for_each(|v| *v /= total);
    Ok(r)
}

/// `β·mean((x̂ − x)²) + mean_n Σ_c (f(x̂) − r)²`.
pub fn atn_loss(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    output: Var,
    target: Var,
    beta: f64,
) -> Result<Var> {
    let lx = g.mse(x_hat, x)?;
    let lx = g.scale(lx, beta)?;
    let n = g.shape(output).first().copied().unwrap_or(1);
    let diff = g.sub(output, target)?;
    let sq = g.mul(diff, diff)?;
    let ly = g.sum(sq)?;
    let ly = g.scale(ly, 1.0 / n as f64)?;
    g.add(lx, ly)
}

/// The differentiable stand-in the generator is trained against, read out
/// as `softmax(z / temperature)`.
#[derive(Clone, Copy, Debug)]
pub struct Surrogate<'a> {
    pub network: &'a Network,
    pub temperature: f64,
}

impl<'a> Surrogate<'a> {
    pub fn new(network: &'a Network, temperature: f64) -> Result<Self> {
        if network.spec().kind == ArchitectureKind::GatnGenerator {
            return Err(Error::invalid("the surrogate must produce logits"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Surrogate {
            network,
            temperature,
        })
    }

    pub fn probabilities(&self, samples: &[MultivariateSeries]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .network
            .predict_logits(samples)?
            .iter()
            .map(|z| softmax_row(z, self.temperature))
            .collect())
    }

    fn output(&self, g: &mut Graph, x_hat: Var) -> Result<Var> {
        let frozen = self.network.bind(g, false);
        let z = self.network.logits(g, &frozen, x_hat, Mode::Eval)?;
        let z = if self.temperature == 1.0 {
            z
        } else {
            g.scale(z, 1.0 / self.temperature)?
        };
        g.softmax(z)
    }

    fn generator_spec(&self) -> ArchitectureSpec {
        let s = self.network.spec();
        ArchitectureSpec::new(
            ArchitectureKind::GatnGenerator,
            s.channels,
            s.length,
            s.classes,
        )
    }
}

/// Input gradient of the surrogate's target-class probability per sample,
/// zeroed at padded positions.
pub fn input_gradients(
    surrogate: Surrogate<'_>,
    samples: &[MultivariateSeries],
    target: usize,
) -> Result<Vec<MultivariateSeries>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let grad = input_gradient(
            surrogate.network,
            &batch_tensor(chunk)?,
            target,
            surrogate.temperature,
        )?;
        let per = grad.numel() / chunk.len();
        for (s, g) in chunk.iter().zip(grad.data().chunks(per)) {
            out.push(s.with_values(g.to_vec())?);
        }
    }
    Ok(out)
}

pub fn new_generator(surrogate: Surrogate<'_>, seed: u64) -> Result<Network> {
    build(
        surrogate.generator_spec(),
        &mut rng::seeded(rng::derive_seed(seed, "generator-init")),
    )
}

/// Fits `generator` against a frozen `surrogate` on `d_train`. Gradients x̃
/// and rerank targets are computed once from the clean samples.
pub fn train_gatn(
    generator: &mut Network,
    surrogate: Surrogate<'_>,
    d_train: &LabeledDataset,
    target: usize,
    alpha: f64,
    beta: f64,
    train: &TrainConfig,
) -> Result<LossCurve> {
    let expected = surrogate.generator_spec();
    if generator.spec() != expected {
        return Err(Error::shape(
            "generator",
            &[expected.channels, expected.length],
            &[generator.spec().channels, generator.spec().length],
        ));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let samples = d_train.samples();
    let gradients = input_gradients(surrogate, samples, target)?;
    let targets: Vec<Vec<f64>> = surrogate
        .probabilities(samples)?
        .iter()
        .map(|y| rerank(y, target, alpha))
        .collect::<Result<_>>()?;
    let classes = expected.classes;
    fit(generator, d_train.len(), train, |g, gen, bound, batch| {
        let xs: Vec<_> = batch.iter().map(|&i| samples[i].clone()).collect();
        let ts: Vec<_> = batch.iter().map(|&i| gradients[i].clone()).collect();
        let x = g.constant(batch_tensor(&xs)?);
        let x_tilde = g.constant(batch_tensor(&ts)?);
        let mask = g.constant(batch_mask(&xs)?);
        let r = Tensor::new(
            vec![batch.len(), classes],
            batch
                .iter()
                .flat_map(|&i| targets[i].iter().copied())
                .collect(),
        )?;
        let r = g.constant(r);
        let x_hat = gen.perturb(g, bound, x, x_tilde, mask)?;
        let y = surrogate.output(g, x_hat)?;
        atn_loss(g, x, x_hat, y, r, beta)
    })
}

/// Clean and perturbed samples with everything evaluation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub x: Vec<MultivariateSeries>,
    pub x_hat: Vec<MultivariateSeries>,
    pub x_tilde: Vec<MultivariateSeries>,
    /// Mean squared difference over channels × valid length, per sample.
    pub squared_error: Vec<f64>,
    pub clean_predictions: Vec<usize>,
    pub adversarial_predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchIndexEntry {
    pub id: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    pub squared_error: f64,
}

/// Mean of `(b − a)²` over valid positions of every channel.
pub fn sample_squared_error(a: &MultivariateSeries, b: &MultivariateSeries) -> Result<f64> {
    if a.channels() != b.channels() || a.max_len() != b.max_len() || a.len() != b.len() {
        return Err(Error::shape(
            "squared error",
            &[a.channels(), a.len()],
            &[b.channels(), b.len()],
        ));
    }
    let mut total = 0.0;
    for c in 0..a.channels() {
        total += a
            .valid(c)
            .iter()
            .zip(b.valid(c))
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>();
    }
    Ok(total / (a.channels() * a.len()) as f64)
}

/// One generator pass per sample, then predictions of the attacked model on
/// the clean and perturbed inputs. Nothing is updated.
pub fn generate(
    generator: &Network,
    surrogate: Surrogate<'_>,
    attacked: &dyn Predictor,
    samples: &[MultivariateSeries],
    target: usize,
) -> Result<AdversarialBatch> {
    if generator.spec() != surrogate.generator_spec() {
        return Err(Error::invalid("generator does not match the surrogate"));
    }
    let x_tilde = input_gradients(surrogate, samples, target)?;
    let mut x_hat = Vec::with_capacity(samples.len());
    for (xs, ts) in samples.chunks(EVAL_CHUNK).zip(x_tilde.chunks(EVAL_CHUNK)) {
        let mut g = Graph::new();
        let bound = generator.bind(&mut g, false);
        let x = g.constant(batch_tensor(xs)?);
        let t = g.constant(batch_tensor(ts)?);
        let m = g.constant(batch_mask(xs)?);
        let out = generator.perturb(&mut g, &bound, x, t, m)?;
        let per = g.value(out).numel() / xs.len();
        for (s, v) in xs.iter().zip(g.data(out).chunks(per)) {
            x_hat.push(s.with_values(v.to_vec())?);
        }
    }
    let squared_error = samples
        .iter()
        .zip(&x_hat)
        .map(|(a, b)| sample_squared_error(a, b))
        .collect::<Result<_>>()?;
    Ok(AdversarialBatch {
        clean_predictions: attacked.predict(samples)?,
        adversarial_predictions: attacked.predict(&x_hat)?,
        x: samples.to_vec(),
        x_hat,
        x_tilde,
        squared_error,
    })
}

impl AdversarialBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn index(&self) -> Vec<BatchIndexEntry> {
        (0..self.len())
            .map(|i| BatchIndexEntry {
                id: i,
                clean_prediction: self.clean_predictions[i],
                adversarial_prediction: self.adversarial_predictions[i],
                squared_error: self.squared_error[i],
            })
            .collect()
    }

    /// Tensors `x`, `x_hat`, `x_tilde` (`[N, C, L]`) and `length` (`[N]`).
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.is_empty() {
            return Err(Error::invalid("cannot export an empty batch"));
        }
        let lengths = Tensor::new(
            vec![self.len()],
            self.x.iter().map(|s| s.len() as f64).collect(),
        )?;
        Ok(Checkpoint {
            architecture: None,
            metadata: Default::default(),
            tensors: vec![
                NamedTensor::new("x", batch_tensor(&self.x)?),
                NamedTensor::new("x_hat", batch_tensor(&self.x_hat)?),
                NamedTensor::new("x_tilde", batch_tensor(&self.x_tilde)?),
                NamedTensor::new("length", lengths),
            ],
        })
    }

    /// Writes `<stem>.ckpt` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.to_checkpoint()?
            .save(dir.join(format!("{stem}.ckpt")))?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&self.index())?)
            .map_err(|e| Error::file(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let ckpt = Checkpoint::load(dir.join(format!("{stem}.ckpt")))?;
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        let index: Vec<BatchIndexEntry> = serde_json::from_str(&text)?;
        let get = |name: &str| {
            ckpt.tensor(name)
                .ok_or_else(|| Error::CorruptContainer(format!("batch lacks tensor {name:?}")))
        };
        let lengths = get("length")?.data().to_vec();
        let unpack = |t: &Tensor| -> Result<Vec<MultivariateSeries>> {
            let &[n, c, l] = t.shape() else {
                return Err(Error::CorruptContainer(
                    "batch tensor must be rank 3".into(),
                ));
            };
            if n != lengths.len() || index.len() != n {
                return Err(Error::CorruptContainer("batch sizes disagree".into()));
            }
            t.data()
                .chunks(c * l)
                .zip(&lengths)
                .map(|(v, &len)| {
                    let len = len as usize;
                    let channels = v.chunks(l).map(|row| row[..len.min(l)].to_vec()).collect();
                    MultivariateSeries::new(channels)?.padded(l)
                })
                .collect()
        };
        Ok(AdversarialBatch {
            x: unpack(get("x")?)?,
            x_hat: unpack(get("x_hat")?)?,
            x_tilde: unpack(get("x_tilde")?)?,
            squared_error: index.iter().map(|e| e.squared_error).collect(),
            clean_predictions: index.iter().map(|e| e.clean_prediction).collect(),
            adversarial_predictions: index.iter().map(|e| e.adversarial_prediction).collect(),
        })
    }
}

/// Outcome of one β in the sweep.
#[derive(Debug)]
pub struct GridPoint {
    pub beta: f64,
    pub outcome: Result<(Network, LossCurve)>,
}

/// Trains one generator per β from the same initialization, so each row is
/// independent of the grid order. Failures are kept and the sweep continues.
pub fn grid_search(
    surrogate: Surrogate<'_>,
    d_train: &LabeledDataset,
    config: &AttackConfig,
) -> Result<Vec<GridPoint>> {
    config.validate(surrogate.network.spec().classes)?;
    Ok(config
        .betas
        .iter()
        .map(|&beta| {
            let outcome = new_generator(surrogate, config.train.seed).and_then(|mut gen| {
                let curve = train_gatn(
                    &mut gen,
                    surrogate,
                    d_train,
                    config.target,
                    config.alpha,
                    beta,
                    &config.train,
                )?;
                gen.metadata
                    .notes
                    .insert("beta".into(), format!("{beta:e}"));
                Ok((gen, curve))
            });
            if let Err(e) = &outcome {
                log::warn!("beta {beta:e} failed: {e}");
            }
            GridPoint { beta, outcome }
        })
        .collect())
}
