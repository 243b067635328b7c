use super::gemm::gemm;
use super::{Fnv, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        training: bool,
    },
    Relu(Var),
    Tanh(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatChannels(Var, Var),
    Reshape(Var),
    SelectClass {
        x: Var,
        class: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        temperature: f64,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Dense { .. } => "dense",
            Op::Softmax(_) => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Reshape(_) => "reshape",
            Op::SelectClass { .. } => "select_class",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the record is always
/// topologically sorted and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves marked `requires_grad` receive gradients on
    /// [`Graph::backward`]; others are treated as constants.
    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Batch mean and (biased) variance seen by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                training: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// Batch statistics of every training-mode batch norm, in record order.
    pub fn training_batch_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNorm {
                    mean,
                    var,
                    training: true,
                    ..
                } => Some((mean.clone(), var.clone())),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rank3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [n, c, l] => Ok((n, c, l)),
            ref s => Err(Error::shape(op, s, &[0, 0, 0])),
        }
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [n, c] => Ok((n, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// 1-D convolution along time. `x: [N, Cin, L]`, `w: [Cout, Cin, K]`,
    /// `b: [Cout]`. The input is zero-padded by `pad_left`/`pad_right` steps.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let (n, cin, len) = self.rank3("conv1d", x)?;
        let (cout, wcin, k) = self.rank3("conv1d", w)?;
        if wcin != cin {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d", self.shape(w), self.shape(b)));
            }
        }
        let padded = len + pad_left + pad_right;
        if padded < k {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(w)));
        }
        let lout = padded - k + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; n * cout * lout];
        let mut cols = vec![0.0; cin * k * lout];
        for s in 0..n {
            im2col(
                &xd[s * cin * len..(s + 1) * cin * len],
                cin,
                len,
                k,
                pad_left,
                lout,
                &mut cols,
            );
            gemm(
                cout,
                cin * k,
                lout,
                wd,
                false,
                &cols,
                false,
                &mut out[s * cout * lout..(s + 1) * cout * lout],
                0.0,
            );
        }
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(lout).enumerate() {
                let bias = bd[row.0 % cout];
                row.1.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(vec![n, cout, lout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv1d { x, w, b, pad_left }, &inputs)
    }

    /// Per-channel normalization of `[N, C, L]` (or `[N, C]`). In training
    /// mode batch statistics are used; otherwise `running` supplies them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, l) = match shape[..] {
            [n, c, l] => (n, c, l),
            [n, c] => (n, c, 1),
            _ => return Err(Error::shape("batch_norm", &shape, &[0, 0, 0])),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let (mean, var, training) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", &shape, &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let count = (n * l) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xd[(s * c + ch) * l..(s * c + ch + 1) * l];
                        mean[ch] += row.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xd[(s * c + ch) * l..(s * c + ch + 1) * l];
                        var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
        };
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + BATCH_NORM_EPS).sqrt();
                let base = (s * c + ch) * l;
                for t in 0..l {
                    out[base + t] = g[ch] * (xd[base + t] - mean[ch]) * inv + bt[ch];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                training,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = map(self.value(x), |v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = map(self.value(x), f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Max pooling along time with width 2 and stride 2; a trailing odd
    /// step is dropped. Ties resolve to the earlier step.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, l) = self.rank3("max_pool", x)?;
        let lo = l / 2;
        if lo == 0 {
            return Err(Error::shape("max_pool", self.shape(x), &[n, c, 2]));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c * lo);
        let mut argmax = Vec::with_capacity(n * c * lo);
        for row in 0..n * c {
            for t in 0..lo {
                let i = row * l + 2 * t;
                let j = if xd[i + 1] > xd[i] { i + 1 } else { i };
                out.push(xd[j]);
                argmax.push(j);
            }
        }
        let value = Tensor::new(vec![n, c, lo], out)?;
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// `[N, C, L] -> [N, C]` mean over time.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, l) = self.rank3("global_avg_pool", x)?;
        let out = self
            .data(x)
            .chunks(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// Affine map `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = self.rank2("dense", x)?;
        let (fout, win) = self.rank2("dense", w)?;
        if win != fin {
            return Err(Error::shape("dense", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [fout] {
            return Err(Error::shape("dense", self.shape(w), self.shape(b)));
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.data(x),
            false,
            self.data(w),
            true,
            &mut out,
            0.0,
        );
        let bd = self.data(b);
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(vec![n, fout], out)?;
        self.push(value, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Row-wise softmax of `[N, C]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.rank2("softmax", x)?;
        let mut out = Vec::with_capacity(n * c);
        for row in self.data(x).chunks(c) {
            out.extend(softmax_row(row, 1.0));
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = map(self.value(x), |v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Concatenates `[N, Ca, L]` and `[N, Cb, L]` into `[N, Ca + Cb, L]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, la) = self.rank3("concat_channels", a)?;
        let (nb, cb, lb) = self.rank3("concat_channels", b)?;
        if na != nb || la != lb {
            return Err(Error::shape(
                "concat_channels",
                self.shape(a),
                self.shape(b),
            ));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(na * (ca + cb) * la);
        for s in 0..na {
            out.extend_from_slice(&ad[s * ca * la..(s + 1) * ca * la]);
            out.extend_from_slice(&bd[s * cb * lb..(s + 1) * cb * lb]);
        }
        let value = Tensor::new(vec![na, ca + cb, la], out)?;
        self.push(value, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Column `class` of a `[N, C]` tensor, as `[N]`.
    pub fn select_class(&mut self, x: Var, class: usize) -> Result<Var> {
        let (n, c) = self.rank2("select_class", x)?;
        if class >= c {
            return Err(Error::invalid(format!(
                "select_class: class {class} out of range for {c} classes"
            )));
        }
        let out = self.data(x).chunks(c).map(|row| row[class]).collect();
        let value = Tensor::new(vec![n], out)?;
        self.push(value, Op::SelectClass { x, class }, &[x])
    }

    /// Mean over the batch of `H(target, softmax(logits / temperature))`.
    /// `target` is a constant `[N, C]` distribution.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        target: &Tensor,
        temperature: f64,
    ) -> Result<Var> {
        let (n, c) = self.rank2("soft_cross_entropy", logits)?;
        if target.shape() != [n, c] {
            return Err(Error::shape(
                "soft_cross_entropy",
                self.shape(logits),
                target.shape(),
            ));
        }
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, t) in self.data(logits).chunks(c).zip(target.data().chunks(c)) {
            let lsm = log_softmax_row(row, temperature);
            loss -= t.iter().zip(&lsm).map(|(t, l)| t * l).sum::<f64>();
            probs.extend(lsm.iter().map(|l| l.exp()));
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                temperature,
                probs,
            },
            &[logits],
        )
    }

    /// Mean of elementwise squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let s: f64 = ad.iter().zip(bd).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / ad.len() as f64);
        self.push(value, Op::Mse(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.data(x).iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let value = Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Fingerprint of every piecewise branch taken in the forward pass
    /// (ReLU activity and pooling winners). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for chunk in node.value.data().chunks(64) {
                        let mut word = 0u64;
                        for (i, v) in chunk.iter().enumerate() {
                            if *v > 0.0 {
                                word |= 1 << i;
                            }
                        }
                        h.write(word);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| h.write(a as u64)),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`, storing dLoss/dLeaf on every leaf
    /// that requires a gradient. Earlier leaf gradients are overwritten.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty record"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if !gout.iter().all(|g| g.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                self.nodes[i].value.set_grad(gout)?;
                continue;
            }
            for (input, g) in self.vjp(i, &gout) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn vjp(&self, i: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv1d { x, w, b, pad_left } => {
                let (n, cin, len) = dims3(self.shape(*x));
                let (cout, _, k) = dims3(self.shape(*w));
                let lout = node.value.shape()[2];
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut res = Vec::new();
                if self.needs(*w) {
                    let mut dw = vec![0.0; wd.len()];
                    let mut cols = vec![0.0; cin * k * lout];
                    for s in 0..n {
                        im2col(
                            &xd[s * cin * len..(s + 1) * cin * len],
                            cin,
                            len,
                            k,
                            *pad_left,
                            lout,
                            &mut cols,
                        );
                        gemm(
                            cout,
                            lout,
                            cin * k,
                            &gout[s * cout * lout..(s + 1) * cout * lout],
                            false,
                            &cols,
                            true,
                            &mut dw,
                            1.0,
                        );
                    }
                    res.push((*w, dw));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; cout];
                        for (r, row) in gout.chunks(lout).enumerate() {
                            db[r % cout] += row.iter().sum::<f64>();
                        }
                        res.push((*b, db));
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    let mut dcols = vec![0.0; cin * k * lout];
                    for s in 0..n {
                        gemm(
                            cin * k,
                            cout,
                            lout,
                            wd,
                            true,
                            &gout[s * cout * lout..(s + 1) * cout * lout],
                            false,
                            &mut dcols,
                            0.0,
                        );
                        col2im(
                            &dcols,
                            cin,
                            len,
                            k,
                            *pad_left,
                            lout,
                            &mut dx[s * cin * len..(s + 1) * cin * len],
                        );
                    }
                    res.push((*x, dx));
                }
                res
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                training,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let l = shape.get(2).copied().unwrap_or(1);
                let xd = self.data(*x);
                let g = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let inv: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
                    .collect();
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * l;
                        for t in 0..l {
                            let xhat = (xd[base + t] - mean[ch]) * inv[ch];
                            dgamma[ch] += gout[base + t] * xhat;
                            dbeta[ch] += gout[base + t];
                        }
                    }
                }
                let mut dx = vec![0.0; xd.len()];
                if *training {
                    let m = (n * l) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * l;
                            for t in 0..l {
                                let xhat = (xd[base + t] - mean[ch]) * inv[ch];
                                // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                                dx[base + t] = g[ch] * inv[ch] / m
                                    * (m * gout[base + t] - dbeta[ch] - xhat * dgamma[ch]);
                            }
                        }
                    }
                } else {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * l;
                            for t in 0..l {
                                dx[base + t] = gout[base + t] * g[ch] * inv[ch];
                            }
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu(x) => {
                let g = gout
                    .iter()
                    .zip(out)
                    .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, g)]
            }
            Op::Tanh(x) => {
                let g = gout
                    .iter()
                    .zip(out)
                    .map(|(g, o)| g * (1.0 - o * o))
                    .collect();
                vec![(*x, g)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (g, &j) in gout.iter().zip(argmax) {
                    dx[j] += g;
                }
                vec![(*x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let l = self.shape(*x)[2];
                let dx = gout
                    .iter()
                    .flat_map(|g| std::iter::repeat(g / l as f64).take(l))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Dense { x, w, b } => {
                let (n, fin) = dims2(self.shape(*x));
                let fout = self.shape(*w)[0];
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        gout,
                        false,
                        self.data(*w),
                        false,
                        &mut dx,
                        0.0,
                    );
                    res.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(fout, n, fin, gout, true, self.data(*x), false, &mut dw, 0.0);
                    res.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; fout];
                    for row in gout.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    res.push((*b, db));
                }
                res
            }
            Op::Softmax(x) => {
                let c = self.shape(*x)[1];
                let mut dx = Vec::with_capacity(out.len());
                for (y, g) in out.chunks(c).zip(gout.chunks(c)) {
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    dx.extend(y.iter().zip(g).map(|(y, g)| y * (g - dot)));
                }
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, gout.iter().zip(bd).map(|(g, y)| g * y).collect()),
                    (*b, gout.iter().zip(ad).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(x, f) => vec![(*x, gout.iter().map(|g| g * f).collect())],
            Op::ConcatChannels(a, b) => {
                let (n, ca, l) = dims3(self.shape(*a));
                let cb = self.shape(*b)[1];
                let mut da = Vec::with_capacity(n * ca * l);
                let mut db = Vec::with_capacity(n * cb * l);
                for row in gout.chunks((ca + cb) * l) {
                    da.extend_from_slice(&row[..ca * l]);
                    db.extend_from_slice(&row[ca * l..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
            Op::SelectClass { x, class } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (s, g) in gout.iter().enumerate() {
                    dx[s * c + class] = *g;
                }
                vec![(*x, dx)]
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
                probs,
            } => {
                let (n, c) = dims2(self.shape(*logits));
                let scale = gout[0] / (n as f64 * temperature);
                let mut dz = Vec::with_capacity(n * c);
                for (p, t) in probs.chunks(c).zip(target.chunks(c)) {
                    let mass: f64 = t.iter().sum();
                    dz.extend(p.iter().zip(t).map(|(p, t)| scale * (p * mass - t)));
                }
                vec![(*logits, dz)]
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let f = 2.0 * gout[0] / ad.len() as f64;
                let da: Vec<f64> = ad.iter().zip(bd).map(|(x, y)| f * (x - y)).collect();
                let db = da.iter().map(|g| -g).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let m = self.value(*x).numel();
                vec![(*x, vec![gout[0] / m as f64; m])]
            }
        }
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

fn dims2(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Unfolds one `[cin, len]` sample into `[cin * k, lout]` columns.
fn im2col(
    x: &[f64],
    cin: usize,
    len: usize,
    k: usize,
    pad_left: usize,
    lout: usize,
    cols: &mut [f64],
) {
    for c in 0..cin {
        for j in 0..k {
            let row = &mut cols[(c * k + j) * lout..(c * k + j + 1) * lout];
            for (t, slot) in row.iter_mut().enumerate() {
                let src = (t + j) as isize - pad_left as isize;
                *slot = if src >= 0 && (src as usize) < len {
                    x[c * len + src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    cin: usize,
    len: usize,
    k: usize,
    pad_left: usize,
    lout: usize,
    dx: &mut [f64],
) {
    for c in 0..cin {
        for j in 0..k {
            let row = &cols[(c * k + j) * lout..(c * k + j + 1) * lout];
            for (t, v) in row.iter().enumerate() {
                let src = (t + j) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < len {
                    dx[c * len + src as usize] += v;
                }
            }
        }
    }
}

/// Numerically stable `softmax(z / temperature)`.
pub(crate) fn softmax_row(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_softmax_row(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = z.iter().map(|v| (v - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}
