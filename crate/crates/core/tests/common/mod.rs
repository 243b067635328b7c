//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod checks;

use rand::Rng as _;
use tsadv_core::rng::{self, Rng};
use tsadv_core::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;
/// Magnitudes below this are compared absolutely, since central differences
/// carry roughly `eps * |f| / step` of rounding noise.
pub const FD_FLOOR: f64 = 1e-4;

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: f64,
    pub worst_at: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
        if other.worst > self.worst {
            self.worst = other.worst;
            self.worst_at = other.worst_at;
        }
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.worst < FD_REL_TOL
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g.data(loss)[0], g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences on `inputs[i]` for every `i` in `differentiate`. With
/// `sample = Some(k)`, `k` random coordinates per tensor are probed instead of
/// all of them. Coordinates whose ±step evaluations switch a ReLU or pooling
/// branch are non-differentiable within the step and are skipped.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    differentiate: &[usize],
    sample: Option<usize>,
    rng: &mut Rng,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.leaf(t.clone(), differentiate.contains(&i)))
        .collect();
    let loss = f(&mut g, &vars)?;
    let signature = g.kink_signature();
    g.backward(loss)?;
    let mut report = GradReport::default();
    for &i in differentiate {
        let analytic = g.grad(vars[i]).expect("differentiated input").to_vec();
        let n = inputs[i].numel();
        let coords: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let (fp, sp) = evaluate(&plus, &f)?;
            let (fm, sm) = evaluate(&minus, &f)?;
            if sp != signature || sm != signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.worst {
                report.worst = err;
                report.worst_at = Some((i, j, analytic[j], numeric));
            }
        }
    }
    Ok(report)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn seeded(seed: u64) -> Rng {
    rng::seeded(seed)
}

/// Reduces any tensor to a scalar through fixed random weights so that every
/// output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = random_tensor(g.shape(y), rng);
    let wv = g.constant(w);
    let prod = g.mul(y, wv)?;
    g.sum(prod)
}

/// Brute-force DTW: minimum over every monotone, continuous warping path
/// from (0, 0) to (n-1, m-1) of the summed squared differences, square-rooted.
pub fn dtw_by_enumeration(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]).powi(2);
        if i == a.len() - 1 && j == b.len() - 1 {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best.sqrt()
}

/// Exact two-sided signed-rank p-value by enumerating all 2^n sign
/// assignments of the given (possibly tied, averaged) ranks.
pub fn signed_rank_p_by_enumeration(a: &[f64], b: &[f64]) -> (f64, f64) {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && diffs[order[e + 1]].abs() == diffs[order[k]].abs() {
            e += 1;
        }
        let avg = (k + e) as f64 / 2.0 + 1.0;
        for idx in &order[k..=e] {
            ranks[*idx] = avg;
        }
        k = e + 1;
    }
    let w_plus: f64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| ranks[i]).sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let observed = w_plus.min(w_minus);
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let wp: f64 = (0..n)
            .filter(|&i| mask >> i & 1 == 1)
            .map(|i| ranks[i])
            .sum();
        if wp.min(total - wp) <= observed + 1e-9 {
            extreme += 1;
        }
    }
    (observed, (extreme as f64 / (1u64 << n) as f64).min(1.0))
}

/// Central difference of `f` at coordinate `j` of `inputs[i]`, or `None`
/// when the ±step evaluations land on different smooth pieces.
pub fn central_difference<F>(inputs: &[Tensor], i: usize, j: usize, f: &F) -> Result<Option<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, base) = evaluate(inputs, f)?;
    let mut plus = inputs.to_vec();
    plus[i].data_mut()[j] += FD_STEP;
    let mut minus = inputs.to_vec();
    minus[i].data_mut()[j] -= FD_STEP;
    let (fp, sp) = evaluate(&plus, f)?;
    let (fm, sm) = evaluate(&minus, f)?;
    if sp != base || sm != base {
        return Ok(None);
    }
    Ok(Some((fp - fm) / (2.0 * FD_STEP)))
}

/// Label of the training sample with the smallest channel-summed distance,
/// scanning every pair; equal distances resolve to the lowest class.
pub fn nearest_label(distances: &[Vec<f64>], labels: &[usize]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for (d, &l) in distances.iter().zip(labels) {
        let total: f64 = d.iter().sum();
        best = match best {
            Some((bd, bl)) if bd < total || (bd == total && bl <= l) => Some((bd, bl)),
            _ => Some((total, l)),
        };
    }
    best.expect("non-empty training set").1
}
