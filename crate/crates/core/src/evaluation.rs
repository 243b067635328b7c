//! Adversary counting, perturbation size, signed-rank comparisons and
//! report files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{sample_squared_error, AdversarialBatch};
use crate::data::MultivariateSeries;
use crate::error::{Error, Result};
use crate::teacher::{AttackMode, TeacherKind};

/// Which part of the data a report was computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatedOn {
    Eval,
    Test,
}

impl EvaluatedOn {
    pub fn as_str(self) -> &'static str {
        match self {
            EvaluatedOn::Eval => "eval",
            EvaluatedOn::Test => "test",
        }
    }
}

/// Indices of samples the attacked model classifies correctly on the clean
/// input and differently on the perturbed one. With `unlabeled`, the clean
/// prediction stands in for the ground truth.
pub fn count_adversaries(
    batch: &AdversarialBatch,
    ground_truth: &[usize],
    unlabeled: bool,
) -> Result<Vec<usize>> {
    let n = batch.len();
    if batch.clean_predictions.len() != n || batch.adversarial_predictions.len() != n {
        return Err(Error::invalid(
            "batch predictions do not cover every sample",
        ));
    }
    if !unlabeled && ground_truth.len() != n {
        return Err(Error::invalid(format!(
            "{} ground-truth labels for {n} samples",
            ground_truth.len()
        )));
    }
    Ok((0..n)
        .filter(|&i| {
            let clean = batch.clean_predictions[i];
            let correct = unlabeled || clean == ground_truth[i];
            correct && batch.adversarial_predictions[i] != clean
        })
        .collect())
}

/// Mean over samples of the per-sample mean squared difference on valid
/// positions.
pub fn perturbation_mse(x: &[MultivariateSeries], x_hat: &[MultivariateSeries]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::shape("perturbation_mse", &[x.len()], &[x_hat.len()]));
    }
    if x.is_empty() {
        return Err(Error::invalid("perturbation_mse of no samples"));
    }
    let mut total = 0.0;
    for (a, b) in x.iter().zip(x_hat) {
        total += sample_squared_error(a, b)?;
    }
    Ok(total / x.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub dataset: String,
    pub mode: AttackMode,
    pub model: TeacherKind,
    pub beta: f64,
    pub target: usize,
    pub evaluated_on: EvaluatedOn,
    pub samples: usize,
    pub adversaries: usize,
    /// Over counted adversaries; absent when there are none.
    pub mse: Option<f64>,
    pub mse_all_samples: f64,
    pub adversary_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ReportContext<'a> {
    pub dataset: &'a str,
    pub mode: AttackMode,
    pub model: TeacherKind,
    pub beta: f64,
    pub target: usize,
    pub evaluated_on: EvaluatedOn,
    pub unlabeled: bool,
}

impl AttackReport {
    pub fn from_batch(
        ctx: &ReportContext<'_>,
        batch: &AdversarialBatch,
        ground_truth: &[usize],
    ) -> Result<Self> {
        let indices = count_adversaries(batch, ground_truth, ctx.unlabeled)?;
        let mse = if indices.is_empty() {
            None
        } else {
            let xs: Vec<_> = indices.iter().map(|&i| batch.x[i].clone()).collect();
            let hs: Vec<_> = indices.iter().map(|&i| batch.x_hat[i].clone()).collect();
            Some(perturbation_mse(&xs, &hs)?)
        };
        Ok(AttackReport {
            dataset: ctx.dataset.to_string(),
            mode: ctx.mode,
            model: ctx.model,
            beta: ctx.beta,
            target: ctx.target,
            evaluated_on: ctx.evaluated_on,
            samples: batch.len(),
            adversaries: indices.len(),
            mse,
            mse_all_samples: perturbation_mse(&batch.x, &batch.x_hat)?,
            adversary_indices: indices,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedRankResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs with a nonzero difference.
    pub n: usize,
    pub exact: bool,
}

pub const EXACT_SIGNED_RANK_LIMIT: usize = 25;
pub const MIN_SIGNED_RANK_PAIRS: usize = 5;

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped and
/// tied magnitudes share their average rank. The null distribution is
/// enumerated exactly up to 25 pairs; beyond that a normal approximation
/// with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<SignedRankResult> {
    if a.len() != b.len() {
        return Err(Error::shape("wilcoxon_signed_rank", &[a.len()], &[b.len()]));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("wilcoxon_signed_rank"));
    }
    let n = diffs.len();
    if n < MIN_SIGNED_RANK_PAIRS {
        return Err(Error::Underpowered(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    // Ranks doubled so that averaged ties stay integral.
    let mut ranks2 = vec![0u64; n];
    let mut ties = Vec::new();
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && diffs[order[e + 1]].abs() == diffs[order[k]].abs() {
            e += 1;
        }
        let r2 = (k + e + 2) as u64;
        order[k..=e].iter().for_each(|&i| ranks2[i] = r2);
        ties.push((e - k + 1) as f64);
        k = e + 1;
    }
    let total2: u64 = ranks2.iter().sum();
    let plus2: u64 = (0..n).filter(|&i| diffs[i] > 0.0).map(|i| ranks2[i]).sum();
    let observed2 = plus2.min(total2 - plus2);
    let statistic = observed2 as f64 / 2.0;
    if n <= EXACT_SIGNED_RANK_LIMIT {
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        for &r in &ranks2 {
            let r = r as usize;
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|&(s, _)| (s as u64).min(total2 - s as u64) <= observed2)
            .map(|(_, c)| c)
            .sum();
        let p = extreme as f64 / (1u64 << n) as f64;
        return Ok(SignedRankResult {
            statistic,
            p_value: p.min(1.0),
            n,
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|t| t * t * t - t).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let z = ((mean - statistic).abs() - 0.5).max(0.0) / sd;
    let p = libm::erfc(z / std::f64::consts::SQRT_2);
    Ok(SignedRankResult {
        statistic,
        p_value: p.min(1.0),
        n,
        exact: false,
    })
}

/// Best β per dataset for one split: most adversaries, then lower MSE, then
/// the earlier report.
pub fn best_per_dataset(
    reports: &[AttackReport],
    split: EvaluatedOn,
) -> BTreeMap<String, &AttackReport> {
    let mut best: BTreeMap<String, &AttackReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.evaluated_on == split) {
        let better = match best.get(&r.dataset) {
            None => true,
            Some(cur) => {
                let mse = |x: &AttackReport| x.mse.unwrap_or(f64::INFINITY);
                r.adversaries > cur.adversaries
                    || (r.adversaries == cur.adversaries && mse(r) < mse(cur))
            }
        };
        if better {
            best.insert(r.dataset.clone(), r);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: String,
    pub second: String,
    pub metric: String,
    pub datasets: Vec<String>,
    pub result: Option<SignedRankResult>,
    pub note: Option<String>,
}

/// A labelled set of reports, e.g. one attack configuration over many
/// datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReports {
    pub label: String,
    pub reports: Vec<AttackReport>,
}

/// Pairwise signed-rank tests over per-dataset best-β adversary counts and
/// MSEs, upper triangle in run order. Every run must cover the same
/// datasets.
pub fn compare_runs(runs: &[RunReports], split: EvaluatedOn) -> Result<Vec<Comparison>> {
    let bests: Vec<_> = runs
        .iter()
        .map(|r| best_per_dataset(&r.reports, split))
        .collect();
    let union: BTreeSet<&String> = bests.iter().flat_map(|b| b.keys()).collect();
    for (run, best) in runs.iter().zip(&bests) {
        let missing: Vec<&str> = union
            .iter()
            .filter(|d| !best.contains_key(**d))
            .map(|d| d.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "run {:?} lacks datasets present in other runs: {}",
                run.label,
                missing.join(", ")
            )));
        }
    }
    let datasets: Vec<String> = union.into_iter().cloned().collect();
    let mut out = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let count = |b: &BTreeMap<String, &AttackReport>| -> Vec<f64> {
                datasets.iter().map(|d| b[d].adversaries as f64).collect()
            };
            out.push(comparison(
                runs,
                i,
                j,
                "adversaries",
                datasets.clone(),
                &count(&bests[i]),
                &count(&bests[j]),
            ));
            let with_mse: Vec<String> = datasets
                .iter()
                .filter(|d| bests[i][*d].mse.is_some() && bests[j][*d].mse.is_some())
                .cloned()
                .collect();
            let mse = |b: &BTreeMap<String, &AttackReport>| -> Vec<f64> {
                with_mse
                    .iter()
                    .map(|d| b[d].mse.expect("filtered"))
                    .collect()
            };
            out.push(comparison(
                runs,
                i,
                j,
                "mse",
                with_mse.clone(),
                &mse(&bests[i]),
                &mse(&bests[j]),
            ));
        }
    }
    Ok(out)
}

fn comparison(
    runs: &[RunReports],
    i: usize,
    j: usize,
    metric: &str,
    datasets: Vec<String>,
    a: &[f64],
    b: &[f64],
) -> Comparison {
    let (result, note) = match wilcoxon_signed_rank(a, b) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Comparison {
        first: runs[i].label.clone(),
        second: runs[j].label.clone(),
        metric: metric.to_string(),
        datasets,
        result,
        note,
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "dataset",
    "mode",
    "model",
    "beta",
    "split",
    "Num. of Adversaries",
    "MSE",
];

pub fn format_beta(beta: f64) -> String {
    format!("{beta:e}")
}

pub fn reports_csv(reports: &[AttackReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.dataset.clone(),
            r.mode.to_string(),
            r.model.to_string(),
            format_beta(r.beta),
            r.evaluated_on.as_str().to_string(),
            r.adversaries.to_string(),
            r.mse.map_or_else(String::new, |m| format!("{m:.6}")),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub reports: Vec<AttackReport>,
    pub comparisons: Vec<Comparison>,
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn emit_report(
    dir: &Path,
    stem: &str,
    reports: &[AttackReport],
    comparisons: &[Comparison],
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to emit"));
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv_path, reports_csv(reports)?).map_err(|e| Error::file(&csv_path, e))?;
    let doc = ReportDocument {
        reports: reports.to_vec(),
        comparisons: comparisons.to_vec(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?)
        .map_err(|e| Error::file(&json_path, e))
}
